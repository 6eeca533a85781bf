"""Dense linear-algebra kernels: SVD, randomized SVD, and small LU solves.

All routines operate on 64-bit float arrays. Matrices handed across module
boundaries are Fortran-ordered (column-major) so that snapshot columns stay
contiguous when appended.
"""

import numpy as np
import scipy.linalg


class SingularMatrixError(ValueError):
    """Raised when a pivot falls below the singularity threshold."""


class SvdResult:
    """Thin SVD factorization A = U @ diag(s) @ Vt.

    Singular values are sorted in non-increasing order; U and Vt rows/columns
    are orthonormal to 1e-10.
    """

    def __init__(self, left_vectors, singular_values, right_vectors_t):
        self.left_vectors = left_vectors
        self.singular_values = singular_values
        self.right_vectors_t = right_vectors_t

    def truncate(self, n):
        """First-n-modes copy of this factorization."""
        return SvdResult(
            np.asfortranarray(self.left_vectors[:, :n]),
            self.singular_values[:n].copy(),
            np.ascontiguousarray(self.right_vectors_t[:n, :]),
        )


def _check_finite_matrix(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"expected a 2-d matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        bad = np.argwhere(~np.isfinite(a))[0]
        raise ValueError(f"non-finite entry at ({bad[0]}, {bad[1]})")
    return a


def svd(a):
    """Deterministic thin SVD.

    Returns an :class:`SvdResult` with min(rows, cols) modes.
    """
    a = _check_finite_matrix(a)
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    return SvdResult(np.asfortranarray(u), s, vt)


def gaussian_matrix(rows, cols, seed):
    """Standard-normal matrix from Box-Muller over the Philox counter PRNG.

    Philox is counter-based, so the draw is reproducible across platforms
    for a fixed seed.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    n = rows * cols
    # Box-Muller needs an even number of uniforms in (0, 1].
    half = (n + 1) // 2
    u1 = 1.0 - rng.random(half)  # avoid log(0)
    u2 = rng.random(half)
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])
    return z[:n].reshape(rows, cols)


def randomized_svd(a, k, seed, oversample=0, power_iterations=0):
    """Two-stage randomized SVD with target rank k.

    Stage 1 sketches the range of ``a`` with a Gaussian matrix and
    orthonormalizes it by QR; stage 2 runs a deterministic SVD on the
    small projected matrix and lifts the left factors back. Deterministic
    for a fixed seed. ``oversample`` and ``power_iterations`` default to 0.
    """
    a = _check_finite_matrix(a)
    m, n = a.shape
    if not 1 <= k <= min(m, n):
        raise ValueError(f"target rank {k} out of range for {m}x{n} matrix")
    p = min(k + oversample, min(m, n))
    theta = gaussian_matrix(n, p, seed)
    y = a @ theta
    q, _ = np.linalg.qr(y)
    for _ in range(power_iterations):
        q, _ = np.linalg.qr(a @ (a.T @ q))
    b = q.T @ a
    ub, s, vt = np.linalg.svd(b, full_matrices=False)
    u = q @ ub
    return SvdResult(np.asfortranarray(u[:, :k]), s[:k], vt[:k, :])


def lu_solve(a, b):
    """Solve a @ x = b by LU with partial pivoting.

    Raises :class:`SingularMatrixError` when any pivot magnitude drops below
    1e-14 times the max-norm of ``a``.
    """
    a = _check_finite_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"matrix not square: {a.shape}")
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] != a.shape[0]:
        raise ValueError(f"rhs length {b.shape[0]} != matrix size {a.shape[0]}")
    lu, piv = scipy.linalg.lu_factor(a, check_finite=False)
    scale = np.abs(a).max()
    if scale == 0.0 or np.abs(np.diag(lu)).min() <= 1e-14 * scale:
        raise SingularMatrixError("matrix numerically singular")
    return scipy.linalg.lu_solve((lu, piv), b, check_finite=False)
