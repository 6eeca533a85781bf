"""Hyperelastic constitutive laws and their exact tangents.

Stress is always the gradient of the stored energy: both laws implement
``pk1`` as the hand-derived dW/dF of their ``energy``, and the test suite
enforces the match against central finite differences. Tangents dP/dF come
from forward-mode dual numbers: the stress routine is evaluated once with
nine derivative lanes seeded on the entries of F.

Note on the nearly-incompressible neo-Hookean law: the isochoric invariant
is J^(-2/3)*tr(C) and the stress carries F^(-T) factors; any variant with
F^T in the stress is not the gradient of the energy used here.
"""

from dataclasses import dataclass, replace

import numpy as np


class ElementStateError(RuntimeError):
    """Base for deformation states the material cannot evaluate."""


class InvertedElementError(ElementStateError):
    """det(F) <= 0 somewhere; the Newton step was too large."""


class DivergentStateError(ElementStateError):
    """Exponential argument overflow in the Guccione law (Q > 700)."""


# ---------------------------------------------------------------------------
# forward-mode dual numbers (derivative lanes stored along a leading axis)

class Dual:
    """Value plus directional derivatives: ``eps`` has shape (lanes,) + val.shape."""

    __slots__ = ("val", "eps")

    def __init__(self, val, eps):
        self.val = val
        self.eps = eps

    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val + other.val, self.eps + other.eps)
        return Dual(self.val + other, self.eps)

    __radd__ = __add__

    def __neg__(self):
        return Dual(-self.val, -self.eps)

    def __sub__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val - other.val, self.eps - other.eps)
        return Dual(self.val - other, self.eps)

    def __rsub__(self, other):
        return Dual(other - self.val, -self.eps)

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val * other.val, self.eps * other.val + other.eps * self.val)
        return Dual(self.val * other, self.eps * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            inv = 1.0 / other.val
            return Dual(self.val * inv, (self.eps - other.eps * (self.val * inv)) * inv)
        return Dual(self.val / other, self.eps / other)

    def __rtruediv__(self, other):
        inv = 1.0 / self.val
        return Dual(other * inv, -self.eps * (other * inv * inv))

    def __pow__(self, p):
        return Dual(self.val ** p, self.eps * (p * self.val ** (p - 1.0)))

    def __getitem__(self, idx):
        if not isinstance(idx, tuple):
            idx = (idx,)
        return Dual(self.val[idx], self.eps[(slice(None),) + idx])


def seed_dual_matrix(f):
    """Dual F with one derivative lane per entry (lane 3*i+j perturbs F_ij)."""
    f = np.asarray(f, dtype=np.float64)
    eps = np.zeros((9,) + f.shape)
    for i in range(3):
        for j in range(3):
            eps[(3 * i + j, ...) + (i, j)] = 1.0
    return Dual(f, eps)


def _value(a):
    return a.val if isinstance(a, Dual) else a


def dlog(a):
    if isinstance(a, Dual):
        return Dual(np.log(a.val), a.eps / a.val)
    return np.log(a)


def dexp(a):
    if isinstance(a, Dual):
        e = np.exp(a.val)
        return Dual(e, a.eps * e)
    return np.exp(a)


def _scalar(s):
    """Append two axes so a (...,) scalar broadcasts against (...,3,3)."""
    if isinstance(s, Dual):
        return Dual(s.val[..., None, None], s.eps[..., None, None])
    return s[..., None, None] if isinstance(s, np.ndarray) and s.ndim else s


def transpose(a):
    if isinstance(a, Dual):
        return Dual(a.val.swapaxes(-1, -2), a.eps.swapaxes(-1, -2))
    return a.swapaxes(-1, -2)


def matmul(a, b):
    if not isinstance(a, Dual) and not isinstance(b, Dual):
        return a @ b
    av, bv = _value(a), _value(b)
    val = av @ bv
    eps = 0.0
    if isinstance(a, Dual):
        eps = eps + np.einsum("l...ik,...kj->l...ij", a.eps, bv)
    if isinstance(b, Dual):
        eps = eps + np.einsum("...ik,l...kj->l...ij", av, b.eps)
    return Dual(val, eps)


def trace(a):
    return a[..., 0, 0] + a[..., 1, 1] + a[..., 2, 2]


def det3(a):
    a00, a01, a02 = a[..., 0, 0], a[..., 0, 1], a[..., 0, 2]
    a10, a11, a12 = a[..., 1, 0], a[..., 1, 1], a[..., 1, 2]
    a20, a21, a22 = a[..., 2, 0], a[..., 2, 1], a[..., 2, 2]
    return (a00 * (a11 * a22 - a12 * a21)
            - a01 * (a10 * a22 - a12 * a20)
            + a02 * (a10 * a21 - a11 * a20))


def _stack33(comp):
    """3x3 matrix from a nested list of scalar components (plain or Dual)."""
    if isinstance(comp[0][0], Dual):
        val = np.stack([np.stack([comp[i][j].val for j in range(3)], axis=-1)
                        for i in range(3)], axis=-2)
        eps = np.stack([np.stack([comp[i][j].eps for j in range(3)], axis=-1)
                        for i in range(3)], axis=-2)
        return Dual(val, eps)
    return np.stack([np.stack([comp[i][j] for j in range(3)], axis=-1)
                     for i in range(3)], axis=-2)


def inv3(a):
    a00, a01, a02 = a[..., 0, 0], a[..., 0, 1], a[..., 0, 2]
    a10, a11, a12 = a[..., 1, 0], a[..., 1, 1], a[..., 1, 2]
    a20, a21, a22 = a[..., 2, 0], a[..., 2, 1], a[..., 2, 2]
    det = det3(a)
    cof = [
        [a11 * a22 - a12 * a21, a02 * a21 - a01 * a22, a01 * a12 - a02 * a11],
        [a12 * a20 - a10 * a22, a00 * a22 - a02 * a20, a02 * a10 - a00 * a12],
        [a10 * a21 - a11 * a20, a01 * a20 - a00 * a21, a00 * a11 - a01 * a10],
    ]
    return _stack33([[cof[i][j] / det for j in range(3)] for i in range(3)])


def matvec(a, v):
    if isinstance(a, Dual):
        return Dual(np.einsum("...ij,j->...i", a.val, v),
                    np.einsum("l...ij,j->l...i", a.eps, v))
    return np.einsum("...ij,j->...i", a, v)


def outer_const(u, v):
    """Outer product of a (possibly dual) vector with a constant vector."""
    if isinstance(u, Dual):
        return Dual(u.val[..., :, None] * v, u.eps[..., :, None] * v)
    return u[..., :, None] * v


# ---------------------------------------------------------------------------
# kinematics

@dataclass(frozen=True)
class DeformationState:
    """Deformation gradient with derived strain measures (J > 0)."""

    F: np.ndarray
    J: float
    C: np.ndarray
    E: np.ndarray


def deformation_gradient(grad_u):
    """Deformation state from a 3x3 displacement gradient.

    Raises :class:`InvertedElementError` when det(I + grad_u) <= 0, which
    signals the caller (usually a Newton loop) to backtrack.
    """
    grad_u = np.asarray(grad_u, dtype=np.float64)
    f = np.eye(3) + grad_u
    j = float(np.linalg.det(f))
    if j <= 0.0:
        raise InvertedElementError(f"det(F) = {j:.3e} <= 0")
    c = f.T @ f
    return DeformationState(F=f, J=j, C=c, E=0.5 * (c - np.eye(3)))


def _check_positive_j(j):
    jv = _value(j)
    if np.any(jv <= 0.0):
        raise InvertedElementError(f"min det(F) = {np.min(jv):.3e} <= 0")


# ---------------------------------------------------------------------------
# constitutive laws

@dataclass(frozen=True)
class NeoHookean:
    """Nearly-incompressible neo-Hookean law.

    W(F) = G/2 (I1_iso - 3) + K/4 ((J-1)^2 + ln^2 J), I1_iso = J^(-2/3) tr(C).
    """

    shear_modulus: float
    bulk_modulus: float

    def __post_init__(self):
        if self.shear_modulus <= 0 or self.bulk_modulus <= 0:
            raise ValueError("moduli must be positive")

    def energy(self, f):
        f = np.asarray(f, dtype=np.float64)
        j = det3(f)
        _check_positive_j(j)
        trc = np.einsum("...ij,...ij->...", f, f)
        iso = 0.5 * self.shear_modulus * (j ** (-2.0 / 3.0) * trc - 3.0)
        lnj = np.log(j)
        vol = 0.25 * self.bulk_modulus * ((j - 1.0) ** 2 + lnj ** 2)
        return iso + vol

    def pk1(self, f):
        """First Piola-Kirchhoff stress; accepts (...,3,3) arrays or Dual."""
        j = det3(f)
        _check_positive_j(j)
        finv_t = transpose(inv3(f))
        trc = trace(matmul(transpose(f), f))
        jm23 = j ** (-2.0 / 3.0)
        iso = _scalar(self.shear_modulus * jm23) * (f - _scalar(trc * (1.0 / 3.0)) * finv_t)
        vol = _scalar(0.5 * self.bulk_modulus * (j * (j - 1.0) + dlog(j))) * finv_t
        return iso + vol


def _default_frame():
    return np.eye(3)


@dataclass(frozen=True)
class Guccione:
    """Transversely isotropic exponential law with optional active tension.

    W = C/2 (exp(Q) - 1) with Q quadratic in the fiber-frame Green-Lagrange
    components, plus the same volumetric penalty as the neo-Hookean law and
    an additive fiber stress Ta (F f0) x f0.
    """

    c_scale: float
    b_f: float
    b_s: float
    b_n: float
    b_fs: float
    b_fn: float
    b_sn: float
    bulk_modulus: float
    fiber_frame: np.ndarray = None
    active_tension: float = 0.0

    def __post_init__(self):
        if self.c_scale <= 0 or self.bulk_modulus <= 0:
            raise ValueError("c_scale and bulk modulus must be positive")
        if min(self.b_f, self.b_s, self.b_n, self.b_fs, self.b_fn, self.b_sn) < 0:
            raise ValueError("stiffness exponents must be nonnegative")
        frame = np.eye(3) if self.fiber_frame is None else np.asarray(self.fiber_frame, float)
        if np.abs(frame @ frame.T - np.eye(3)).max() > 1e-12:
            raise ValueError("fiber frame not orthonormal")
        object.__setattr__(self, "fiber_frame", frame)

    def with_active_tension(self, ta):
        return replace(self, active_tension=float(ta))

    @property
    def _b_matrix(self):
        return np.array([
            [self.b_f, self.b_fs, self.b_fn],
            [self.b_fs, self.b_s, self.b_sn],
            [self.b_fn, self.b_sn, self.b_n],
        ])

    def _q_form(self, e_hat):
        b = self._b_matrix
        q = 0.0
        for i in range(3):
            for j in range(3):
                if b[i, j] != 0.0:
                    q = q + b[i, j] * e_hat[..., i, j] ** 2.0
        return q

    def energy(self, f):
        f = np.asarray(f, dtype=np.float64)
        j = det3(f)
        _check_positive_j(j)
        c = matmul(transpose(f), f)
        e = 0.5 * (c - np.eye(3))
        r = self.fiber_frame.T  # columns f0, s0, n0
        e_hat = np.einsum("ai,...ab,bj->...ij", r, e, r)
        q = self._q_form(e_hat)
        if np.any(q > 700.0):
            raise DivergentStateError(f"max Q = {np.max(q):.3e} > 700")
        passive = 0.5 * self.c_scale * (np.exp(q) - 1.0)
        lnj = np.log(j)
        vol = 0.25 * self.bulk_modulus * ((j - 1.0) ** 2 + lnj ** 2)
        f0 = self.fiber_frame[0]
        stretch2 = np.einsum("...i,...i->...", matvec(f, f0), matvec(f, f0))
        return passive + vol + 0.5 * self.active_tension * (stretch2 - 1.0)

    def pk1(self, f):
        """First Piola-Kirchhoff stress; accepts (...,3,3) arrays or Dual."""
        j = det3(f)
        _check_positive_j(j)
        c = matmul(transpose(f), f)
        e = (c - np.eye(3)) * 0.5
        rows = self.fiber_frame  # rows f0, s0, n0
        e_hat = matmul(matmul(rows, e), rows.T)
        q = self._q_form(e_hat)
        qv = _value(q)
        if np.any(qv > 700.0):
            raise DivergentStateError(f"max Q = {np.max(qv):.3e} > 700")
        cexp = _scalar(self.c_scale * dexp(q))
        b = self._b_matrix
        s_hat = _stack33([[e_hat[..., i, j] * b[i, j] for j in range(3)] for i in range(3)])
        s = matmul(matmul(rows.T, cexp * s_hat), rows)
        p = matmul(f, s)
        finv_t = transpose(inv3(f))
        p = p + _scalar(0.5 * self.bulk_modulus * (j * (j - 1.0) + dlog(j))) * finv_t
        if self.active_tension != 0.0:
            p = p + self.active_tension * outer_const(matvec(f, rows[0]), rows[0])
        return p


def neo_hookean_pk1(state, params):
    """Stress of the neo-Hookean law at a single deformation state."""
    return params.pk1(state.F)


def guccione_pk1(state, params):
    """Stress of the Guccione law (with its active term) at a single state."""
    return params.pk1(state.F)


def pk1_tangent_batch(material, f):
    """dP/dF over a batch of deformation gradients, shape (...,3,3,3,3).

    Evaluates the stress once with dual-number-augmented F entries; the
    result indexes as [..., i, j, k, l] = dP_ij / dF_kl.
    """
    f = np.asarray(f, dtype=np.float64)
    p = material.pk1(seed_dual_matrix(f))
    lanes = p.eps.reshape((3, 3) + p.val.shape)  # [k, l, ..., i, j]
    return np.moveaxis(lanes, (0, 1), (-2, -1))  # [..., i, j, k, l]


def pk1_tangent(material, state):
    """dP/dF at a single deformation state, shape (3,3,3,3)."""
    return pk1_tangent_batch(material, state.F)
