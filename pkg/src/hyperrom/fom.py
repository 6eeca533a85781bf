"""Full-order model: residual/Jacobian assembly, Newton, implicit stepping.

The time-discrete residual at step n is

    R(u) = (rho0/dt^2) M (u - 2 u_prev + u_prev2)
         + (beta/dt) Fb (u - u_prev) + alpha Fa u
         + S(u) - Fext(t, u)

with M the mass matrix, Fb/Fa Robin facet mass matrices, S the internal
stress force and Fext the follower pressure on the tagged facets
(traction -g(t) J F^{-T} N on the undeformed surface; it depends on u, and
its linearization is included in the Jacobian). Body forces are not modeled.

Assembly is vectorized over elements; serial runs are bit-deterministic.
"""

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from . import linalg
from .materials import (
    Dual,
    ElementStateError,
    inv3,
    det3,
    pk1_tangent_batch,
    seed_dual_matrix,
    transpose,
)
from .mesh import (
    BoundaryTag,
    GAUSS_POINTS_3D,
    GAUSS_WEIGHTS_3D,
    GAUSS_WEIGHTS_2D,
    face_reference_points,
    shape_eval,
)

#: dense direct solve below this dof count, CSR + GMRES above
DENSE_SOLVER_MAX_DOFS = 4096

# module-wide assembly call counters; the network-driven online solver must
# leave these untouched (its defining property)
_ASSEMBLY_COUNTS = {"residual": 0, "jacobian": 0}


def assembly_counts():
    return dict(_ASSEMBLY_COUNTS)


def reset_assembly_counts():
    _ASSEMBLY_COUNTS["residual"] = 0
    _ASSEMBLY_COUNTS["jacobian"] = 0


class NewtonDivergenceError(RuntimeError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid with nt steps of size dt covering (0, T]."""

    dt: float
    nt: int

    def __post_init__(self):
        if self.dt <= 0 or self.nt < 1:
            raise ValueError("dt must be positive and nt >= 1")

    @property
    def final_time(self):
        return self.dt * self.nt

    def times(self):
        return self.dt * np.arange(1, self.nt + 1)


@dataclass(frozen=True)
class LoadProgram:
    """Scalar pressure program g(t): linear ramp, hat, or step."""

    kind: str
    amplitude: float

    def __post_init__(self):
        if self.kind not in ("linear", "hat", "step"):
            raise ValueError(f"unknown load kind {self.kind!r}")
        if self.amplitude < 0:
            raise ValueError("amplitude must be nonnegative")

    def value(self, t, total_time):
        p = self.amplitude
        if self.kind == "linear":
            return p * t / total_time
        if self.kind == "hat":
            if t <= 0.5 * total_time:
                return p * 2.0 * t
            return p * 2.0 * (total_time - t)
        return p if t <= total_time / 3.0 else 0.0


@dataclass(frozen=True)
class NewtonSettings:
    rel_tol: float = 1e-6
    abs_tol: float = 1e-10
    max_iters: int = 25
    backtracking: bool = True

    def __post_init__(self):
        if self.rel_tol <= 0 or self.abs_tol <= 0 or self.max_iters < 1:
            raise ValueError("tolerances must be positive and max_iters >= 1")


@dataclass
class FomState:
    """Displacement history u^n, u^{n-1}, u^{n-2} plus the step index."""

    u_now: np.ndarray
    u_prev: np.ndarray
    u_prev2: np.ndarray
    time_index: int = 0


class Geometry:
    """Per-mesh precomputed quadrature data shared by all assemblers."""

    def __init__(self, mesh):
        self.mesh = mesh
        self.eldofs = mesh.element_dofs()  # (E, 24)
        coords = mesh.node_coords[mesh.hex_elements]  # (E, 8, 3)

        _, gradref = shape_eval(GAUSS_POINTS_3D)  # (8q, 8a, 3)
        jac = np.einsum("eam,qad->eqdm", coords, gradref)  # d x/d xi, (E,8q,3,3)
        det = det3(jac)
        if np.any(det <= 0):
            raise ValueError("non-positive map Jacobian; bad element orientation")
        jinv = inv3(jac)
        # physical shape gradients dN_a/dx_j and quadrature measure
        self.grad = np.einsum("qad,eqdj->eqaj", gradref, jinv)
        self.wdet = GAUSS_WEIGHTS_3D[None, :] * det

        vals = shape_eval(GAUSS_POINTS_3D)[0]  # (8q, 8a)
        scal = np.einsum("eq,qa,qb->eab", self.wdet, vals, vals)  # element scalar mass
        self.mass = self._vector_mass_csr(scal)

        self.pressure_facets = self._facet_data(mesh, BoundaryTag.NEUMANN_PRESSURE)
        self.robin_facets = self._facet_data(mesh, BoundaryTag.HOMOGENEOUS)
        self.robin_mass = self._facet_mass_csr(self.robin_facets)

        dirichlet_nodes = set()
        for e, f, tag in mesh.boundary_facets:
            if tag is BoundaryTag.DIRICHLET:
                for a in _face_corner_nodes(f):
                    dirichlet_nodes.add(mesh.hex_elements[e, a])
        nodes = np.array(sorted(dirichlet_nodes), dtype=np.int64)
        self.dirichlet_dofs = (3 * nodes[:, None] + np.arange(3)).ravel() if nodes.size else np.empty(0, np.int64)
        free = np.ones(mesh.dof_count, bool)
        free[self.dirichlet_dofs] = False
        self.free_mask = free

    def _vector_mass_csr(self, scal):
        mesh = self.mesh
        n_e = mesh.n_elements
        block = np.zeros((n_e, 24, 24))
        for i in range(3):
            block[:, i::3, i::3] = scal
        rows = np.repeat(self.eldofs, 24, axis=1).ravel()
        cols = np.tile(self.eldofs, (1, 24)).ravel()
        m = scipy.sparse.coo_matrix(
            (block.ravel(), (rows, cols)), shape=(mesh.dof_count,) * 2
        )
        return m.tocsr()

    def _facet_data(self, mesh, tag):
        """Quadrature tables for all facets carrying ``tag``.

        Returns a dict of arrays over facets: parent element ids, shape
        values / physical gradients at the face Gauss points, the unit
        outward reference normal, and the surface measure per point.
        """
        facets = mesh.facets_with_tag(tag)
        n_f = len(facets)
        data = {
            "elements": np.array([e for e, _ in facets], dtype=np.int64),
            "values": np.zeros((n_f, 4, 8)),
            "grad": np.zeros((n_f, 4, 8, 3)),
            "normal": np.zeros((n_f, 4, 3)),
            "warea": np.zeros((n_f, 4)),
        }
        for idx, (e, f) in enumerate(facets):
            pts, s_axis, t_axis = face_reference_points(f)
            vals, gradref = shape_eval(pts)  # (4, 8), (4, 8, 3)
            coords = mesh.node_coords[mesh.hex_elements[e]]  # (8, 3)
            jac = np.einsum("am,qad->qdm", coords, gradref)  # (4, 3, 3)
            t_s = jac[:, s_axis, :]
            t_t = jac[:, t_axis, :]
            cross = np.cross(t_s, t_t)
            area = np.linalg.norm(cross, axis=1)
            jinv = inv3(jac)
            data["values"][idx] = vals
            data["grad"][idx] = np.einsum("qad,qdj->qaj", gradref, jinv)
            data["normal"][idx] = cross / area[:, None]
            data["warea"][idx] = GAUSS_WEIGHTS_2D * area
        return data

    def _facet_mass_csr(self, fd):
        n = self.mesh.dof_count
        if fd["elements"].size == 0:
            return scipy.sparse.csr_matrix((n, n))
        scal = np.einsum("fq,fqa,fqb->fab", fd["warea"], fd["values"], fd["values"])
        block = np.zeros((scal.shape[0], 24, 24))
        for i in range(3):
            block[:, i::3, i::3] = scal
        eldofs = self.eldofs[fd["elements"]]
        rows = np.repeat(eldofs, 24, axis=1).ravel()
        cols = np.tile(eldofs, (1, 24)).ravel()
        return scipy.sparse.coo_matrix((block.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def _face_corner_nodes(local_face):
    from .mesh import CORNER_SIGNS, FACE_TABLE

    axis, sign, _, _ = FACE_TABLE[local_face]
    return [a for a in range(8) if CORNER_SIGNS[a, axis] == sign]


class Assembler:
    """Residual and Jacobian assembly for one material/load binding.

    Geometry is shared; building an assembler per parameter instance is
    cheap. All public entry points bump the module assembly counters.
    """

    def __init__(self, geometry, material, load, total_time, rho0=1000.0,
                 dt=1.0, alpha=0.0, beta=0.0):
        self.geom = geometry
        self.material = material
        self.load = load
        self.total_time = total_time
        self.rho0 = rho0
        self.dt = dt
        self.alpha = alpha
        self.beta = beta

    # -- element-level pieces ------------------------------------------------

    def _grad_field(self, u, grad, elements):
        u_e = u[self.geom.eldofs[elements]].reshape(len(elements), 8, 3)
        return np.einsum("eai,eqaj->eqij", u_e, grad)

    def stress_forces(self, u, elements):
        """Internal force blocks (n, 24) for the given element ids."""
        grad = self.geom.grad[elements]
        f = np.eye(3) + self._grad_field(u, grad, elements)
        p = self.material.pk1(f)
        blocks = np.einsum("eq,eqij,eqaj->eai", self.geom.wdet[elements], p, grad)
        return blocks.reshape(len(elements), 24)

    def stress_tangents(self, u, elements):
        """Element stiffness blocks (n, 24, 24) for the given element ids."""
        grad = self.geom.grad[elements]
        f = np.eye(3) + self._grad_field(u, grad, elements)
        dpdf = pk1_tangent_batch(self.material, f)
        k = np.einsum("eq,eqikjl,eqak,eqbl->eaibj",
                      self.geom.wdet[elements], dpdf, grad, grad, optimize=True)
        return k.reshape(len(elements), 24, 24)

    def _facet_deformation(self, u, fd, which):
        els = fd["elements"][which]
        u_e = u[self.geom.eldofs[els]].reshape(len(els), 8, 3)
        return np.eye(3) + np.einsum("fai,fqaj->fqij", u_e, fd["grad"][which])

    def pressure_forces(self, u, t, which):
        """External follower-load force blocks (n, 24) for facet ids."""
        fd = self.geom.pressure_facets
        g = self.load.value(t, self.total_time)
        f = self._facet_deformation(u, fd, which)
        jfinvt = det3(f)[..., None, None] * transpose(inv3(f))
        gn = np.einsum("fqij,fqj->fqi", jfinvt, fd["normal"][which])
        blocks = -g * np.einsum("fq,fqa,fqi->fai", fd["warea"][which],
                                fd["values"][which], gn)
        return blocks.reshape(len(which), 24)

    def pressure_tangents(self, u, t, which):
        """d(pressure force)/du blocks (n, 24, 24) for facet ids."""
        fd = self.geom.pressure_facets
        g = self.load.value(t, self.total_time)
        f = self._facet_deformation(u, fd, which)
        dual = seed_dual_matrix(f)
        gdual = det3(dual) * transpose(inv3(dual))  # scalar Dual * matrix Dual
        lanes = gdual.eps.reshape((3, 3) + gdual.val.shape)  # [k,l,f,q,i,m]
        dg = np.moveaxis(lanes, (0, 1), (-2, -1))  # [f,q,i,m,k,l]
        k = -g * np.einsum("fq,fqa,fqimjl,fqm,fqbl->faibj",
                           fd["warea"][which], fd["values"][which], dg,
                           fd["normal"][which], fd["grad"][which], optimize=True)
        return k.reshape(len(which), 24, 24)

    # -- global assembly -----------------------------------------------------

    def _mass_coeff(self):
        return self.rho0 / self.dt ** 2

    def residual(self, u, u_prev, u_prev2, t):
        """Global residual with Dirichlet rows replaced by u itself."""
        _ASSEMBLY_COUNTS["residual"] += 1
        geom = self.geom
        n = geom.mesh.dof_count
        r = np.zeros(n)

        all_elems = np.arange(geom.mesh.n_elements)
        np.add.at(r, geom.eldofs.ravel(), self.stress_forces(u, all_elems).ravel())

        if self.rho0 != 0.0:
            r += self._mass_coeff() * (geom.mass @ (u - 2.0 * u_prev + u_prev2))
        if self.beta != 0.0:
            r += (self.beta / self.dt) * (geom.robin_mass @ (u - u_prev))
        if self.alpha != 0.0:
            r += self.alpha * (geom.robin_mass @ u)

        nf = geom.pressure_facets["elements"].size
        if nf and self.load.value(t, self.total_time) != 0.0:
            which = np.arange(nf)
            blocks = self.pressure_forces(u, t, which)
            dofs = geom.eldofs[geom.pressure_facets["elements"]]
            np.add.at(r, dofs.ravel(), -blocks.ravel())

        d = geom.dirichlet_dofs
        r[d] = u[d]
        return r

    def jacobian(self, u, t):
        """Global sparse Jacobian dR/du with eliminated Dirichlet rows/cols."""
        _ASSEMBLY_COUNTS["jacobian"] += 1
        geom = self.geom
        n = geom.mesh.dof_count

        all_elems = np.arange(geom.mesh.n_elements)
        blocks = self.stress_tangents(u, all_elems)
        rows = np.repeat(geom.eldofs, 24, axis=1).ravel()
        cols = np.tile(geom.eldofs, (1, 24)).ravel()
        jac = scipy.sparse.coo_matrix((blocks.ravel(), (rows, cols)), shape=(n, n)).tocsr()

        if self.rho0 != 0.0:
            jac = jac + self._mass_coeff() * geom.mass
        if self.beta != 0.0 or self.alpha != 0.0:
            jac = jac + (self.beta / self.dt + self.alpha) * geom.robin_mass

        nf = geom.pressure_facets["elements"].size
        if nf and self.load.value(t, self.total_time) != 0.0:
            which = np.arange(nf)
            pk = self.pressure_tangents(u, t, which)
            eldofs = geom.eldofs[geom.pressure_facets["elements"]]
            prows = np.repeat(eldofs, 24, axis=1).ravel()
            pcols = np.tile(eldofs, (1, 24)).ravel()
            jac = jac - scipy.sparse.coo_matrix((pk.ravel(), (prows, pcols)), shape=(n, n)).tocsr()

        # symmetric elimination: zero Dirichlet rows/cols, identity diagonal
        d = geom.dirichlet_dofs
        if d.size:
            keep = scipy.sparse.diags(geom.free_mask.astype(np.float64))
            fix = scipy.sparse.coo_matrix((np.ones(d.size), (d, d)), shape=(n, n))
            jac = keep @ jac @ keep + fix.tocsr()
        return jac


def linear_solve(jac, rhs):
    """Dense LU below DENSE_SOLVER_MAX_DOFS, else GMRES(50) with diagonal
    preconditioning on CSR storage."""
    n = rhs.shape[0]
    if n <= DENSE_SOLVER_MAX_DOFS:
        dense = jac.toarray() if scipy.sparse.issparse(jac) else np.asarray(jac)
        return linalg.lu_solve(dense, rhs)
    jac = scipy.sparse.csr_matrix(jac)
    diag = jac.diagonal()
    diag[diag == 0.0] = 1.0
    precond = scipy.sparse.linalg.LinearOperator((n, n), matvec=lambda x: x / diag)
    x, info = scipy.sparse.linalg.gmres(jac, rhs, rtol=1e-10, atol=0.0,
                                        restart=50, maxiter=200, M=precond)
    if info != 0:
        raise linalg.SingularMatrixError(f"GMRES did not converge (info={info})")
    return x


def newton_solve(settings, residual_fn, jacobian_fn, u0, solve=linear_solve,
                 fixup=None, on_iterate=None):
    """Damped Newton iteration.

    Stops when ||R|| <= max(rel_tol * ||R0||, abs_tol). Backtracking halves
    the step (up to 10 times) on inverted elements or residual growth.
    ``fixup`` post-processes each accepted iterate (e.g. re-zeroing
    constrained dofs); ``on_iterate(u, k)`` sees every state at which the
    residual was assembled, including the initial guess and the final one.

    Returns ``(solution, iteration_count, residual_norm_history)``.
    """
    u = np.array(u0, dtype=np.float64)
    if fixup is not None:
        u = fixup(u)
    r = residual_fn(u)
    norm = float(np.linalg.norm(r))
    history = [norm]
    if on_iterate is not None:
        on_iterate(u, 0)
    tol = max(settings.rel_tol * norm, settings.abs_tol)
    k = 0
    while norm > tol:
        if k >= settings.max_iters:
            raise NewtonDivergenceError(
                f"no convergence in {settings.max_iters} iterations "
                f"(last ||R|| = {norm:.3e}, target {tol:.3e})", history)
        jac = jacobian_fn(u)
        du = solve(jac, -r)
        step = 1.0
        for _ in range(11):
            try:
                u_try = u + step * du
                if fixup is not None:
                    u_try = fixup(u_try)
                r_try = residual_fn(u_try)
                norm_try = float(np.linalg.norm(r_try))
            except ElementStateError:
                if not settings.backtracking:
                    raise
                step *= 0.5
                continue
            if not settings.backtracking or norm_try <= norm or step <= 1.0 / 1024:
                break
            step *= 0.5
        else:
            raise NewtonDivergenceError("backtracking exhausted", history)
        u, r, norm = u_try, r_try, norm_try
        history.append(norm)
        k += 1
        if on_iterate is not None:
            on_iterate(u, k)
    return u, k, history


@dataclass
class FomResult:
    """Converged trajectory (nt, n_dofs), Newton counts, timings, snapshots."""

    trajectory: np.ndarray
    newton_iterations: list
    wall_seconds: float
    timings: dict = field(default_factory=dict)
    snapshots: list = field(default_factory=list)  # (u, n, k) triples


def run_fom(mesh_or_geom, material, time_grid, load, settings=NewtonSettings(),
            rho0=1000.0, alpha=0.0, beta=0.0, collect="iterates"):
    """March the full-order model over the time grid from zero initial data.

    ``collect`` is one of "iterates" (every assembled Newton state),
    "converged" (one snapshot per step) or "none". u^0 = u^{-1} = 0 encodes
    zero initial displacement and velocity.
    """
    if collect not in ("iterates", "converged", "none"):
        raise ValueError(f"unknown collect mode {collect!r}")
    geom = mesh_or_geom if isinstance(mesh_or_geom, Geometry) else Geometry(mesh_or_geom)
    asm = Assembler(geom, material, load, time_grid.final_time,
                    rho0=rho0, dt=time_grid.dt, alpha=alpha, beta=beta)
    n = geom.mesh.dof_count
    state = FomState(np.zeros(n), np.zeros(n), np.zeros(n))

    def fixup(u):
        u[geom.dirichlet_dofs] = 0.0
        return u

    trajectory = np.zeros((time_grid.nt, n))
    iters = []
    snapshots = []
    t_start = time.perf_counter()
    for step in range(1, time_grid.nt + 1):
        t = step * time_grid.dt

        def residual_fn(u):
            return asm.residual(u, state.u_prev, state.u_prev2, t)

        def jacobian_fn(u):
            return asm.jacobian(u, t)

        on_iterate = None
        if collect == "iterates":
            on_iterate = lambda u, k: snapshots.append((u.copy(), step, k))
        try:
            u, k, _ = newton_solve(settings, residual_fn, jacobian_fn,
                                   state.u_prev, fixup=fixup, on_iterate=on_iterate)
        except NewtonDivergenceError as err:
            raise NewtonDivergenceError(
                f"step n={step} (t={t:.6g}): {err}", err.history) from err
        if collect == "converged":
            snapshots.append((u.copy(), step, k))
        trajectory[step - 1] = u
        iters.append(k)
        state = FomState(u, u, state.u_prev, time_index=step)
        state.u_prev2 = trajectory[step - 2] if step >= 2 else np.zeros(n)
        state.u_prev = u
    elapsed = time.perf_counter() - t_start
    return FomResult(trajectory, iters, elapsed,
                     timings={"fom_march": elapsed}, snapshots=snapshots)
