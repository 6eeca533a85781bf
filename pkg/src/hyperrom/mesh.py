"""Structured hexahedral box meshes with Q1 (trilinear) shape functions.

Local node ordering is lexicographic over (x, y, z) signs: node
``a = ix + 2*iy + 4*iz`` sits at reference corner ``(2*ix-1, 2*iy-1, 2*iz-1)``.
Dof numbering is node-major with interleaved components: node ``i`` owns
global dofs ``3*i .. 3*i+2``.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np

#: reference corner signs, shape (8, 3), lexicographic local ordering
CORNER_SIGNS = np.array(
    [[2 * (a & 1) - 1, 2 * ((a >> 1) & 1) - 1, 2 * ((a >> 2) & 1) - 1] for a in range(8)],
    dtype=np.float64,
)

_G = 1.0 / np.sqrt(3.0)

#: 2x2x2 Gauss-Legendre points on [-1,1]^3 (unit weights)
GAUSS_POINTS_3D = np.array(
    [[sx * _G, sy * _G, sz * _G] for sz in (-1, 1) for sy in (-1, 1) for sx in (-1, 1)]
)
GAUSS_WEIGHTS_3D = np.ones(8)

#: 2x2 Gauss points on the reference square
GAUSS_POINTS_2D = np.array([[sx * _G, sy * _G] for sy in (-1, 1) for sx in (-1, 1)])
GAUSS_WEIGHTS_2D = np.ones(4)

# local faces: (fixed axis, fixed sign, s-axis, t-axis); the (s, t) order is
# chosen so that T_s x T_t points outward on a positively-oriented element
FACE_TABLE = (
    (0, -1, 2, 1),  # x = -1
    (0, +1, 1, 2),  # x = +1
    (1, -1, 0, 2),  # y = -1
    (1, +1, 2, 0),  # y = +1
    (2, -1, 1, 0),  # z = -1
    (2, +1, 0, 1),  # z = +1
)


class BoundaryTag(Enum):
    DIRICHLET = "dirichlet"
    NEUMANN_PRESSURE = "neumann_pressure"
    HOMOGENEOUS = "homogeneous"


def shape_eval(point):
    """Q1 shape values and reference gradients at one or more local points.

    ``point`` has shape (3,) or (npts, 3) with coordinates in [-1, 1]^3.
    Returns ``(values, gradients)`` of shapes (..., 8) and (..., 8, 3).
    Values sum to 1 and gradients sum to the zero vector.
    """
    pt = np.asarray(point, dtype=np.float64)
    squeeze = pt.ndim == 1
    pt = np.atleast_2d(pt)
    one_plus = 1.0 + pt[:, None, :] * CORNER_SIGNS[None, :, :]  # (npts, 8, 3)
    values = 0.125 * one_plus.prod(axis=2)
    grads = np.empty((pt.shape[0], 8, 3))
    for d in range(3):
        others = [i for i in range(3) if i != d]
        grads[:, :, d] = 0.125 * CORNER_SIGNS[None, :, d] * one_plus[:, :, others].prod(axis=2)
    if squeeze:
        return values[0], grads[0]
    return values, grads


@dataclass(frozen=True)
class Mesh:
    """Immutable hexahedral mesh with tagged boundary facets.

    Attributes
    ----------
    node_coords : (n_nodes, 3) float array, meters
    hex_elements : (n_elements, 8) int array, local ordering per CORNER_SIGNS
    boundary_facets : list of (element, local_face, BoundaryTag)
    """

    node_coords: np.ndarray
    hex_elements: np.ndarray
    boundary_facets: tuple

    @property
    def n_nodes(self):
        return self.node_coords.shape[0]

    @property
    def n_elements(self):
        return self.hex_elements.shape[0]

    @property
    def dof_count(self):
        return 3 * self.n_nodes

    def element_dofs(self, elements=None):
        """Global dof indices per element, shape (n, 24)."""
        conn = self.hex_elements if elements is None else self.hex_elements[elements]
        return (3 * conn[:, :, None] + np.arange(3)[None, None, :]).reshape(conn.shape[0], 24)

    def facets_with_tag(self, tag):
        return [(e, f) for (e, f, t) in self.boundary_facets if t is tag]

    def dump(self, path):
        """Plain-text nodes/elements listing for debugging."""
        with open(path, "w") as fh:
            fh.write(f"nodes {self.n_nodes}\n")
            for i, xyz in enumerate(self.node_coords):
                fh.write(f"{i} {xyz[0]:.17g} {xyz[1]:.17g} {xyz[2]:.17g}\n")
            fh.write(f"elements {self.n_elements}\n")
            for i, conn in enumerate(self.hex_elements):
                fh.write(f"{i} " + " ".join(str(n) for n in conn) + "\n")
            fh.write(f"facets {len(self.boundary_facets)}\n")
            for e, f, t in self.boundary_facets:
                fh.write(f"{e} {f} {t.value}\n")


_FACE_KEYS = ("x0", "x1", "y0", "y1", "z0", "z1")


def build_box_mesh(extent, divisions, dirichlet_faces=("x0",), pressure_faces=("z0",)):
    """Structured box mesh on [0, extent[0]] x [0, extent[1]] x [0, extent[2]].

    Boundary facets on the faces named in ``dirichlet_faces`` /
    ``pressure_faces`` (keys x0, x1, y0, y1, z0, z1) get the corresponding
    tag; the rest are homogeneous. Defaults follow the clamped-beam
    convention: clamped at x=0, pressurized on z=0.
    """
    extent = np.asarray(extent, dtype=np.float64)
    divisions = np.asarray(divisions, dtype=np.int64)
    if extent.shape != (3,) or divisions.shape != (3,):
        raise ValueError("extent and divisions must have length 3")
    if np.any(extent <= 0):
        raise ValueError(f"non-positive extent: {extent}")
    if np.any(divisions < 1):
        raise ValueError(f"divisions must be >= 1, got {divisions}")
    for key in tuple(dirichlet_faces) + tuple(pressure_faces):
        if key not in _FACE_KEYS:
            raise ValueError(f"unknown face key {key!r}")

    nx, ny, nz = (int(d) for d in divisions)
    xs = np.linspace(0.0, extent[0], nx + 1)
    ys = np.linspace(0.0, extent[1], ny + 1)
    zs = np.linspace(0.0, extent[2], nz + 1)
    zz, yy, xx = np.meshgrid(zs, ys, xs, indexing="ij")
    coords = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)

    def node_id(i, j, k):
        return i + (nx + 1) * (j + (ny + 1) * k)

    elems = np.empty((nx * ny * nz, 8), dtype=np.int64)
    e = 0
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                elems[e] = [
                    node_id(i, j, k), node_id(i + 1, j, k),
                    node_id(i, j + 1, k), node_id(i + 1, j + 1, k),
                    node_id(i, j, k + 1), node_id(i + 1, j, k + 1),
                    node_id(i, j + 1, k + 1), node_id(i + 1, j + 1, k + 1),
                ]
                e += 1

    def elem_id(i, j, k):
        return i + nx * (j + ny * k)

    def tag_for(key):
        if key in dirichlet_faces:
            return BoundaryTag.DIRICHLET
        if key in pressure_faces:
            return BoundaryTag.NEUMANN_PRESSURE
        return BoundaryTag.HOMOGENEOUS

    facets = []
    for k in range(nz):
        for j in range(ny):
            facets.append((elem_id(0, j, k), 0, tag_for("x0")))
            facets.append((elem_id(nx - 1, j, k), 1, tag_for("x1")))
    for k in range(nz):
        for i in range(nx):
            facets.append((elem_id(i, 0, k), 2, tag_for("y0")))
            facets.append((elem_id(i, ny - 1, k), 3, tag_for("y1")))
    for j in range(ny):
        for i in range(nx):
            facets.append((elem_id(i, j, 0), 4, tag_for("z0")))
            facets.append((elem_id(i, j, nz - 1), 5, tag_for("z1")))

    return Mesh(coords, elems, tuple(facets))


def face_reference_points(local_face):
    """Map the 2x2 face Gauss points into hex reference coordinates.

    Returns ``(points3d, s_axis, t_axis)`` where points3d has shape (4, 3).
    """
    axis, sign, s_axis, t_axis = FACE_TABLE[local_face]
    pts = np.empty((len(GAUSS_POINTS_2D), 3))
    pts[:, axis] = float(sign)
    pts[:, s_axis] = GAUSS_POINTS_2D[:, 0]
    pts[:, t_axis] = GAUSS_POINTS_2D[:, 1]
    return pts, s_axis, t_axis


@dataclass(frozen=True)
class ReducedMesh:
    """Element subset needed to evaluate selected residual dof rows."""

    element_subset: np.ndarray
    active_dofs: np.ndarray
    magic_dof_rows: np.ndarray


def extract_reduced_mesh(mesh, magic_dofs):
    """Elements touching any node that owns a selected dof, plus their dofs.

    The subset contains every element sharing a node with a magic dof;
    ``active_dofs`` is closed under element support (all dofs of all subset
    elements). Enlarging the magic set never shrinks the subset.
    """
    magic = np.asarray(magic_dofs, dtype=np.int64)
    if magic.size == 0:
        raise ValueError("empty magic dof set")
    if magic.min() < 0 or magic.max() >= mesh.dof_count:
        raise ValueError("magic dof index out of range")
    magic_nodes = np.unique(magic // 3)
    touch = np.isin(mesh.hex_elements, magic_nodes).any(axis=1)
    subset = np.flatnonzero(touch)
    nodes = np.unique(mesh.hex_elements[subset])
    active = (3 * nodes[:, None] + np.arange(3)[None, :]).ravel()
    return ReducedMesh(subset, active, np.unique(magic))
