"""Structured 1D/2D meshes with classified boundaries.

Nodes are indexed lexicographically (x fastest), spacing is uniform per
axis, and 2D rectangles are split into two P1 triangles along the
lower-left -> upper-right diagonal.  Meshes are immutable after
construction (arrays are write-protected) and safe for shared reads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np


class BoundaryTag(IntEnum):
    INTERIOR = 0
    DIRICHLET = 1
    NEUMANN = 2
    CONTROL = 3


#: Tie-break priority for nodes shared by differently tagged sides
#: (higher wins): Dirichlet > Control > Neumann.
_TAG_PRIORITY = {
    BoundaryTag.DIRICHLET: 3,
    BoundaryTag.CONTROL: 2,
    BoundaryTag.NEUMANN: 1,
    BoundaryTag.INTERIOR: 0,
}


@dataclass(frozen=True)
class StructuredMesh:
    """Uniform interval or triangulated-rectangle mesh.

    Attributes
    ----------
    dimension : 1 or 2
    lower, upper : per-axis domain extents
    cells : cells per axis
    node_coords : (n_nodes, dimension) array
    boundary_tags : (n_nodes,) array of BoundaryTag values
    element_connectivity : (n_elems, dimension+1) node-index tuples
    control_face_nodes : nodes lying on control-tagged sides, ordered
        along the face (includes corner nodes whose resolved tag may
        differ); empty when no side is control-tagged
    control_face_edges : (n_edges, 2) boundary edges of control sides
        (2D only; empty in 1D)
    """

    dimension: int
    lower: tuple
    upper: tuple
    cells: tuple
    node_coords: np.ndarray
    boundary_tags: np.ndarray
    element_connectivity: np.ndarray
    control_face_nodes: np.ndarray
    control_face_edges: np.ndarray

    def __post_init__(self):
        for arr in (self.node_coords, self.boundary_tags,
                    self.element_connectivity, self.control_face_nodes,
                    self.control_face_edges):
            arr.setflags(write=False)

    @property
    def n_nodes(self) -> int:
        return self.node_coords.shape[0]

    @property
    def spacing(self) -> tuple:
        return tuple((u - l) / c for l, u, c in
                     zip(self.lower, self.upper, self.cells))

    def nodes_tagged(self, tag: BoundaryTag) -> np.ndarray:
        return np.flatnonzero(self.boundary_tags == tag)


def _as_tag(tag) -> BoundaryTag:
    if isinstance(tag, BoundaryTag):
        return tag
    if isinstance(tag, str):
        return BoundaryTag[tag.upper()]
    return BoundaryTag(tag)


def build_interval_mesh(x_max: float, n_cells: int, tags) -> StructuredMesh:
    """Uniform mesh of (0, x_max) with ``n_cells`` segments.

    ``tags`` is the boundary-tag pair for the endpoints {x=0, x=x_max}.
    """
    if not x_max > 0:
        raise ValueError(f"x_max must be positive, got {x_max}")
    if n_cells < 2:
        raise ValueError(f"need at least 2 cells, got {n_cells}")
    tag_lo, tag_hi = (_as_tag(t) for t in tags)
    n = n_cells + 1
    coords = np.linspace(0.0, x_max, n).reshape(n, 1)
    node_tags = np.full(n, BoundaryTag.INTERIOR, dtype=np.int8)
    node_tags[0] = tag_lo
    node_tags[-1] = tag_hi
    conn = np.column_stack([np.arange(n_cells), np.arange(1, n)])
    control = np.flatnonzero(node_tags == BoundaryTag.CONTROL)
    return StructuredMesh(
        dimension=1, lower=(0.0,), upper=(x_max,), cells=(n_cells,),
        node_coords=coords, boundary_tags=node_tags,
        element_connectivity=conn.astype(np.int64),
        control_face_nodes=control.astype(np.int64),
        control_face_edges=np.empty((0, 2), dtype=np.int64),
    )


def build_rectangle_mesh(lx: float, ly: float, nx: int, ny: int,
                         tags: dict) -> StructuredMesh:
    """Triangulated uniform mesh of (0,lx) x (0,ly).

    ``tags`` maps side names {left, right, bottom, top} to boundary tags.
    Every grid rectangle is split along its lower-left -> upper-right
    diagonal.  Corner nodes shared by two sides resolve by the priority
    Dirichlet > Control > Neumann.
    """
    if not (lx > 0 and ly > 0):
        raise ValueError(f"degenerate extents ({lx}, {ly})")
    if nx < 2 or ny < 2:
        raise ValueError(f"need at least 2 cells per axis, got ({nx}, {ny})")
    side_tags = {side: _as_tag(tags[side])
                 for side in ("left", "right", "bottom", "top")}

    nxn, nyn = nx + 1, ny + 1
    xs = np.linspace(0.0, lx, nxn)
    ys = np.linspace(0.0, ly, nyn)
    X, Y = np.meshgrid(xs, ys)              # row-major: y outer, x fastest
    coords = np.column_stack([X.ravel(), Y.ravel()])

    def nid(i, j):
        return j * nxn + i

    node_tags = np.full(nxn * nyn, BoundaryTag.INTERIOR, dtype=np.int8)

    def apply_side(indices, tag):
        for k in indices:
            if _TAG_PRIORITY[tag] > _TAG_PRIORITY[BoundaryTag(node_tags[k])]:
                node_tags[k] = tag

    left_nodes = np.array([nid(0, j) for j in range(nyn)])
    right_nodes = np.array([nid(nx, j) for j in range(nyn)])
    bottom_nodes = np.array([nid(i, 0) for i in range(nxn)])
    top_nodes = np.array([nid(i, ny) for i in range(nxn)])
    apply_side(left_nodes, side_tags["left"])
    apply_side(right_nodes, side_tags["right"])
    apply_side(bottom_nodes, side_tags["bottom"])
    apply_side(top_nodes, side_tags["top"])

    # two triangles per rectangle, cell-major order, lower triangle first
    ii, jj = np.meshgrid(np.arange(nx), np.arange(ny))
    ii, jj = ii.ravel(), jj.ravel()
    ll = jj * nxn + ii
    lr, ul, ur = ll + 1, ll + nxn, ll + nxn + 1
    lower_tris = np.column_stack([ll, lr, ur])
    upper_tris = np.column_stack([ll, ur, ul])
    conn = np.empty((2 * nx * ny, 3), dtype=np.int64)
    conn[0::2] = lower_tris
    conn[1::2] = upper_tris

    side_node_lists = {"left": left_nodes, "right": right_nodes,
                       "bottom": bottom_nodes, "top": top_nodes}
    face_nodes, face_edges = [], []
    for side, nodes in side_node_lists.items():
        if side_tags[side] is not BoundaryTag.CONTROL:
            continue
        face_nodes.append(nodes)
        face_edges.append(np.column_stack([nodes[:-1], nodes[1:]]))
    if face_nodes:
        control_nodes = np.concatenate(face_nodes)
        control_edges = np.vstack(face_edges)
    else:
        control_nodes = np.empty(0, dtype=np.int64)
        control_edges = np.empty((0, 2), dtype=np.int64)

    return StructuredMesh(
        dimension=2, lower=(0.0, 0.0), upper=(lx, ly), cells=(nx, ny),
        node_coords=coords, boundary_tags=node_tags,
        element_connectivity=conn,
        control_face_nodes=control_nodes.astype(np.int64),
        control_face_edges=control_edges.astype(np.int64),
    )


def _check_inside(mesh: StructuredMesh, x: np.ndarray):
    tol = 1e-12 * max(u - l for l, u in zip(mesh.lower, mesh.upper))
    for d in range(mesh.dimension):
        if x[d] < mesh.lower[d] - tol or x[d] > mesh.upper[d] + tol:
            raise ValueError(
                f"point {x} outside closed domain along axis {d}; "
                "feet must be clamped before interpolation")


def locate_point(mesh: StructuredMesh, x) -> tuple[int, np.ndarray]:
    """Find the element containing ``x`` and its barycentric weights.

    The point must lie in the closed domain (callers clamp first); the
    returned weights are nonnegative, sum to one and reproduce ``x``.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    _check_inside(mesh, x)
    elems, bary = _locate_many(mesh, x.reshape(1, -1))
    return int(elems[0]), bary[0]


def _locate_many(mesh: StructuredMesh, pts: np.ndarray):
    """Vectorized point location; ``pts`` is (m, dimension), pre-clamped."""
    if mesh.dimension == 1:
        h = mesh.spacing[0]
        n_cells = mesh.cells[0]
        t = (pts[:, 0] - mesh.lower[0]) / h
        cell = np.clip(np.floor(t).astype(np.int64), 0, n_cells - 1)
        s = t - cell
        bary = np.column_stack([1.0 - s, s])
        return cell, bary

    hx, hy = mesh.spacing
    nx, ny = mesh.cells
    tx = (pts[:, 0] - mesh.lower[0]) / hx
    ty = (pts[:, 1] - mesh.lower[1]) / hy
    ci = np.clip(np.floor(tx).astype(np.int64), 0, nx - 1)
    cj = np.clip(np.floor(ty).astype(np.int64), 0, ny - 1)
    s = tx - ci
    t = ty - cj
    lower = t <= s  # below the ll->ur diagonal
    elem = 2 * (cj * nx + ci) + np.where(lower, 0, 1)
    bary = np.empty((len(pts), 3))
    # lower triangle (ll, lr, ur): weights (1-s, s-t, t)
    bary[lower, 0] = 1.0 - s[lower]
    bary[lower, 1] = s[lower] - t[lower]
    bary[lower, 2] = t[lower]
    up = ~lower
    # upper triangle (ll, ur, ul): weights (1-t, s, t-s)
    bary[up, 0] = 1.0 - t[up]
    bary[up, 1] = s[up]
    bary[up, 2] = t[up] - s[up]
    # guard tiny negative weights from floating-point cell selection
    np.clip(bary, 0.0, None, out=bary)
    bary /= bary.sum(axis=1, keepdims=True)
    return elem, bary


def interpolate(mesh: StructuredMesh, field: np.ndarray,
                pts: np.ndarray) -> np.ndarray:
    """Evaluate a nodal P1 field at points inside the closed domain."""
    elems, bary = _locate_many(mesh, pts)
    conn = mesh.element_connectivity[elems]
    return np.einsum("ij,ij->i", field[conn], bary)
