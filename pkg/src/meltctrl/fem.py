"""Sparse P1 operators for the per-step variational problem.

Assembles, on a structured mesh:

* ``A``  = mass + tau * (conductivity-weighted stiffness), the coercive
  state operator, reduced at Dirichlet nodes (rows/columns eliminated,
  unit diagonal) so it stays SPD on the free-node set;
* ``B``  the boundary control operator (tau-scaled control-face mass,
  rows on free nodes only);
* ``M``  the reduced mass matrix and ``H1`` = mass + unit stiffness,
  the discrete H1 inner product used by the tracking objective;
* lumped masses: diagonal row-sum quadrature used for the solid-fraction
  terms and for all inequality-multiplier pairings, which makes the
  nodewise projection formulas of the optimality system exact.

Assembly is deterministic (fixed element order).  Operators are
immutable after construction and safe for concurrent shared reads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import BoundaryTag, StructuredMesh


@dataclass(eq=False)
class StateOperators:
    """Assembled operators of the semi-discrete state equation.

    ``mass_load`` keeps full columns (rows zeroed at Dirichlet nodes):
    it is the Galerkin load operator for data fields that do not vanish
    on the boundary, e.g. the advected enthalpy terms.
    """

    A: sp.csr_matrix
    B: sp.csr_matrix
    M: sp.csr_matrix
    H1: sp.csr_matrix
    dirichlet_mask: np.ndarray
    tau: float
    kappa: np.ndarray
    lumped_mass: np.ndarray          # integral of each hat function
    mass_load: sp.csr_matrix
    control_nodes: np.ndarray        # Control-tagged node indices
    S: sp.csr_matrix | None          # consistent Gamma_C mass (m_c x m_c)
    control_lumped: np.ndarray       # row sums of S
    mesh: StructuredMesh
    _a_lu: object = field(default=None, repr=False)

    def __post_init__(self):
        for arr in (self.dirichlet_mask, self.kappa, self.lumped_mass,
                    self.control_nodes, self.control_lumped):
            arr.setflags(write=False)

    @property
    def n_nodes(self) -> int:
        return self.dirichlet_mask.shape[0]

    @property
    def free_mask(self) -> np.ndarray:
        return ~self.dirichlet_mask

    @property
    def n_controls(self) -> int:
        return self.control_nodes.shape[0]

    def solve_A(self, rhs: np.ndarray) -> np.ndarray:
        """Solve A x = rhs with a cached sparse factorization."""
        if self._a_lu is None:
            self._a_lu = spla.splu(self.A.tocsc())
        return self._a_lu.solve(rhs)

    def advected_load(self, y_bar: np.ndarray, xi_bar: np.ndarray):
        """Load vector of the upwinded enthalpy terms, zero at Dirichlet."""
        return self.mass_load @ (y_bar - xi_bar)


def _local_matrices_1d(h: float):
    m = h / 6.0 * np.array([[2.0, 1.0], [1.0, 2.0]])
    k = 1.0 / h * np.array([[1.0, -1.0], [-1.0, 1.0]])
    return m, k


def _local_matrices_tri(hx: float, hy: float, lower: bool):
    area = 0.5 * hx * hy
    m = area / 12.0 * np.array([[2.0, 1.0, 1.0],
                                [1.0, 2.0, 1.0],
                                [1.0, 1.0, 2.0]])
    a = hy / (2.0 * hx)   # int |d/dx|^2 over one triangle
    b = hx / (2.0 * hy)
    if lower:   # vertices (ll, lr, ur)
        k = np.array([[a, -a, 0.0],
                      [-a, a + b, -b],
                      [0.0, -b, b]])
    else:       # vertices (ll, ur, ul)
        k = np.array([[b, 0.0, -b],
                      [0.0, a, -a],
                      [-b, -a, a + b]])
    return m, k


def _assemble_mass_stiffness(mesh: StructuredMesh, kappa: np.ndarray):
    """Full (unreduced) mass, kappa-stiffness and unit stiffness."""
    conn = mesh.element_connectivity
    n = mesh.n_nodes
    if mesh.dimension == 1:
        m_loc, k_loc = _local_matrices_1d(mesh.spacing[0])
        locals_m = [m_loc]
        locals_k = [k_loc]
        families = [np.arange(conn.shape[0])]
    else:
        hx, hy = mesh.spacing
        locals_m, locals_k, families = [], [], []
        for lower, sel in ((True, np.arange(0, conn.shape[0], 2)),
                           (False, np.arange(1, conn.shape[0], 2))):
            m_loc, k_loc = _local_matrices_tri(hx, hy, lower)
            locals_m.append(m_loc)
            locals_k.append(k_loc)
            families.append(sel)

    rows, cols, m_vals, k_vals, k1_vals = [], [], [], [], []
    for m_loc, k_loc, sel in zip(locals_m, locals_k, families):
        elems = conn[sel]                       # (e, nv)
        kbar = kappa[elems].mean(axis=1)        # element mean conductivity
        nv = elems.shape[1]
        r = np.repeat(elems, nv, axis=1).ravel()
        c = np.tile(elems, (1, nv)).ravel()
        rows.append(r)
        cols.append(c)
        m_vals.append(np.tile(m_loc.ravel(), len(elems)))
        k1_tile = np.tile(k_loc.ravel(), len(elems))
        k1_vals.append(k1_tile)
        k_vals.append((kbar[:, None] * k_loc.ravel()[None, :]).ravel())

    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    shape = (n, n)
    M = sp.coo_matrix((np.concatenate(m_vals), (rows, cols)), shape).tocsr()
    K = sp.coo_matrix((np.concatenate(k_vals), (rows, cols)), shape).tocsr()
    K1 = sp.coo_matrix((np.concatenate(k1_vals), (rows, cols)), shape).tocsr()
    return M, K, K1


def _reduce(mat: sp.csr_matrix, dirichlet: np.ndarray,
            unit_diag: bool) -> sp.csr_matrix:
    """Zero Dirichlet rows and columns; optionally set unit diagonal."""
    out = mat.tolil(copy=True)
    idx = np.flatnonzero(dirichlet)
    out[idx, :] = 0.0
    out[:, idx] = 0.0
    if unit_diag:
        for k in idx:
            out[k, k] = 1.0
    return out.tocsr()


def _control_face_structure(mesh: StructuredMesh):
    """Face mass and corner-folding map for the control boundary.

    Returns (face_nodes, S_face, P) where P folds the hat functions of
    face nodes whose resolved tag is not Control (Dirichlet corners)
    into their neighbour along the face, so control dofs are exactly
    the Control-tagged nodes while the face measure stays exact.
    """
    tags = mesh.boundary_tags
    if mesh.dimension == 1:
        ctrl = mesh.control_face_nodes
        if ctrl.size == 0:
            return ctrl, None, None
        S_face = sp.identity(ctrl.size, format="csr")
        P = sp.identity(ctrl.size, format="csr")
        return ctrl, S_face, P

    face_nodes = mesh.control_face_nodes
    edges = mesh.control_face_edges
    if face_nodes.size == 0:
        return face_nodes, None, None
    pos = {int(n): i for i, n in enumerate(face_nodes)}
    m_f = face_nodes.size
    rows, cols, vals = [], [], []
    for n1, n2 in edges:
        h_e = np.linalg.norm(mesh.node_coords[n2] - mesh.node_coords[n1])
        i, j = pos[int(n1)], pos[int(n2)]
        rows += [i, i, j, j]
        cols += [i, j, i, j]
        vals += [h_e / 3.0, h_e / 6.0, h_e / 6.0, h_e / 3.0]
    S_face = sp.coo_matrix((vals, (rows, cols)), (m_f, m_f)).tocsr()

    is_ctrl = tags[face_nodes] == BoundaryTag.CONTROL
    ctrl_nodes = face_nodes[is_ctrl]
    if ctrl_nodes.size == 0:
        return ctrl_nodes, None, None
    cpos = {int(n): i for i, n in enumerate(ctrl_nodes)}
    # fold target: the control-tagged neighbour along a shared face edge
    fold = {}
    for n1, n2 in edges:
        for a, b in ((int(n1), int(n2)), (int(n2), int(n1))):
            if tags[a] != BoundaryTag.CONTROL and tags[b] == BoundaryTag.CONTROL:
                fold[a] = b
    prow, pcol = [], []
    for k, node in enumerate(face_nodes):
        node = int(node)
        target = node if is_ctrl[k] else fold.get(node)
        if target is None:
            raise ValueError(
                "control face node has no control-tagged neighbour; "
                "control segment too short")
        prow.append(cpos[target])
        pcol.append(k)
    P = sp.coo_matrix((np.ones(m_f), (prow, pcol)),
                      (ctrl_nodes.size, m_f)).tocsr()
    return ctrl_nodes, S_face, P


def boundary_mass(mesh: StructuredMesh) -> sp.csr_matrix:
    """Surface mass matrix of Gamma_C on the Control-tagged nodes.

    In 1D the control boundary is a point set and the counting measure
    is used (identity matrix).  In 2D Dirichlet corner hats are folded
    into the adjacent control node, so 1^T S 1 equals the exact length
    of the control face.
    """
    ctrl_nodes, S_face, P = _control_face_structure(mesh)
    if ctrl_nodes is None or ctrl_nodes.size == 0:
        raise ValueError("mesh has no Control-tagged boundary nodes")
    if mesh.dimension == 1:
        return S_face
    return (P @ S_face @ P.T).tocsr()


def assemble_operators(mesh: StructuredMesh, kappa, tau: float) -> StateOperators:
    """Assemble the state, control, mass and H1 operators.

    ``kappa`` is a constant or per-node conductivity; it must be
    strictly positive everywhere (uniform coercivity of A).
    """
    if not tau > 0:
        raise ValueError(f"time step must be positive, got {tau}")
    kappa_arr = np.asarray(kappa, dtype=float)
    if kappa_arr.ndim == 0:
        kappa_arr = np.full(mesh.n_nodes, float(kappa))
    if kappa_arr.shape != (mesh.n_nodes,):
        raise ValueError("kappa must be scalar or one value per node")
    if not np.all(kappa_arr > 0):
        raise ValueError("conductivity must be strictly positive everywhere "
                         "(coercivity of the state operator fails otherwise)")

    M_full, K_full, K1_full = _assemble_mass_stiffness(mesh, kappa_arr)
    dirichlet = mesh.boundary_tags == BoundaryTag.DIRICHLET
    lumped = np.asarray(M_full.sum(axis=1)).ravel()

    A = _reduce(M_full + tau * K_full, dirichlet, unit_diag=True)
    M = _reduce(M_full, dirichlet, unit_diag=False)
    H1 = _reduce(M_full + K1_full, dirichlet, unit_diag=False)
    mass_load = M_full.tolil(copy=True)
    mass_load[np.flatnonzero(dirichlet), :] = 0.0
    mass_load = mass_load.tocsr()

    ctrl_nodes, S_face, P = _control_face_structure(mesh)
    n = mesh.n_nodes
    if ctrl_nodes.size == 0:
        B = sp.csr_matrix((n, 0))
        S = None
        control_lumped = np.empty(0)
    else:
        if mesh.dimension == 1:
            S = S_face
            rows = ctrl_nodes
            B = sp.coo_matrix((np.full(ctrl_nodes.size, tau),
                               (rows, np.arange(ctrl_nodes.size))),
                              (n, ctrl_nodes.size)).tocsr()
        else:
            S = (P @ S_face @ P.T).tocsr()
            face_nodes = mesh.control_face_nodes
            E = sp.coo_matrix((np.ones(face_nodes.size),
                               (face_nodes, np.arange(face_nodes.size))),
                              (n, face_nodes.size)).tocsr()
            B_face = tau * (E @ S_face)
            B = (B_face @ P.T).tolil()
            B[np.flatnonzero(dirichlet), :] = 0.0
            B = B.tocsr()
        control_lumped = np.asarray(S.sum(axis=1)).ravel()

    return StateOperators(
        A=A, B=B, M=M, H1=H1, dirichlet_mask=dirichlet, tau=float(tau),
        kappa=kappa_arr, lumped_mass=lumped, mass_load=mass_load,
        control_nodes=ctrl_nodes.astype(np.int64), S=S,
        control_lumped=control_lumped, mesh=mesh,
    )


def h1_norm_sq(ops: StateOperators, w: np.ndarray) -> float:
    """Discrete squared H1 norm w^T (M + K_1) w (unit conductivity)."""
    w = np.asarray(w, dtype=float)
    if w.shape != (ops.n_nodes,):
        raise ValueError(f"field has shape {w.shape}, expected "
                         f"({ops.n_nodes},)")
    return float(w @ (ops.H1 @ w))
