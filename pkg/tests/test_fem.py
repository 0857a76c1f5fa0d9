import numpy as np
import pytest
import scipy.sparse.linalg as spla

from meltctrl.fem import assemble_operators, boundary_mass, h1_norm_sq
from meltctrl.mesh import BoundaryTag, build_interval_mesh, \
    build_rectangle_mesh


def neumann_interval(x_max, n_cells):
    return build_interval_mesh(x_max, n_cells, ("neumann", "neumann"))


def hand_1d_matrices(h, n_cells):
    """Standard P1 tridiagonal mass/stiffness, assembled by hand."""
    n = n_cells + 1
    M = np.zeros((n, n))
    K = np.zeros((n, n))
    m_loc = h / 6.0 * np.array([[2.0, 1.0], [1.0, 2.0]])
    k_loc = 1.0 / h * np.array([[1.0, -1.0], [-1.0, 1.0]])
    for e in range(n_cells):
        idx = np.ix_([e, e + 1], [e, e + 1])
        M[idx] += m_loc
        K[idx] += k_loc
    return M, K


class TestAssembly:
    def test_1d_two_cells_against_hand_assembly(self):
        mesh = neumann_interval(1.0, 2)
        ops = assemble_operators(mesh, kappa=1.0, tau=0.01)
        M, K = hand_1d_matrices(0.5, 2)
        assert np.allclose(ops.A.toarray(), M + 0.01 * K, atol=1e-15)
        assert np.allclose(ops.M.toarray(), M, atol=1e-15)
        assert np.allclose(ops.H1.toarray(), M + K, atol=1e-15)

    def test_stiffness_annihilates_constants(self):
        mesh = neumann_interval(2.0, 7)
        ops = assemble_operators(mesh, kappa=1.3, tau=0.05)
        one = np.ones(mesh.n_nodes)
        assert np.allclose(ops.A @ one, ops.M @ one, atol=1e-14)

    def test_rejects_nonpositive_kappa(self):
        mesh = neumann_interval(1.0, 4)
        with pytest.raises(ValueError):
            assemble_operators(mesh, kappa=0.0, tau=0.01)
        kappa = np.ones(mesh.n_nodes)
        kappa[2] = -0.5
        with pytest.raises(ValueError):
            assemble_operators(mesh, kappa=kappa, tau=0.01)
        with pytest.raises(ValueError):
            assemble_operators(mesh, kappa=1.0, tau=0.0)

    def test_dirichlet_reduction(self):
        mesh = build_interval_mesh(1.0, 4, ("control", "dirichlet"))
        ops = assemble_operators(mesh, kappa=1.0, tau=0.01)
        A = ops.A.toarray()
        assert A[-1, -1] == 1.0
        assert np.all(A[-1, :-1] == 0.0)
        assert np.all(A[:-1, -1] == 0.0)
        assert np.all(ops.M.toarray()[-1] == 0.0)

    def test_2d_mass_and_stiffness_exactness(self):
        tags = {"left": "neumann", "right": "neumann",
                "bottom": "neumann", "top": "neumann"}
        mesh = build_rectangle_mesh(2.0, 4.0, 5, 8, tags)
        ops = assemble_operators(mesh, kappa=1.0, tau=0.1)
        one = np.ones(mesh.n_nodes)
        assert abs(one @ (ops.M @ one) - 8.0) < 1e-12 * 8.0
        # stiffness is exact on affine fields: int |grad w|^2 = |b|^2*area
        K = (ops.H1 - ops.M).toarray()
        coef = np.array([0.8, -0.3])
        w = mesh.node_coords @ coef
        assert abs(w @ (K @ w) - 8.0 * coef @ coef) < 1e-11
        assert np.allclose(K @ one, 0.0, atol=1e-13)

    def test_coercivity_quadratic_form(self):
        mesh = build_interval_mesh(4.0, 25, ("control", "dirichlet"))
        kappa = 0.7
        tau = 0.03
        ops = assemble_operators(mesh, kappa=kappa, tau=tau)
        rng = np.random.default_rng(3)
        for _ in range(20):
            phi = np.where(ops.free_mask, rng.standard_normal(mesh.n_nodes),
                           0.0)
            qa = phi @ (ops.A @ phi)
            qh = phi @ (ops.H1 @ phi)
            assert qa >= min(1.0, tau * kappa) * qh * (1 - 1e-12)

    def test_symmetry_and_spd(self):
        tags = {"left": "control", "right": "neumann",
                "bottom": "dirichlet", "top": "dirichlet"}
        mesh = build_rectangle_mesh(2.0, 4.0, 8, 12, tags)
        ops = assemble_operators(mesh, kappa=1.0, tau=0.1)
        for mat in (ops.A, ops.M, ops.H1):
            assert abs(mat - mat.T).max() <= 1e-14 * abs(mat).max()
        # positive definiteness via factorization success
        np.linalg.cholesky(ops.A.toarray())

    def test_discrete_green_identity(self):
        mesh = build_interval_mesh(1.0, 12, ("dirichlet", "control"))
        ops = assemble_operators(mesh, kappa=1.0, tau=0.02)
        rng = np.random.default_rng(5)
        phi = np.where(ops.free_mask, rng.standard_normal(mesh.n_nodes), 0.0)
        psi = np.where(ops.free_mask, rng.standard_normal(mesh.n_nodes), 0.0)
        assert abs(psi @ (ops.A @ phi) - phi @ (ops.A @ psi)) < 1e-13

    def test_deterministic_assembly(self):
        mesh = build_rectangle_mesh(2.0, 4.0, 6, 9,
                                    {"left": "control", "right": "neumann",
                                     "bottom": "dirichlet",
                                     "top": "dirichlet"})
        a1 = assemble_operators(mesh, 1.0, 0.1).A
        a2 = assemble_operators(mesh, 1.0, 0.1).A
        assert (a1 != a2).nnz == 0


class TestControlOperator:
    def test_1d_point_boundary(self):
        mesh = build_interval_mesh(4.0, 10, ("control", "dirichlet"))
        ops = assemble_operators(mesh, kappa=1.0, tau=0.01)
        S = boundary_mass(mesh)
        assert S.shape == (1, 1)
        assert S[0, 0] == 1.0
        # B carries the time-step factor at the control node
        assert ops.B.shape == (mesh.n_nodes, 1)
        assert ops.B[0, 0] == pytest.approx(0.01)

    def test_example2_face_measure(self):
        mesh = build_rectangle_mesh(2.0, 4.0, 50, 100,
                                    {"left": "control", "right": "neumann",
                                     "bottom": "dirichlet",
                                     "top": "dirichlet"})
        S = boundary_mass(mesh)
        one = np.ones(S.shape[0])
        assert abs(one @ (S @ one) - 4.0) <= 1e-12 * 4.0

    def test_two_element_control_edge_hand_assembly(self):
        # control face of 2 edges with Neumann neighbours: plain 1D P1 mass
        h = 0.25
        tags = {"left": "neumann", "right": "neumann",
                "bottom": "control", "top": "dirichlet"}
        mesh = build_rectangle_mesh(2 * h, 1.0, 2, 2, tags)
        S = boundary_mass(mesh).toarray()
        hand = h / 6.0 * np.array([[2.0, 1.0, 0.0],
                                   [1.0, 4.0, 1.0],
                                   [0.0, 1.0, 2.0]])
        assert np.allclose(S, hand, atol=1e-15)

    def test_boundary_mass_spd(self):
        mesh = build_rectangle_mesh(2.0, 4.0, 10, 20,
                                    {"left": "control", "right": "neumann",
                                     "bottom": "dirichlet",
                                     "top": "dirichlet"})
        S = boundary_mass(mesh).toarray()
        assert np.allclose(S, S.T)
        np.linalg.cholesky(S)

    def test_empty_control_rejected(self):
        mesh = neumann_interval(1.0, 4)
        with pytest.raises(ValueError):
            boundary_mass(mesh)

    def test_b_columns_only_on_control_nodes(self):
        mesh = build_rectangle_mesh(2.0, 4.0, 8, 16,
                                    {"left": "control", "right": "neumann",
                                     "bottom": "dirichlet",
                                     "top": "dirichlet"})
        ops = assemble_operators(mesh, kappa=1.0, tau=0.1)
        assert ops.B.shape[1] == ops.control_nodes.size
        assert np.all(mesh.boundary_tags[ops.control_nodes]
                      == BoundaryTag.CONTROL)

    def test_b_column_sums_neumann_adjacent(self):
        # control segment not touching Dirichlet: load of u=1 integrates
        # to tau * measure(Gamma_C) exactly
        tags = {"left": "neumann", "right": "neumann",
                "bottom": "control", "top": "dirichlet"}
        mesh = build_rectangle_mesh(1.5, 1.0, 6, 4, tags)
        tau = 0.07
        ops = assemble_operators(mesh, kappa=1.0, tau=tau)
        load = ops.B @ np.ones(ops.n_controls)
        assert abs(load.sum() - tau * 1.5) < 1e-13

    def test_b_column_sums_1d(self):
        mesh = build_interval_mesh(4.0, 10, ("control", "dirichlet"))
        ops = assemble_operators(mesh, kappa=1.0, tau=0.01)
        load = ops.B @ np.ones(1)
        assert abs(load.sum() - 0.01) < 1e-16


class TestH1Norm:
    def test_zero_field(self):
        mesh = neumann_interval(1.0, 8)
        ops = assemble_operators(mesh, 1.0, 0.01)
        assert h1_norm_sq(ops, np.zeros(mesh.n_nodes)) == 0.0

    def test_linear_field_analytic_value(self):
        # w = x on (0,1): int x^2 + int 1 = 4/3, exact for P1 at any h
        for n_cells in (16, 64):
            mesh = build_interval_mesh(1.0, n_cells,
                                       ("dirichlet", "neumann"))
            ops = assemble_operators(mesh, 1.0, 0.01)
            w = mesh.node_coords[:, 0]
            err = abs(h1_norm_sq(ops, w) - 4.0 / 3.0)
            assert err <= 1e-3 * (1.0 / n_cells) ** 2  # O(h^2) bound

    def test_constant_on_all_neumann(self):
        mesh = neumann_interval(4.0, 20)
        ops = assemble_operators(mesh, 1.0, 0.01)
        w = np.full(mesh.n_nodes, 2.5)
        assert abs(h1_norm_sq(ops, w) - 2.5 ** 2 * 4.0) < 1e-12

    def test_dimension_mismatch(self):
        mesh = neumann_interval(1.0, 4)
        ops = assemble_operators(mesh, 1.0, 0.01)
        with pytest.raises(ValueError):
            h1_norm_sq(ops, np.zeros(3))


def test_lumped_mass_row_sums():
    mesh = build_interval_mesh(4.0, 40, ("control", "dirichlet"))
    ops = assemble_operators(mesh, 1.0, 0.01)
    assert abs(ops.lumped_mass.sum() - 4.0) < 1e-12
    # load operator keeps full columns: constant data stays exact
    one = np.ones(mesh.n_nodes)
    load = ops.advected_load(one, np.zeros(mesh.n_nodes))
    free = ops.free_mask
    assert np.allclose(load[free], ops.lumped_mass[free])
    assert np.all(load[~free] == 0.0)
