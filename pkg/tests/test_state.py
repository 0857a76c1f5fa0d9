import numpy as np
import pytest

from meltctrl.errors import SolverError
from meltctrl.fem import assemble_operators
from meltctrl.mesh import build_interval_mesh
from meltctrl.semilag import AdvectedPair
from meltctrl.state import (
    check_maximum_principle,
    heaviside_reg,
    random_admissible_instance,
    solve_state,
    solve_state_enumerate,
    solve_state_regularized,
)


def make_ops(n_cells=20, x_max=4.0, tau=0.01, kappa=1.0,
             tags=("control", "dirichlet")):
    mesh = build_interval_mesh(x_max, n_cells, tags)
    return assemble_operators(mesh, kappa, tau)


def still_pair(y, xi):
    return AdvectedPair(y_bar=np.asarray(y, float),
                        xi_bar=np.asarray(xi, float), clamped_fraction=0.0)


class TestTrivialCases:
    def test_frozen_at_melting_point(self):
        # all solid, no flux: nothing happens
        ops = make_ops()
        n = ops.n_nodes
        adv = still_pair(np.zeros(n), np.ones(n))
        sol = solve_state(ops, np.zeros(1), adv)
        assert np.allclose(sol.y, 0.0, atol=1e-14)
        assert np.allclose(sol.xi, 1.0, atol=1e-12)
        assert sol.complementarity_residual <= 1e-14

    def test_all_zero(self):
        ops = make_ops()
        n = ops.n_nodes
        adv = still_pair(np.zeros(n), np.zeros(n))
        sol = solve_state(ops, np.zeros(1), adv)
        assert np.allclose(sol.y, 0.0, atol=1e-14)
        assert np.allclose(sol.xi, 0.0, atol=1e-14)

    def test_sign_precondition_errors_name_field(self):
        ops = make_ops()
        n = ops.n_nodes
        bad_u = np.array([-0.5])
        with pytest.raises(ValueError, match="control u"):
            solve_state(ops, bad_u, still_pair(np.zeros(n), np.ones(n)))
        with pytest.raises(ValueError, match="y_bar"):
            solve_state(ops, np.zeros(1),
                        still_pair(np.full(n, -0.1), np.ones(n)))
        with pytest.raises(ValueError, match="xi_bar"):
            solve_state(ops, np.zeros(1),
                        still_pair(np.zeros(n), np.full(n, 1.5)))


class TestOracleEquivalence:
    def test_matches_enumeration_on_random_instances(self):
        rng = np.random.default_rng(42)
        for _ in range(40):
            ops, u, adv = random_admissible_instance(rng, max_free_nodes=9)
            got = solve_state(ops, u, adv)
            ref = solve_state_enumerate(ops, u, adv)
            assert np.max(np.abs(got.y - ref.y)) <= 1e-10
            assert np.max(np.abs(got.xi - ref.xi)) <= 1e-10

    def test_complementarity_nodewise(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            ops, u, adv = random_admissible_instance(rng, max_free_nodes=10)
            sol = solve_state(ops, u, adv)
            worst = np.max(np.minimum(sol.y, sol.xi))
            assert worst <= 1e-10 * max(1.0, np.max(np.abs(sol.y)))

    def test_solution_bounds(self):
        rng = np.random.default_rng(10)
        for _ in range(25):
            ops, u, adv = random_admissible_instance(rng)
            sol = solve_state(ops, u, adv)
            assert check_maximum_principle(sol).passed


class TestHeatingMelts:
    def test_flux_melts_from_left(self):
        ops = make_ops(n_cells=50)
        n = ops.n_nodes
        adv = still_pair(np.zeros(n), np.ones(n))
        sol = solve_state(ops, np.array([5.0]), adv)
        assert sol.y[0] > 0.0           # heated boundary warms up
        assert sol.xi[0] < 1.0          # and starts melting
        assert np.all(sol.y >= -1e-14)
        assert check_maximum_principle(sol).passed

    def test_monotone_in_control(self):
        # empirical monotonicity (not paper-claimed): more flux, more heat
        ops = make_ops(n_cells=30)
        n = ops.n_nodes
        rng = np.random.default_rng(3)
        xi_prev = rng.uniform(0, 1, n)
        y_prev = rng.uniform(0, 0.5, n)
        y_prev[ops.dirichlet_mask] = 0.0
        adv = still_pair(y_prev, xi_prev)
        y_small = solve_state(ops, np.array([1.0]), adv).y
        y_large = solve_state(ops, np.array([2.0]), adv).y
        assert np.all(y_large >= y_small - 1e-12)


class TestRegularizedSolver:
    def test_ramp_values(self):
        eps = 0.3
        assert heaviside_reg(np.array([-1.0]), eps)[0] == 1.0
        assert heaviside_reg(np.array([0.0]), eps)[0] == 1.0
        assert heaviside_reg(np.array([eps]), eps)[0] == 0.0
        assert heaviside_reg(np.array([eps / 2]), eps)[0] == 0.5

    def test_trivial_fixed_point(self):
        ops = make_ops()
        n = ops.n_nodes
        adv = still_pair(np.zeros(n), np.ones(n))
        sol = solve_state_regularized(ops, np.zeros(1), adv, epsilon=1e-2)
        assert np.allclose(sol.y, 0.0, atol=1e-9)
        assert np.allclose(sol.xi, 1.0, atol=1e-9)

    def test_epsilon_sweep_converges_to_exact(self):
        ops = make_ops(n_cells=40)
        n = ops.n_nodes
        x = np.linspace(0, 4, n)
        xi_prev = np.where(x > 1.0, 1.0, 0.0)
        y_prev = np.maximum(1.0 - x, 0.0)
        y_prev[ops.dirichlet_mask] = 0.0
        adv = still_pair(y_prev, xi_prev)
        u = np.array([2.0])
        exact = solve_state(ops, u, adv)
        gaps = []
        for eps in (1e-2, 1e-3, 1e-4):
            reg = solve_state_regularized(ops, u, adv, epsilon=eps)
            gaps.append(np.linalg.norm(reg.y - exact.y))
        assert gaps[0] >= gaps[1] >= gaps[2]
        assert gaps[2] <= 1e-3 * np.linalg.norm(exact.y)

    def test_rejects_bad_epsilon(self):
        ops = make_ops()
        n = ops.n_nodes
        with pytest.raises(ValueError):
            solve_state_regularized(ops, np.zeros(1),
                                    still_pair(np.zeros(n), np.ones(n)),
                                    epsilon=0.0)

    def test_stagnation_raises_with_history(self):
        ops = make_ops(n_cells=30)
        n = ops.n_nodes
        adv = still_pair(np.linspace(0, 1, n)[::-1].copy(), np.ones(n))
        with pytest.raises(SolverError) as exc_info:
            solve_state_regularized(ops, np.array([3.0]), adv,
                                    epsilon=1e-3, max_iter=3)
        assert exc_info.value.history


class TestMaxPrincipleCheck:
    def test_passes_on_solver_output(self):
        rng = np.random.default_rng(1)
        ops, u, adv = random_admissible_instance(rng)
        sol = solve_state(ops, u, adv)
        report = check_maximum_principle(sol)
        assert report.passed

    def test_flags_constructed_violation(self):
        rng = np.random.default_rng(2)
        ops, u, adv = random_admissible_instance(rng)
        sol = solve_state(ops, u, adv)
        y_bad = sol.y.copy()
        y_bad[3] = -1e-3
        bad = type(sol)(y=y_bad, xi=sol.xi.copy(),
                        complementarity_residual=0.0, stats=sol.stats)
        report = check_maximum_principle(bad)
        assert not report.passed
        assert report.worst_y_node == 3
        assert report.worst_y == pytest.approx(-1e-3)


class TestFallbackSolver:
    def test_projected_sor_agrees_with_newton(self):
        from meltctrl.state import _projected_sor, _rhs_vector
        rng = np.random.default_rng(11)
        for _ in range(10):
            ops, u, adv = random_admissible_instance(rng, max_free_nodes=8)
            free = ops.free_mask
            a_ff = ops.A[free][:, free].tocsc()
            b_f = _rhs_vector(ops, u, adv)[free]
            y_sor, res, _ = _projected_sor(a_ff, b_f, np.zeros(b_f.size),
                                           tol=1e-12, max_sweeps=5000)
            ref = solve_state(ops, u, adv)
            assert np.max(np.abs(y_sor - ref.y[free])) <= 1e-9
