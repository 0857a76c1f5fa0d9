import numpy as np
import pytest

from meltctrl.mesh import build_interval_mesh, build_rectangle_mesh
from meltctrl.semilag import VelocityField, advect, characteristic_feet

EX2_TAGS = {"left": "control", "right": "neumann",
            "bottom": "dirichlet", "top": "dirichlet"}


class TestCharacteristicFeet:
    def test_zero_velocity_identity(self):
        mesh = build_interval_mesh(4.0, 20, ("control", "dirichlet"))
        feet, frac = characteristic_feet(mesh, VelocityField.zero(1),
                                         t_n=0.5, tau=0.01)
        assert np.array_equal(feet, mesh.node_coords)
        assert frac == 0.0

    def test_example2_constant_shift(self):
        mesh = build_rectangle_mesh(2.0, 4.0, 10, 20, EX2_TAGS)
        v = VelocityField.constant((-0.5, 0.0))
        feet, frac = characteristic_feet(mesh, v, t_n=0.1, tau=0.1)
        interior = (mesh.node_coords[:, 0] + 0.05 <= 2.0)
        assert np.allclose(feet[interior, 0],
                           mesh.node_coords[interior, 0] + 0.05)
        assert np.allclose(feet[:, 1], mesh.node_coords[:, 1])
        assert frac > 0.0  # right-edge feet left the domain

    def test_clamp_at_boundary(self):
        mesh = build_interval_mesh(2.0, 100, ("control", "dirichlet"))
        v = VelocityField.constant((-0.5,))
        feet, frac = characteristic_feet(mesh, v, t_n=0.0, tau=0.1)
        node = np.argmin(np.abs(mesh.node_coords[:, 0] - 1.98))
        assert feet[node, 0] == 2.0
        assert frac > 0.0

    def test_rejects_bad_tau(self):
        mesh = build_interval_mesh(1.0, 4, ("neumann", "neumann"))
        with pytest.raises(ValueError):
            characteristic_feet(mesh, VelocityField.zero(1), 0.0, 0.0)


class TestAdvect:
    def test_identity_transport(self):
        mesh = build_interval_mesh(4.0, 25, ("control", "dirichlet"))
        rng = np.random.default_rng(0)
        y = rng.uniform(0, 3, mesh.n_nodes)
        xi = rng.uniform(0, 1, mesh.n_nodes)
        feet, frac = characteristic_feet(mesh, VelocityField.zero(1),
                                         0.0, 0.01)
        adv = advect(mesh, feet, y, xi, frac)
        assert np.allclose(adv.y_bar, y, atol=1e-14)
        assert np.allclose(adv.xi_bar, xi, atol=1e-14)

    def test_affine_fields_exact(self):
        # P1 interpolation reproduces affine fields at interior feet
        mesh = build_rectangle_mesh(2.0, 4.0, 8, 10, EX2_TAGS)
        coef = np.array([1.3, -0.2])
        y = 2.0 + mesh.node_coords @ coef
        v = VelocityField.constant((-0.5, 0.25))
        feet, frac = characteristic_feet(mesh, v, 0.0, 0.05)
        adv = advect(mesh, feet, y, np.zeros(mesh.n_nodes), frac)
        expected = 2.0 + feet @ coef  # direct evaluation oracle
        assert np.allclose(adv.y_bar, expected, atol=1e-12)

    def test_step_profile_stays_in_unit_interval(self):
        mesh = build_interval_mesh(4.0, 50, ("control", "dirichlet"))
        xi = np.where(mesh.node_coords[:, 0] > 1.7, 1.0, 0.0)
        v = VelocityField.constant((0.3,))
        feet, frac = characteristic_feet(mesh, v, 0.0, 0.03)
        adv = advect(mesh, feet, np.zeros(mesh.n_nodes), xi, frac)
        assert np.all(adv.xi_bar >= 0.0)
        assert np.all(adv.xi_bar <= 1.0)

    def test_interpolation_maximum_principle(self):
        mesh = build_rectangle_mesh(1.0, 1.0, 7, 9, EX2_TAGS)
        rng = np.random.default_rng(4)
        y = rng.uniform(-2, 5, mesh.n_nodes)
        v = VelocityField(lambda x, t: np.column_stack(
            [np.sin(7 * x[:, 1]), np.cos(5 * x[:, 0])]), "swirl")
        feet, frac = characteristic_feet(mesh, v, 0.2, 0.05)
        adv = advect(mesh, feet, y, np.zeros(mesh.n_nodes), frac)
        assert np.all(adv.y_bar >= y.min() - 1e-12)
        assert np.all(adv.y_bar <= y.max() + 1e-12)

    def test_large_cfl_number(self):
        # tau*|v|/h = 10: no restriction, bounds still hold
        mesh = build_interval_mesh(4.0, 100, ("control", "dirichlet"))
        h = 0.04
        v = VelocityField.constant((10 * h / 0.05,))
        rng = np.random.default_rng(9)
        y = rng.uniform(0, 1, mesh.n_nodes)
        feet, frac = characteristic_feet(mesh, v, 0.0, 0.05)
        adv = advect(mesh, feet, y, y, frac)
        assert np.all(adv.y_bar >= y.min() - 1e-12)
        assert np.all(adv.y_bar <= y.max() + 1e-12)

    def test_rejects_outside_feet(self):
        mesh = build_interval_mesh(1.0, 4, ("neumann", "neumann"))
        feet = np.array([[0.0], [0.5], [1.2], [0.7], [1.0]])
        with pytest.raises(ValueError):
            advect(mesh, feet, np.zeros(5), np.zeros(5))

    def test_deterministic(self):
        mesh = build_rectangle_mesh(2.0, 4.0, 6, 8, EX2_TAGS)
        rng = np.random.default_rng(1)
        y = rng.uniform(0, 2, mesh.n_nodes)
        xi = rng.uniform(0, 1, mesh.n_nodes)
        v = VelocityField.constant((-0.5, 0.0))
        feet, frac = characteristic_feet(mesh, v, 0.1, 0.1)
        a = advect(mesh, feet, y, xi, frac)
        b = advect(mesh, feet, y, xi, frac)
        assert np.array_equal(a.y_bar, b.y_bar)
        assert np.array_equal(a.xi_bar, b.xi_bar)
