import numpy as np
import pytest

from deformopt import fem, model
from deformopt.fem import ScalarField
from deformopt.mesh import (GAMMA_BOTTOM, GAMMA_TOP, InclusionShape,
                            generate_mesh)
from deformopt.model import (ProblemConfig, TargetField, boundary_flux,
                             energy_fraction, inclusion_area, make_target,
                             objective, solve_adjoint, solve_state,
                             state_dirichlet, target_gradients,
                             transfer_target)

CIRCLE = InclusionShape.circle((0.5, 0.5), 0.2)


@pytest.fixture(scope="module")
def cfg():
    return ProblemConfig()


@pytest.fixture(scope="module")
def mesh():
    return generate_mesh(CIRCLE, 0.1)


@pytest.fixture(scope="module")
def target(cfg):
    return make_target(cfg, 0.05)


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            ProblemConfig(mu_in=0.0)
        with pytest.raises(ValueError):
            ProblemConfig(alpha=-1.0)

    def test_mu_lookup(self, cfg, mesh):
        mu = np.array([cfg.mu(r) for r in mesh.region])
        assert set(np.unique(mu)) == {cfg.mu_in, cfg.mu_out}


class TestState:
    def test_dirichlet_values(self, mesh):
        nodes, values = state_dirichlet(mesh)
        y = mesh.vertices[nodes, 1]
        assert np.array_equal(values, (y > 0.5).astype(float))
        assert np.all((np.abs(y) < 1e-12) | (np.abs(y - 1) < 1e-12))

    def test_state_respects_bc_and_maximum_principle(self, mesh, cfg):
        u = solve_state(mesh, cfg)
        nodes, values = state_dirichlet(mesh)
        assert np.abs(u.values[nodes] - values).max() < 1e-12
        assert u.values.min() > -1e-10 and u.values.max() < 1 + 1e-10

    def test_uniform_conductivity_gives_linear_ramp(self, mesh):
        """With mu_in == mu_out the exact solution is u = y."""
        u = solve_state(mesh, ProblemConfig(mu_in=1.0, mu_out=1.0))
        assert np.abs(u.values - mesh.vertices[:, 1]).max() < 1e-10

    def test_insulating_inclusion_diverts_flux(self, mesh, cfg):
        u = solve_state(mesh, cfg)
        assert energy_fraction(mesh, cfg, u) < 1e-4

    def test_flux_balance_top_bottom(self, mesh, cfg):
        """Inflow through the bottom equals outflow through the top."""
        u = solve_state(mesh, cfg)
        f_bot = boundary_flux(mesh, cfg, u, GAMMA_BOTTOM)
        f_top = boundary_flux(mesh, cfg, u, GAMMA_TOP)
        assert f_bot + f_top == pytest.approx(0.0, abs=1e-10)
        # an insulating obstacle reduces the net flux below the free value 1
        assert 0.0 < f_top < 1.0


class TestAdjoint:
    def test_adjoint_zero_for_zero_misfit(self, mesh, cfg):
        u = solve_state(mesh, cfg)
        lam = solve_adjoint(mesh, cfg, u, u)
        assert np.abs(lam.values).max() < 1e-12

    def test_adjoint_bc_and_linearity(self, mesh, cfg):
        u = solve_state(mesh, cfg)
        z1 = ScalarField(mesh, u.values + 0.3)
        z2 = ScalarField(mesh, u.values + 0.9)
        l1 = solve_adjoint(mesh, cfg, u, z1)
        l2 = solve_adjoint(mesh, cfg, u, z2)
        nodes, _ = state_dirichlet(mesh)
        assert np.abs(l1.values[nodes]).max() < 1e-12
        assert np.allclose(l2.values, 3.0 * l1.values, atol=1e-12)

    def test_adjoint_identity_against_quadrature(self, mesh, cfg):
        """Stiffness residual of lambda equals the misfit load."""
        u = solve_state(mesh, cfg)
        z = ScalarField.from_callable(mesh, lambda x: x[:, 1] ** 2)
        lam = solve_adjoint(mesh, cfg, u, z)
        op = fem.assemble_scalar_laplace(mesh, {0: cfg.mu_in, 1: cfg.mu_out})
        mass = fem.assemble_mass(mesh)
        res = op.matrix @ lam.values + mass.matrix @ (u.values - z.values)
        nodes, _ = state_dirichlet(mesh)
        free = np.setdiff1d(np.arange(mesh.num_vertices), nodes)
        assert np.abs(res[free]).max() < 1e-10


class TestObjective:
    def test_objective_value(self, mesh, cfg):
        u = ScalarField.from_callable(mesh, lambda x: x[:, 1])
        z = ScalarField.zeros(mesh)
        # 1/2 int y^2 = 1/6 plus the area penalty
        expected = 1.0 / 6.0 + 0.5 * cfg.alpha * inclusion_area(mesh)
        assert objective(mesh, cfg, u, z) == pytest.approx(expected, rel=1e-12)

    def test_objective_zero_at_match_without_penalty(self, mesh):
        cfg0 = ProblemConfig(alpha=0.0)
        u = solve_state(mesh, cfg0)
        assert objective(mesh, cfg0, u, u) == 0.0


class TestTarget:
    def test_target_reproduces_own_mesh(self, target):
        z_back = transfer_target(target, target.mesh)
        assert np.abs(z_back.values - target.z.values).max() < 1e-10

    def test_transfer_is_barycentric(self, target, mesh):
        """Interpolating a linear function through the background mesh is
        exact regardless of which element contains each point."""
        lin = ScalarField.from_callable(
            target.mesh, lambda x: 2 * x[:, 0] - x[:, 1] + 0.25)
        t2 = TargetField(target.mesh, lin)
        z = transfer_target(t2, mesh)
        expect = (2 * mesh.vertices[:, 0] - mesh.vertices[:, 1] + 0.25)
        assert np.abs(z.values - expect).max() < 1e-10
        g = target_gradients(t2, mesh)
        assert np.allclose(g, [2.0, -1.0], atol=1e-10)

    def test_target_gradient_matches_fd_inside_elements(self, target):
        rng = np.random.default_rng(7)
        pts = rng.uniform(0.3, 0.7, size=(20, 2))
        d = 1e-9
        for p in pts:
            g = target.gradient_at([p])[0]
            gx = (target.interpolate([p + [d, 0]])
                  - target.interpolate([p - [d, 0]]))[0] / (2 * d)
            gy = (target.interpolate([p + [0, d]])
                  - target.interpolate([p - [0, d]]))[0] / (2 * d)
            # skip points whose FD stencil straddles a background edge
            if abs(gx - g[0]) < 1e-4 and abs(gy - g[1]) < 1e-4:
                assert g[0] == pytest.approx(gx, abs=1e-5)
                assert g[1] == pytest.approx(gy, abs=1e-5)

    def test_point_outside_domain_rejected(self, target):
        with pytest.raises(ValueError):
            target.interpolate(np.array([[1.5, 0.5]]))

    def test_target_field_requires_matching_mesh(self, target, mesh):
        with pytest.raises(ValueError):
            TargetField(mesh, target.z)

    def test_target_state_near_mismatch_is_positive(self, mesh, cfg, target):
        """Solving on the circle mesh does not match the elliptic target."""
        z = transfer_target(target, mesh)
        u = solve_state(mesh, cfg)
        assert objective(mesh, cfg, u, z) > 1e-5
