import math

import numpy as np
import pytest

from ldplab.model import EnvironmentSpec, ModelError, PotentialSpec
from ldplab.pde import (SpaceEnvGrid, ThetaGrid, feynman_kac_check, gaussian_density, initial_density,
                        semigroup_U, solve_backward_killed, solve_mckean_vlasov)

from conftest import interacting_spec, ou_spec


def shifted_ou():
    return ou_spec(center=1.0, variance=0.1)


def ou_moment_error(n, steps):
    spec = shifted_ou()
    th, sp = ThetaGrid(6.0, n), SpaceEnvGrid.from_spec(spec, 2, 1)
    flow = solve_mckean_vlasov(spec, th, sp, initial_density(spec, th, sp), steps)
    m, v = flow.moments()
    t = flow.times
    em = np.max(np.abs(m - np.exp(-t)))
    ev = np.max(np.abs(v - (0.1 * np.exp(-2 * t) + 0.5 * (1 - np.exp(-2 * t)))))
    return max(em, ev), flow


def test_grid_geometry():
    g = ThetaGrid(6.0, 256)
    assert g.points.size == 256 and g.edges.size == 257
    assert g.h == pytest.approx(12 / 256)
    k = ThetaGrid(1.0, 99, "absorbing")
    assert k.points[0] == pytest.approx(-1 + 2 / 100) and k.points[-1] == pytest.approx(1 - 2 / 100)
    with pytest.raises(ModelError):
        ThetaGrid(1.0, 8)


def test_environment_weights_sum_to_one():
    spec = interacting_spec()
    sp = SpaceEnvGrid.from_spec(spec, 8, 4)
    np.testing.assert_allclose(sp.weights.sum(axis=1), 1.0, atol=1e-14)


def test_ou_moments_follow_the_moment_equations():
    err, flow = ou_moment_error(256, 512)
    assert err < 1e-2
    assert np.max(np.abs(flow.masses() - 1)) < 1e-8


def test_refinement_reduces_moment_error():
    coarse, _ = ou_moment_error(128, 256)
    fine, _ = ou_moment_error(256, 512)
    assert coarse / fine >= 1.5


def test_stationary_density_stays_put():
    spec = ou_spec()
    th, sp = ThetaGrid(6.0, 256), SpaceEnvGrid.from_spec(spec, 2, 1)
    xi0 = gaussian_density(th, np.zeros((2, 1)), 0.5)
    flow = solve_mckean_vlasov(spec, th, sp, xi0, 256)
    drift = th.h * np.abs(flow.values - xi0[None]).sum(axis=-1)
    assert drift.max() <= 1e-3


def test_interacting_mass_and_sign(mv_solution):
    _, flow = mv_solution
    assert np.max(np.abs(flow.masses() - 1)) < 1e-8
    assert flow.values.min() >= 0
    assert flow.diagnostics["clipped"] == 0


def test_unnormalized_start_rejected():
    spec = ou_spec()
    th, sp = ThetaGrid(6.0, 64), SpaceEnvGrid.from_spec(spec, 2, 1)
    with pytest.raises(ModelError):
        solve_mckean_vlasov(spec, th, sp, 2 * initial_density(spec, th, sp), 4)


def test_invalid_spec_rejected():
    spec = ou_spec(variance=0.6)
    th, sp = ThetaGrid(6.0, 64), SpaceEnvGrid.from_spec(spec, 2, 1)
    with pytest.raises(ModelError):
        solve_mckean_vlasov(spec, th, sp, initial_density(spec, th, sp), 4)


def test_semigroup_preserves_constants():
    g = semigroup_U(ou_spec(), None, 0.2, 1.0, lambda x: np.ones_like(x), 0.0, [0.0], ThetaGrid(6.0, 256))
    assert np.max(np.abs(g.values - 1)) <= 1e-8


def test_semigroup_identity_at_equal_times():
    th = ThetaGrid(6.0, 128)
    g = semigroup_U(ou_spec(), None, 0.5, 0.5, np.sin, 0.0, [0.0], th)
    assert np.array_equal(g.values, np.sin(th.points))


def test_semigroup_propagates_the_ou_mean():
    th = ThetaGrid(6.0, 256)
    g = semigroup_U(ou_spec(), None, 0.0, 1.0, lambda x: x, 0.0, [0.0], th)
    central = np.abs(th.points) < 3
    assert np.max(np.abs(g.values - th.points * math.exp(-1))[central]) <= 1e-3
    assert not g.flagged


def test_semigroup_composition(mv_solution):
    spec, flow = mv_solution
    th = ThetaGrid(6.0, 256)
    f = lambda x: np.tanh(x)  # noqa: E731
    direct = semigroup_U(spec, flow, 0.0, 1.0, f, 0.25, [0.1], th, dt_max=1e-3)
    inner = semigroup_U(spec, flow, 0.5, 1.0, f, 0.25, [0.1], th, dt_max=1e-3)
    outer = semigroup_U(spec, flow, 0.0, 0.5, inner, 0.25, [0.1], th, dt_max=1e-3)
    one_step = semigroup_U(spec, flow, 0.0, 1.0, f, 0.25, [0.1], th, dt_max=2e-3)
    step_err = np.max(np.abs(one_step.values - direct.values))
    assert np.max(np.abs(outer.values - direct.values)) <= max(2 * step_err, 1e-12)


def test_semigroup_maximum_principle(mv_solution):
    spec, flow = mv_solution
    th = ThetaGrid(6.0, 256)
    g = semigroup_U(spec, flow, 0.0, 1.0, lambda x: np.cos(3 * x), 0.5, [-0.1], th)
    assert g.values.min() >= -1 - 1e-12 and g.values.max() <= 1 + 1e-12


def test_semigroup_rejects_reversed_times():
    with pytest.raises(ValueError):
        semigroup_U(ou_spec(), None, 0.6, 0.5, np.sin, 0.0, [0.0], ThetaGrid(6.0, 64))


def test_killed_zero_terminal():
    sol = solve_backward_killed(ou_spec(), None, 2.0, lambda x: 0 * x, 0.0, [0.0], 0.5)
    assert np.all(sol.values == 0)


def brownian_spec():
    spec = ou_spec()
    return type(spec)(spec.lattice, PotentialSpec((0, 0, 1e-12)), spec.kernel, spec.environment, spec.initial)


def test_killed_brownian_survival_matches_series():
    R, t = 1.0, 0.5
    sol = solve_backward_killed(brownian_spec(), None, R, lambda x: np.ones_like(x), 0.0, [0.0], t)
    series = sum(4 / math.pi * (-1) ** k / (2 * k + 1) * math.exp(-(2 * k + 1) ** 2 * math.pi ** 2 * t / (8 * R * R))
                 for k in range(50))
    assert abs(sol(0.0) - series) <= 1e-3


def test_killed_maximum_principle(mv_solution):
    spec, flow = mv_solution
    bump = lambda x: np.exp(-x ** 2) * (1 - (x / 3) ** 2)  # noqa: E731
    sol = solve_backward_killed(spec, flow, 3.0, bump, 0.25, [0.0], 1.0)
    assert sol.values.min() >= -1e-8 and sol.values.max() <= 1 + 1e-8


def test_killed_values_increase_with_radius():
    spec = ou_spec()
    f = lambda x: np.exp(-x ** 2)  # noqa: E731
    # a common spacing keeps the discretization error identical across radii
    grids = {R: ThetaGrid(R, int(round(2 * R / 0.02)) - 1, "absorbing") for R in (1.5, 2.5, 4.0, 6.0)}
    vals = [solve_backward_killed(spec, None, R, f, 0.0, [0.0], 1.0, grid=g)(0.5) for R, g in grids.items()]
    assert all(a <= b + 1e-12 for a, b in zip(vals, vals[1:]))
    free = semigroup_U(spec, None, 0.0, 1.0, f, 0.0, [0.0], ThetaGrid(6.0, 400))
    assert abs(vals[-1] - np.interp(0.5, free.theta, free.values)) < 1e-3


def test_feynman_kac_zero_terminal():
    r = feynman_kac_check(ou_spec(), None, 2.0, lambda x: 0 * x, 0.0, [0.0], 0.5, 1000, seed=1)
    assert r.pde_value == 0 and r.mc_value == 0


def test_feynman_kac_agrees_for_ou():
    bump = lambda x: np.exp(-2 * x ** 2)  # noqa: E731
    r = feynman_kac_check(ou_spec(), None, 4.0, bump, 0.0, [0.0], 0.5, 100_000, seed=3, theta0=0.5)
    assert r.agrees, r


def test_grid_checks():
    spec = ou_spec()
    with pytest.raises(ModelError):
        solve_backward_killed(spec, None, 2.0, np.cos, 0.0, [0.0], 0.5, grid=ThetaGrid(2.0, 64))
    th = ThetaGrid(2.0, 64, "absorbing")
    sp = SpaceEnvGrid.from_spec(spec, 2, 1)
    with pytest.raises(ModelError):
        solve_mckean_vlasov(spec, th, sp, np.ones((2, 1, 64)), 4)


def test_environment_blocks_see_their_marks():
    env = EnvironmentSpec("discrete", atoms=((-0.5,), (0.5,)), probs=(0.5, 0.5), low=(-0.5,), high=(0.5,))
    spec = ou_spec(env=env)
    th, sp = ThetaGrid(6.0, 256), SpaceEnvGrid.from_spec(spec, 2, 2)
    flow = solve_mckean_vlasov(spec, th, sp, initial_density(spec, th, sp), 128)
    last = flow.values[-1, 0]
    means = th.h * last @ th.points
    # psi = theta^2/2 + w theta: each block relaxes toward -w
    np.testing.assert_allclose(means, -sp.nodes[0, :, 0] * (1 - math.exp(-1)), atol=2e-3)
