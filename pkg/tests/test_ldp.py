import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ldplab.ldp import (ControlledSpec, ResidualCoeffs, TestBasis, _FlowPairings, h_recovery, initial_entropy,
                        minus_one_norm_sq, rate_I_controlled, rate_S, rate_S2_lower_bound, rate_S_TW, rate_via_h,
                        relative_entropy_gaussian, relative_entropy_grid, residual_coeffs, sanov_rate, smooth_cutoff)
from ldplab.model import EnvironmentSpec
from ldplab.pde import (GridDensityPath, GridSlice, SpaceEnvGrid, ThetaGrid, gaussian_density, gaussian_flow,
                        initial_density, solve_mckean_vlasov)

from conftest import CONTROLLED_OU_EXACT, interacting_spec, ou_spec


def bernoulli_entropy(q, p):
    return q * math.log(q / p) + (1 - q) * math.log((1 - q) / (1 - p))


def gaussian_slope_coeffs(k_theta):
    """Residual d/dtheta pi of a standard Gaussian against the spin basis; norm -> 1/2."""
    th = ThetaGrid(8.0, 1024)
    f, f1, _ = TestBasis(ktheta=k_theta, scale=1.0).theta_functions(th)
    pi = np.exp(-th.points ** 2 / 2) / math.sqrt(2 * math.pi)
    w = th.h * pi
    return ResidualCoeffs(-(f1 @ w), (f1 * w) @ f1.T)


# --- norm ------------------------------------------------------------------------------------

def test_zero_residual_has_zero_norm():
    ev = minus_one_norm_sq(ResidualCoeffs(np.zeros(3), np.eye(3)))
    assert ev.value == 0 and ev.in_range


def test_gaussian_slope_norm_converges_to_half():
    values = [minus_one_norm_sq(gaussian_slope_coeffs(k)).value for k in (2, 4, 8, 12)]
    assert all(a <= b + 1e-12 for a, b in zip(values, values[1:]))
    assert abs(values[-1] - 0.5) <= 1e-3


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-5, 5))
def test_norm_is_quadratic_in_the_residual(seed, c):
    g = np.random.default_rng(seed)
    B = g.normal(size=(6, 6))
    rc = ResidualCoeffs(g.normal(size=6), B @ B.T + np.eye(6))
    base = minus_one_norm_sq(rc).value
    scaled = minus_one_norm_sq(ResidualCoeffs(c * rc.a, rc.M)).value
    assert scaled == pytest.approx(c * c * base, rel=1e-9, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 8), st.integers(0, 4))
def test_norm_equals_half_pseudo_inverse_form(seed, n, deficit):
    g = np.random.default_rng(seed)
    r = max(1, n - deficit)
    B = g.normal(size=(n, r))
    M = B @ B.T
    a = M @ g.normal(size=n)
    ev = minus_one_norm_sq(ResidualCoeffs(a, M))
    assert ev.in_range
    assert abs(ev.rayleigh - ev.quadratic) <= 1e-9 * max(1, ev.value)
    assert ev.value == pytest.approx(0.5 * a @ np.linalg.pinv(M, rcond=1e-10) @ a, rel=1e-6)


def test_residual_outside_the_range_is_infinite():
    M = np.diag([1.0, 0.0])
    ev = minus_one_norm_sq(ResidualCoeffs(np.array([1.0, 1.0]), M))
    assert ev.value == math.inf and not ev.in_range


def test_larger_basis_never_lowers_the_norm(controlled_ou):
    spec, flow = controlled_ou
    small = residual_coeffs(flow, 40, TestBasis.full(flow.space, 4), spec)
    large = residual_coeffs(flow, 40, TestBasis.full(flow.space, 8), spec)
    assert minus_one_norm_sq(small).value <= minus_one_norm_sq(large).value + 1e-12


def test_cutoff_and_derivatives():
    th = np.linspace(-6, 6, 2001)
    chi, d1, d2 = smooth_cutoff(th, 4.5, 5.4)
    assert np.all(chi[np.abs(th) <= 4.5] == 1) and np.all(chi[np.abs(th) >= 5.4] == 0)
    np.testing.assert_allclose(np.gradient(chi, th), d1, atol=2e-3)
    np.testing.assert_allclose(np.gradient(d1, th), d2, atol=5e-2)


# --- residuals -----------------------------------------------------------------------------------

def test_residual_shrinks_under_refinement():
    spec = interacting_spec()
    norms = []
    for n, steps in ((64, 32), (128, 64), (256, 128)):
        th, sp = ThetaGrid(6.0, n), SpaceEnvGrid.from_spec(spec, 4, 2)
        flow = solve_mckean_vlasov(spec, th, sp, initial_density(spec, th, sp), steps)
        rc = residual_coeffs(flow, steps // 2, TestBasis.full(sp, 6), spec)
        norms.append(np.linalg.norm(rc.a))
    assert norms[0] > norms[1] > norms[2]


def test_stationary_ou_residual_is_second_order():
    spec = ou_spec()
    sizes = []
    for n in (128, 256, 512):
        th, sp = ThetaGrid(6.0, n), SpaceEnvGrid.from_spec(spec, 2, 1)
        flow = gaussian_flow(th, sp, np.linspace(0, 1, 33), lambda t, x, w: 0 * t * x, lambda t: 0.5 + 0 * t)
        sizes.append(np.max(np.abs(residual_coeffs(flow, 16, TestBasis.full(sp, 8), spec).a)))
    assert sizes[-1] < 1e-4
    assert sizes[0] / sizes[1] > 3.5 and sizes[1] / sizes[2] > 3.5


def test_time_change_doubles_the_transport():
    spec = interacting_spec()
    spec = type(spec)(spec.lattice, spec.potential, spec.kernel, spec.environment, spec.initial, 1.0, 2.0)
    th, sp = ThetaGrid(6.0, 256), SpaceEnvGrid.from_spec(spec, 8, 3)
    mv = solve_mckean_vlasov(spec, th, sp, initial_density(spec, th, sp), 512)
    fast = GridDensityPath(mv.times[:257], mv.values[::2], th, sp)
    P = _FlowPairings(fast, spec, TestBasis(ktheta=6))
    for j in (32, 128, 224):
        dt_part, rhs = P.time_derivative(j), P.L[j]
        assert np.linalg.norm(dt_part - 2 * rhs) <= 0.05 * np.linalg.norm(2 * rhs)


# --- rate functions ------------------------------------------------------------------------------

def test_rates_vanish_on_the_limit(mv_solution):
    spec, flow = mv_solution
    s = rate_S(flow, spec, TestBasis.full(flow.space, 8))
    tw = rate_S_TW(flow, spec, TestBasis(ktheta=8))
    assert 0 <= s.total <= 1e-3 and 0 <= tw.total <= 1e-3
    assert s.flags == []


def test_shifted_start_costs_the_gaussian_entropy():
    spec = ou_spec(variance=0.25)
    th, sp = ThetaGrid(6.0, 256), SpaceEnvGrid.from_spec(spec, 2, 1)
    flow = solve_mckean_vlasov(spec, th, sp, gaussian_density(th, np.ones((2, 1)), 0.25), 128)
    s = rate_S(flow, spec, TestBasis.full(sp, 8))
    assert s.total == pytest.approx(1 / (2 * 0.25), rel=0.05)


def test_non_lebesgue_flow_is_infinite(controlled_ou):
    spec, flow = controlled_ou
    vals = flow.values.copy()
    vals[:, 0] *= 1.5
    vals[:, 1] *= 0.5
    bad = GridDensityPath(flow.times, vals, flow.theta, flow.space)
    s = rate_S(bad, spec, TestBasis.full(flow.space, 4))
    assert s.total == math.inf
    assert any(f.startswith("not in C^L") for f in s.flags)


def test_single_cell_representations_coincide():
    spec = ou_spec()
    th, sp = ThetaGrid(6.0, 256), SpaceEnvGrid.from_spec(spec, 1, 1)
    flow = gaussian_flow(th, sp, np.linspace(0, 1, 65), lambda t, x, w: np.sin(t) + 0 * x, lambda t: 0.25 + 0.1 * t)
    a = rate_S(flow, spec, TestBasis.full(sp, 8)).total
    b = rate_S_TW(flow, spec, TestBasis(ktheta=8)).total
    assert a == pytest.approx(b, rel=1e-10)


def test_controlled_ou_representations(controlled_ou):
    spec, flow = controlled_ou
    s = rate_S(flow, spec, TestBasis.full(flow.space, 8)).total
    tw = rate_S_TW(flow, spec, TestBasis(ktheta=8)).total
    vh = rate_via_h(flow, spec).total
    assert s == pytest.approx(CONTROLLED_OU_EXACT, rel=0.02)
    assert vh == pytest.approx(CONTROLLED_OU_EXACT, rel=0.02)
    assert abs(s - tw) / s <= 0.05 and abs(s - vh) / s <= 0.05


def test_h_vanishes_on_the_limit(mv_solution):
    spec, flow = mv_solution
    hf = h_recovery(flow, spec)
    cdf = np.cumsum(hf.density, axis=-1) * flow.theta.h
    cdf = cdf / cdf[..., -1:]
    window = (cdf > 0.005) & (cdf < 0.995)
    assert np.max(np.where(window, np.abs(hf.h), 0.0)) <= 0.05


def test_rates_are_nonnegative(controlled_ou):
    spec, flow = controlled_ou
    r = rate_S(flow, spec, TestBasis.full(flow.space, 4))
    assert np.all(r.norms >= 0) and r.initial.total >= 0


def test_limit_minimizes_the_rate(mv_solution):
    spec, flow = mv_solution
    basis = TestBasis.full(flow.space, 6)
    th = flow.theta.points
    values = []
    for eps in (-0.2, 0.0, 0.2):
        tilt = np.exp(eps * flow.times[:, None, None, None] * th)
        v = flow.values * tilt
        v = v / (flow.theta.h * v.sum(axis=-1, keepdims=True))
        values.append(rate_S(GridDensityPath(flow.times, v, flow.theta, flow.space), spec, basis).total)
    assert values[1] < values[0] and values[1] < values[2]


# --- entropies ------------------------------------------------------------------------------------------

def test_entropy_of_equal_laws():
    p = np.array([0.2, 0.3, 0.5])
    assert relative_entropy_grid(p, p) == 0


def test_entropy_support_and_normalization():
    assert relative_entropy_grid([0.5, 0.5], [1.0, 0.0]) == math.inf
    with pytest.raises(ValueError):
        relative_entropy_grid([0.5, 0.6], [0.5, 0.5])


def test_gaussian_entropy():
    assert relative_entropy_gaussian(1, 1, 0, 1) == 0.5


def test_grid_entropy_of_discretized_gaussians():
    th = ThetaGrid(8.0, 512)
    p = gaussian_density(th, np.ones(1), 1.0)[0] * th.h
    q = gaussian_density(th, np.zeros(1), 1.0)[0] * th.h
    assert abs(relative_entropy_grid(p, q) - 0.5) <= 1e-3


def bernoulli_env_spec(p):
    env = EnvironmentSpec("discrete", atoms=((-0.5,), (0.5,)), probs=(p, 1 - p), low=(-0.5,), high=(0.5,))
    return ou_spec(env=env)


def test_reference_initial_law_has_no_entropy():
    spec = bernoulli_env_spec(0.3)
    th, sp = ThetaGrid(6.0, 256), SpaceEnvGrid.from_spec(spec, 4, 2)
    e = initial_entropy(GridSlice(initial_density(spec, th, sp), th, sp), spec)
    assert abs(e.total) <= 1e-12 and abs(e.spin) <= 1e-12 and e.environment == 0


def test_environment_layer_entropy():
    spec = bernoulli_env_spec(0.3)
    th, sp = ThetaGrid(6.0, 256), SpaceEnvGrid.from_spec(spec, 4, 2)
    xi = initial_density(spec, th, sp)
    # reweight the blocks so the environment marginal becomes Bernoulli(0.6)
    xi = xi * (np.array([0.6, 0.4]) / sp.weights)[..., None]
    e = initial_entropy(GridSlice(xi, th, sp), spec)
    assert e.spin == pytest.approx(0.0, abs=1e-12)
    assert e.environment == pytest.approx(bernoulli_entropy(0.6, 0.3), abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_entropy_layers_add_up(seed):
    g = np.random.default_rng(seed)
    spec = bernoulli_env_spec(0.4)
    th, sp = ThetaGrid(6.0, 64), SpaceEnvGrid.from_spec(spec, 4, 2)
    xi = gaussian_density(th, g.normal(0, 0.3, (4, 2)), 0.25)
    mix = g.dirichlet([2, 2], size=4)
    xi = xi * (mix / sp.weights)[..., None]
    e = initial_entropy(GridSlice(xi, th, sp), spec)
    assert abs(e.total - (e.spin + e.environment)) <= 1e-8
    assert e.spin >= 0 and e.environment >= 0


def test_initial_entropy_flags_non_lebesgue_marginals():
    spec = ou_spec()
    th, sp = ThetaGrid(6.0, 64), SpaceEnvGrid.from_spec(spec, 2, 1)
    xi = initial_density(spec, th, sp)
    xi[0] *= 1.5
    xi[1] *= 0.5
    e = initial_entropy(GridSlice(xi, th, sp), spec)
    assert e.total == math.inf and e.flag


# --- Sanov ------------------------------------------------------------------------------------------------

def flip_instance(p, q, nx=4):
    zeta = np.ones((nx, 1))
    Q = np.tile([[[1 - p, p]]], (nx, 1, 1))
    gamma = np.tile([[[1 - q, q]]], (nx, 1, 1)) / nx
    return gamma, zeta, Q


def test_sanov_reference_is_zero():
    gamma, zeta, Q = flip_instance(0.3, 0.3)
    r = sanov_rate(gamma, zeta, Q, y_values=[-1, 1])
    assert r.exact == 0 and max(r.lower_bounds) <= 1e-12


def test_sanov_bernoulli_flip():
    gamma, zeta, Q = flip_instance(0.3, 0.7)
    r = sanov_rate(gamma, zeta, Q, y_values=[-1, 1], max_family=16)
    assert r.exact == pytest.approx(bernoulli_entropy(0.7, 0.3), abs=1e-12)
    assert all(a <= b + 1e-12 for a, b in zip(r.lower_bounds, r.lower_bounds[1:]))
    assert r.lower_bounds[-1] <= r.exact + 1e-9
    assert r.exact - r.lower_bounds[-1] <= 1e-3


def test_sanov_non_lebesgue():
    gamma, zeta, Q = flip_instance(0.3, 0.7)
    gamma[0] *= 2
    gamma[1] *= 0
    r = sanov_rate(gamma, zeta, Q)
    assert r.exact == math.inf and r.flag


# --- two-time lower bound and controlled rate ----------------------------------------------------------------

def test_two_time_bound_on_the_limit(mv_solution):
    spec, flow = mv_solution
    s2 = rate_S2_lower_bound(flow, [0.5, 1.0], spec, TestBasis(ktheta=6))
    assert -1e-6 <= s2.value <= 1e-3


def test_two_time_bound_sandwich(controlled_ou):
    spec, flow = controlled_ou
    s = rate_S(flow, spec, TestBasis.full(flow.space, 8)).total
    s2 = rate_S2_lower_bound(flow, [0.25, 0.5, 0.75, 1.0], spec, TestBasis(ktheta=8))
    assert 0.5 * s <= s2.value <= s + 1e-3


def test_two_time_bound_at_time_zero_is_the_initial_entropy():
    spec = ou_spec()
    th, sp = ThetaGrid(6.0, 256), SpaceEnvGrid.from_spec(spec, 4, 1)
    flow = gaussian_flow(th, sp, np.linspace(0, 1, 17), lambda t, x, w: 0.5 + 0 * t * x, lambda t: 0.25 + 0 * t)
    s2 = rate_S2_lower_bound(flow, [0.0], spec, TestBasis(ktheta=8))
    assert abs(s2.value - initial_entropy(flow.slice(0), spec).total) <= 1e-3


def test_two_time_bound_needs_increasing_times(controlled_ou):
    spec, flow = controlled_ou
    with pytest.raises(ValueError):
        rate_S2_lower_bound(flow, [0.5, 0.25], spec, TestBasis(ktheta=4))


def test_uncontrolled_dynamics_cost_nothing():
    spec = interacting_spec()
    th, sp = ThetaGrid(6.0, 256), SpaceEnvGrid.from_spec(spec, 8, 3)
    r = rate_I_controlled(ControlledSpec(lambda t, x, w, q: 0.0 * q), spec, th, sp, 128)
    assert abs(r.value) <= 1e-3


def test_constant_control_cost_and_contraction():
    spec = interacting_spec()
    th, sp = ThetaGrid(6.0, 256), SpaceEnvGrid.from_spec(spec, 8, 3)
    c = 0.3
    r = rate_I_controlled(ControlledSpec(lambda t, x, w, q: c + 0.0 * q), spec, th, sp, 256)
    assert r.value == pytest.approx(c * c / 2, rel=0.02)
    s = rate_S(r.flow, spec, TestBasis.full(sp, 8)).total
    assert s <= r.value + 1e-3
