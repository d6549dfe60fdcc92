import math

import numpy as np
import pytest

from ldplab import rng
from ldplab.girsanov import (SHARE_LIMIT, F_functional, effective_sample_size, importance_identity_check,
                             interaction_energy, log_rn_interacting, log_rn_psi_to_wiener, moment_diagnostics,
                             simulate_wiener)
from ldplab.model import (EnvCoupling, EnvironmentSpec, KernelSpec, ModelError, PotentialSpec, SpatialKernel,
                          TorusLattice)
from ldplab.simulate import PathEmpiricalMeasure, simulate_replicas

from conftest import ou_spec


def sum_kernel():
    return KernelSpec("sum", spatial=SpatialKernel("cosine", scale=0.05, offset=0.05),
                      coupling=EnvCoupling("squared_difference", 0.1))


def kernel_matrix(kernel, lattice, w):
    x = lattice.positions()
    return kernel.evaluate(x[:, None, :] - x[None, :, :], w[:, None, :], w[None, :, :])


class ZeroPotential:
    def value(self, theta, w1=0.0):
        return 0.0 * np.asarray(theta)

    def grad(self, theta, w1=0.0):
        return 0.0 * np.asarray(theta)

    def curvature(self, theta):
        return 0.0 * np.asarray(theta)


def test_energy_of_two_aligned_spins():
    lat = TorusLattice(1, 2)
    e = interaction_energy(np.array([1.0, 1.0]), np.zeros((2, 1)), KernelSpec("constant", value=1.0), lat)
    assert e == pytest.approx(1.0)


def test_energy_is_even_in_the_spins():
    g = np.random.default_rng(0)
    lat = TorusLattice(1, 6)
    w = g.uniform(-0.5, 0.5, (6, 1))
    th = g.normal(size=6)
    k = sum_kernel()
    assert interaction_energy(-th, w, k, lat) == pytest.approx(interaction_energy(th, w, k, lat), abs=1e-14)


@pytest.mark.parametrize("n", [2, 3, 4, 5, 6])
def test_functional_matches_the_triple_sum(n):
    g = np.random.default_rng(n)
    lat = TorusLattice(1, n)
    kernel = sum_kernel()
    times = np.linspace(0, 1, 11)
    for _ in range(10):
        w = g.uniform(-0.5, 0.5, (n, 1))
        paths = np.cumsum(g.normal(size=(n, 11)), axis=1)
        J = kernel_matrix(kernel, lat, w)
        inner = np.einsum("ij,ik,jt,kt->t", J, J, paths, paths) / n ** 3
        field = -0.5 * np.sum(0.5 * (inner[1:] + inner[:-1]) * np.diff(times))
        energy = lambda th: 0.5 * th @ J @ th / n ** 2  # noqa: E731
        expected = field + energy(paths[:, -1]) - energy(paths[:, 0])
        L = PathEmpiricalMeasure(lat.positions(), w, paths, times, np.full(n, 1 / n), lat)
        assert F_functional(L, kernel).total == pytest.approx(expected, abs=1e-9)


def test_no_interaction_gives_unit_weights():
    spec = ou_spec(N=4)
    batch = simulate_replicas(spec, 50, 1, 8)
    led = log_rn_interacting(batch)
    assert np.all(led.log_rn == 0)


def test_correction_for_a_constant_kernel():
    c, T = 0.3, 2.0
    spec = ou_spec(N=4, kernel=KernelSpec("constant", value=c), horizon=T)
    led = log_rn_interacting(simulate_replicas(spec.without_interaction(), 50, 2, 4), spec.kernel)
    np.testing.assert_allclose(led.ito_correction, 0.5 * T * c)


def test_ledger_parts_rebuild_the_log_weight():
    env = EnvironmentSpec("uniform", low=(-0.5,), high=(0.5,))
    spec = ou_spec(N=4, env=env, kernel=sum_kernel())
    led = log_rn_interacting(simulate_replicas(spec.without_interaction(), 50, 5, 16), spec.kernel)
    np.testing.assert_allclose(led.reconstruct(), led.log_rn, rtol=1e-12)
    assert np.all(np.isfinite(led.log_rn))


def test_asymmetric_kernel_is_rejected():
    spec = ou_spec(N=4, kernel=KernelSpec("product", spatial=SpatialKernel("sine", scale=0.1)))
    with pytest.raises(ModelError):
        log_rn_interacting(simulate_replicas(spec.without_interaction(), 10, 0, 1), spec.kernel)


def test_zero_potential_has_zero_density():
    times = np.linspace(0, 1, 21)
    path = np.cumsum(np.random.default_rng(1).normal(size=(5, 21)), axis=1)
    assert np.all(log_rn_psi_to_wiener(path, np.zeros(5), ZeroPotential(), 1.0, times) == 0)


@pytest.mark.parametrize("a", [0.0, 0.5, -2.0])
def test_constant_path_density(a):
    times = np.linspace(0, 1, 101)
    val = log_rn_psi_to_wiener(np.full(101, a), 0.0, PotentialSpec((0.0, 0.0, 0.5)), 1.0, times)
    assert val == pytest.approx(0.5 - 0.5 * a * a, abs=1e-12)


def test_confining_density_has_unit_mean_under_wiener():
    psi = PotentialSpec((0.0, 0.0, 0.5))
    th0 = rng.stream(5, rng.AUXILIARY, 1).normal(0.0, 0.5, 20000)
    times, paths = simulate_wiener(20000, 1000, 1.0, 1.0, 5, th0)
    w = np.exp(log_rn_psi_to_wiener(paths, np.zeros(20000), psi, 1.0, times))
    se = w.std(ddof=1) / math.sqrt(len(w))
    assert abs(w.mean() - 1) <= 3 * se


def test_identity_is_exact_without_interaction():
    spec = ou_spec(N=4)
    chk = importance_identity_check(spec, lambda b: np.clip(b.theta[:, :, -1].mean(axis=1), -1, 1), 64, 3, 50)
    assert chk.lhs == chk.rhs and chk.lhs_se == chk.rhs_se


def test_identity_for_a_weak_interaction():
    env = EnvironmentSpec("uniform", low=(-0.5,), high=(0.5,))
    spec = ou_spec(N=4, env=env, kernel=sum_kernel())
    stat = lambda b: np.clip(b.theta[:, :, -1].mean(axis=1), -1, 1)  # noqa: E731
    chk = importance_identity_check(spec, stat, 4000, 9, 100)
    assert chk.agrees and chk.ess > 1000 and not chk.flags


def test_effective_sample_size():
    assert effective_sample_size(np.zeros(50)) == pytest.approx(50)
    assert effective_sample_size([0.0, -1000.0, -1000.0]) == pytest.approx(1.0)


def test_moment_flags():
    table = moment_diagnostics(ou_spec(N=16), [0.0, 0.25, 1.3], 640, 4, 100)
    rows = {r.kappa: r for r in table.rows}
    assert rows[0.0].estimate == 1.0 and not rows[0.0].flagged
    assert not rows[0.25].flagged
    assert rows[1.3].flagged and rows[1.3].max_share > SHARE_LIMIT
    assert table.c_psi == 0.5


def test_quartic_confinement_is_not_flagged():
    spec = ou_spec(N=16, variance=0.0)
    spec = type(spec)(spec.lattice, PotentialSpec((0.0, 0.0, 0.0, 0.0, 1.0)), spec.kernel, spec.environment,
                      spec.initial, spec.sigma, spec.horizon)
    table = moment_diagnostics(spec, [0.5, 1.0, 2.0, 4.0], 640, 4, 200)
    assert not any(r.flagged for r in table.rows) and math.isinf(table.c_psi)
