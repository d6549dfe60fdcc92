import numpy as np
import pytest

from ldplab.model import (EnvCoupling, EnvironmentSpec, InitialSpec, KernelSpec, ModelSpec, PotentialSpec, Profile,
                          SpatialKernel, TorusLattice)
from ldplab.pde import SpaceEnvGrid, ThetaGrid, gaussian_flow, initial_density, solve_mckean_vlasov


def ou_spec(N=8, center=0.0, variance=0.25, env=None, kernel=None, sigma=1.0, horizon=1.0) -> ModelSpec:
    initial = (InitialSpec("gaussian", Profile("constant", center), variance) if variance
               else InitialSpec("point", Profile("constant", center)))
    return ModelSpec(TorusLattice(1, N), PotentialSpec((0.0, 0.0, 0.5)), kernel or KernelSpec.zero(),
                     env or EnvironmentSpec.point_mass(0.0), initial, sigma, horizon)


def interacting_spec(N=8) -> ModelSpec:
    """Weak local cosine kernel, uniform environment, cosine initial profile."""
    kernel = KernelSpec("product", spatial=SpatialKernel("cosine", scale=0.05, offset=0.1), coupling=EnvCoupling("one"))
    env = EnvironmentSpec("uniform", low=(-0.2,), high=(0.2,))
    return ModelSpec(TorusLattice(1, N), PotentialSpec((0.0, 0.0, 0.5)), kernel, env,
                     InitialSpec("gaussian", Profile("cosine", 0.5, amplitude=0.5), 0.25), 1.0, 1.0)


CONTROLLED_OU_EXACT = 7 / 6 * 1.125 + 0.02


@pytest.fixture(scope="session")
def controlled_ou():
    """Gaussian flow with mean t(1 + cos(2 pi x)/2) and OU variance; exact rate CONTROLLED_OU_EXACT.

    With two environment atoms +-0.2 the control needed is dm/dt + m + w, whose
    mean square integrates to 7/6 * 9/8 + 0.04/2; the initial law is the reference one.
    """
    env = EnvironmentSpec("discrete", atoms=((-0.2,), (0.2,)), probs=(0.5, 0.5))
    spec = ou_spec(env=env)
    th = ThetaGrid(6.0, 256)
    sp = SpaceEnvGrid.from_spec(spec, 8, 3)
    times = np.linspace(0, 1, 129)
    flow = gaussian_flow(th, sp, times, lambda t, x, w: t * (1 + 0.5 * np.cos(2 * np.pi * x)),
                         lambda t: 0.5 - 0.25 * np.exp(-2 * t))
    return spec, flow


@pytest.fixture(scope="session")
def mv_solution():
    spec = interacting_spec()
    th = ThetaGrid(6.0, 256)
    sp = SpaceEnvGrid.from_spec(spec, 8, 3)
    return spec, solve_mckean_vlasov(spec, th, sp, initial_density(spec, th, sp), 256)
