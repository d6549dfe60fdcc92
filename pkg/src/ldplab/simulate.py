"""Particle simulation of the interacting lattice system and its empirical objects."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import rng
from .model import KernelSpec, ModelError, ModelSpec, TorusLattice, kernel_field, validate, wrap

GUARD = 1e6


class SimulationError(RuntimeError):
    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


@dataclass(frozen=True)
class EnvironmentSample:
    values: np.ndarray  # (sites, m)

    def __post_init__(self):
        self.values.setflags(write=False)


@dataclass(frozen=True)
class ParticleMeasure:
    """Atomic measure on (position, mark, spin) triples."""

    x: np.ndarray
    w: np.ndarray
    theta: np.ndarray
    weights: np.ndarray

    @classmethod
    def uniform(cls, x, w, theta) -> "ParticleMeasure":
        n = len(theta)
        return cls(np.asarray(x, float), np.asarray(w, float), np.asarray(theta, float), np.full(n, 1.0 / n))

    def moment_atoms(self):
        return self.x, self.w, self.weights * self.theta

    def integrate(self, f: Callable) -> float:
        return float(np.sum(self.weights * f(self.x, self.w, self.theta)))


@dataclass(frozen=True)
class PathEmpiricalMeasure:
    """Atomic measure on (position, mark, spin path) triples sharing one time grid."""

    x: np.ndarray
    w: np.ndarray
    paths: np.ndarray  # (atoms, times)
    times: np.ndarray
    weights: np.ndarray
    lattice: TorusLattice | None = None


@dataclass(frozen=True)
class PathEnsemble:
    spec: ModelSpec
    times: np.ndarray
    theta: np.ndarray  # (sites, M+1)
    environment: EnvironmentSample
    seed: int
    replica: int = 0
    scheme: str = "euler-maruyama"

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def steps(self) -> int:
        return len(self.times) - 1


@dataclass(frozen=True)
class ReplicaBatch:
    """Several independent replicas on a common time grid."""

    spec: ModelSpec
    times: np.ndarray
    theta: np.ndarray  # (replicas, sites, M+1)
    env: np.ndarray  # (replicas, sites, m)
    seed: int
    replicas: np.ndarray
    scheme: str = "euler-maruyama"

    def __len__(self):
        return len(self.replicas)

    def __getitem__(self, i: int) -> PathEnsemble:
        return PathEnsemble(
            self.spec, self.times, self.theta[i], EnvironmentSample(self.env[i].copy()),
            self.seed, int(self.replicas[i]), self.scheme,
        )


class InteractionOperator:
    """Per-site interaction field (1/N^d) sum_j J((k-j)/N, w_k, w_j) theta_j on a lattice."""

    def __init__(self, kernel: KernelSpec, lattice: TorusLattice, method: str = "auto"):
        if method not in ("auto", "naive", "fft"):
            raise ValueError(f"unknown interaction method {method!r}")
        if method == "auto":
            method = "naive" if lattice.n_sites <= 64 else "fft"
        if method == "fft" and kernel.variant not in ("constant", "product", "sum", "tabulated"):
            raise ModelError("fft interaction needs a separable kernel")
        self.kernel, self.lattice, self.method = kernel, lattice, method
        x = lattice.positions()
        self._disp = wrap(x[:, None, :] - x[None, :, :])
        if method == "fft" and kernel.variant != "constant":
            grid = kernel.spatial(wrap(x)).reshape(lattice.shape)
            self._jhat = np.fft.rfftn(grid)

    def _conv(self, u):
        shape = self.lattice.shape
        d = self.lattice.d
        lead = u.shape[:-1]
        v = u.reshape(*lead, *shape)
        axes = tuple(range(-d, 0))
        out = np.fft.irfftn(np.fft.rfftn(v, axes=axes) * self._jhat, s=shape, axes=axes)
        return out.reshape(*lead, -1)

    def bind(self, env) -> Callable[[np.ndarray], np.ndarray]:
        """Freeze the marks env (..., sites, m); returns state (..., sites) -> field."""
        env = np.asarray(env, float)
        n = self.lattice.n_sites
        k = self.kernel
        if env.shape[-2] != n:
            raise ModelError("environment sample does not match the lattice")
        if k.variant == "constant":
            return lambda th: np.broadcast_to(k.value * th.mean(axis=-1, keepdims=True), th.shape).copy()
        if self.method == "naive":
            J = k.evaluate(self._disp, env[..., :, None, :], env[..., None, :, :])
            return lambda th: np.einsum("...kj,...j->...k", J, th) / n
        terms = [(g(env), h(env)) for g, h in k.rank_terms()]
        if k.is_product:
            def field_fft(th):
                out = np.zeros(th.shape)
                for ga, ha in terms:
                    out += ga * self._conv(ha * th)
                return out / n
        else:
            def field_fft(th):
                out = self._conv(th)
                for ga, ha in terms:
                    out += ga * np.sum(ha * th, axis=-1, keepdims=True)
                return out / n
        return field_fft


def interaction_force(env, state, kernel: KernelSpec, lattice: TorusLattice, method: str = "auto") -> np.ndarray:
    return InteractionOperator(kernel, lattice, method).bind(env)(np.asarray(state, float))


def _require_valid(spec: ModelSpec):
    bad = validate(spec)
    if bad:
        raise ModelError("specification violates assumptions: " + "; ".join(map(str, bad)))


def _run_block(spec: ModelSpec, steps: int, seed: int, block: int, make_field) -> tuple[np.ndarray, np.ndarray]:
    lat = spec.lattice
    x = lat.positions()
    B, n = rng.BLOCK, lat.n_sites
    env = spec.environment.sample(x, rng.stream(seed, rng.ENVIRONMENT, 0, block), batch=(B,))
    th = spec.initial.sample(x, rng.stream(seed, rng.INITIAL, 0, block), batch=(B,))
    dt = spec.horizon / steps
    sd = spec.sigma * math.sqrt(dt)
    field_at = make_field(env)
    w1 = env[..., 0]
    out = np.empty((B, n, steps + 1))
    out[..., 0] = th
    for j in range(steps):
        drift = -spec.potential.grad(th, w1) + field_at(j, th)
        noise = rng.stream(seed, rng.NOISE, j, block).standard_normal((B, n))
        th = th + drift * dt + sd * noise
        if not np.all(np.isfinite(th)) or np.max(np.abs(th)) > GUARD:
            raise SimulationError("spin exceeded the guard bound", j + 1)
        out[..., j + 1] = th
    return env, out


def _simulate(spec, steps, seed, replicas, threads, make_field) -> ReplicaBatch:
    if steps < 1:
        raise ValueError("need at least one step")
    ids = np.arange(replicas) if np.isscalar(replicas) else np.asarray(list(replicas), dtype=int)
    blocks = rng.blocks_for(ids)
    with ThreadPoolExecutor(max_workers=max(1, int(threads))) as pool:
        results = dict(zip(blocks, pool.map(lambda b: _run_block(spec, steps, seed, b, make_field), blocks)))
    env = np.stack([results[r // rng.BLOCK][0][r % rng.BLOCK] for r in ids])
    theta = np.stack([results[r // rng.BLOCK][1][r % rng.BLOCK] for r in ids])
    times = np.linspace(0.0, spec.horizon, steps + 1)
    return ReplicaBatch(spec, times, theta, env, int(seed), ids)


def simulate_replicas(
    spec: ModelSpec, steps: int, seed: int, replicas: int | Sequence[int] = 1,
    threads: int = 1, method: str = "auto", check: bool = True,
) -> ReplicaBatch:
    """Euler-Maruyama runs of the interacting system, one per replica id."""
    if check:
        _require_valid(spec)
    op = InteractionOperator(spec.kernel, spec.lattice, method)

    def make_field(env):
        bound = op.bind(env)
        return lambda j, th: bound(th)

    return _simulate(spec, steps, seed, replicas, threads, make_field)


def simulate_interacting(spec: ModelSpec, steps: int, seed: int, replica: int = 0, method: str = "auto",
                         check: bool = True) -> PathEnsemble:
    return simulate_replicas(spec, steps, seed, [replica], method=method, check=check)[0]


def flow_field_at_sites(spec: ModelSpec, flow, x, env) -> np.ndarray:
    """Effective field of each flow slice at the given sites, shape (flow times, *env.shape[:-1])."""
    lead = env.shape[:-2]
    n = env.shape[-2]
    xq = np.broadcast_to(x, (*lead, n, x.shape[-1])).reshape(-1, x.shape[-1])
    wq = env.reshape(-1, env.shape[-1])
    xs, ws, cs = flow.moment_atoms_all()
    beta = kernel_field(spec.kernel, xq, wq, xs, ws, cs)
    return beta.reshape(len(flow.times), *lead, n)


def simulate_frozen(spec: ModelSpec, flow, steps: int, seed: int, replicas: int | Sequence[int] = 1,
                    threads: int = 1, check: bool = True) -> ReplicaBatch:
    """Independent sites driven by the effective field of a prescribed measure flow."""
    if check:
        _require_valid(spec)
    if flow.times[0] > 1e-12 or flow.times[-1] < spec.horizon - 1e-9:
        raise ModelError("flow does not cover the simulation horizon")
    x = spec.lattice.positions()
    tgrid = np.linspace(0.0, spec.horizon, steps + 1)

    def make_field(env):
        if spec.kernel.is_zero:
            return lambda j, th: 0.0
        beta = flow_field_at_sites(spec, flow, x, env)
        ft = np.asarray(flow.times)

        def at(j, th):
            t = tgrid[j]
            k = int(np.clip(np.searchsorted(ft, t, side="right") - 1, 0, len(ft) - 2))
            a = (t - ft[k]) / (ft[k + 1] - ft[k])
            return (1 - a) * beta[k] + a * beta[k + 1]

        return at

    return _simulate(spec, steps, seed, replicas, threads, make_field)


def empirical_at(ens: PathEnsemble, j: int) -> ParticleMeasure:
    if not 0 <= j <= ens.steps:
        raise IndexError(f"time index {j} outside 0..{ens.steps}")
    return ParticleMeasure.uniform(ens.spec.lattice.positions(), ens.environment.values, ens.theta[:, j])


def path_measure(ens: PathEnsemble) -> PathEmpiricalMeasure:
    n = ens.theta.shape[0]
    return PathEmpiricalMeasure(
        ens.spec.lattice.positions(), ens.environment.values, ens.theta, ens.times,
        np.full(n, 1.0 / n), ens.spec.lattice,
    )


def project_pi(L: PathEmpiricalMeasure, j: int) -> ParticleMeasure:
    """Time-j marginal of a path measure."""
    if not 0 <= j < L.paths.shape[1]:
        raise IndexError(f"time index {j} outside the path grid")
    return ParticleMeasure(L.x, L.w, L.paths[:, j], L.weights)


def phi_statistic(ens: PathEnsemble) -> float:
    """sup over the time grid of the empirical mean of 1 + theta^2."""
    return float(np.max(np.mean(1.0 + ens.theta ** 2, axis=0)))
