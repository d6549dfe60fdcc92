"""Radon-Nikodym weights between interacting and independent spin dynamics.

The interacting law is compared with the product law in which every site
follows the confining drift alone. Its log density splits into the
interaction functional F of the path empirical measure, the Ito correction of
the self-interaction and the cross term between the interaction field and the
confining drift.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import trapezoid

from . import rng
from .model import KernelSpec, ModelError, ModelSpec, PotentialSpec, TorusLattice, kernel_pair_symmetric
from .simulate import InteractionOperator, PathEmpiricalMeasure, ReplicaBatch, PathEnsemble, simulate_replicas


def _check_symmetric(kernel: KernelSpec, spec: ModelSpec):
    env = spec.environment
    low, high = _env_box(env)
    if not kernel_pair_symmetric(kernel, spec.lattice.d, low, high):
        raise ModelError("the density formula needs J(x, w, w') = J(-x, w', w)")


def _env_box(env):
    if env.kind == "discrete":
        a = np.asarray(env.atoms, float)
        return tuple(a.min(axis=0)), tuple(a.max(axis=0))
    return env.low, env.high


def interaction_energy(state, env, kernel: KernelSpec, lattice: TorusLattice, method: str = "auto") -> np.ndarray:
    """(1/(2 N^d)) sum_ij J((i-j)/N, w_i, w_j) theta_i theta_j over the last axis of state."""
    state = np.asarray(state, float)
    field_of = InteractionOperator(kernel, lattice, method).bind(env)
    return 0.5 * np.sum(state * field_of(state), axis=-1)


@dataclass(frozen=True)
class FValue:
    total: np.ndarray
    field_term: np.ndarray
    boundary_term: np.ndarray


def _fields_along(paths, env, kernel, lattice, method):
    """Per-site fields at every time; paths (..., sites, M+1) -> (..., sites, M+1)."""
    op = InteractionOperator(kernel, lattice, method).bind(env)
    moved = np.moveaxis(paths, -1, 0)  # (M+1, ..., sites)
    return np.moveaxis(op(moved), 0, -1)


def F_functional(L: PathEmpiricalMeasure, kernel: KernelSpec, method: str = "auto") -> FValue:
    """Interaction functional of a uniform path empirical measure on a lattice.

    field_term = -1/2 int mean_i beta_i(t)^2 dt, boundary_term = (B(theta_T) - B(theta_0)) / N^d.
    """
    if L.lattice is None:
        raise ModelError("the path measure carries no lattice")
    n = L.lattice.n_sites
    beta = _fields_along(L.paths, L.w, kernel, L.lattice, method)
    field_term = -0.5 * trapezoid(np.mean(beta ** 2, axis=-2), L.times, axis=-1)
    e0 = 0.5 * np.sum(L.paths[..., 0] * beta[..., 0], axis=-1)
    eT = 0.5 * np.sum(L.paths[..., -1] * beta[..., -1], axis=-1)
    boundary = (eT - e0) / n
    return FValue(field_term + boundary, field_term, boundary)


@dataclass
class GirsanovLedger:
    """Per-replica parts of the log density of the interacting law.

    log_rn = (N^d F + drift_cross) / sigma^2 - ito_correction, with
    N^d F = N^d field_term + energy_T - energy_0.
    """

    sites: int
    sigma: float
    field_term: np.ndarray
    energy_0: np.ndarray
    energy_T: np.ndarray
    ito_correction: np.ndarray
    drift_cross: np.ndarray
    log_rn: np.ndarray

    @property
    def F(self) -> np.ndarray:
        return self.field_term + (self.energy_T - self.energy_0) / self.sites

    def reconstruct(self) -> np.ndarray:
        return (self.sites * self.F + self.drift_cross) / self.sigma ** 2 - self.ito_correction

    def rows(self) -> list[dict]:
        return [
            {"replica": k, "F": float(self.F[k]), "correction": float(self.ito_correction[k]),
             "drift_cross": float(self.drift_cross[k]), "log_weight": float(self.log_rn[k]),
             "weight": float(np.exp(self.log_rn[k]))}
            for k in range(len(self.log_rn))
        ]


def _as_batch(ens) -> tuple[ModelSpec, np.ndarray, np.ndarray, np.ndarray]:
    if isinstance(ens, ReplicaBatch):
        return ens.spec, ens.times, ens.theta, ens.env
    if isinstance(ens, PathEnsemble):
        return ens.spec, ens.times, ens.theta[None], ens.environment.values[None]
    raise TypeError("expected a PathEnsemble or ReplicaBatch")


def log_rn_interacting(ens, kernel: KernelSpec | None = None, method: str = "auto") -> GirsanovLedger:
    """Log density of the interacting law against the confining-drift-only law along given paths.

    Paths should come from the reference dynamics. The kernel defaults to the
    one of the ensemble's spec.
    """
    spec, times, theta, env = _as_batch(ens)
    kernel = kernel or spec.kernel
    _check_symmetric(kernel, spec)
    lat = spec.lattice
    n = lat.n_sites
    R = theta.shape[0]
    if kernel.is_zero:
        z = np.zeros(R)
        return GirsanovLedger(n, spec.sigma, z, z.copy(), z.copy(), z.copy(), z.copy(), z.copy())
    beta = _fields_along(theta, env, kernel, lat, method)
    field_term = -0.5 * trapezoid(np.mean(beta ** 2, axis=1), times, axis=-1)
    e0 = 0.5 * np.sum(theta[..., 0] * beta[..., 0], axis=-1)
    eT = 0.5 * np.sum(theta[..., -1] * beta[..., -1], axis=-1)
    x = lat.positions()
    diag = kernel.evaluate(np.zeros_like(x), env, env)  # (R, n)
    ito = 0.5 * (times[-1] - times[0]) * diag.sum(axis=-1) / n
    grad = spec.potential.grad(theta, env[..., 0][..., None])
    cross = trapezoid(np.sum(beta * grad, axis=1), times, axis=-1)
    led = GirsanovLedger(n, spec.sigma, field_term, e0, eT, ito, cross, np.zeros(R))
    led.log_rn = led.reconstruct()
    return led


def log_rn_psi_to_wiener(path, w1, potential: PotentialSpec, sigma: float, times) -> np.ndarray:
    """Log density of the confining-drift law against Brownian motion, pathwise.

    [Psi(theta_0) - Psi(theta_T) + sigma^2/2 int Psi'' dt - 1/2 int Psi'^2 dt] / sigma^2,
    vectorized over leading axes of path (..., M+1).
    """
    path = np.asarray(path, float)
    w1 = np.asarray(w1, float)[..., None]
    v0 = potential.value(path[..., 0], w1[..., 0])
    vT = potential.value(path[..., -1], w1[..., 0])
    curv = trapezoid(potential.curvature(path), times, axis=-1)
    g2 = trapezoid(potential.grad(path, w1) ** 2, times, axis=-1)
    return (v0 - vT + 0.5 * sigma ** 2 * curv - 0.5 * g2) / sigma ** 2


def simulate_wiener(paths: int, steps: int, horizon: float, sigma: float, seed: int,
                    theta0=0.0) -> tuple[np.ndarray, np.ndarray]:
    """Brownian paths sigma * B_t started at theta0, shape (paths, steps + 1)."""
    gen = rng.stream(seed, rng.AUXILIARY)
    dt = horizon / steps
    inc = sigma * math.sqrt(dt) * gen.standard_normal((paths, steps))
    out = np.empty((paths, steps + 1))
    out[:, 0] = theta0
    out[:, 1:] = np.asarray(theta0, float).reshape(-1, 1) + np.cumsum(inc, axis=1)
    return np.linspace(0.0, horizon, steps + 1), out


@dataclass
class IdentityCheck:
    lhs: float
    lhs_se: float
    rhs: float
    rhs_se: float
    ess: float
    flags: list[str] = field(default_factory=list)

    @property
    def combined_se(self) -> float:
        return math.hypot(self.lhs_se, self.rhs_se)

    @property
    def agrees(self) -> bool:
        return abs(self.lhs - self.rhs) <= 3 * self.combined_se

    def to_dict(self) -> dict:
        return {"lhs": self.lhs, "lhs_se": self.lhs_se, "rhs": self.rhs, "rhs_se": self.rhs_se,
                "ess": self.ess, "combined_se": self.combined_se, "agrees": self.agrees, "flags": self.flags}


def effective_sample_size(log_w) -> float:
    lw = np.asarray(log_w, float)
    w = np.exp(lw - lw.max())
    return float(w.sum() ** 2 / np.sum(w * w))


def importance_identity_check(spec: ModelSpec, statistic: Callable[[ReplicaBatch], np.ndarray], replicas: int,
                              seed: int, steps: int = 200, threads: int = 1) -> IdentityCheck:
    """Mean of a bounded path statistic under the interacting law, directly and by reweighting.

    The reference runs reuse the same seed, so environment and initial draws
    match replica for replica.
    """
    direct = simulate_replicas(spec, steps, seed, replicas, threads)
    g1 = np.asarray(statistic(direct), float)
    ref_spec = spec.without_interaction()
    ref = simulate_replicas(ref_spec, steps, seed, replicas, threads)
    led = log_rn_interacting(ref, spec.kernel)
    g2 = np.asarray(statistic(ref), float) * np.exp(led.log_rn)
    R = len(g1)
    ess = effective_sample_size(led.log_rn)
    flags = ["effective sample size below 10"] if ess < 10 else []
    return IdentityCheck(float(g1.mean()), float(g1.std(ddof=1) / math.sqrt(R)),
                         float(g2.mean()), float(g2.std(ddof=1) / math.sqrt(R)), ess, flags)


@dataclass
class MomentRow:
    kappa: float
    estimate: float
    max_share: float
    flagged: bool


@dataclass
class MomentTable:
    rows: list[MomentRow]
    variance: float
    gaussian_threshold: float
    c_psi: float
    share_limit: float

    def to_dict(self) -> dict:
        return {
            "rows": [r.__dict__ for r in self.rows], "variance": self.variance,
            "gaussian_threshold": self.gaussian_threshold, "c_psi": self.c_psi, "share_limit": self.share_limit,
        }


TAIL_FRACTION = 1e-3
SHARE_LIMIT = 0.3


def moment_diagnostics(spec: ModelSpec, kappas: Sequence[float], replicas: int, seed: int, steps: int = 200,
                       threads: int = 1) -> MomentTable:
    """Monte Carlo E[exp(kappa theta_T^2)] over all sites and replicas, with a heavy-tail flag.

    A value is flagged when the largest 0.1% of the terms carry more than
    SHARE_LIMIT of the sum, the signature of an estimate whose population mean is
    infinite or dominated by rare samples.
    """
    batch = simulate_replicas(spec, steps, seed, replicas, threads)
    th = batch.theta[..., -1].ravel()
    sq = th * th
    order = np.sort(sq)[::-1]
    top = max(1, int(math.ceil(TAIL_FRACTION * len(sq))))
    rows = []
    for k in kappas:
        k = float(k)
        if k == 0:
            rows.append(MomentRow(0.0, 1.0, top / len(sq), False))
            continue
        logs = k * order
        w = np.exp(logs - logs[0])
        share = float(w[:top].sum() / w.sum())
        est = float(math.exp(logs[0]) * w.mean()) if logs[0] < 700 else math.inf
        rows.append(MomentRow(k, est, share, share > SHARE_LIMIT))
    v = float(np.var(th))
    return MomentTable(rows, v, 1.0 / (2 * v), spec.potential.c_psi, SHARE_LIMIT)
