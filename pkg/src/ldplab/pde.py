"""Grid solvers: the McKean-Vlasov equation, backward semigroups and killed problems.

All spin-direction operators come from one birth-death generator on the spin
grid with exponentially fitted (Scharfetter-Gummel) rates. Densities move by
the transposed generator; functions move by the generator itself. This keeps
mass, constants and the maximum principle exact at the discrete level.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import expm, solve_banded
from scipy.sparse import diags
from scipy.sparse.linalg import expm_multiply
from scipy.special import exprel

from . import rng
from .model import ModelError, ModelSpec, kernel_field, normal_cell_probabilities, validate


@dataclass(frozen=True)
class ThetaGrid:
    """Uniform spin grid on [-theta_max, theta_max].

    ``noflux``: n cells with centers ``points`` and faces ``edges``.
    ``absorbing``: n interior nodes of a vertex grid whose end nodes are killed;
    ``edges`` are the midpoints between consecutive nodes, including the two
    outer ones.
    """

    theta_max: float
    n: int
    boundary: str = "noflux"

    def __post_init__(self):
        if self.n < 16:
            raise ModelError("spin grid needs at least 16 points")
        if self.boundary not in ("noflux", "absorbing"):
            raise ModelError(f"unknown boundary {self.boundary!r}")

    @property
    def h(self) -> float:
        k = self.n if self.boundary == "noflux" else self.n + 1
        return 2 * self.theta_max / k

    @property
    def points(self) -> np.ndarray:
        h = self.h
        if self.boundary == "noflux":
            return -self.theta_max + (np.arange(self.n) + 0.5) * h
        return -self.theta_max + (np.arange(self.n) + 1) * h

    @property
    def edges(self) -> np.ndarray:
        return np.concatenate([self.points - 0.5 * self.h, [self.points[-1] + 0.5 * self.h]])


@dataclass(frozen=True)
class SpaceEnvGrid:
    """Torus cells x_i = i/nx with environment quadrature nodes and weights per cell."""

    x: np.ndarray  # (nx,)
    nodes: np.ndarray  # (nx, Q, m)
    weights: np.ndarray  # (nx, Q)

    @classmethod
    def from_spec(cls, spec: ModelSpec, nx: int, order: int = 3) -> "SpaceEnvGrid":
        if spec.lattice.d != 1:
            raise ModelError("grid solvers are one-dimensional in space")
        x = np.arange(nx) / nx
        nodes, weights = spec.environment.quadrature(x[:, None], order)
        return cls(x, nodes, weights)

    @property
    def nx(self) -> int:
        return len(self.x)

    @property
    def Q(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True)
class GridSlice:
    values: np.ndarray  # (nx, Q, n)
    theta: ThetaGrid
    space: SpaceEnvGrid

    def moment_atoms(self):
        sp = self.space
        c = (sp.weights / sp.nx) * self.theta.h * (self.values @ self.theta.points)
        return np.repeat(sp.x, sp.Q)[:, None], sp.nodes.reshape(-1, sp.nodes.shape[-1]), c.ravel()

    def cell_masses(self) -> np.ndarray:
        """(nx, Q, n) probability of each (cell, node, spin cell), normalized over everything."""
        sp = self.space
        return (sp.weights / sp.nx)[..., None] * self.values * self.theta.h

    def integrate(self, f: Callable) -> float:
        sp = self.space
        vals = f(sp.x[:, None, None], sp.nodes[..., None, :], self.theta.points[None, None, :])
        return float(np.sum(self.cell_masses() * vals))


@dataclass
class GridDensityPath:
    """Time-indexed densities xi_t(x_i, w_q, theta_l) with env weights from the grid."""

    times: np.ndarray
    values: np.ndarray  # (T, nx, Q, n)
    theta: ThetaGrid
    space: SpaceEnvGrid
    diagnostics: dict = field(default_factory=dict)

    def slice(self, j: int) -> GridSlice:
        return GridSlice(self.values[j], self.theta, self.space)

    def block_masses(self) -> np.ndarray:
        return self.theta.h * self.values.sum(axis=-1)

    def masses(self) -> np.ndarray:
        """Per (t, x) total mass, equal to 1 for a normalized flow."""
        return np.sum(self.space.weights[None] * self.block_masses(), axis=-1)

    def moment_atoms_all(self):
        sp = self.space
        c = (sp.weights / sp.nx)[None] * self.theta.h * (self.values @ self.theta.points)
        return np.repeat(sp.x, sp.Q)[:, None], sp.nodes.reshape(-1, sp.nodes.shape[-1]), c.reshape(len(self.times), -1)

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        """Overall spin mean and variance at each time."""
        th = self.theta.points
        p = (self.space.weights / self.space.nx)[None, ..., None] * self.values * self.theta.h
        m1 = np.sum(p * th, axis=(1, 2, 3))
        m2 = np.sum(p * th ** 2, axis=(1, 2, 3))
        return m1, m2 - m1 ** 2


def initial_density(spec: ModelSpec, theta: ThetaGrid, space: SpaceEnvGrid) -> np.ndarray:
    """Cell-averaged density of dx (x) zeta_x (x) nu_x on the grid, shape (nx, Q, n)."""
    if theta.boundary != "noflux":
        raise ModelError("densities live on a no-flux grid")
    p = spec.initial.cell_masses(space.x[:, None], theta.edges) / theta.h
    return np.broadcast_to(p[:, None, :], (space.nx, space.Q, theta.n)).copy()


def gaussian_density(theta: ThetaGrid, mean, var) -> np.ndarray:
    """Cell-averaged Gaussian densities on a no-flux grid; broadcasts over leading axes."""
    mean = np.asarray(mean, float)[..., None]
    sd = np.sqrt(np.asarray(var, float))[..., None]
    p = normal_cell_probabilities((theta.edges - mean) / sd)
    return p / p.sum(axis=-1, keepdims=True) / theta.h


def gaussian_flow(theta: ThetaGrid, space: SpaceEnvGrid, times, mean: Callable, var: Callable) -> GridDensityPath:
    """Flow of Gaussian slices with mean(t, x, w1) and var(t), discretized like gaussian_density."""
    times = np.asarray(times, float)
    t = times[:, None, None]
    m = np.broadcast_to(mean(t, space.x[None, :, None], space.nodes[None, ..., 0]), (len(times), space.nx, space.Q))
    v = np.broadcast_to(np.asarray(var(t), float), m.shape)
    return GridDensityPath(times, gaussian_density(theta, m, v), theta, space, {"boundary_flag": False})


# --- birth-death generator -------------------------------------------------

def _fitted(z):
    # z / (e^z - 1), finite for all real z
    with np.errstate(over="ignore"):
        return 1.0 / exprel(z)


def chain_rates(edge_drift, D: float, grid: ThetaGrid):
    """Jump rates across each edge: up[e] from point e-1 to e, down[e] back."""
    h = grid.h
    a = np.asarray(edge_drift, float)
    if D > 0:
        P = a * h / D
        up = (D / h ** 2) * _fitted(-P)
        down = (D / h ** 2) * _fitted(P)
    else:
        up, down = np.maximum(a, 0) / h, np.maximum(-a, 0) / h
    up, down = up.copy(), down.copy()
    up[..., 0] = 0.0
    down[..., -1] = 0.0
    if grid.boundary == "noflux":
        down[..., 0] = 0.0
        up[..., -1] = 0.0
    return up, down


def apply_forward(up, down, xi):
    """Transposed generator applied to densities xi (..., n)."""
    out = -(up[..., 1:] + down[..., :-1]) * xi
    out[..., 1:] += up[..., 1:-1] * xi[..., :-1]
    out[..., :-1] += down[..., 1:-1] * xi[..., 1:]
    return out


def apply_backward(up, down, g):
    """Generator applied to functions g (..., n)."""
    out = -(up[..., 1:] + down[..., :-1]) * g
    out[..., :-1] += up[..., 1:-1] * g[..., 1:]
    out[..., 1:] += down[..., 1:-1] * g[..., :-1]
    return out


def _implicit_solve(up, down, dt, rhs, transpose: bool):
    """Solve (I - dt A) u = rhs for every block at once, A the generator or its transpose."""
    B, n = up.shape[0], up.shape[-1] - 1
    diag = 1.0 + dt * (up[:, 1:] + down[:, :-1])
    if transpose:
        upper, lower = -dt * down[:, 1:-1], -dt * up[:, 1:-1]
    else:
        upper, lower = -dt * up[:, 1:-1], -dt * down[:, 1:-1]
    pad = np.zeros((B, 1))
    upper = np.concatenate([upper, pad], axis=1).ravel()
    lower = np.concatenate([lower, pad], axis=1).ravel()
    ab = np.zeros((3, B * n))
    ab[0, 1:] = upper[:-1]
    ab[1] = diag.ravel()
    ab[2, :-1] = lower[:-1]
    tail = rhs.shape[2:]
    sol = solve_banded((1, 1), ab, rhs.reshape(B * n, *tail), check_finite=False)
    return sol.reshape(B, n, *tail)


def _generator_matrix(up, down):
    B, n = up.shape[0], up.shape[-1] - 1
    diag = -(up[:, 1:] + down[:, :-1])
    pad = np.zeros((B, 1))
    upper = np.concatenate([up[:, 1:-1], pad], axis=1).ravel()[:-1]
    lower = np.concatenate([down[:, 1:-1], pad], axis=1).ravel()[:-1]
    return diags([lower, diag.ravel(), upper], [-1, 0, 1], format="csr")


# --- McKean-Vlasov ------------------------------------------------------------

def _block_field_matrix(spec: ModelSpec, space: SpaceEnvGrid) -> np.ndarray:
    """Matrix K with beta_(i,q) = K @ c for spin moments c of the (i', q') blocks."""
    xq = np.repeat(space.x, space.Q)[:, None]
    wq = space.nodes.reshape(-1, space.nodes.shape[-1])
    eye = np.eye(len(xq))
    return kernel_field(spec.kernel, xq, wq, xq, wq, eye).T


def boundary_mass(values, grid: ThetaGrid, frac: float = 0.05) -> float:
    """Largest per-block mass within frac*theta_max of the spin boundary."""
    strip = np.abs(grid.points) > (1 - frac) * grid.theta_max
    return float(np.max(grid.h * values[..., strip].sum(axis=-1)))


START_SUBSTEPS = 16


def solve_mckean_vlasov(
    spec: ModelSpec, theta: ThetaGrid, space: SpaceEnvGrid, xi0: np.ndarray, steps: int,
    control: Callable | None = None, check: bool = True,
) -> GridDensityPath:
    """Implicit finite-volume solve of the environment-extended McKean-Vlasov equation.

    Time stepping is BDF2 with the effective field extrapolated linearly from
    the two previous levels; the first level comes from backward Euler substeps.
    ``control(t, x, w, theta)`` adds an extra drift.
    """
    if check:
        bad = validate(spec)
        if bad:
            raise ModelError("specification violates assumptions: " + "; ".join(map(str, bad)))
    if theta.boundary != "noflux":
        raise ModelError("densities need a no-flux grid")
    xi = np.array(xi0, dtype=float)
    if xi.shape != (space.nx, space.Q, theta.n):
        raise ModelError("initial density does not match the grids")
    mass = np.sum(space.weights * theta.h * xi.sum(axis=-1), axis=-1)
    if not np.allclose(mass, 1.0, atol=1e-8):
        raise ModelError("initial density is not normalized per position")
    dt = spec.horizon / steps
    D = 0.5 * spec.sigma ** 2
    K = _block_field_matrix(spec, space)
    e = theta.edges
    static = -spec.potential.grad(e[None, None, :], space.nodes[..., 0:1])
    out = np.empty((steps + 1, *xi.shape))
    out[0] = xi
    th = theta.points
    clipped = 0

    def field(u):
        c = (space.weights / space.nx) * theta.h * (u @ th)
        return (K @ c.ravel()).reshape(space.nx, space.Q)

    def solve(rhs, beta, t_new, step):
        nonlocal clipped
        a = static + beta[..., None]
        if control is not None:
            a = a + control(t_new, space.x[:, None, None], space.nodes[..., None, :], e[None, None, :])
        up, down = chain_rates(a.reshape(-1, theta.n + 1), D, theta)
        u = _implicit_solve(up, down, step, rhs.reshape(-1, theta.n), transpose=True).reshape(rhs.shape)
        if np.any(u < 0):
            clipped += int(np.count_nonzero(u < -1e-12))
            u = np.maximum(u, 0.0)
        return u

    # the first level comes from backward Euler substeps, then BDF2
    sub = dt / START_SUBSTEPS
    u = xi
    for k in range(START_SUBSTEPS):
        u = solve(u, field(u), (k + 1) * sub, sub)
    out[1] = u
    for j in range(1, steps):
        b_now, b_old = field(out[j]), field(out[j - 1])
        out[j + 1] = solve((4 * out[j] - out[j - 1]) / 3, 2 * b_now - b_old, (j + 1) * dt, 2 * dt / 3)
    diag = {"boundary_mass": boundary_mass(out, theta), "clipped": clipped, "dt": dt}
    diag["boundary_flag"] = diag["boundary_mass"] > 1e-4
    return GridDensityPath(np.linspace(0, spec.horizon, steps + 1), out, theta, space, diag)


# --- backward problems ----------------------------------------------------------

def flow_field(spec: ModelSpec, flow: GridDensityPath | None, x, w) -> tuple[np.ndarray, np.ndarray]:
    """Effective field at points (x, w) along the flow: (flow times, values (T, B))."""
    x = np.atleast_1d(np.asarray(x, float)).reshape(-1, 1)
    w = np.atleast_2d(np.asarray(w, float))
    if flow is None or spec.kernel.is_zero:
        return np.array([0.0, np.inf]), np.zeros((2, len(x)))
    xs, ws, cs = flow.moment_atoms_all()
    return np.asarray(flow.times), kernel_field(spec.kernel, x, w, xs, ws, cs)


def _interp_time(times, values, t):
    if not np.isfinite(times[-1]):
        return values[0]
    k = int(np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(times) - 2))
    a = (t - times[k]) / (times[k + 1] - times[k])
    return (1 - a) * values[k] + a * values[k + 1]


class BlockDynamics:
    """Frozen-field generator for a set of (x, w) blocks on a spin grid."""

    def __init__(self, spec: ModelSpec, flow, x, w, grid: ThetaGrid, control: Callable | None = None):
        self.spec, self.grid = spec, grid
        x = np.atleast_1d(np.asarray(x, float))
        w = np.atleast_2d(np.asarray(w, float))
        if len(x) == 1 and len(w) > 1:
            x = np.repeat(x, len(w))
        self.x, self.w = x, w
        self.ftimes, self.beta = flow_field(spec, flow, x, w)
        self.homogeneous = (not np.isfinite(self.ftimes[-1])) and control is None
        self.control = control
        self.D = 0.5 * spec.sigma ** 2
        self._static = -spec.potential.grad(grid.edges[None, :], w[:, 0:1])

    def edge_drift(self, t: float) -> np.ndarray:
        a = self._static + _interp_time(self.ftimes, self.beta, t)[:, None]
        if self.control is not None:
            a = a + self.control(t, self.x[:, None], self.w[:, None, :], self.grid.edges[None, :])
        return a

    def rates(self, t: float):
        return chain_rates(self.edge_drift(t), self.D, self.grid)

    def drift_at(self, t: float, theta) -> np.ndarray:
        a = -self.spec.potential.grad(theta, self.w[:, 0:1]) + _interp_time(self.ftimes, self.beta, t)[:, None]
        if self.control is not None:
            a = a + self.control(t, self.x[:, None], self.w[:, None, :], theta)
        return a

    def _dense_exponential(self, t: float, span: float) -> np.ndarray:
        up, down = self.rates(t)
        B, n = up.shape[0], up.shape[-1] - 1
        A = np.zeros((B, n, n))
        idx = np.arange(n)
        A[:, idx, idx] = -(up[:, 1:] + down[:, :-1])
        A[:, idx[:-1], idx[1:]] = up[:, 1:-1]
        A[:, idx[1:], idx[:-1]] = down[:, 1:-1]
        return expm(A * span)

    def propagate(self, s: float, t: float, terminal: np.ndarray, dt_max: float = 1e-3,
                  record: int = 0) -> np.ndarray | tuple[np.ndarray, np.ndarray]:
        """g(s) for dg/ds = -L g with g(t) = terminal, terminal shape (B, n[, k]).

        With ``record`` > 0, also returns the solution on record+1 equally spaced
        times from s to t as (times, values).
        """
        if t < s:
            raise ValueError("need s <= t")
        g = np.array(terminal, dtype=float)
        if t == s:
            return (np.array([s]), g[None]) if record else g
        if self.homogeneous and not record and g.ndim == 3 and g.shape[-1] * 4 >= g.shape[1]:
            return self._dense_exponential(t, t - s) @ g
        if self.homogeneous:
            up, down = self.rates(t)
            A = _generator_matrix(up, down)
            flat = g.reshape(A.shape[0], -1)
            if record:
                hist = expm_multiply(A, flat, start=0.0, stop=t - s, num=record + 1, endpoint=True)
                times = np.linspace(t, s, record + 1)
                return times[::-1], hist[::-1].reshape(record + 1, *g.shape)
            return expm_multiply(A * (t - s), flat).reshape(g.shape)
        K = max(1, math.ceil((t - s) / dt_max - 1e-9))
        if record:
            K = math.ceil(K / record) * record
        dt = (t - s) / K
        hist = [g] if record else None
        for k in range(K):
            tau = t - (k + 1) * dt
            up, down = self.rates(tau)
            g = _implicit_solve(up, down, dt, g, transpose=False)
            if record and (k + 1) % (K // record) == 0:
                hist.append(g)
        if record:
            return np.linspace(t, s, record + 1)[::-1], np.stack(hist[::-1])
        return g


@dataclass(frozen=True)
class GridFunction:
    theta: np.ndarray
    values: np.ndarray
    boundary_mass: float = 0.0
    flagged: bool = False

    def __call__(self, th):
        return np.interp(th, self.theta, self.values)


def _as_grid_values(f, points) -> np.ndarray:
    return np.asarray(f(points), float) * np.ones_like(points) if callable(f) else np.asarray(f, float)


def semigroup_U(spec: ModelSpec, flow, s: float, t: float, f, x: float, w, grid: ThetaGrid,
                dt_max: float = 1e-3) -> GridFunction:
    """U_{s,t} f at (x, w): conditional expectation of f(theta_t) given theta_s on the grid."""
    if not 0 <= s <= t:
        raise ValueError("need 0 <= s <= t")
    dyn = BlockDynamics(spec, flow, [x], np.atleast_2d(w), grid)
    pts = grid.points
    fv = _as_grid_values(f, pts)
    strip = (np.abs(pts) > 0.95 * grid.theta_max).astype(float)
    out = dyn.propagate(s, t, np.stack([fv, strip], axis=-1)[None], dt_max)
    vals, leak = out[0, :, 0], out[0, :, 1]
    central = np.abs(pts) <= 0.5 * grid.theta_max
    bm = float(np.max(leak[central]))
    return GridFunction(pts, vals, bm, bm > 1e-4)


@dataclass(frozen=True)
class KilledSolution:
    theta: np.ndarray  # interior nodes
    times: np.ndarray
    values: np.ndarray  # (times, nodes)
    R: float

    def at(self, s_index: int = 0) -> np.ndarray:
        return self.values[s_index]

    def __call__(self, th, s_index: int = 0):
        xs = np.concatenate([[-self.R], self.theta, [self.R]])
        ys = np.concatenate([[0.0], self.values[s_index], [0.0]])
        return np.interp(th, xs, ys)


def solve_backward_killed(spec: ModelSpec, flow, R: float, terminal, x: float, w, t: float,
                          grid: ThetaGrid | None = None, s: float = 0.0, dt_max: float = 1e-3,
                          record: int = 10) -> KilledSolution:
    """Backward equation on [-R, R] with zero boundary values and terminal data at t."""
    grid = grid or ThetaGrid(R, 399, "absorbing")
    if grid.boundary != "absorbing" or abs(grid.theta_max - R) > 1e-12:
        raise ModelError("killed problems need an absorbing grid on [-R, R]")
    dyn = BlockDynamics(spec, flow, [x], np.atleast_2d(w), grid)
    fv = _as_grid_values(terminal, grid.points)
    times, hist = dyn.propagate(s, t, fv[None, :], dt_max, record=record)
    return KilledSolution(grid.points, times, hist[:, 0, :], R)


@dataclass(frozen=True)
class FeynmanKacResult:
    pde_value: float
    mc_value: float
    mc_stderr: float
    grid_tolerance: float = 1e-3

    @property
    def agrees(self) -> bool:
        return abs(self.pde_value - self.mc_value) <= 3 * self.mc_stderr + self.grid_tolerance


def feynman_kac_check(spec: ModelSpec, flow, R: float, terminal: Callable, x: float, w, t: float,
                      mc_samples: int, seed: int, theta0: float = 0.0, s: float = 0.0,
                      grid: ThetaGrid | None = None, mc_steps: int | None = None) -> FeynmanKacResult:
    """Compare the killed backward solution with killed Monte Carlo paths from theta0.

    Paths use Euler steps with a Brownian-bridge survival factor per step so
    that exits between grid times are accounted for.
    """
    sol = solve_backward_killed(spec, flow, R, terminal, x, w, t, grid, s)
    pde_value = float(sol(theta0))
    dyn = BlockDynamics(spec, flow, [x], np.atleast_2d(w), grid or ThetaGrid(R, 399, "absorbing"))
    K = mc_steps or max(200, int(math.ceil((t - s) / 1e-3)))
    dt = (t - s) / K
    sig = spec.sigma
    th = np.full(mc_samples, float(theta0))
    weight = np.ones(mc_samples)
    for k in range(K):
        tau = s + k * dt
        a = dyn.drift_at(tau, th[None, :])[0]
        z = rng.stream(seed, rng.AUXILIARY, k, 0).standard_normal(mc_samples)
        nxt = th + a * dt + sig * math.sqrt(dt) * z
        inside = np.abs(nxt) < R
        hi = np.clip((R - th) * (R - nxt), 0, None)
        lo = np.clip((R + th) * (R + nxt), 0, None)
        surv = (1 - np.exp(-2 * hi / (sig ** 2 * dt))) * (1 - np.exp(-2 * lo / (sig ** 2 * dt)))
        weight = np.where(inside, weight * surv, 0.0)
        th = np.where(inside, nxt, 0.0)
    vals = weight * np.where(weight > 0, np.asarray(terminal(th), float) * np.ones_like(th), 0.0)
    return FeynmanKacResult(pde_value, float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(mc_samples)))
