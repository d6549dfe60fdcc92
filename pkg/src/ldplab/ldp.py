"""Rate functions of measure flows, entropies and the Sanov rate.

Test functions are tensor products of torus Fourier modes, environment
monomials and scaled Hermite polynomials damped by a smooth cutoff in the spin.
All generator pairings are taken against test functions (integration by parts),
so densities are never differentiated except in the h reconstruction, which
works with the discrete generator instead.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial import hermite_e as He
from scipy.integrate import trapezoid
from scipy.optimize import minimize
from scipy.special import logsumexp

from .model import ModelSpec
from .pde import (BlockDynamics, GridDensityPath, GridSlice, SpaceEnvGrid, ThetaGrid, _block_field_matrix,
                  apply_forward, chain_rates, solve_mckean_vlasov, initial_density)

PINV_CUTOFF = 1e-10
DUALITY_TOL = 1e-9


# --- entropies --------------------------------------------------------------------

def relative_entropy_grid(p, q, tol: float = 1e-9) -> float:
    p = np.asarray(p, float).ravel()
    q = np.asarray(q, float).ravel()
    if p.shape != q.shape:
        raise ValueError("distributions live on different grids")
    if np.any(p < 0) or np.any(q < 0) or abs(p.sum() - 1) > tol or abs(q.sum() - 1) > tol:
        raise ValueError("relative entropy needs two normalized nonnegative vectors")
    pos = p > 0
    if np.any(q[pos] == 0):
        return math.inf
    return float(np.sum(p[pos] * np.log(p[pos] / q[pos])))


def relative_entropy_gaussian(m1: float, v1: float, m0: float, v0: float) -> float:
    r = v1 / v0
    return 0.5 * (r - 1 - math.log(r) + (m1 - m0) ** 2 / v0)


def _xlogy_ratio(p, q):
    p, q = np.broadcast_arrays(np.asarray(p, float), np.asarray(q, float))
    out = np.zeros(p.shape)
    pos = p > 0
    bad = pos & (q <= 0)
    out[pos & ~bad] = p[pos & ~bad] * np.log(p[pos & ~bad] / q[pos & ~bad])
    out[bad] = np.inf
    return out


@dataclass(frozen=True)
class EntropyDecomposition:
    total: float
    spin: float
    environment: float
    flag: str = ""


def initial_entropy(mu0: GridSlice, spec: ModelSpec, tol: float = 1e-8) -> EntropyDecomposition:
    """Relative entropy of an initial slice w.r.t. dx (x) zeta_x (x) nu_x, split in two layers.

    spin: integral over x and the environment marginal of the conditional spin
    entropies; environment: integral over x of the environment-marginal entropy.
    The total is evaluated on the joint cell masses, independently of the split.
    """
    sp, th = mu0.space, mu0.theta
    bm = th.h * mu0.values.sum(axis=-1)
    pi = sp.weights * bm
    if not np.allclose(pi.sum(axis=1), 1.0, atol=tol):
        return EntropyDecomposition(math.inf, math.inf, math.inf, "x-marginal is not Lebesgue")
    ref = spec.initial.cell_masses(sp.x[:, None], th.edges)
    with np.errstate(invalid="ignore", divide="ignore"):
        cond = np.where(bm[..., None] > 0, mu0.values * th.h / bm[..., None], 0.0)
    spin_blocks = _xlogy_ratio(cond, ref[:, None, :]).sum(axis=-1)
    spin_blocks = np.where(pi > 0, spin_blocks, 0.0)
    spin = float(np.sum(pi * spin_blocks) / sp.nx)
    env = float(np.sum(_xlogy_ratio(pi, sp.weights)) / sp.nx)
    joint = sp.weights[..., None] * mu0.values * th.h
    total = float(np.sum(_xlogy_ratio(joint, sp.weights[..., None] * ref[:, None, :])) / sp.nx)
    return EntropyDecomposition(total, spin, env)


# --- test functions ------------------------------------------------------------------

def _bump(u):
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        return np.where(u > 0, np.exp(-1.0 / np.where(u > 0, u, 1.0)), 0.0)


def _bump_derivs(u):
    a = _bump(u)
    with np.errstate(divide="ignore", invalid="ignore"):
        safe = np.where(u > 0, u, 1.0)
        a1 = np.where(u > 0, a / safe ** 2, 0.0)
        a2 = np.where(u > 0, a * (1 / safe ** 4 - 2 / safe ** 3), 0.0)
    return a, a1, a2


def smooth_cutoff(theta, r0: float, r1: float):
    """C-infinity function equal to 1 on |theta| <= r0 and 0 on |theta| >= r1, with two derivatives."""
    theta = np.asarray(theta, float)
    L = r1 - r0
    u = np.clip((np.abs(theta) - r0) / L, 0.0, 1.0)
    a, a1, a2 = _bump_derivs(u)
    b, b1, b2 = _bump_derivs(1 - u)
    b1 = -b1
    s = a + b
    T = b / s
    N = b1 * a - b * a1
    T1 = N / s ** 2
    N1 = b2 * a - b * a2
    s1 = a1 + b1
    T2 = N1 / s ** 2 - 2 * N * s1 / s ** 3
    sgn = np.sign(theta)
    return T, T1 * sgn / L, T2 / L ** 2


@dataclass(frozen=True)
class TestBasis:
    """Tensor test functions: kx Fourier modes, monomials of w_1 up to kw, ktheta Hermite terms.

    The spin factors are He_k(theta/scale)/sqrt(k!) times a smooth cutoff that
    switches off between 0.75 and 0.9 of the grid radius. ``include_constant``
    adds the spin-constant factor, which detects changes of the (x, w) marginal.
    """

    kx: int = 0
    kw: int = 0
    ktheta: int = 8
    scale: float | None = None
    include_constant: bool = True

    def theta_functions(self, grid: ThetaGrid):
        th = grid.points
        s = self.scale or grid.theta_max / 6
        chi, chi1, chi2 = smooth_cutoff(th, 0.75 * grid.theta_max, 0.9 * grid.theta_max)
        f, f1, f2 = [], [], []
        if self.include_constant:
            f.append(np.ones_like(th))
            f1.append(np.zeros_like(th))
            f2.append(np.zeros_like(th))
        z = th / s
        for k in range(1, self.ktheta + 1):
            c = np.zeros(k + 1)
            c[k] = 1.0 / math.sqrt(math.factorial(k))
            p = He.hermeval(z, c)
            p1 = He.hermeval(z, He.hermeder(c)) / s
            p2 = He.hermeval(z, He.hermeder(c, 2)) / s ** 2
            f.append(p * chi)
            f1.append(p1 * chi + p * chi1)
            f2.append(p2 * chi + 2 * p1 * chi1 + p * chi2)
        return np.array(f), np.array(f1), np.array(f2)

    def xw_functions(self, space: SpaceEnvGrid) -> np.ndarray:
        x = space.x
        xs = [np.ones_like(x)]
        for k in range(1, self.kx + 1):
            xs += [np.cos(2 * np.pi * k * x), np.sin(2 * np.pi * k * x)]
        w1 = space.nodes[..., 0]
        ws = [w1 ** p for p in range(self.kw + 1)]
        return np.array([a[:, None] * b for a in xs for b in ws])

    @classmethod
    def full(cls, space: SpaceEnvGrid, ktheta: int = 8, **kw) -> "TestBasis":
        """x/w factors spanning every function on the (cell, node) grid."""
        return cls(kx=space.nx // 2, kw=space.Q - 1, ktheta=ktheta, **kw)


# --- the minus-one norm -------------------------------------------------------------------

@dataclass(frozen=True)
class ResidualCoeffs:
    a: np.ndarray
    M: np.ndarray


@dataclass(frozen=True)
class NormEvaluation:
    value: float
    rayleigh: float
    quadratic: float
    in_range: bool
    outside: float

    def __float__(self):
        return self.value


def minus_one_norm_sq(rc: ResidualCoeffs, rtol: float = 1e-7, atol: float = 1e-10) -> NormEvaluation:
    """Squared minus-one norm of a residual restricted to a finite basis.

    Evaluated twice: as half the largest Rayleigh quotient (c.a)^2 / (c'Mc) and
    as the maximum of c.a - c'Mc/2. Both reduce to a'M^+a/2 on the span and must
    agree to 1e-9 (relative above 1). Returns +inf when a has a component
    outside the range of M.
    """
    a = np.asarray(rc.a, float)
    M = 0.5 * (rc.M + rc.M.T)
    lam, V = np.linalg.eigh(M)
    top = max(lam.max(initial=0.0), 0.0)
    keep = lam > PINV_CUTOFF * top if top > 0 else np.zeros(len(lam), bool)
    Vk, lk = V[:, keep], lam[keep]
    b = Vk.T @ a
    outside = float(np.linalg.norm(a - Vk @ b))
    scale = float(np.linalg.norm(a))
    if outside > atol + rtol * scale:
        return NormEvaluation(math.inf, math.inf, math.inf, False, outside)
    if not keep.any():
        return NormEvaluation(0.0, 0.0, 0.0, True, outside)
    c = Vk @ (b / lk)
    quad = float(c @ a - 0.5 * c @ (M @ c))
    y = b / np.sqrt(lk)
    ray = 0.5 * float(np.linalg.eigvalsh(np.outer(y, y))[-1])
    if abs(quad - ray) > DUALITY_TOL * max(1.0, abs(quad)):
        raise ArithmeticError(f"norm evaluations disagree: {quad!r} vs {ray!r}")
    return NormEvaluation(quad, ray, quad, True, outside)


# --- residual pairings ----------------------------------------------------------------------

class _FlowPairings:
    """Per-block spin integrals of the test functions along a flow."""

    def __init__(self, flow: GridDensityPath, spec: ModelSpec, basis: TestBasis):
        self.flow, self.spec, self.basis = flow, spec, basis
        th, sp = flow.theta, flow.space
        f, f1, f2 = basis.theta_functions(th)
        D = 0.5 * spec.sigma ** 2
        h = th.h
        xi = flow.values
        Kf = _block_field_matrix(spec, sp)
        c = (sp.weights / sp.nx)[None] * h * (xi @ th.points)
        beta = (c.reshape(len(flow.times), -1) @ Kf.T).reshape(xi.shape[:3])
        w1 = sp.nodes[..., 0]
        base = -spec.potential.grad(th.points, 0.0)
        self.E = h * xi @ f.T
        I1 = h * xi @ f1.T
        self.L = h * xi @ (D * f2 + base * f1).T + (beta - w1[None])[..., None] * I1
        self.G = spec.sigma ** 2 * h * np.einsum("tiql,kl,ml->tiqkm", xi, f1, f1, optimize=True)
        self.beta = beta

    def time_derivative(self, j: int) -> np.ndarray:
        t, E = self.flow.times, self.E
        M = len(t) - 1
        dt = t[1] - t[0]
        if 0 < j < M:
            return (E[j + 1] - E[j - 1]) / (2 * dt)
        if j == 0:
            return (-3 * E[0] + 4 * E[1] - E[2]) / (2 * dt)
        return (3 * E[M] - 4 * E[M - 1] + E[M - 2]) / (2 * dt)

    def cell_residual(self, j: int) -> np.ndarray:
        return self.time_derivative(j) - self.L[j]


def residual_coeffs(flow: GridDensityPath, j: int, basis: TestBasis, spec: ModelSpec,
                    _pairings: _FlowPairings | None = None) -> ResidualCoeffs:
    """Pairings of d/dt mu_t minus the adjoint generator with the tensor basis, and the Gram matrix.

    Interior times use central differences; the two end times use one-sided
    second-order differences.
    """
    P = _pairings or _FlowPairings(flow, spec, basis)
    sp = flow.space
    A = basis.xw_functions(sp)
    cw = sp.weights / sp.nx
    r = P.cell_residual(j)
    a = np.einsum("iq,aiq,iqk->ak", cw, A, r).ravel()
    M = np.einsum("iq,aiq,biq,iqkm->akbm", cw, A, A, P.G[j], optimize=True)
    n = A.shape[0] * r.shape[-1]
    return ResidualCoeffs(a, M.reshape(n, n))


@dataclass
class RateReport:
    kind: str
    times: np.ndarray
    norms: np.ndarray
    integral: float
    initial: EntropyDecomposition
    total: float
    flags: list[str] = field(default_factory=list)
    phi_R: float = math.nan
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "integral": self.integral, "initial_entropy": self.initial.total,
            "initial_spin_term": self.initial.spin, "initial_environment_term": self.initial.environment,
            "total": self.total, "flags": list(self.flags), "phi_R": self.phi_R,
            **{k: v for k, v in self.extra.items() if np.isscalar(v)},
        }


def _flow_checks(flow: GridDensityPath, tol: float = 1e-6) -> list[str]:
    flags = []
    if not np.allclose(flow.masses(), 1.0, atol=tol):
        flags.append("not in C^L: x-marginal is not Lebesgue")
    if flow.diagnostics.get("boundary_flag"):
        flags.append("boundary mass above 1e-4")
    return flags


def _phi_R(flow: GridDensityPath) -> float:
    sp, th = flow.space, flow.theta
    p = (sp.weights / sp.nx)[None, ..., None] * flow.values * th.h
    return float(np.max(np.sum(p * (1 + th.points ** 2), axis=(1, 2, 3))))


def _finish(kind, flow, norms, spec, flags, extra=None) -> RateReport:
    init = initial_entropy(flow.slice(0), spec)
    if flags and any(f.startswith("not in C^L") for f in flags):
        return RateReport(kind, flow.times, norms, math.inf, init, math.inf, flags, _phi_R(flow), extra or {})
    integral = float(trapezoid(norms, flow.times)) if np.all(np.isfinite(norms)) else math.inf
    if init.flag:
        flags.append(init.flag)
    return RateReport(kind, flow.times, norms, integral, init, integral + init.total, flags, _phi_R(flow), extra or {})


def rate_S(flow: GridDensityPath, spec: ModelSpec, basis: TestBasis) -> RateReport:
    """Time integral of the squared minus-one norm of the residual plus the initial entropy."""
    flags = _flow_checks(flow)
    if any(f.startswith("not in C^L") for f in flags):
        return _finish("S", flow, np.full(len(flow.times), np.inf), spec, flags)
    P = _FlowPairings(flow, spec, basis)
    norms = np.array([minus_one_norm_sq(residual_coeffs(flow, j, basis, spec, P)).value
                      for j in range(len(flow.times))])
    if not np.all(np.isfinite(norms)):
        flags.append("residual outside the range of the Gram matrix")
    return _finish("S", flow, norms, spec, flags)


def rate_S_TW(flow: GridDensityPath, spec: ModelSpec, theta_basis: TestBasis) -> RateReport:
    """Per (x, w) spin-only norms integrated against the initial (x, w) marginal."""
    flags = _flow_checks(flow)
    if any(f.startswith("not in C^L") for f in flags):
        return _finish("S_TW", flow, np.full(len(flow.times), np.inf), spec, flags)
    basis = TestBasis(0, 0, theta_basis.ktheta, theta_basis.scale, theta_basis.include_constant)
    P = _FlowPairings(flow, spec, basis)
    sp = flow.space
    bm = flow.block_masses()
    weight0 = sp.weights * bm[0] / sp.nx
    norms = np.zeros(len(flow.times))
    for j in range(len(flow.times)):
        r = P.cell_residual(j)
        tot = 0.0
        for i in range(sp.nx):
            for q in range(sp.Q):
                if weight0[i, q] == 0:
                    continue
                m = bm[j, i, q]
                cond = minus_one_norm_sq(ResidualCoeffs(r[i, q] / m, P.G[j, i, q] / m)).value
                tot += weight0[i, q] * cond
        norms[j] = tot
    return _finish("S_TW", flow, norms, spec, flags)


# --- h representation ------------------------------------------------------------------------

@dataclass
class HField:
    times: np.ndarray
    edges: np.ndarray  # interior edges of the spin grid
    h: np.ndarray  # (T, nx, Q, n-1)
    density: np.ndarray  # density at the interior edges, same shape
    flags: list[str]
    mass_deficit: float


def h_recovery(flow: GridDensityPath, spec: ModelSpec, floor: float = 1e-12, tol: float = 1e-6) -> HField:
    """Solve sigma^2 mu h = antiderivative of (d/dt mu - adjoint generator applied to mu) per (t, x, w)."""
    th, sp = flow.theta, flow.space
    xi = flow.values
    t = flow.times
    dt = t[1] - t[0]
    T = len(t)
    D = 0.5 * spec.sigma ** 2
    Kf = _block_field_matrix(spec, sp)
    static = -spec.potential.grad(th.edges[None, None, :], sp.nodes[..., 0:1])
    dxi = np.empty_like(xi)
    dxi[1:-1] = (xi[2:] - xi[:-2]) / (2 * dt)
    dxi[0] = (-3 * xi[0] + 4 * xi[1] - xi[2]) / (2 * dt)
    dxi[-1] = (3 * xi[-1] - 4 * xi[-2] + xi[-3]) / (2 * dt)
    hs = np.zeros((T, sp.nx, sp.Q, th.n - 1))
    dens = 0.5 * (xi[..., 1:] + xi[..., :-1])
    flags: list[str] = []
    deficit = 0.0
    for j in range(T):
        c = (sp.weights / sp.nx) * th.h * (xi[j] @ th.points)
        beta = (Kf @ c.ravel()).reshape(sp.nx, sp.Q)
        up, down = chain_rates((static + beta[..., None]).reshape(-1, th.n + 1), D, th)
        r = dxi[j] - apply_forward(up, down, xi[j].reshape(-1, th.n)).reshape(xi[j].shape)
        cum = th.h * np.cumsum(r, axis=-1)
        scale = th.h * np.abs(r).sum(axis=-1)
        if np.any(np.abs(cum[..., -1]) > tol * scale + 1e-10):
            flags.append(f"residual not a spin gradient at t={t[j]:.4g}")
        ok = dens[j] >= floor
        hs[j] = np.where(ok, cum[..., :-1] / (spec.sigma ** 2 * np.where(ok, dens[j], 1.0)), 0.0)
        deficit = max(deficit, float(np.max(th.h * np.where(ok, 0.0, dens[j]).sum(axis=-1))))
    return HField(t, th.edges[1:-1], hs, dens, flags, deficit)


def rate_via_h(flow: GridDensityPath, spec: ModelSpec, hf: HField | None = None) -> RateReport:
    """Time integral of (sigma^2/2) int h^2 dmu_t plus the initial entropy."""
    flags = _flow_checks(flow)
    if any(f.startswith("not in C^L") for f in flags):
        return _finish("h", flow, np.full(len(flow.times), np.inf), spec, flags)
    hf = hf or h_recovery(flow, spec)
    flags += hf.flags
    sp = flow.space
    cw = sp.weights / sp.nx
    per = 0.5 * spec.sigma ** 2 * flow.theta.h * np.sum(hf.h ** 2 * hf.density, axis=-1)
    norms = np.sum(cw[None] * per, axis=(1, 2))
    if hf.flags:
        norms = np.full(len(flow.times), np.inf)
    return _finish("h", flow, norms, spec, flags, {"mass_deficit": hf.mass_deficit})


# --- Sanov rate ---------------------------------------------------------------------------------

@dataclass
class SanovResult:
    exact: float
    spin: float
    environment: float
    lower_bounds: list[float]
    sizes: list[int]
    flag: str = ""


def _sanov_family(nx: int, w_values, y_values) -> list[np.ndarray]:
    x = np.arange(nx) / nx
    xs = [(0, np.ones(nx))]
    for k in range(1, nx // 2 + 1):
        xs.append((k, np.cos(2 * np.pi * k * x)))
        if 2 * k != nx:
            xs.append((k, np.sin(2 * np.pi * k * x)))
    w = np.asarray(w_values, float)
    y = np.asarray(y_values, float)
    wsc = np.max(np.abs(w)) or 1.0
    ysc = np.max(np.abs(y)) or 1.0
    ws = [(p, (w / wsc) ** p) for p in range(len(w))]
    ys = [(p, (y / ysc) ** p) for p in range(len(y))]
    items = []
    for dx, fx in xs:
        for dw, fw in ws:
            for dy, fy in ys:
                if dx == dw == dy == 0:
                    continue
                items.append((dx + dw + dy, dy == 0, fx[:, None, None] * fw[None, :, None] * fy[None, None, :]))
    items.sort(key=lambda t: (t[0], t[1]))
    return [f for _, _, f in items]


def sanov_rate(gamma, zeta, Q, w_values=None, y_values=None, max_family: int = 16,
               tol: float = 1e-10) -> SanovResult:
    """Rate of a finite-support measure on (x grid) x W x Y relative to dx (x) zeta_x (x) Q_{x,w}.

    gamma (nx, nW, nY) sums to 1; zeta (nx, nW); Q (nx, nW, nY). Returns the
    exact value from the two-layer decomposition and variational lower bounds
    over nested families of sizes 1..max_family.
    """
    G = np.asarray(gamma, float)
    Z = np.asarray(zeta, float)
    Qr = np.asarray(Q, float)
    nx, nW, nY = G.shape
    w_values = np.arange(nW) if w_values is None else w_values
    y_values = np.arange(nY) if y_values is None else y_values
    marg = G.sum(axis=(1, 2))
    flag = ""
    if not np.allclose(marg, 1.0 / nx, atol=tol):
        flag = "x-marginal is not Lebesgue"
        exact = spin = env = math.inf
    else:
        Gx = G * nx
        GW = Gx.sum(axis=2)
        with np.errstate(invalid="ignore", divide="ignore"):
            cond = np.where(GW[..., None] > 0, Gx / GW[..., None], 0.0)
        spin = float(np.sum(GW * _xlogy_ratio(cond, Qr).sum(axis=2)) / nx)
        env = float(np.sum(_xlogy_ratio(GW, Z)) / nx)
        exact = spin + env
    fam = _sanov_family(nx, w_values, y_values)
    ref = Z[..., None] * Qr
    with np.errstate(divide="ignore"):
        logref = np.log(ref)

    def objective(c, Fs):
        f = np.tensordot(c, Fs, axes=1) if len(c) else np.zeros(G.shape)
        z = np.where(ref > 0, logref + f, -np.inf).reshape(nx, -1)
        lse = logsumexp(z, axis=1)
        tilt = np.exp(z - lse[:, None]).reshape(G.shape)
        val = np.sum(G * f) - lse.sum() / nx
        grad = np.tensordot(Fs, G, axes=3) - np.tensordot(Fs, tilt, axes=3) / nx
        return -val, -grad

    bounds, sizes = [], []
    c = np.zeros(0)
    best = 0.0
    for k in range(1, min(max_family, len(fam)) + 1):
        Fs = np.array(fam[:k])
        c0 = np.concatenate([c, [0.0]])
        res = minimize(objective, c0, args=(Fs,), jac=True, method="L-BFGS-B")
        val = -res.fun
        if val >= best:
            best, c = val, res.x
        else:
            c = c0
        bounds.append(best)
        sizes.append(k)
    return SanovResult(exact, spin, env, bounds, sizes, flag)


# --- two-time lower bound ---------------------------------------------------------------------------

@dataclass
class S2Result:
    value: float
    terms: list[float]
    times: list[float]
    flags: list[str]


def _time_index(flow: GridDensityPath, t: float) -> int:
    j = int(np.argmin(np.abs(flow.times - t)))
    if abs(flow.times[j] - t) > 1e-9:
        raise ValueError(f"time {t} is not on the flow grid")
    return j


def _maximize(obj, k: int, restarts: int, seed: int) -> tuple[float, bool]:
    gen = np.random.default_rng(seed)
    best, ok = -math.inf, False
    for r in range(restarts):
        c0 = np.zeros(k) if r == 0 else 0.1 * gen.standard_normal(k)
        res = minimize(obj, c0, jac=True, method="L-BFGS-B", options={"maxiter": 500})
        if -res.fun > best:
            best, ok = -res.fun, bool(res.success)
    return best, ok


def rate_S2_lower_bound(flow: GridDensityPath, times: Sequence[float], spec: ModelSpec, basis: TestBasis,
                        dt_max: float | None = None, restarts: int = 2, seed: int = 0) -> S2Result:
    """Sum over consecutive times of sup_f int f dmu_ti - int log U e^f dmu_t(i-1), first step from nu.

    The sup runs over spin functions from the basis, separately on every (x, w)
    block, which spans all functions of (x, w) on the grid. Any coefficients give
    a valid lower bound, so the result is certified even if the ascent stalls.
    """
    th, sp = flow.theta, flow.space
    dt_max = dt_max or float(flow.times[1] - flow.times[0])
    f_all, _, _ = TestBasis(0, 0, basis.ktheta, basis.scale, True).theta_functions(th)
    f_nc = f_all[1:]
    idx = [_time_index(flow, t) for t in times]
    if sorted(idx) != idx or len(set(idx)) != len(idx):
        raise ValueError("times must be strictly increasing")
    cw = sp.weights / sp.nx
    mass = cw[..., None] * flow.values * th.h  # (T, nx, Q, n)
    xs = np.repeat(sp.x, sp.Q)
    ws = sp.nodes.reshape(-1, sp.nodes.shape[-1])
    dyn = BlockDynamics(spec, flow, xs, ws, th)
    B, n = len(xs), th.n
    eye = np.broadcast_to(np.eye(n), (B, n, n))
    flags: list[str] = []
    terms: list[float] = []
    nu = spec.initial.cell_masses(sp.x[:, None], th.edges)  # (nx, n)

    # first summand: from dx (x) zeta (x) nu to mu_t1
    t1 = flow.times[idx[0]]
    P = dyn.propagate(0.0, t1, eye, dt_max).reshape(sp.nx, sp.Q, n, n) if t1 > 0 else None
    K = len(f_all)
    first = 0.0
    for i in range(sp.nx):
        target = mass[idx[0], i]  # (Q, n)
        wq = sp.weights[i]

        def obj(c, i=i, target=target, wq=wq):
            C = c.reshape(sp.Q, K)
            f = C @ f_all  # (Q, n)
            top = f.max()
            e = np.exp(f - top)
            u = np.einsum("qlm,qm->ql", P[i], e) if P is not None else e
            Z = np.sum(wq[:, None] * nu[i][None, :] * u)
            val = np.sum(target * f) - (top + math.log(Z)) / sp.nx
            lam = wq[:, None] * nu[i][None, :] / Z
            back = np.einsum("qlm,ql->qm", P[i], lam) if P is not None else lam
            grad = (target @ f_all.T) - ((back * e) @ f_all.T) / sp.nx
            return -val, -grad.ravel()

        v, ok = _maximize(obj, sp.Q * K, restarts, seed + i)
        if not ok:
            flags.append(f"ascent did not converge (first summand, cell {i})")
        first += v
    terms.append(first)

    for a, b in zip(idx[:-1], idx[1:]):
        s, t = flow.times[a], flow.times[b]
        P = dyn.propagate(s, t, eye, dt_max)  # (B, n, n)
        ms = mass[a].reshape(B, n)
        mt = mass[b].reshape(B, n)
        total = 0.0
        for blk in range(B):
            if ms[blk].sum() == 0:
                continue

            def obj(c, blk=blk):
                f = c @ f_nc
                top = f.max()
                e = np.exp(f - top)
                u = P[blk] @ e
                val = mt[blk] @ f - ms[blk] @ (np.log(u) + top)
                back = P[blk].T @ (ms[blk] / u)
                grad = f_nc @ mt[blk] - f_nc @ (back * e)
                return -val, -grad

            v, ok = _maximize(obj, len(f_nc), restarts, seed + 1000 * b + blk)
            if not ok:
                flags.append(f"ascent did not converge (t={t:.4g}, block {blk})")
            total += v
        terms.append(total)
    return S2Result(float(sum(terms)), terms, [float(flow.times[j]) for j in idx], flags)


# --- controlled path measures ------------------------------------------------------------------------

@dataclass(frozen=True)
class ControlledSpec:
    """A controlled dynamics: the model drift plus control(t, x, w, theta), started from initial."""

    control: Callable
    initial: np.ndarray | None = None  # (nx, Q, n) density; None means dx (x) zeta (x) nu


@dataclass
class ControlledRate:
    value: float
    control_cost: float
    initial: EntropyDecomposition
    flow: GridDensityPath
    flags: list[str]


def rate_I_controlled(q: ControlledSpec, spec: ModelSpec, theta: ThetaGrid, space: SpaceEnvGrid,
                      steps: int) -> ControlledRate:
    """Quadratic control cost along the controlled flow plus the layered initial entropy."""
    xi0 = initial_density(spec, theta, space) if q.initial is None else q.initial
    flow = solve_mckean_vlasov(spec, theta, space, xi0, steps, control=q.control)
    sp = space
    u = q.control(flow.times[:, None, None, None], sp.x[None, :, None, None],
                  sp.nodes[None, :, :, None, :], theta.points[None, None, None, :])
    u = np.broadcast_to(u, flow.values.shape)
    dens = (sp.weights / sp.nx)[None, ..., None] * flow.values * theta.h
    per_t = np.sum(dens * u ** 2, axis=(1, 2, 3)) / (2 * spec.sigma ** 2)
    cost = float(trapezoid(per_t, flow.times))
    init = initial_entropy(flow.slice(0), spec)
    flags = ["boundary mass above 1e-4"] if flow.diagnostics.get("boundary_flag") else []
    return ControlledRate(cost + init.total, cost, init, flow, flags)
