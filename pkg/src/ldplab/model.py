"""Model specification for the lattice spin system in a random environment.

A model is a torus lattice, a confining single-spin potential with a linear
environment coupling, a pair kernel, a law for the frozen environment marks,
an initial law for the spins, a diffusion coefficient and a time horizon.
Closed forms are selected from named presets so that specs stay serializable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from numpy.polynomial import polynomial as npoly
from scipy.special import roots_legendre


class ModelError(ValueError):
    """Raised for malformed specifications or mismatched inputs."""


def wrap(dx):
    """Map displacements on the unit torus to the representative in [-1/2, 1/2)."""
    dx = np.asarray(dx, dtype=float)
    return dx - np.floor(dx + 0.5)


@dataclass(frozen=True)
class TorusLattice:
    d: int
    N: int

    def __post_init__(self):
        if self.d < 1 or self.N < 1:
            raise ModelError("lattice needs d >= 1 and N >= 1")

    @property
    def n_sites(self) -> int:
        return self.N ** self.d

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.N,) * self.d

    def positions(self) -> np.ndarray:
        """Normalized site positions k/N, shape (N^d, d), C order."""
        idx = np.indices(self.shape).reshape(self.d, -1).T
        return idx / self.N


@dataclass(frozen=True)
class Profile:
    """A scalar function of the torus position used for centers and shifts.

    kinds: ``constant`` (value), ``cosine`` (value + amplitude*cos(2 pi mode x_1))
    and ``halves`` (value for x_1 < 1/2, second otherwise).
    """

    kind: str = "constant"
    value: float = 0.0
    amplitude: float = 0.0
    mode: int = 1
    second: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "cosine", "halves"):
            raise ModelError(f"unknown profile kind {self.kind!r}")

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        x1 = x[:, 0]
        if self.kind == "constant":
            return np.full(x1.shape, float(self.value))
        if self.kind == "cosine":
            return self.value + self.amplitude * np.cos(2 * np.pi * self.mode * x1)
        return np.where(np.mod(x1, 1.0) < 0.5, self.value, self.second)

    def bounds(self) -> tuple[float, float]:
        if self.kind == "constant":
            return self.value, self.value
        if self.kind == "cosine":
            a = abs(self.amplitude)
            return self.value - a, self.value + a
        return min(self.value, self.second), max(self.value, self.second)


@dataclass(frozen=True)
class PotentialSpec:
    """Single-spin potential psi(theta, w) = base(theta) + w_1 * theta.

    ``coefficients`` are the coefficients of the base polynomial in increasing
    powers of theta.
    """

    coefficients: tuple[float, ...]

    def __post_init__(self):
        c = np.trim_zeros(np.asarray(self.coefficients, dtype=float), "b")
        object.__setattr__(self, "coefficients", tuple(float(v) for v in c))
        deg = len(c) - 1
        if deg < 2 or deg % 2:
            raise ModelError("potential must have even degree >= 2")
        if c[-1] <= 0:
            raise ModelError("potential needs a positive leading coefficient")

    @property
    def degree(self) -> int:
        return len(self.coefficients) - 1

    @property
    def c_psi(self) -> float:
        """Quadratic growth constant: leading coefficient for degree 2, else infinity."""
        return self.coefficients[-1] if self.degree == 2 else math.inf

    def base(self, theta):
        return npoly.polyval(theta, self.coefficients)

    def value(self, theta, w1=0.0):
        return self.base(theta) + np.asarray(w1) * theta

    def grad(self, theta, w1=0.0):
        return npoly.polyval(theta, npoly.polyder(self.coefficients)) + np.asarray(w1)

    def curvature(self, theta):
        return npoly.polyval(theta, npoly.polyder(self.coefficients, 2))


@dataclass(frozen=True)
class SpatialKernel:
    """The position part of a separable kernel, evaluated on wrapped displacements.

    kinds: zero, constant, cosine (offset + scale*prod cos 2 pi x_i), sine (odd,
    for validation), indicator (scale on |x| < width), gaussian (width = sd),
    singular (scale*|x|^(-1/2+eps), 0 at the origin) and table (d = 1, periodic
    linear interpolation of values sampled at k/len(table)).
    """

    kind: str = "constant"
    scale: float = 1.0
    offset: float = 0.0
    width: float = 0.25
    eps: float = 0.1
    table: tuple[float, ...] = ()

    _KINDS = ("zero", "constant", "cosine", "sine", "indicator", "gaussian", "singular", "table")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise ModelError(f"unknown spatial kernel {self.kind!r}")
        if self.kind == "table" and len(self.table) < 2:
            raise ModelError("table kernel needs at least two samples")

    def __call__(self, dx) -> np.ndarray:
        dx = wrap(dx)
        if dx.ndim == 0:
            dx = dx[None]
        r = np.sqrt(np.sum(dx * dx, axis=-1))
        if self.kind == "zero":
            return np.zeros(r.shape)
        if self.kind == "constant":
            return np.full(r.shape, float(self.scale))
        if self.kind == "cosine":
            return self.offset + self.scale * np.prod(np.cos(2 * np.pi * dx), axis=-1)
        if self.kind == "sine":
            return self.scale * np.sin(2 * np.pi * dx[..., 0])
        if self.kind == "indicator":
            return np.where(r < self.width, float(self.scale), 0.0)
        if self.kind == "gaussian":
            return self.scale * np.exp(-0.5 * (r / self.width) ** 2)
        if self.kind == "singular":
            with np.errstate(divide="ignore"):
                out = self.scale * np.power(r, -0.5 + self.eps)
            return np.where(r > 0, out, 0.0)
        if dx.shape[-1] != 1:
            raise ModelError("table kernel is one-dimensional")
        vals = np.asarray(self.table, dtype=float)
        L = len(vals)
        s = np.mod(dx[..., 0], 1.0) * L
        k = np.floor(s).astype(int) % L
        frac = s - np.floor(s)
        return (1 - frac) * vals[k] + frac * vals[(k + 1) % L]


def _w1(w):
    return np.asarray(w, dtype=float)[..., 0]


@dataclass(frozen=True)
class EnvCoupling:
    """Low-rank environment factor sum_a g_a(w) h_a(w').

    kinds: one (scale), product (scale*w_1*w_1') and squared_difference
    (scale*(w_1 - w_1')^2, which depends only on the difference).
    """

    kind: str = "one"
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("one", "product", "squared_difference"):
            raise ModelError(f"unknown environment coupling {self.kind!r}")

    def terms(self) -> list[tuple[Callable, Callable]]:
        s = float(self.scale)

        def one(w):
            return np.ones(np.shape(w)[:-1])

        if self.kind == "one":
            return [(lambda w: s * one(w), one)]
        if self.kind == "product":
            return [(lambda w: s * _w1(w), _w1)]
        return [
            (lambda w: s * _w1(w) ** 2, one),
            (lambda w: -2 * s * _w1(w), _w1),
            (lambda w: s * one(w), lambda w: _w1(w) ** 2),
        ]

    def __call__(self, w, w2) -> np.ndarray:
        a, b = _w1(w), _w1(w2)
        if self.kind == "one":
            return self.scale * np.ones(np.broadcast(a, b).shape)
        if self.kind == "product":
            return self.scale * a * b
        return self.scale * (a - b) ** 2


@dataclass(frozen=True)
class KernelSpec:
    """Pair kernel J(x, w, w').

    variants: ``constant`` (J = value), ``product`` (spatial * coupling), ``sum``
    (spatial + coupling) and ``tabulated`` (a product whose spatial part is a
    table). The envelope norms are computed on a grid unless overridden.
    """

    variant: str = "constant"
    value: float = 0.0
    spatial: SpatialKernel = field(default_factory=SpatialKernel)
    coupling: EnvCoupling = field(default_factory=EnvCoupling)
    l1_override: float | None = None
    l2_override: float | None = None

    def __post_init__(self):
        if self.variant not in ("constant", "product", "sum", "tabulated"):
            raise ModelError(f"unknown kernel variant {self.variant!r}")
        if self.variant == "tabulated" and self.spatial.kind != "table":
            raise ModelError("tabulated kernels need a table spatial part")

    @classmethod
    def zero(cls) -> "KernelSpec":
        return cls("constant", 0.0)

    @property
    def is_zero(self) -> bool:
        if self.variant == "constant":
            return self.value == 0.0
        if self.variant in ("product", "tabulated"):
            return self.spatial.kind == "zero" or self.coupling.scale == 0.0
        return self.spatial.kind == "zero" and self.coupling.scale == 0.0

    @property
    def is_product(self) -> bool:
        return self.variant in ("product", "tabulated")

    def spatial_part(self, dx) -> np.ndarray:
        if self.variant == "constant":
            return np.full(np.shape(dx)[:-1], float(self.value))
        return self.spatial(dx)

    def rank_terms(self) -> list[tuple[Callable, Callable]]:
        if self.variant == "constant":
            return []
        return self.coupling.terms()

    def evaluate(self, dx, w, w2) -> np.ndarray:
        """J at wrapped displacement dx (..., d) and marks w, w2 (..., m)."""
        if self.variant == "constant":
            shape = np.broadcast_shapes(np.shape(dx)[:-1], np.shape(w)[:-1], np.shape(w2)[:-1])
            return np.full(shape, float(self.value))
        s = self.spatial(dx)
        c = self.coupling(w, w2)
        return s * c if self.is_product else s + c

    def envelope(self, d: int, low, high, n: int | None = None) -> np.ndarray:
        """Samples of sup_{w,w'} |J(x,w,w')| on a uniform periodic grid."""
        n = n or (2048 if d == 1 else 128)
        x = TorusLattice(d, n).positions()
        x = wrap(x)
        if self.variant == "constant":
            return np.full(len(x), abs(self.value))
        pts = _box_points(low, high)
        c = self.coupling(pts[:, None, :], pts[None, :, :]).ravel()
        s = self.spatial(x)
        if self.is_product:
            return np.abs(s) * np.max(np.abs(c))
        return np.maximum(np.abs(s + c.max()), np.abs(s + c.min()))

    def envelope_norms(self, d: int, low, high) -> tuple[float, float]:
        env = None
        l1, l2 = self.l1_override, self.l2_override
        if l1 is None or l2 is None:
            env = self.envelope(d, low, high)
        if l1 is None:
            l1 = float(np.mean(env))
        if l2 is None:
            l2 = float(np.sqrt(np.mean(env ** 2)))
        return l1, l2


def _box_points(low, high, per_axis: int = 5) -> np.ndarray:
    axes = [np.linspace(lo, hi, per_axis) if hi > lo else np.array([lo]) for lo, hi in zip(low, high)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


@dataclass(frozen=True)
class EnvironmentSpec:
    """Law of the frozen environment mark at each position.

    kinds:
      * ``constant``: a point mass at ``point``.
      * ``discrete``: ``atoms`` with probabilities given by ``law``: ``fixed``
        (``probs``), ``halves`` (``probs`` for x_1 < 1/2, ``probs_second`` else) or
        ``cosine`` (two atoms, first probability probs[0] + amplitude*cos 2 pi x_1).
      * ``uniform``: uniform on a box of side (high - low - amplitude) whose lower
        corner is shifted by amplitude*(1 + cos 2 pi x_1)/2.
    """

    kind: str = "constant"
    low: tuple[float, ...] = (0.0,)
    high: tuple[float, ...] = (0.0,)
    point: tuple[float, ...] = (0.0,)
    atoms: tuple[tuple[float, ...], ...] = ()
    probs: tuple[float, ...] = ()
    probs_second: tuple[float, ...] = ()
    law: str = "fixed"
    amplitude: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "discrete", "uniform"):
            raise ModelError(f"unknown environment kind {self.kind!r}")
        if len(self.low) != len(self.high):
            raise ModelError("box bounds disagree in dimension")
        if self.kind == "discrete":
            if self.law not in ("fixed", "halves", "cosine"):
                raise ModelError(f"unknown discrete law {self.law!r}")
            if len(self.atoms) != len(self.probs):
                raise ModelError("atoms and probabilities differ in length")
            if self.law == "cosine" and len(self.atoms) != 2:
                raise ModelError("cosine law needs exactly two atoms")

    @classmethod
    def point_mass(cls, w0) -> "EnvironmentSpec":
        w0 = tuple(float(v) for v in np.atleast_1d(w0))
        return cls("constant", w0, w0, point=w0)

    @property
    def m(self) -> int:
        return len(self.low)

    def probabilities(self, x) -> np.ndarray:
        """Atom probabilities at positions x, shape (n, K)."""
        x = np.atleast_2d(x)
        p = np.asarray(self.probs, dtype=float)
        out = np.broadcast_to(p, (len(x), len(p))).copy()
        if self.law == "halves":
            upper = np.mod(x[:, 0], 1.0) >= 0.5
            out[upper] = np.asarray(self.probs_second, dtype=float)
        elif self.law == "cosine":
            p0 = p[0] + self.amplitude * np.cos(2 * np.pi * x[:, 0])
            out = np.stack([p0, 1 - p0], axis=1)
        return out

    def sample(self, x, rng: np.random.Generator, batch: tuple[int, ...] = ()) -> np.ndarray:
        x = np.atleast_2d(x)
        n = len(x)
        if self.kind == "constant":
            return np.broadcast_to(np.asarray(self.point, float), (*batch, n, self.m)).copy()
        if self.kind == "discrete":
            cum = np.cumsum(self.probabilities(x), axis=1)
            u = rng.random((*batch, n))
            idx = (u[..., None] >= cum[..., :-1]).sum(axis=-1)
            return np.asarray(self.atoms, float)[idx]
        lo, width, shift = self._uniform_window(x)
        u = rng.random((*batch, n, self.m))
        return lo + shift[:, None] + u * width

    def _uniform_window(self, x):
        lo = np.asarray(self.low, float)
        width = np.asarray(self.high, float) - lo - self.amplitude
        shift = self.amplitude * 0.5 * (1 + np.cos(2 * np.pi * np.atleast_2d(x)[:, 0]))
        return lo, width, shift

    def quadrature(self, x, order: int = 3) -> tuple[np.ndarray, np.ndarray]:
        """Nodes (n, Q, m) and weights (n, Q) approximating the law at each x."""
        x = np.atleast_2d(x)
        n = len(x)
        if self.kind == "constant":
            return np.broadcast_to(np.asarray(self.point, float), (n, 1, self.m)).copy(), np.ones((n, 1))
        if self.kind == "discrete":
            nodes = np.broadcast_to(np.asarray(self.atoms, float), (n, len(self.atoms), self.m)).copy()
            return nodes, self.probabilities(x)
        t, wt = roots_legendre(order)
        u, wu = (t + 1) / 2, wt / 2
        grids = np.meshgrid(*([u] * self.m), indexing="ij")
        unit = np.stack([g.ravel() for g in grids], axis=-1)
        wts = np.prod(np.meshgrid(*([wu] * self.m), indexing="ij"), axis=0).ravel()
        lo, width, shift = self._uniform_window(x)
        nodes = lo + shift[:, None, None] + unit[None] * width
        return nodes, np.broadcast_to(wts, (n, len(wts))).copy()


def normal_cell_probabilities(z) -> np.ndarray:
    """Standard normal mass between consecutive standardized edges along the last axis.

    Cells in the upper tail use the reflected difference so that tiny masses do
    not cancel to zero.
    """
    from scipy.special import ndtr

    z = np.asarray(z, float)
    lo, hi = z[..., :-1], z[..., 1:]
    return np.where(lo > 0, ndtr(-lo) - ndtr(-hi), ndtr(hi) - ndtr(lo))


@dataclass(frozen=True)
class InitialSpec:
    """Initial spin law at each position: a point mass or a Gaussian around center(x)."""

    kind: str = "point"
    center: Profile = field(default_factory=Profile)
    variance: float = 0.0

    def __post_init__(self):
        if self.kind not in ("point", "gaussian"):
            raise ModelError(f"unknown initial law {self.kind!r}")
        if self.kind == "gaussian" and self.variance <= 0:
            raise ModelError("gaussian initial law needs a positive variance")

    def sample(self, x, rng: np.random.Generator, batch: tuple[int, ...] = ()) -> np.ndarray:
        g = self.center(x)
        if self.kind == "point":
            return np.broadcast_to(g, (*batch, len(g))).copy()
        return g + math.sqrt(self.variance) * rng.standard_normal((*batch, len(g)))

    def cell_masses(self, x, edges) -> np.ndarray:
        """Probability of each spin cell [edges_l, edges_l+1) at positions x, renormalized."""
        if self.kind == "point":
            raise ModelError("a point-mass initial law has no density")
        g = self.center(x)
        z = (np.asarray(edges)[None, :] - g[:, None]) / math.sqrt(self.variance)
        p = normal_cell_probabilities(z)
        return p / p.sum(axis=1, keepdims=True)

    def exp2psi_finite(self, potential: PotentialSpec) -> bool:
        """Whether sup_x of the integral of exp(2 psi) against the initial law is finite."""
        if self.kind == "point":
            return True
        if potential.degree > 2:
            return False
        return 4 * potential.c_psi * self.variance < 1


@dataclass(frozen=True)
class ModelSpec:
    lattice: TorusLattice
    potential: PotentialSpec
    kernel: KernelSpec
    environment: EnvironmentSpec
    initial: InitialSpec
    sigma: float = 1.0
    horizon: float = 1.0

    def with_sites(self, N: int) -> "ModelSpec":
        return replace(self, lattice=TorusLattice(self.lattice.d, N))

    def without_interaction(self) -> "ModelSpec":
        return replace(self, kernel=KernelSpec.zero())

    def envelope_norms(self) -> tuple[float, float]:
        e = self.environment
        return self.kernel.envelope_norms(self.lattice.d, e.low, e.high)

    def riemann_gap(self, fine: int | None = None) -> float:
        """Largest gap between the lattice average of J(., w, w') and its integral over the torus.

        Taken over corner and interior points of the environment box. A per-N
        diagnostic: it should shrink as N grows, but no threshold applies.
        """
        d = self.lattice.d
        fine = fine or (4096 if d == 1 else 128)
        coarse_x, fine_x = self.lattice.positions(), TorusLattice(d, fine).positions()
        e = self.environment
        pts = _box_points(e.low, e.high)
        gap = 0.0
        for w in pts:
            for w2 in pts:
                def average(x):
                    ww = np.broadcast_to(w, (len(x), len(w)))
                    ww2 = np.broadcast_to(w2, (len(x), len(w2)))
                    return float(np.mean(self.kernel.evaluate(x, ww, ww2)))
                gap = max(gap, abs(average(coarse_x) - average(fine_x)))
        return gap


@dataclass(frozen=True)
class Violation:
    assumption: str
    detail: str

    def __str__(self):
        return f"{self.assumption}: {self.detail}"


def kernel_pair_symmetric(kernel: KernelSpec, d: int, low, high) -> bool:
    """Whether J(x, w, w') = J(-x, w', w), needed for the energy-gradient identity."""
    x = wrap(TorusLattice(d, 16 if d == 1 else 6).positions())
    pts = _box_points(low, high, 3)
    w = pts[:, None, None, :]
    w2 = pts[None, :, None, :]
    a = kernel.evaluate(x[None, None], w, w2)
    b = kernel.evaluate(-x[None, None], w2, w)
    return bool(np.allclose(a, b, rtol=1e-12, atol=1e-12))


def validate(spec: ModelSpec) -> list[Violation]:
    out: list[Violation] = []
    env = spec.environment
    lat = spec.lattice
    if spec.sigma <= 0:
        out.append(Violation("diffusion coefficient", "sigma must be positive"))
    if spec.horizon <= 0:
        out.append(Violation("horizon", "T must be positive"))
    low, high = np.asarray(env.low, float), np.asarray(env.high, float)
    if not (np.all(np.isfinite(low)) and np.all(np.isfinite(high)) and np.all(low <= high)):
        out.append(Violation("compact environment", "box bounds must be finite with low <= high"))
    else:
        nodes, _ = env.quadrature(lat.positions()[: min(lat.n_sites, 64)])
        if env.kind == "uniform" and np.any(env.amplitude >= high - low):
            out.append(Violation("compact environment", "shift amplitude exceeds the box"))
        if np.any(nodes < low - 1e-12) or np.any(nodes > high + 1e-12):
            out.append(Violation("compact environment", "environment law leaves the box"))
    if env.kind == "discrete":
        pr = env.probabilities(lat.positions())
        if np.any(pr < -1e-12) or not np.allclose(pr.sum(axis=1), 1.0):
            out.append(Violation("environment law", "probabilities must be a distribution"))

    k = spec.kernel
    if k.variant != "constant":
        x = wrap(TorusLattice(lat.d, 64 if lat.d == 1 else 12).positions())
        pts = _box_points(env.low, env.high, 3)
        w, w2 = pts[:, None, None, :], pts[None, :, None, :]
        a = k.evaluate(x[None, None], w, w2)
        b = k.evaluate(-x[None, None], w, w2)
        if not np.allclose(a, b, rtol=1e-12, atol=1e-12):
            out.append(Violation("kernel evenness", "J(x,w,w') != J(-x,w,w') on the test grid"))
    l1, l2 = spec.envelope_norms()
    if not math.isfinite(l2):
        out.append(Violation("kernel envelope", "envelope is not square integrable"))
    if not spec.potential.c_psi > l1:
        out.append(Violation(
            "growth condition",
            f"c_psi = {spec.potential.c_psi:g} does not exceed ||Jbar||_1 = {l1:g}",
        ))
    if not spec.initial.exp2psi_finite(spec.potential):
        out.append(Violation("initial integrability", "exp(2 psi) is not integrable against the initial law"))
    return out


def kernel_field(kernel: KernelSpec, xq, wq, xs, ws, cs) -> np.ndarray:
    """sum_s J(xq - xs, wq, ws) cs for query points, using the low-rank structure.

    xq (nq, d), wq (nq, m), xs (ns, d), ws (ns, m), cs (..., ns); returns (..., nq).
    """
    xq, wq, xs, ws = (np.atleast_2d(np.asarray(a, float)) for a in (xq, wq, xs, ws))
    cs = np.asarray(cs, float)
    if xq.shape[1] != xs.shape[1] or wq.shape[1] != ws.shape[1] or cs.shape[-1] != len(xs):
        raise ModelError("kernel field: dimension mismatch between measure and query")
    if kernel.variant == "constant":
        tot = kernel.value * cs.sum(axis=-1)
        return np.broadcast_to(tot[..., None], (*cs.shape[:-1], len(xq))).copy()
    S = kernel.spatial(xq[:, None, :] - xs[None, :, :])
    out = np.zeros((*cs.shape[:-1], len(xq)))
    if kernel.is_product:
        for g, h in kernel.rank_terms():
            out += g(wq) * ((cs * h(ws)) @ S.T)
    else:
        out += cs @ S.T
        for g, h in kernel.rank_terms():
            out += g(wq) * (cs * h(ws)).sum(axis=-1)[..., None]
    return out


def effective_field(x, w, mu, kernel: KernelSpec) -> np.ndarray:
    """Kernel-averaged spin seen at (x, w) under mu.

    ``mu`` is any measure exposing ``moment_atoms()`` returning positions,
    marks and spin-weighted masses of its atoms.
    """
    xs, ws, cs = mu.moment_atoms()
    x = np.atleast_2d(np.asarray(x, float))
    w = np.atleast_2d(np.asarray(w, float))
    if len(x) != len(w):
        x, w = np.broadcast_arrays(x, w)
    out = kernel_field(kernel, x, w, xs, ws, cs)
    return out


def drift(x, w, theta, mu, spec: ModelSpec) -> np.ndarray:
    w = np.atleast_2d(np.asarray(w, float))
    return -spec.potential.grad(np.asarray(theta, float), w[:, 0]) + effective_field(x, w, mu, spec.kernel)
