"""Exact finite-state checks of a Varadhan lemma for discontinuous integrands.

The state is the mean of N independent +-1 spins with P[+1] = p, so every
expectation is a finite log-sum-exp over binomial atoms. Conditions that
involve limits or neighbourhoods are evaluated on finite grids of N, R and
neighbourhood radii; the report marks them as surrogates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import logsumexp, xlogy
from scipy.stats import binom

NEG_INF = -math.inf


def lambda_star(x, p: float):
    """Cramer rate of the mean of +-1 spins with P[+1] = p; +inf outside [-1, 1]."""
    x = np.asarray(x, float)
    inside = np.abs(x) <= 1
    xc = np.clip(x, -1, 1)
    val = 0.5 * (xlogy(xc + 1, (xc + 1) / p) + xlogy(1 - xc, (1 - xc) / (1 - p))) - math.log(2)
    out = np.where(inside, np.maximum(val, 0.0), np.inf)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class FiniteLDP:
    """Law of the mean of N independent +-1 spins."""

    N: int
    p: float

    def __post_init__(self):
        if self.N < 1 or not 0 < self.p < 1:
            raise ValueError("need N >= 1 and 0 < p < 1")

    @property
    def atoms(self) -> np.ndarray:
        k = np.arange(self.N + 1)
        return (2 * k - self.N) / self.N

    @property
    def log_pmf(self) -> np.ndarray:
        return binom.logpmf(np.arange(self.N + 1), self.N, self.p)

    def rate(self, x):
        return lambda_star(x, self.p)

    @property
    def mean(self) -> float:
        return 2 * self.p - 1

    def log_expectation(self, exponent, mask=None) -> float:
        """log E[exp(exponent(xi)) 1{mask(xi)}] with exponent and mask given on the atoms."""
        terms = self.log_pmf + np.asarray(exponent, float)
        if mask is not None:
            terms = np.where(np.asarray(mask, bool), terms, NEG_INF)
        return float(logsumexp(terms)) if np.any(np.isfinite(terms)) else NEG_INF

    def scaled(self, exponent, mask=None) -> float:
        return self.log_expectation(exponent, mask) / self.N


def exact_scaled_cumulant(N: int, phi: Callable, p: float) -> float:
    """(1/N) log E[exp(N phi(xi_N))], exactly."""
    ldp = FiniteLDP(N, p)
    return ldp.scaled(N * np.asarray(phi(ldp.atoms), float))


def s_star(phi: Callable, rate: Callable, breakpoints: Sequence[float] = (), grid: int = 4001,
           low: float = -1.0, high: float = 1.0) -> float:
    """sup of phi - rate over points with finite rate.

    Grid search over [low, high] plus the breakpoints, then a bounded Brent
    refinement around the best grid point. Every candidate is an actual
    function value, so the result never exceeds the true supremum.
    """
    xs = np.union1d(np.linspace(low, high, grid), np.asarray(breakpoints, float))

    def g(x):
        r = np.asarray(rate(x), float)
        v = np.asarray(phi(x), float) - r
        return np.where(np.isfinite(r), v, -np.inf)

    vals = g(xs)
    k = int(np.argmax(vals))
    best = float(vals[k])
    a, b = xs[max(k - 1, 0)], xs[min(k + 1, len(xs) - 1)]
    if b > a:
        res = minimize_scalar(lambda x: -float(g(np.array(x))), bounds=(a, b), method="bounded",
                              options={"xatol": 1e-12})
        best = max(best, -float(res.fun))
    return best


@dataclass
class PhiFamily:
    """An integrand with lower and upper approximating families indexed by R."""

    phi: Callable
    lower: Callable[[float], Callable]
    upper: Callable[[float], Callable]
    breakpoints: tuple[float, ...] = ()
    name: str = "phi"


def jump_family(alpha: float) -> PhiFamily:
    """0 on x > 0 and alpha on x <= 0; the lower family moves the jump to 1/R."""

    def phi(x):
        return np.where(np.asarray(x) > 0, 0.0, alpha)

    def lower(R):
        return lambda x: np.where(np.asarray(x) >= 1.0 / R, 0.0, alpha)

    return PhiFamily(phi, lower, lambda R: phi, (0.0,), f"jump(alpha={alpha:g})")


def continuous_family(phi: Callable, name: str = "continuous") -> PhiFamily:
    return PhiFamily(phi, lambda R: phi, lambda R: phi, (), name)


@dataclass
class ConditionResult:
    status: str
    evidence: list[dict]
    witness: dict | None = None
    note: str = ""

    @property
    def passed(self) -> bool:
        return self.status == "PASS"


@dataclass
class ConditionReport:
    p: float
    family: str
    s_star: float
    conditions: dict[str, ConditionResult]
    convergence: list[dict]
    fitted_constant: float
    monotone: bool
    items: dict[str, ConditionResult] = field(default_factory=dict)

    @property
    def all_pass(self) -> bool:
        return all(c.passed for c in self.conditions.values()) and all(c.passed for c in self.items.values())

    def to_dict(self) -> dict:
        def one(c: ConditionResult):
            return {"status": c.status, "witness": c.witness, "note": c.note, "evidence": c.evidence}

        return {
            "p": self.p, "family": self.family, "s_star": self.s_star,
            "conditions": {k: one(v) for k, v in self.conditions.items()},
            "items": {k: one(v) for k, v in self.items.items()},
            "convergence": self.convergence, "fitted_constant": self.fitted_constant,
            "monotone": self.monotone, "all_pass": self.all_pass,
        }


def _status(ok: bool) -> str:
    return "PASS" if ok else "FAIL"


def _eventually(flags: Sequence[bool]) -> int | None:
    """First index from which every flag is true, or None."""
    for i in range(len(flags)):
        if all(flags[i:]):
            return i
    return None


def _radii(Ns) -> np.ndarray:
    r, out = 0.5, []
    while r >= 1.0 / (2 * max(Ns)):
        out.append(r)
        r /= 2
    return np.array(out)


def _probe_points(Ns) -> np.ndarray:
    return np.unique(np.concatenate([FiniteLDP(N, 0.5).atoms for N in Ns]))


def _semicontinuity(fam, Ns, Rs, bound: Callable, side: str, delta: float) -> ConditionResult:
    probes = _probe_points(Ns)
    radii = _radii(Ns)
    supports = [FiniteLDP(N, 0.5).atoms for N in Ns]
    rows, ok_by_R = [], []
    worst = None
    for R in Rs:
        f = fam.lower(R) if side == "lower" else fam.upper(R)
        ok_R = True
        for x in probes:
            target = bound(x)
            found = None
            for r in radii:
                near = np.concatenate([s[np.abs(s - x) < r] for s in supports])
                vals = np.asarray(f(near), float)
                good = vals.min() >= target - delta if side == "lower" else vals.max() <= target + delta
                if good:
                    found = r
                    break
            if found is None:
                ok_R = False
                worst = worst or {"R": R, "x": float(x)}
        ok_by_R.append(ok_R)
        rows.append({"R": R, "holds": ok_R})
    start = _eventually(ok_by_R)
    note = "finite-grid surrogate: probe points are atoms, neighbourhoods are dyadic radii down to 1/(2 N_max)"
    if start is not None:
        return ConditionResult("PASS", rows, {"R_star": Rs[start]}, note)
    return ConditionResult("FAIL", rows, worst, note)


def check_conditions(p: float, fam: PhiFamily, Ns: Sequence[int], Rs: Sequence[float], eps: float = 0.01,
                     gamma: float = 2.0, tol: float = 0.02, delta: float = 1e-9,
                     tail_levels: Sequence[float] = (1.0, 2.0, 4.0)) -> ConditionReport:
    """Numeric evidence for the five conditions of the lemma, plus the convergence table."""
    Ns, Rs = list(Ns), list(Rs)
    rate = lambda x: lambda_star(x, p)  # noqa: E731
    S = s_star(fam.phi, rate, fam.breakpoints)
    conds: dict[str, ConditionResult] = {}

    conds["A"] = _semicontinuity(fam, Ns, Rs, lambda x: float(fam.phi(np.array(x))), "lower", delta)
    conds["B"] = _semicontinuity(fam, Ns, Rs, lambda x: max(S, float(fam.phi(np.array(x)))), "upper", delta)

    # (C) comparison of the two halves of E[exp(N phi_lower)]
    rows, ok_by_R = [], []
    for R in Rs:
        lo = fam.lower(R)
        flags = []
        for N in Ns:
            ldp = FiniteLDP(N, p)
            x = ldp.atoms
            ph, ul = np.asarray(fam.phi(x), float), np.asarray(lo(x), float)
            keep = ldp.scaled(N * ul, ph > ul - eps)
            drop = ldp.scaled(N * ul, ph < ul - eps)
            flags.append(keep >= drop)
            rows.append({"R": R, "N": N, "kept": keep, "dropped": drop, "gap": keep - drop})
        ok_by_R.append(_eventually(flags) is not None)
    start = _eventually(ok_by_R)
    if start is not None:
        conds["C"] = ConditionResult("PASS", rows, {"R_eps": Rs[start]}, "comparison inequality, eventually in N")
    else:
        bad = min((r for r in rows if r["R"] == Rs[-1]), key=lambda r: r["gap"])
        conds["C"] = ConditionResult("FAIL", rows, {"R": bad["R"], "N": bad["N"], "gap": bad["gap"]},
                                     "comparison inequality fails for the largest R")

    # (D) mass where phi exceeds the upper family
    rows = []
    for R in Rs:
        up = fam.upper(R)
        for N in Ns:
            ldp = FiniteLDP(N, p)
            x = ldp.atoms
            ph = np.asarray(fam.phi(x), float)
            rows.append({"R": R, "N": N, "value": ldp.scaled(N * ph, ph > np.asarray(up(x), float) + eps)})
    last = rows[-1]["value"]
    conds["D"] = ConditionResult(_status(last <= S + tol), rows, {"R": Rs[-1], "N": Ns[-1], "value": last},
                                 "limsup surrogate at the largest R and N")

    # (E) tail via the gamma-moment bound, plus the tail itself
    rows = []
    moments = []
    for N in Ns:
        ldp = FiniteLDP(N, p)
        ph = np.asarray(fam.phi(ldp.atoms), float)
        m = ldp.scaled(gamma * N * ph)
        moments.append(m)
        tails = {f"tail_{M:g}": ldp.scaled(N * ph, ph >= M) for M in tail_levels}
        rows.append({"N": N, "gamma_moment": m, **tails})
    bounded = all(math.isfinite(m) for m in moments) and moments[-1] <= max(moments) + 1e-12
    conds["E"] = ConditionResult(_status(bounded), rows, {"gamma": gamma, "max_moment": max(moments)},
                                 "moment condition with the given gamma")

    conv = []
    for N in Ns:
        v = exact_scaled_cumulant(N, fam.phi, p)
        conv.append({"N": N, "value": v, "error": abs(v - S)})
    errs = [c["error"] for c in conv]
    monotone = all(b <= a + 1e-15 for a, b in zip(errs, errs[1:]))
    C = max(e * N / math.log(N) for e, N in zip(errs, Ns))
    return ConditionReport(p, fam.name, S, conds, conv, C, monotone)


# --- the abstract class ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BallFamily:
    """Closed sets {|x - center| <= radius(R)}."""

    center: float
    radius: Callable[[float], float]
    name: str = "ball"

    def contains(self, R, x) -> np.ndarray:
        return np.abs(np.asarray(x, float) - self.center) <= self.radius(R) + 1e-15


def _jump_size(phi, inside: Callable, n: int) -> float:
    xs = np.linspace(-1, 1, n)
    keep = inside(xs)
    v = np.asarray(phi(xs), float)
    both = keep[1:] & keep[:-1]
    d = np.abs(np.diff(v))[both]
    return float(d.max()) if d.size else 0.0


def default_beta(p: float, sets: BallFamily, Ns) -> Callable[[float], float]:
    """Chernoff exponent of the complement, less log 2 / N_min for the two tails."""
    nmin = min(Ns)

    def beta(R):
        r = sets.radius(R)
        ends = [e for e in (sets.center - r, sets.center + r) if -1 <= e <= 1]
        outside = [x for x in ends]
        if not outside:
            return math.inf
        return min(float(lambda_star(x, p)) for x in outside) - math.log(2) / nmin

    return beta


def class_conditions_check(p: float, phi: Callable, sets: BallFamily, Ns: Sequence[int], Rs: Sequence[float],
                           alpha: Callable[[float], float] | None = None,
                           beta: Callable[[float], float] | None = None, gamma: float = 2.0,
                           breakpoints: Sequence[float] = (), divergence: float = 5.0, **kw) -> ConditionReport:
    """Items of the abstract class on the binomial model, then the lemma's conditions for the induced families."""
    Ns, Rs = list(Ns), list(Rs)
    rate = lambda x: lambda_star(x, p)  # noqa: E731
    S = s_star(phi, rate, breakpoints)
    probes = _probe_points(Ns)
    if alpha is None:
        def alpha(R):
            inside = probes[sets.contains(R, probes)]
            return float(np.max(phi(inside))) if inside.size else 0.0
    beta = beta or default_beta(p, sets, Ns)
    items: dict[str, ConditionResult] = {}
    items["i"] = ConditionResult("PASS", [], None, "the binomial rate is good")

    nested = all(np.all(sets.contains(a, probes) <= sets.contains(b, probes)) for a, b in zip(Rs, Rs[1:]))
    items["ii"] = ConditionResult(_status(nested), [], None, "nestedness on the atom grid; sets are closed balls")

    union = np.zeros(len(probes), bool)
    for R in Rs:
        union |= sets.contains(R, probes)
    stray = probes[~union & np.isfinite(rate(probes))]
    items["iii"] = ConditionResult(_status(stray.size == 0), [],
                                   {"x": float(stray[0])} if stray.size else None,
                                   "finite rate outside the union of the sets")

    rows, ok = [], True
    for R in Rs:
        j1 = _jump_size(phi, lambda x: sets.contains(R, x), 20001)
        j2 = _jump_size(phi, lambda x: sets.contains(R, x), 200001)
        cont = j2 <= 0.5 * j1 + 1e-12 or j2 < 1e-6
        ok &= cont
        rows.append({"R": R, "jump_coarse": j1, "jump_fine": j2, "continuous": cont})
    items["iv"] = ConditionResult(_status(ok), rows, None, "largest jump on M_R shrinks under refinement")

    rows, ok = [], True
    for R in Rs:
        for N in Ns:
            x = FiniteLDP(N, p).atoms
            inside = x[sets.contains(R, x)]
            top = float(np.max(phi(inside))) if inside.size else -math.inf
            ok &= top <= alpha(R) + 1e-12
            rows.append({"R": R, "N": N, "max_phi": top, "alpha": alpha(R)})
    items["v"] = ConditionResult(_status(ok), rows)

    rows, ok = [], True
    for R in Rs:
        for N in Ns:
            ldp = FiniteLDP(N, p)
            lp = ldp.log_expectation(np.zeros(N + 1), ~sets.contains(R, ldp.atoms))
            b = beta(R)
            good = lp <= -N * b + 1e-12 if math.isfinite(b) else lp == NEG_INF
            ok &= good
            rows.append({"R": R, "N": N, "log_prob_outside": lp, "bound": -N * b})
    items["vi"] = ConditionResult(_status(ok), rows)

    diffs = [alpha(R) - beta(R) for R in Rs]
    decreasing = all(b < a or (a == b == -math.inf) for a, b in zip(diffs, diffs[1:]))
    items["vii"] = ConditionResult(_status(decreasing and diffs[-1] <= -divergence),
                                   [{"R": R, "alpha_minus_beta": d} for R, d in zip(Rs, diffs)], None,
                                   f"strictly decreasing and below -{divergence:g} at the largest R")

    rows = []
    for R in Rs:
        for N in Ns:
            ldp = FiniteLDP(N, p)
            rows.append({"R": R, "N": N,
                         "value": ldp.scaled(N * np.asarray(phi(ldp.atoms), float), ~sets.contains(R, ldp.atoms))})
    last = rows[-1]["value"]
    items["viii"] = ConditionResult(_status(last <= -divergence), rows, {"value": last},
                                    f"surrogate: below -{divergence:g} at the largest R and N")

    moments = [FiniteLDP(N, p).scaled(gamma * N * np.asarray(phi(FiniteLDP(N, p).atoms), float)) for N in Ns]
    items["ix"] = ConditionResult(_status(all(math.isfinite(m) for m in moments)),
                                  [{"N": N, "gamma_moment": m} for N, m in zip(Ns, moments)])

    def lower(R):
        return lambda x: np.where(sets.contains(R, x), phi(x), alpha(R))

    def upper(R):
        return lambda x: np.where(sets.contains(R, x), phi(x), S)

    fam = PhiFamily(phi, lower, upper, tuple(breakpoints), "class")
    rep = check_conditions(p, fam, Ns, Rs, gamma=gamma, **kw)
    rep.items = items
    return rep
