"""Generating-function iterates f_n(ab; s), extinction roots, and inverse iterates.

Composition order: f_0 = id, f_{2n+1}(s) = f_{2n}(f(a; s)), f_{2n+2}(s) =
f_{2n+1}(f(b; s)). The innermost map of f_n is a for odd n and b for even n,
the outermost is always a, so f_n(ab; s) = E[s^{Z_n}] when generation 0 uses a.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial import polynomial as P

from .errors import DomainError, NonConvergence, NonMonotone, Overflow, ValidationError
from .mechanism import (
    MechanismSchedule,
    OffspringDistribution,
    Regime,
    classify,
    pgf_derivative,
    pgf_eval,
    smallest_fixed_point,
)
from .series import DEFAULT_DEGREE, TruncatedSeries, compose_outer

ORDERS = ("ab", "ba")


@dataclass(frozen=True)
class IterationContext:
    pair: MechanismSchedule
    tolerance: float = 1e-12
    max_iter: int = 100_000

    def __post_init__(self):
        self.pair.require_pair()
        if not self.tolerance > 0:
            raise ValidationError(f"tolerance: {self.tolerance!r} must be > 0")
        if self.max_iter < 1:
            raise ValidationError(f"max_iter: {self.max_iter!r} must be >= 1")

    @property
    def a(self) -> OffspringDistribution:
        return self.pair.a

    @property
    def b(self) -> OffspringDistribution:
        return self.pair.b

    def swapped(self) -> "IterationContext":
        return IterationContext(self.pair.swapped(), self.tolerance, self.max_iter)


@dataclass(frozen=True)
class ExtinctionResult:
    rho_a: float
    rho_b: float
    rho_ab: float
    rho_ba: float
    regime: Regime
    horizon: int | None = None
    witness: float | None = None

    def as_dict(self) -> dict:
        return {
            "rho_a": self.rho_a, "rho_b": self.rho_b,
            "rho_ab": self.rho_ab, "rho_ba": self.rho_ba,
            "regime": self.regime.value, "horizon": self.horizon,
            "witness": self.witness,
        }


def _mechanism_sequence(pair: MechanismSchedule, order: str, n: int):
    """Mechanisms applied by the n-fold inverse iterate, first to last."""
    if order not in ORDERS:
        raise ValidationError(f"order: {order!r} not in {ORDERS}")
    first = 0 if order == "ab" else 1
    return [pair[(first + i) % 2] for i in range(n)]


def schedule_eval(schedule: MechanismSchedule, n: int, s):
    """f_n for an arbitrary cyclic schedule, applied innermost first."""
    if n < 0:
        raise ValidationError(f"n: {n} < 0")
    x = np.asarray(s, dtype=float)
    with np.errstate(over="raise", invalid="raise"):
        try:
            for i in range(n, 0, -1):
                x = np.asarray(pgf_eval(schedule.at(i - 1), x))
        except FloatingPointError as exc:
            raise Overflow(f"f_{n} overflowed at s={s!r}") from exc
    if not np.all(np.isfinite(x)):
        raise Overflow(f"f_{n} overflowed at s={s!r}")
    return float(x) if x.ndim == 0 else x


def f_n_eval(ctx: IterationContext, n: int, s):
    return schedule_eval(ctx.pair, n, s)


def alpha_eval(ctx: IterationContext, k: int, s):
    """k-fold iterate of alpha = f(a; f(b; .)), equal to f_{2k}(ab; s)."""
    return schedule_eval(ctx.pair, 2 * k, s)


def beta_eval(ctx: IterationContext, k: int, s):
    return schedule_eval(ctx.pair.swapped(), 2 * k, s)


def _composite_root(outer, inner, tol, max_iter):
    def g(s):
        return pgf_eval(outer, pgf_eval(inner, s))

    def dg(s):
        return pgf_derivative(outer, pgf_eval(inner, s)) * pgf_derivative(inner, s)

    root = smallest_fixed_point(g, outer.mean * inner.mean, dg, tol=tol, max_iter=max_iter)
    if 0.0 < root < 1.0:
        # Newton polish to working precision; keep only improving steps.
        for _ in range(5):
            d = dg(root) - 1.0
            if d == 0.0:
                break
            cand = root - (g(root) - root) / d
            if abs(g(cand) - cand) < abs(g(root) - root):
                root = cand
            else:
                break
    return root


def extinction(ctx: IterationContext) -> ExtinctionResult:
    """Fixed points of f(a), f(b), alpha, beta; rho_ab is the extinction probability.

    For supercritical pairs the iterates alpha_k(0) are run until successive
    values differ by less than tolerance/10, as a second route to rho_ab.
    """
    a, b = ctx.a, ctx.b
    tol = ctx.tolerance
    rho_a = smallest_fixed_point(lambda s: pgf_eval(a, s), a.mean,
                                 lambda s: pgf_derivative(a, s), tol=tol)
    rho_b = smallest_fixed_point(lambda s: pgf_eval(b, s), b.mean,
                                 lambda s: pgf_derivative(b, s), tol=tol)
    rho_ab = _composite_root(a, b, tol, 200)
    rho_ba = _composite_root(b, a, tol, 200)
    regime = classify(ctx.pair)

    horizon = witness = None
    if regime is Regime.SUPERCRITICAL:
        x = 0.0
        for k in range(1, ctx.max_iter + 1):
            nxt = pgf_eval(a, pgf_eval(b, x))
            if abs(nxt - x) < tol / 10:
                horizon, witness = k, nxt
                break
            x = nxt
        else:
            raise NonConvergence(
                f"alpha_k(0) not settled after {ctx.max_iter} steps", last_gap=abs(nxt - x)
            )
    return ExtinctionResult(rho_a, rho_b, rho_ab, rho_ba, regime, horizon, witness)


def schedule_distribution(schedule: MechanismSchedule, n: int,
                          degree_cap: int = DEFAULT_DEGREE) -> TruncatedSeries:
    series = TruncatedSeries.identity(degree_cap)
    for i in range(n, 0, -1):
        series = compose_outer(schedule.at(i - 1), series)
    return series


def zn_distribution(ctx: IterationContext, n: int,
                    degree_cap: int = DEFAULT_DEGREE) -> TruncatedSeries:
    """Series whose coefficient j is P(Z_n = j | Z_0 = 1)."""
    if n < 0:
        raise ValidationError(f"n: {n} < 0")
    return schedule_distribution(ctx.pair, n, degree_cap)


# -- inverses -----------------------------------------------------------------

def _require_invertible(dist: OffspringDistribution):
    if dist.probs[0] != 0.0:
        raise NonMonotone("inverse needs p_0 = 0 so that f maps [0, inf) onto [0, inf)")
    if not dist.exact:
        raise DomainError("inverse needs a finite-support mechanism")


def _offset_map(dist, u):
    """f(1 + u) - 1 without cancellation for small u."""
    j = np.arange(1, dist.probs.size)
    with np.errstate(divide="ignore"):
        return np.expm1(np.multiply.outer(np.log1p(u), j)) @ dist.probs[1:]


def _offset_slope(dist, u):
    d = P.polyder(dist.probs)
    return P.polyval(1.0 + u, d)


def inverse_offset(dist: OffspringDistribution, t, max_iter: int = 200):
    """Solve f(1 + u) - 1 = t for u, elementwise; g(dist; 1 + t) = 1 + u.

    With p_0 = 0 the map is convex and increasing and the root lies between 0
    and t, so Newton started from the side where f(1+u)-1 >= t decreases
    monotonically onto it. Bisection takes over if a step leaves the bracket.
    """
    _require_invertible(dist)
    t = np.asarray(t, dtype=float)
    if np.any(t < -1.0) or not np.all(np.isfinite(t)):
        raise DomainError("inverse generating function needs s >= 0")
    lo = np.minimum(t, 0.0)
    hi = np.maximum(t, 0.0)
    u = hi.copy()
    for _ in range(max_iter):
        F = _offset_map(dist, u) - t
        lo = np.where(F < 0, np.maximum(lo, u), lo)
        hi = np.where(F > 0, np.minimum(hi, u), hi)
        dF = _offset_slope(dist, u)
        with np.errstate(divide="ignore", invalid="ignore"):
            cand = u - F / dF
        bad = ~np.isfinite(cand) | (cand < lo) | (cand > hi)
        cand = np.where(bad, 0.5 * (lo + hi), cand)
        done = (F == 0) | (np.abs(cand - u) <= 4 * np.finfo(float).eps * np.abs(u)) | (hi - lo <= 0)
        u = np.where(F == 0, u, cand)
        if np.all(done):
            break
    else:
        raise NonConvergence("inverse generating function did not converge")
    return float(u) if u.ndim == 0 else u


def g_eval(dist: OffspringDistribution, s, s_max: float | None = None):
    """Inverse generating function g with f(dist; g(s)) = s."""
    s = np.asarray(s, dtype=float)
    if s_max is not None and np.any(s > pgf_eval(dist, s_max)):
        raise DomainError(f"s beyond f(s_max={s_max})")
    out = 1.0 + np.asarray(inverse_offset(dist, s - 1.0))
    return float(out) if out.ndim == 0 else out


def g_n_offset(ctx: IterationContext, order: str, n: int, t):
    """g_n(order; 1 + t) - 1, iterated entirely in offset coordinates."""
    u = np.asarray(t, dtype=float)
    for mech in _mechanism_sequence(ctx.pair, order, n):
        u = np.asarray(inverse_offset(mech, u))
    return float(u) if u.ndim == 0 else u


def g_n_eval(ctx: IterationContext, order: str, n: int, s):
    """Inverse of f_n(order; .): g_1(ab) = g(a), g_{2n}(ab) = g(b; g_{2n-1}(ab)), ..."""
    s = np.asarray(s, dtype=float)
    out = 1.0 + np.asarray(g_n_offset(ctx, order, n, s - 1.0))
    return float(out) if out.ndim == 0 else out


def f_n_order_eval(ctx: IterationContext, order: str, n: int, s):
    pair = ctx.pair if order == "ab" else ctx.pair.swapped()
    return schedule_eval(pair, n, s)
