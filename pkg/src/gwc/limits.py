"""Limit functions Q, Q~ (extinction side) and R, R~ (inverse side), W_n MGF.

Q_n(s) = (f_n(ab; s) - rho_ab) / gamma_n is evaluated in offset coordinates:
each mechanism is re-expanded around the fixed point its input converges to
(f(a) around rho_ba, f(b) around rho_ab), so the difference from rho_ab is
never formed by subtraction and keeps full relative precision for large n.
The inverse side works the same way around s = 1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from math import comb

import numpy as np
from numpy.polynomial import polynomial as P

from .errors import MonotonicityViolation, NonConvergence, Overflow, PreconditionViolation
from .iterate import (
    IterationContext,
    _mechanism_sequence,
    _offset_map,
    extinction,
    inverse_offset,
)
from .mechanism import Regime, pgf_derivative, pgf_eval
from .moments import normalizers
from .series import TruncatedSeries, compose_outer

MAX_DOUBLE_STEPS = 200
FD_STEP = 1e-5
DEFAULT_S0 = 1.5
PLAIN_RTOL = 1e-12
PLAIN_FLOOR = 1e-7


def chebyshev_grid(lo: float, hi: float, n: int = 17) -> np.ndarray:
    k = np.arange(n)
    x = np.cos((2 * k + 1) * np.pi / (2 * n))[::-1]
    return 0.5 * (lo + hi) + 0.5 * (hi - lo) * x


def q_probe_grid(n: int = 17) -> np.ndarray:
    return chebyshev_grid(0.02, 0.98, n)


def r_probe_grid(ctx: IterationContext, order: str = "ab", s0: float = DEFAULT_S0, n: int = 17):
    mech = ctx.a if order == "ab" else ctx.b
    return chebyshev_grid(1.0 + 1e-3, pgf_eval(mech, s0), n)


@dataclass(frozen=True)
class LimitFunctionApprox:
    kind: str
    probe_values: dict
    horizon: int
    horizons: dict = field(default_factory=dict)
    coefficients: TruncatedSeries | None = None
    tol: float = 1e-10

    def values(self, probes=None) -> np.ndarray:
        keys = self.probe_values if probes is None else probes
        return np.array([self.probe_values[float(s)] for s in keys])


def _shifted(probs: np.ndarray, center: float) -> np.ndarray:
    """Coefficients of x -> p(center + x) - p(center)."""
    K = probs.size - 1
    out = np.zeros(K + 1)
    for i in range(1, K + 1):
        out[i] = sum(probs[j] * comb(j, i) * center ** (j - i) for j in range(i, K + 1))
    return out


@dataclass(frozen=True)
class QNormalizer:
    """gamma_n from f'(a; rho_ba) and f'(b; rho_ab); gamma'_n is the ba analogue."""

    slope_a: float
    slope_b: float

    def gamma_n(self, n: int) -> float:
        k, odd = divmod(n, 2)
        return (self.slope_a * self.slope_b) ** k * (self.slope_a if odd else 1.0)

    def gamma_prime_n(self, n: int) -> float:
        k, odd = divmod(n, 2)
        return (self.slope_a * self.slope_b) ** k * (self.slope_b if odd else 1.0)


class _QEngine:
    def __init__(self, ctx: IterationContext):
        ext = extinction(ctx)
        if ext.regime is not Regime.SUPERCRITICAL and not _is_identity_pair(ctx):
            raise PreconditionViolation("Q functions need a supercritical pair")
        self.ctx = ctx
        self.ext = ext
        self.shift_a = _shifted(ctx.a.probs, ext.rho_ba)
        self.shift_b = _shifted(ctx.b.probs, ext.rho_ab)
        self.norm = QNormalizer(float(pgf_derivative(ctx.a, ext.rho_ba)),
                                float(pgf_derivative(ctx.b, ext.rho_ab)))
        if self.norm.slope_a * self.norm.slope_b == 0:
            raise PreconditionViolation(
                "Q functions need f'(a;rho_ba) f'(b;rho_ab) > 0; the product here is 0"
            )

    def A(self, d):
        return P.polyval(d, self.shift_a)

    def B(self, d):
        return P.polyval(d, self.shift_b)

    def offset_n(self, n: int, s):
        """f_n(ab; s) - rho_ab."""
        s = np.asarray(s, dtype=float)
        d = s - (self.ext.rho_ba if n % 2 else self.ext.rho_ab)
        for i in range(n, 0, -1):
            d = self.A(d) if (i - 1) % 2 == 0 else self.B(d)
        return d

    def qn(self, n: int, s):
        if n == 0:
            return np.asarray(s, dtype=float) - self.ext.rho_ab
        return self.offset_n(n, s) / self.norm.gamma_n(n)

    def q_deriv_n(self, n: int, s):
        """Q_n'(s) by the chain rule along the offset chain."""
        s = np.asarray(s, dtype=float)
        d = s - (self.ext.rho_ba if n % 2 else self.ext.rho_ab)
        slope = np.ones_like(d)
        da, db = P.polyder(self.shift_a), P.polyder(self.shift_b)
        for i in range(n, 0, -1):
            if (i - 1) % 2 == 0:
                slope = slope * P.polyval(d, da)
                d = self.A(d)
            else:
                slope = slope * P.polyval(d, db)
                d = self.B(d)
        return slope / self.norm.gamma_n(n)

    def _start(self, kind, s):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        if kind == "Q":
            return s - self.ext.rho_ab, np.ones_like(s), np.ones_like(s)
        d0 = s - self.ext.rho_ba
        slope = P.polyval(d0, P.polyder(self.shift_a))
        return self.A(d0), slope, np.full(s.shape, self.norm.slope_a)

    def forward(self, d, slope, scale, tol, max_steps, derivative=False, label="Q"):
        """Run d -> A(B(d)) until d/scale (or the chain slope) settles per element.

        Returns the values and the number of double steps each element needed.
        """
        gam = self.norm.slope_a * self.norm.slope_b
        da, db = P.polyder(self.shift_a), P.polyder(self.shift_b)
        prev = (slope if derivative else d) / scale
        steps = np.full(d.size, -1)
        gap = np.full(d.size, np.inf)
        for k in range(1, max_steps + 1):
            if derivative:
                e = self.B(d)
                slope = slope * P.polyval(d, db) * P.polyval(e, da)
                d = self.A(e)
            else:
                d = self.A(self.B(d))
            scale = scale * gam
            cur = (slope if derivative else d) / scale
            if not np.all(np.isfinite(cur)):
                raise Overflow(f"{label} iterate left floating range after {k} double steps")
            gap = np.abs(cur - prev)
            newly = (steps < 0) & (gap <= tol * np.maximum(1.0, np.abs(cur)))
            steps[newly] = k
            prev = cur
            if np.all(steps >= 0):
                return cur, steps
        raise NonConvergence(
            f"{label} not converged after {max_steps} double steps", last_gap=float(gap.max())
        )

    def limit(self, kind: str, probes, tol: float, max_steps=MAX_DOUBLE_STEPS,
              derivative: bool = False):
        d, slope, scale = self._start(kind, probes)
        values, steps = self.forward(d, slope, scale, tol, max_steps, derivative, kind)
        return values, 2 * steps + (kind == "Q_tilde")

    def q_from_log(self, t, tol, max_steps=4 * MAX_DOUBLE_STEPS):
        """Q(exp(-t)) for t > 0, accurate when 1 - s is far below machine epsilon.

        While the orbit is still close to 1 it is carried as v = 1 - x with
        the cancellation-free offset maps; once v reaches half the distance
        to rho_ab it is handed to the ordinary fixed-point coordinates.
        """
        t = np.atleast_1d(np.asarray(t, dtype=float))
        v = -np.expm1(-t)
        a, b = self.ctx.a, self.ctx.b
        k = np.zeros(t.size)
        gap_to_fixed = 1.0 - self.ext.rho_ab
        for _ in range(max_steps):
            near = v < 0.5 * gap_to_fixed
            if not near.any():
                break
            vn = v[near]
            vn = -_offset_map(a, -(-_offset_map(b, -vn)))
            v[near] = vn
            k[near] += 1
        else:
            raise NonConvergence("orbit did not leave the neighbourhood of 1")
        gam = self.norm.slope_a * self.norm.slope_b
        d = gap_to_fixed - v
        values, _ = self.forward(d, np.ones_like(d), gam ** k, tol, max_steps)
        return values

def _is_identity_pair(ctx):
    return ctx.a.K == 1 and ctx.a.probs[1] == 1.0 and ctx.b.K == 1 and ctx.b.probs[1] == 1.0


def _engine(ctx) -> _QEngine:
    return _QEngine(ctx)


def qn_eval(ctx: IterationContext, n: int, s):
    out = _engine(ctx).qn(n, s)
    return float(out) if np.ndim(out) == 0 else out


def q_limit(ctx: IterationContext, probes=None, tol: float = 1e-10, kind: str = "Q",
            max_steps: int = MAX_DOUBLE_STEPS) -> LimitFunctionApprox:
    """Q (even iterates) or Q~ (odd iterates) at each probe, per-probe convergence."""
    if kind not in ("Q", "Q_tilde"):
        raise ValueError(f"kind {kind!r}")
    probes = q_probe_grid() if probes is None else np.atleast_1d(probes)
    values, horizons = _engine(ctx).limit(kind, probes, tol, max_steps)
    pv = {float(s): float(v) for s, v in zip(probes, values)}
    hz = {float(s): int(h) for s, h in zip(probes, horizons)}
    return LimitFunctionApprox(kind, pv, int(horizons.max()), hz, None, tol)


def q_derivative_limit(ctx: IterationContext, probes, tol=1e-10, kind="Q"):
    """lim Q'_{2k} (or Q'_{2k+1}) from differentiated iterates, no finite differences."""
    values, _ = _engine(ctx).limit(kind, probes, tol, derivative=True)
    return values


def q_derivative_fd(ctx: IterationContext, s, tol=1e-12, kind="Q", h=FD_STEP):
    s = np.atleast_1d(np.asarray(s, dtype=float))
    eng = _engine(ctx)
    up, _ = eng.limit(kind, s + h, tol)
    dn, _ = eng.limit(kind, s - h, tol)
    return (up - dn) / (2 * h)


def _require_no_death(ctx):
    a, b = ctx.a, ctx.b
    if a.probs[0] != 0 or b.probs[0] != 0:
        raise PreconditionViolation("coefficients of Q need a_0 = b_0 = 0")
    if a.K < 1 or b.K < 1 or a.probs[1] <= 0 or b.probs[1] <= 0:
        raise PreconditionViolation("coefficients of Q need a_1, b_1 > 0")


def _q_coefficient_iteration(ctx, J, tol, kind, max_steps=MAX_DOUBLE_STEPS):
    _require_no_death(ctx)
    a, b = ctx.a, ctx.b
    gam = a.probs[1] * b.probs[1]
    series = TruncatedSeries.identity(J)
    extra = 1.0
    if kind == "Q_tilde":
        series = compose_outer(a, series)
        extra = a.probs[1]
    prev = series.coeffs / extra
    scale = extra
    for n in range(1, max_steps + 1):
        series = compose_outer(a, compose_outer(b, series))
        scale *= gam
        if scale < 1e-290:
            break
        cur = series.coeffs / scale
        if np.all(np.abs(cur - prev) <= tol * np.abs(cur)):
            return cur, 2 * n + (kind == "Q_tilde")
        prev = cur
    gap = float(np.max(np.abs(cur - prev) / np.maximum(np.abs(cur), 1e-300)))
    raise NonConvergence(f"{kind} coefficients not stable after {n} double steps", last_gap=gap)


def q_coefficients(ctx: IterationContext, J: int, tol: float = 1e-12,
                   kind: str = "Q") -> TruncatedSeries:
    """q_0..q_J of Q = lim f_{2n}(ab; s)/(a_1 b_1)^n (Q~: odd iterates, extra a_1).

    The tail beyond J is not summable at s = 1, so the bound is infinite.
    """
    coeffs, _ = _q_coefficient_iteration(ctx, J, tol, kind)
    return TruncatedSeries(coeffs, tail_bound=math.inf, exact=False)


def q_coefficients_with_horizon(ctx, J, tol=1e-12, kind="Q"):
    coeffs, horizon = _q_coefficient_iteration(ctx, J, tol, kind)
    return TruncatedSeries(coeffs, tail_bound=math.inf, exact=False), horizon


def _plain_limit(eng: _QEngine, kind: str, x, max_steps: int = MAX_DOUBLE_STEPS):
    """Q or Q~ by composing the PGFs themselves rather than the shifted polynomials.

    A second route to the limit, so the residual compares two computations.
    The iterate error shrinks by the factor gam per double step, so one
    Richardson step (adding gam / (1 - gam) times the last increment) removes
    the leading bias. Each probe stops once that extrapolation settles below
    PLAIN_RTOL or once x - rho_ab is small enough that cancellation would
    dominate what is left.
    """
    a, b = eng.ctx.a, eng.ctx.b
    rho = eng.ext.rho_ab
    gam = eng.norm.slope_a * eng.norm.slope_b
    x = np.atleast_1d(np.asarray(x, dtype=float)).copy()
    scale = np.ones_like(x)
    if kind == "Q_tilde":
        x = pgf_eval(a, x)
        scale *= eng.norm.slope_a
    weight = gam / (1.0 - gam) if gam < 1 else 0.0
    raw = (x - rho) / scale
    out = raw.copy()
    active = np.ones(x.size, dtype=bool)
    floor = PLAIN_FLOOR * max(1.0 - rho, 1e-300)
    for _ in range(max_steps):
        if not active.any():
            return out
        x[active] = pgf_eval(a, pgf_eval(b, x[active]))
        scale[active] *= gam
        cur = (x[active] - rho) / scale[active]
        extrap = cur + weight * (cur - raw[active])
        gap = np.abs(extrap - out[active])
        raw[active], out[active] = cur, extrap
        done = (gap <= PLAIN_RTOL * np.maximum(1.0, np.abs(extrap))) | (np.abs(x[active] - rho) < floor)
        active[np.flatnonzero(active)[done]] = False
    raise NonConvergence(f"{kind} by plain composition not settled after {max_steps} double steps")


def functional_residual_q_profile(ctx: IterationContext, approx_Q: LimitFunctionApprox,
                                  approx_Qt: LimitFunctionApprox, probes=None) -> np.ndarray:
    """Per-probe max of |Q(f(a;s)) - f'(a;rho_ba) Q~(s)| and |Q~(f(b;s)) - f'(b;rho_ab) Q(s)|.

    The left sides at f(a;s), f(b;s) come from plain PGF composition, an
    independent route to the limit; their accuracy is about PLAIN_FLOOR
    relative, far inside the 1e-6 budget for the residual.
    """
    eng = _engine(ctx)
    probes = np.array(sorted(approx_Qt.probe_values) if probes is None else probes, dtype=float)
    q_at_fa = _plain_limit(eng, "Q", pgf_eval(ctx.a, probes))
    qt_at_fb = _plain_limit(eng, "Q_tilde", pgf_eval(ctx.b, probes))
    qt = np.array([approx_Qt.probe_values[float(s)] for s in probes])
    q = np.array([approx_Q.probe_values[float(s)] for s in probes])
    r1 = np.abs(q_at_fa - eng.norm.slope_a * qt)
    r2 = np.abs(qt_at_fb - eng.norm.slope_b * q)
    return np.maximum(r1, r2)


def functional_residual_q(ctx: IterationContext, approx_Q: LimitFunctionApprox,
                          approx_Qt: LimitFunctionApprox, probes=None) -> float:
    return float(functional_residual_q_profile(ctx, approx_Q, approx_Qt, probes).max())


# -- inverse side ---------------------------------------------------------------

def _require_inverse_pair(ctx):
    for name, mech in (("a", ctx.a), ("b", ctx.b)):
        if mech.probs[0] != 0:
            raise PreconditionViolation(f"inverse iterates need {name}_0 = 0")
        if not mech.exact:
            raise PreconditionViolation(f"mechanism {name} must have finite support")
    if ctx.a.mean * ctx.b.mean <= 1.0:
        raise PreconditionViolation("R functions need a supercritical pair")


def r_n_eval(ctx: IterationContext, order: str, n: int, s):
    """R_n = Gamma_n (g_n(ab; s) - 1); order 'ba' gives R~_n with Gamma~_n."""
    _require_inverse_pair(ctx)
    table = normalizers(ctx.pair)
    gamma = table.gamma(n) if order == "ab" else table.gamma_tilde(n)
    u = np.asarray(np.asarray(s, dtype=float) - 1.0)
    for mech in _mechanism_sequence(ctx.pair, order, n):
        u = np.asarray(inverse_offset(mech, u))
    out = gamma * u
    return float(out) if out.ndim == 0 else out


def _r_iterate(ctx, order, probes, tol, max_steps):
    u = np.atleast_1d(np.asarray(probes, dtype=float)) - 1.0
    gamma = 1.0
    prev = u.copy()
    horizons = np.full(u.size, -1)
    mechs = (ctx.a, ctx.b) if order == "ab" else (ctx.b, ctx.a)
    gap = np.full(u.size, np.inf)
    for n in range(1, max_steps + 1):
        mech = mechs[(n - 1) % 2]
        u = np.asarray(inverse_offset(mech, u))
        gamma *= mech.mean
        cur = gamma * u
        slack = 1e-12 * np.abs(prev) + 1e-300
        if np.any(cur > prev + slack):
            bad = int(np.argmax(cur - prev))
            raise MonotonicityViolation(
                f"R_{n} increased at s={probes[bad]!r}: {prev[bad]!r} -> {cur[bad]!r}"
            )
        gap = np.abs(cur - prev)
        newly = (horizons < 0) & (gap <= tol * np.maximum(1.0, np.abs(cur)))
        horizons[newly] = n
        prev = cur
        if np.all(horizons >= 0):
            return cur, horizons
    raise NonConvergence(f"R not converged after {max_steps} steps", last_gap=float(gap.max()))


def r_limit(ctx: IterationContext, order: str = "ab", probes=None, tol: float = 1e-10,
            s0: float = DEFAULT_S0, max_steps: int = 2 * MAX_DOUBLE_STEPS) -> LimitFunctionApprox:
    _require_inverse_pair(ctx)
    probes = r_probe_grid(ctx, order, s0) if probes is None else np.atleast_1d(probes)
    values, horizons = _r_iterate(ctx, order, probes, tol, max_steps)
    kind = "R" if order == "ab" else "R_tilde"
    pv = {float(s): float(v) for s, v in zip(probes, values)}
    hz = {float(s): int(h) for s, h in zip(probes, horizons)}
    return LimitFunctionApprox(kind, pv, int(horizons.max()), hz, None, tol)


def r_derivative_at_one(ctx: IterationContext, order: str = "ab", h: float = FD_STEP,
                        tol: float = 1e-13) -> float:
    """Central difference of R (or R~) at 1; R is finite on both sides of 1."""
    vals, _ = _r_iterate(ctx, order, np.array([1.0 - h, 1.0 + h]), tol, 4 * MAX_DOUBLE_STEPS)
    return float((vals[1] - vals[0]) / (2 * h))


def functional_residual_r_profile(ctx: IterationContext, probes=None, tol: float = 1e-12,
                                  s0: float = DEFAULT_S0) -> np.ndarray:
    """Per-probe max of |R(f(a;s)) - m_a R~(s)| and |R~(f(b;s)) - m_b R(s)|."""
    probes = chebyshev_grid(1.0 + 1e-3, s0) if probes is None else np.atleast_1d(probes)
    steps = 4 * MAX_DOUBLE_STEPS
    r_fa, _ = _r_iterate(ctx, "ab", pgf_eval(ctx.a, probes), tol, steps)
    rt, _ = _r_iterate(ctx, "ba", probes, tol, steps)
    rt_fb, _ = _r_iterate(ctx, "ba", pgf_eval(ctx.b, probes), tol, steps)
    r, _ = _r_iterate(ctx, "ab", probes, tol, steps)
    res1 = np.abs(r_fa - ctx.a.mean * rt)
    res2 = np.abs(rt_fb - ctx.b.mean * r)
    return np.maximum(res1, res2)


def functional_residual_r(ctx: IterationContext, probes=None, tol: float = 1e-12,
                          s0: float = DEFAULT_S0) -> float:
    """max residual of R(f(a;s)) = m_a R~(s), R~(f(b;s)) = m_b R(s) over [1+1e-3, s0]."""
    _require_inverse_pair(ctx)
    return float(functional_residual_r_profile(ctx, probes, tol, s0).max())


def mgf_wn(ctx: IterationContext, n: int, theta: float) -> float:
    """E[exp(theta W_n)] = f_n(ab; exp(theta / Gamma_n)), evaluated around s = 1."""
    for name, mech in (("a", ctx.a), ("b", ctx.b)):
        if not mech.exact:
            raise PreconditionViolation(f"mechanism {name} must have finite support")
    gamma = normalizers(ctx.pair).gamma(n)
    u = np.expm1(theta / gamma)
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(n, 0, -1):
            u = _offset_map(ctx.pair.at(i - 1), u)
            if not np.isfinite(u):
                raise Overflow(f"E[exp({theta} W_{n})] exceeds floating range")
    return float(1.0 + u)


@dataclass(frozen=True)
class Theta1Result:
    theta1: float
    limit: float
    sequence: np.ndarray
    argmin: int
    tail_lower: float


def theta1_bound(ctx: IterationContext, s0: float = DEFAULT_S0, N: int = 30,
                 tol: float = 1e-12) -> Theta1Result:
    """inf over n >= 1 of Gamma_n log g_{n-1}(ba; s0).

    Terms n <= N are computed directly. For n > N each term is at least
    m_a R~(s0) (1 - u_N / 2) with u_N = g_N(ba; s0) - 1, because Gamma~_n u_n
    decreases to R~(s0) and log(1 + u) >= u - u^2/2; that lower bound closes
    the infimum.
    """
    if s0 <= 1:
        raise PreconditionViolation(f"s0={s0!r} must exceed 1")
    _require_inverse_pair(ctx)
    table = normalizers(ctx.pair)
    seq = np.empty(N)
    u = s0 - 1.0
    for n in range(1, N + 1):
        if n > 1:
            u = inverse_offset(ctx.pair[(n - 2 + 1) % 2], u)
        seq[n - 1] = table.gamma(n) * math.log1p(u)
    u_N = inverse_offset(ctx.pair[(N - 1 + 1) % 2], u)
    rt = r_limit(ctx, "ba", [s0], tol=tol).probe_values[float(s0)]
    limit = ctx.a.mean * rt
    tail_lower = limit * (1.0 - tol) * (1.0 - 0.5 * u_N)
    argmin = int(np.argmin(seq))
    theta1 = float(min(seq[argmin], tail_lower))
    return Theta1Result(theta1, float(limit), seq, argmin + 1, float(tail_lower))
