"""Deviation probabilities of the one-step ratio Z_{n+1}/Z_n.

phi(k, eps) = P(|S_k/k - m| > eps) for a sum of k offspring counts is computed
exactly by convolution. The ratio probability at generation n mixes phi over
the law of Z_n; normalized by the point-probability scale it converges to
sum_j phi(j, eps) q_j.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import gammaln, logsumexp, roots_legendre, roots_laguerre

from .errors import (
    DegreeOverflow,
    DivergenceSuspected,
    NonConvergence,
    PreconditionViolation,
    ValidationError,
)
from .iterate import IterationContext, inverse_offset, schedule_eval, zn_distribution
from .limits import _engine, _is_identity_pair, q_coefficients
from .mechanism import MechanismSchedule, OffspringDistribution

CONV_BUDGET = 10 ** 6
ALPHA_MAX = 10.0
BETA_MIN = 0.1
EDGE_TOL = 1e-9


def _check_eps(epsilon):
    if not (isinstance(epsilon, (int, float)) and math.isfinite(epsilon) and epsilon > 0):
        raise ValidationError(f"epsilon: {epsilon!r} must be a finite number > 0")


def _outside_mask(k: int, mean: float, epsilon: float, size: int) -> np.ndarray:
    """Indices j with |j - k m| > k eps, ties within rounding counted as inside."""
    j = np.arange(size)
    dist = np.abs(j - k * mean) - k * epsilon
    return dist > EDGE_TOL * max(1.0, k * mean)


def _check_conv(dist, k):
    if not dist.exact:
        raise PreconditionViolation("phi needs a finite-support mechanism")
    if k < 1:
        raise ValidationError(f"k: {k} must be >= 1")
    if k * dist.K > CONV_BUDGET:
        raise DegreeOverflow(f"k*K = {k * dist.K} exceeds convolution budget {CONV_BUDGET}")


def phi_exact(dist: OffspringDistribution, k: int, epsilon: float) -> float:
    """P(|S_k/k - m| > eps) from the k-fold self-convolution, summed outside only."""
    _check_eps(epsilon)
    _check_conv(dist, k)
    law = np.array([1.0])
    for _ in range(k):
        law = np.convolve(law, dist.probs)
    mask = _outside_mask(k, dist.mean, epsilon, law.size)
    return float(law[mask].sum())


def phi_table(dist: OffspringDistribution, k_max: int, epsilon: float) -> np.ndarray:
    """phi(k, eps) for k = 0..k_max (entry 0 is 0), one incremental convolution each."""
    _check_eps(epsilon)
    _check_conv(dist, k_max)
    out = np.zeros(k_max + 1)
    law = np.array([1.0])
    for k in range(1, k_max + 1):
        law = np.convolve(law, dist.probs)
        out[k] = law[_outside_mask(k, dist.mean, epsilon, law.size)].sum()
    return out


@dataclass(frozen=True)
class ChernoffRate:
    """Per-branch rates: phi(k, eps) <= upper_rate**k + lower_rate**k.

    An inactive branch (the event is impossible) has rate 0 and no optimizer.
    ``lam`` is the larger rate; ``lam == 0`` means phi is identically 0.
    """

    epsilon: float
    lam: float
    alpha_star: float | None
    beta_star: float | None
    upper_rate: float = 0.0
    lower_rate: float = 0.0

    @property
    def degenerate(self) -> bool:
        return self.lam == 0.0

    def bound(self, k):
        k = np.asarray(k, dtype=float)
        out = np.zeros_like(k)
        if self.upper_rate > 0:
            out = out + self.upper_rate ** k
        if self.lower_rate > 0:
            out = out + self.lower_rate ** k
        return float(out) if out.ndim == 0 else out


def _log_pgf(dist, x):
    """log f(e^x) without overflow for large |x|."""
    j = dist.support
    return float(logsumexp(np.log(dist.probs[j]) + j * x))


def _minimize_log(objective, lo, hi, grow_hi: bool):
    """Minimize a convex objective on [lo, hi], widening the far end if the optimum sits on it."""
    for _ in range(60):
        res = minimize_scalar(objective, bounds=(lo, hi), method="bounded",
                              options={"xatol": 1e-12})
        x = float(res.x)
        edge = hi if grow_hi else lo
        if abs(x - edge) > 1e-6 * max(1.0, abs(edge)):
            return x, float(res.fun)
        if grow_hi:
            hi *= 2.0
        else:
            lo *= 2.0
    raise NonConvergence("Chernoff optimum kept moving to the search boundary")


def chernoff_rate(dist: OffspringDistribution, epsilon: float,
                  alpha_max: float = ALPHA_MAX) -> ChernoffRate:
    _check_eps(epsilon)
    if not dist.exact:
        raise PreconditionViolation("Chernoff rate needs a finite-support mechanism")
    m = dist.mean
    alpha_star = beta_star = None
    upper = lower = 0.0
    if epsilon < dist.K - m:
        x, val = _minimize_log(lambda x: _log_pgf(dist, x) - (m + epsilon) * x,
                               0.0, math.log(alpha_max), grow_hi=True)
        alpha_star, upper = math.exp(x), math.exp(val)
    if epsilon < m - dist.min_support:
        x, val = _minimize_log(lambda x: _log_pgf(dist, x) - (m - epsilon) * x,
                               math.log(BETA_MIN), 0.0, grow_hi=False)
        beta_star, lower = math.exp(x), math.exp(val)
    return ChernoffRate(float(epsilon), max(upper, lower), alpha_star, beta_star, upper, lower)


@dataclass(frozen=True)
class DeviationReport:
    n: int
    exact: float | None = None
    chernoff_bound: float | None = None
    normalized: float | None = None
    limit_sum: float | None = None
    truncation_error: float = 0.0

    def as_dict(self):
        return {"n": self.n, "exact": self.exact, "normalized": self.normalized,
                "chernoff_bound": self.chernoff_bound, "limit_sum": self.limit_sum,
                "truncation_error": self.truncation_error}


def _require_no_death(pair: MechanismSchedule):
    for name, mech in (("a", pair.a), ("b", pair.b)):
        if mech.probs[0] != 0:
            raise PreconditionViolation(f"exact ratio deviation needs {name}_0 = 0")
        if not mech.exact:
            raise PreconditionViolation(f"mechanism {name} must have finite support")


def point_scale(pair: MechanismSchedule, n: int) -> float:
    """(a_1 b_1)^k for n = 2k, a_1^k b_1^(k-1) for n = 2k - 1."""
    a1 = pair.a.probs[1] if pair.a.K >= 1 else 0.0
    b1 = pair.b.probs[1] if pair.b.K >= 1 else 0.0
    k = (n + 1) // 2
    return a1 ** k * b1 ** (k - 1) if n % 2 else (a1 * b1) ** (n // 2)


def _support_bound(pair, n):
    top = 1
    for i in range(n):
        top *= pair.at(i).K
        if top > 1 << 40:
            break
    return top


def ratio_deviation_exact(ctx: IterationContext, n: int, epsilon: float,
                          degree_cap: int = 2048) -> DeviationReport:
    """sum_j P(Z_n = j) phi(j, eps) with phi of the mechanism active at step n.

    When Z_n can exceed ``degree_cap`` the law is truncated; the dropped mass
    times the Chernoff bound at degree_cap + 1 is reported as truncation_error
    (phi's bound decreases in j).
    """
    _check_eps(epsilon)
    if n < 0:
        raise ValidationError(f"n: {n} < 0")
    _require_no_death(ctx.pair)
    mech = ctx.pair.at(n)
    D = min(_support_bound(ctx.pair, n), degree_cap)
    law = zn_distribution(ctx, n, D)
    phi = phi_table(mech, D, epsilon)
    exact = float(np.dot(law.coeffs, phi))
    rate = chernoff_rate(mech, epsilon)
    trunc = 0.0 if law.exact else law.tail_bound * rate.bound(D + 1)
    bound = 0.0
    if rate.upper_rate > 0:
        bound += schedule_eval(ctx.pair, n, rate.upper_rate)
    if rate.lower_rate > 0:
        bound += schedule_eval(ctx.pair, n, rate.lower_rate)
    scale = point_scale(ctx.pair, n)
    normalized = exact / scale if scale > 0 else None
    return DeviationReport(n, exact, bound, normalized, None, trunc)


def normalized_sequence(ctx: IterationContext, epsilon: float, n_max: int,
                        parity: int = 0, degree_cap: int = 2048) -> list[DeviationReport]:
    """Reports at n = parity, parity + 2, ... <= n_max."""
    return [ratio_deviation_exact(ctx, n, epsilon, degree_cap)
            for n in range(parity, n_max + 1, 2)]


def cauchy_horizon(values, rtol: float) -> int | None:
    """First index from which consecutive relative gaps stay below rtol."""
    values = np.asarray(values, dtype=float)
    gaps = np.abs(np.diff(values)) / np.maximum(np.abs(values[1:]), 1e-300)
    ok = gaps < rtol
    for i in range(ok.size):
        if ok[i:].all():
            return i + 1
    return None


@dataclass(frozen=True)
class LimitSum:
    value: float
    J: int
    tail_certificate: float
    weak: bool
    ratio_estimate: float | None


def _ratio_estimate(q: np.ndarray) -> float | None:
    """Largest q_{j+1}/q_j over the top quarter of positive trailing coefficients."""
    tail = q[3 * q.size // 4:]
    tail = tail[tail > 0]
    if tail.size < 4:
        return None
    return float(np.max(tail[1:] / tail[:-1]))


def limit_sum(ctx: IterationContext, epsilon: float, side: str = "a", J: int = 64,
              tail_tol: float = 1e-10, max_J: int = 1 << 14, q_tol: float = 1e-13) -> LimitSum:
    """sum_{j>=1} phi(j, eps) q_j (side a) or phi_b with q~_j (side b).

    J doubles until the tail certificate drops below tail_tol. The certificate
    bounds q_j beyond J by q_J rhat^(j-J), with rhat the trailing ratio of the
    computed coefficients, times the Chernoff bound on phi. If rhat times a
    rate is not below 1 the difference of successive partial sums is used and
    the result is flagged weak.
    """
    _check_eps(epsilon)
    if side not in ("a", "b"):
        raise ValidationError(f"side: {side!r} not in ('a', 'b')")
    mech = ctx.a if side == "a" else ctx.b
    kind = "Q" if side == "a" else "Q_tilde"
    rate = chernoff_rate(mech, epsilon)
    if rate.degenerate:
        return LimitSum(0.0, 0, 0.0, False, None)
    prev = None
    while J <= max_J:
        q = q_coefficients(ctx, J, tol=q_tol, kind=kind).coeffs
        phi = phi_table(mech, J, epsilon)
        value = float(np.dot(phi[1:], q[1:]))
        rhat = _ratio_estimate(q)
        weak = True
        cert = math.inf
        if rhat is not None:
            rates = [r for r in (rate.upper_rate, rate.lower_rate) if r > 0]
            if all(r * rhat < 1 for r in rates):
                cert = sum(q[J] * r ** J * (r * rhat) / (1 - r * rhat) for r in rates)
                weak = False
        if weak and prev is not None:
            cert = abs(value - prev)
        if cert < tail_tol:
            return LimitSum(value, J, float(cert), weak, rhat)
        prev = value
        J *= 2
    raise NonConvergence(f"limit sum tail certificate above {tail_tol} at J={J // 2}",
                         last_gap=float(cert))


@dataclass(frozen=True)
class QKIntegral:
    value: float
    error: float
    block_ratios: np.ndarray
    blocks: int


def _gauss_block(fn, lo, hi, x, w):
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    return half * float(np.dot(w, fn(mid + half * x)))


def qk_integral(ctx: IterationContext, r: float, quad_points: int = 32, tol: float = 1e-10,
                max_blocks: int = 400) -> QKIntegral:
    """Integral of Q(s) |log s|^(r-1) / s over (0, 1), written as
    int_0^inf Q(e^-t) t^(r-1) dt.

    t >= log 2 is done by Gauss-Laguerre (Q(s)/s is smooth at 0). Below that
    the blocks [t_{m+1}, t_m] follow the inverse orbit s_{m+1} = g(b; g(a; s_m))
    toward s = 1, each by Gauss-Legendre; the remaining tail is summed as a
    geometric series in the observed block ratio.
    """
    if not (math.isfinite(r) and r > 0):
        raise ValidationError(f"r: {r!r} must be > 0")
    if _is_identity_pair(ctx):
        return QKIntegral(math.exp(gammaln(r)), 0.0, np.array([]), 0)
    a, b = ctx.a, ctx.b
    if a.probs[0] != 0 or b.probs[0] != 0:
        raise PreconditionViolation("the integral needs a_0 = b_0 = 0 (Q(0) = 0)")
    a1b1 = a.probs[1] * b.probs[1]
    if a1b1 * (a.mean * b.mean) ** r <= 1:
        raise PreconditionViolation(
            f"a_1 b_1 (m_a m_b)^r = {a1b1 * (a.mean * b.mean) ** r!r} must exceed 1"
        )
    eng = _engine(ctx)
    qtol = min(tol, 1e-12)

    def integrand(t):
        return eng.q_from_log(t, qtol) * t ** (r - 1)

    t0 = math.log(2.0)
    xl, wl = roots_laguerre(quad_points)
    xl2, wl2 = roots_laguerre(quad_points // 2)

    def lag(x, w):
        t = t0 + x
        return float(np.dot(w, eng.q_from_log(t, qtol) * np.exp(x) * t ** (r - 1)))

    head = lag(xl, wl)
    err = abs(head - lag(xl2, wl2))

    xg, wg = roots_legendre(quad_points)
    xg2, wg2 = roots_legendre(quad_points // 2)
    total = head
    blocks, ratios = [], []
    u = math.expm1(-t0)
    t_hi = t0
    tail = None
    for m in range(max_blocks):
        u = float(inverse_offset(b, inverse_offset(a, u)))
        t_lo = -math.log1p(u)
        if not t_lo > 0:
            break
        val = _gauss_block(integrand, t_lo, t_hi, xg, wg)
        err += abs(val - _gauss_block(integrand, t_lo, t_hi, xg2, wg2))
        if blocks:
            ratios.append(val / blocks[-1] if blocks[-1] else math.inf)
        blocks.append(val)
        total += val
        t_hi = t_lo
        if len(ratios) >= 3:
            last = ratios[-3:]
            settled = max(last) - min(last) <= 1e-3 * max(last)
            if settled and last[-1] < 1 and val <= tol * total:
                rho = last[-1]
                tail = val * rho / (1 - rho)
                err += tail * (max(last) - min(last)) / (1 - max(last)) + abs(tail) * 1e-3
                break
    ratios = np.array(ratios)
    if tail is None:
        if ratios.size and ratios[-1] >= 1:
            raise DivergenceSuspected(f"block ratio {ratios[-1]!r} did not drop below 1")
        if ratios.size == 0 or ratios[-1] >= 1:
            raise DivergenceSuspected("block ratios never settled below 1")
        rho = float(ratios[-1])
        tail = blocks[-1] * rho / (1 - rho)
        err += abs(tail)
    return QKIntegral(total + tail, err, ratios, len(blocks))


def moment_condition_check(pair: MechanismSchedule, r: float, delta: float = 0.0) -> bool:
    """a_1 m_a^r > 1 and b_1 m_b^r > 1; the moment sums are finite for finite support."""
    pair.require_pair()
    if delta < 0:
        raise ValidationError(f"delta: {delta!r} must be >= 0")
    ok = True
    for mech in (pair.a, pair.b):
        p1 = mech.probs[1] if mech.K >= 1 else 0.0
        ok = ok and p1 * mech.mean ** r > 1
    return bool(ok)
