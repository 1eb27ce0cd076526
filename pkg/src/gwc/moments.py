"""Mean normalizers and closed-form moments of Z_n and W."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CriticalCase, DomainError
from .mechanism import CRITICAL_TOL, MechanismSchedule

CLOSED_FORM_RTOL = 1e-12


def running_gamma(schedule: MechanismSchedule, n_max: int) -> np.ndarray:
    """Gamma_0..Gamma_{n_max} by running product of one-step means."""
    out = np.empty(n_max + 1)
    out[0] = 1.0
    for n in range(n_max):
        out[n + 1] = out[n] * schedule.at(n).mean
    return out


@dataclass(frozen=True)
class NormalizerTable:
    pair: MechanismSchedule
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.pair.require_pair()

    @property
    def m_a(self) -> float:
        return self.pair.a.mean

    @property
    def m_b(self) -> float:
        return self.pair.b.mean

    @property
    def m(self) -> float:
        return self.m_a * self.m_b

    @property
    def sigma_sq(self) -> float:
        """sigma_a^2 m_b^2 + sigma_b^2 m_a (m_a enters linearly)."""
        return self.pair.a.variance * self.m_b ** 2 + self.pair.b.variance * self.m_a

    def omega(self, n: int) -> float:
        return self.m_a if n % 2 == 0 else self.m_b

    def _products(self, swapped: bool, n: int) -> float:
        key = "tilde" if swapped else "plain"
        table = self._cache.get(key)
        if table is None or table.size <= n:
            sched = self.pair.swapped() if swapped else self.pair
            table = running_gamma(sched, max(n, 64))
            self._cache[key] = table
        return float(table[n])

    def gamma(self, n: int) -> float:
        value = self._products(False, n)
        closed = self.m ** (n // 2) * (self.m_a if n % 2 else 1.0)
        assert math.isclose(value, closed, rel_tol=CLOSED_FORM_RTOL * max(1, n)), (value, closed)
        return value

    def gamma_tilde(self, n: int) -> float:
        value = self._products(True, n)
        closed = self.m ** (n // 2) * (self.m_b if n % 2 else 1.0)
        assert math.isclose(value, closed, rel_tol=CLOSED_FORM_RTOL * max(1, n)), (value, closed)
        return value


def normalizers(pair: MechanismSchedule) -> NormalizerTable:
    return NormalizerTable(pair)


def mean_zn(table: NormalizerTable, n: int) -> float:
    return table.gamma(n)


def var_zn(table: NormalizerTable, n: int) -> float:
    """Two-case closed form for Var(Z_n); singular at m = 1."""
    m = table.m
    if abs(m - 1.0) < CRITICAL_TOL:
        raise CriticalCase("variance formula has an (m - 1) denominator; use the exact oracle")
    k, odd = divmod(n, 2)
    base = table.sigma_sq * m ** (k - 1) * (m ** k - 1.0) / (m - 1.0)
    if odd:
        return base * table.m_a ** 2 + table.pair.a.variance * m ** k
    return base


def var_w(table: NormalizerTable) -> float:
    m = table.m
    if m <= 1.0:
        raise DomainError(f"Var(W) needs m > 1, got m={m!r}")
    return table.sigma_sq / (m * m - m)


def var_w_n(table: NormalizerTable, n: int) -> float:
    return var_zn(table, n) / table.gamma(n) ** 2


def conditional_mean_exact(pair: MechanismSchedule, n: int, k: int) -> float:
    """sum_j j P(Z_{n+1} = j | Z_n = k), from the k-fold convolution of the active law."""
    mech = pair.at(n)
    dist = np.array([1.0])
    for _ in range(k):
        dist = np.convolve(dist, mech.probs)
    return float(np.dot(np.arange(dist.size), dist))


def variance_zn(pair: MechanismSchedule, n: int, degree_cap: int = 4096) -> tuple[float, str]:
    """Var(Z_n) with its source: the closed form, or the exact law when m = 1."""
    from .iterate import schedule_distribution

    table = normalizers(pair)
    try:
        return var_zn(table, n), "closed_form"
    except CriticalCase:
        law = schedule_distribution(pair, n, degree_cap)
        if not law.exact:
            raise CriticalCase(
                f"m = 1 and the law of Z_{n} exceeds degree cap {degree_cap}; no exact variance"
            ) from None
        return law.variance(), "exact_distribution"
