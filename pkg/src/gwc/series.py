"""Truncated power series with a certified tail bound.

Products are plain (quadratic) convolutions truncated at the degree cap; no
transform-based multiplication, so probability coefficients carry only the
usual rounding error of nonnegative sums.
"""
from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .errors import DegreeOverflow, IndexOutOfRange, InexactInput, ValidationError
from .mechanism import OffspringDistribution

DEFAULT_DEGREE = 4096
MAX_DEGREE = 1 << 22


@dataclass(frozen=True, eq=False)
class TruncatedSeries:
    """Coefficients c_0..c_D plus a bound on everything beyond degree D.

    ``exact`` means the series is complete: nothing was cut off, so
    ``tail_bound`` is 0. For probability series ``tail_bound`` bounds the mass
    sitting above D.
    """

    coeffs: np.ndarray
    tail_bound: float = 0.0
    exact: bool = True

    def __post_init__(self):
        arr = np.array(self.coeffs, dtype=float).ravel()
        if arr.size == 0:
            raise ValidationError("coeffs: empty series")
        if self.tail_bound < 0:
            raise ValidationError(f"tail_bound: {self.tail_bound!r} < 0")
        if self.exact and self.tail_bound != 0:
            raise ValidationError("exact series must have tail_bound = 0")
        arr.setflags(write=False)
        object.__setattr__(self, "coeffs", arr)
        object.__setattr__(self, "tail_bound", float(self.tail_bound))

    @property
    def degree_cap(self) -> int:
        return self.coeffs.size - 1

    @property
    def last_nonzero(self) -> int:
        nz = np.flatnonzero(self.coeffs)
        return int(nz[-1]) if nz.size else 0

    @classmethod
    def identity(cls, degree_cap=DEFAULT_DEGREE) -> "TruncatedSeries":
        _check_budget(degree_cap)
        c = np.zeros(degree_cap + 1)
        if degree_cap >= 1:
            c[1] = 1.0
            return cls(c)
        return cls(c, tail_bound=1.0, exact=False)

    @classmethod
    def from_distribution(cls, dist: OffspringDistribution, degree_cap=DEFAULT_DEGREE):
        _check_budget(degree_cap)
        c = np.zeros(degree_cap + 1)
        k = min(dist.K, degree_cap)
        c[: k + 1] = dist.probs[: k + 1]
        if dist.K <= degree_cap and dist.exact:
            return cls(c)
        return cls(c, tail_bound=max(0.0, 1.0 - c.sum()), exact=False)

    def total(self) -> float:
        return float(self.coeffs.sum())

    def mean(self) -> float:
        return float(np.dot(np.arange(self.coeffs.size), self.coeffs))

    def variance(self) -> float:
        j = np.arange(self.coeffs.size)
        mu = self.mean() / self.total()
        return float(np.dot((j - mu) ** 2, self.coeffs) / self.total())

    def __call__(self, s):
        return eval_series(self, s)


def _check_budget(degree_cap: int, budget: int = MAX_DEGREE):
    if degree_cap < 0:
        raise ValidationError(f"degree_cap: {degree_cap} < 0")
    if degree_cap > budget:
        raise DegreeOverflow(f"degree cap {degree_cap} exceeds memory budget {budget}")


def _mul_trunc(x: np.ndarray, y: np.ndarray, degree_cap: int) -> np.ndarray:
    nx = np.flatnonzero(x)
    ny = np.flatnonzero(y)
    out = np.zeros(degree_cap + 1)
    if nx.size == 0 or ny.size == 0:
        return out
    lx = min(nx[-1] + 1, degree_cap + 1)
    ly = min(ny[-1] + 1, degree_cap + 1)
    prod = np.convolve(x[:lx], y[:ly])
    k = min(prod.size, degree_cap + 1)
    out[:k] = prod[:k]
    return out


def compose_outer(outer: OffspringDistribution, inner: TruncatedSeries,
                  budget: int = MAX_DEGREE) -> TruncatedSeries:
    """Coefficients of sum_j p_j inner(s)^j up to the inner degree cap.

    Coefficients up to D are always exact (they only involve inner coefficients
    up to D). Mass pushed above D is recorded as ``tail_bound = 1 - sum(c)``,
    which is exact bookkeeping for probability series.
    """
    if not outer.exact:
        raise InexactInput("outer mechanism must have finite support")
    D = inner.degree_cap
    _check_budget(D, budget)
    c = inner.coeffs
    res = np.zeros(D + 1)
    res[0] = outer.probs[-1]
    for p in outer.probs[-2::-1]:
        res = _mul_trunc(res, c, D)
        res[0] += p
    lossless = inner.exact and outer.K * inner.last_nonzero <= D
    if lossless:
        return TruncatedSeries(res)
    tail = max(0.0, 1.0 - float(res.sum()))
    return TruncatedSeries(res, tail_bound=tail, exact=False)


def eval_series(series: TruncatedSeries, s: float):
    """Enclosure [lo, hi] of the series value at s in [0, 1]."""
    if not 0.0 <= s <= 1.0:
        raise ValidationError(f"s={s!r}: series enclosure needs s in [0, 1]")
    lo = float(np.polynomial.polynomial.polyval(s, series.coeffs))
    if series.exact:
        return lo, lo
    return lo, lo + series.tail_bound * s ** series.degree_cap


def differentiate(series: TruncatedSeries) -> TruncatedSeries:
    if not series.exact:
        raise InexactInput("derivative of an inexact series has no certified tail")
    if series.degree_cap == 0:
        return TruncatedSeries(np.zeros(1))
    j = np.arange(1, series.coeffs.size)
    return TruncatedSeries(series.coeffs[1:] * j)


def coefficient(series: TruncatedSeries, j: int) -> float:
    if not 0 <= j <= series.degree_cap:
        raise IndexOutOfRange(f"index {j} outside 0..{series.degree_cap}")
    return float(series.coeffs[j])


def dump_csv(series: TruncatedSeries, fh=None, header: dict | None = None) -> str:
    """Write ``index,coefficient`` rows after a comment line with exactness info."""
    buf = io.StringIO()
    meta = {"exact": str(series.exact).lower(), "tail_bound": repr(series.tail_bound),
            "degree_cap": series.degree_cap}
    if header:
        meta.update(header)
    buf.write("# " + " ".join(f"{k}={v}" for k, v in meta.items()) + "\n")
    buf.write("index,coefficient\n")
    for j, c in enumerate(series.coeffs):
        buf.write(f"{j},{float(c)!r}\n")
    text = buf.getvalue()
    if fh is not None:
        fh.write(text)
    return text


def load_csv(text: str) -> TruncatedSeries:
    meta = {}
    rows = []
    for line in text.splitlines():
        if line.startswith("#"):
            for tok in line[1:].split():
                if "=" in tok:
                    k, v = tok.split("=", 1)
                    meta[k] = v
        elif line and not line.startswith("index"):
            j, c = line.split(",")
            rows.append((int(j), float(c)))
    D = int(meta.get("degree_cap", max(j for j, _ in rows)))
    coeffs = np.zeros(D + 1)
    for j, c in rows:
        coeffs[j] = c
    exact = meta.get("exact", "true") == "true"
    return TruncatedSeries(coeffs, float(meta.get("tail_bound", 0.0)), exact)
