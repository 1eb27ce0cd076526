"""Offspring distributions, their generating functions, and fixed points."""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Mapping, Sequence

import numpy as np
from numpy.polynomial import polynomial as P

from .errors import DomainError, NonConvergence, ValidationError

NORMALIZATION_TOL = 1e-12
CRITICAL_TOL = 1e-12


class Regime(str, enum.Enum):
    SUBCRITICAL = "subcritical"
    CRITICAL = "critical"
    SUPERCRITICAL = "supercritical"


@dataclass(frozen=True, eq=False)
class OffspringDistribution:
    """Probability mass function p_0..p_K on the nonnegative integers.

    ``tail_mass`` is the probability that was cut off beyond K when the caller
    truncated an infinite-support law; it is 0 for genuinely finite support.
    Trailing zero probabilities are dropped, so ``K`` is the largest index with
    positive mass.
    """

    probs: np.ndarray
    tail_mass: float = 0.0

    def __post_init__(self):
        arr = np.asarray(self.probs, dtype=float).ravel()
        problems = []
        if arr.size == 0:
            problems.append("probs: empty")
        bad = [i for i, p in enumerate(arr) if not math.isfinite(p) or p < 0]
        problems.extend(f"probs[{i}]: {arr[i]!r} is not a probability" for i in bad)
        if not (math.isfinite(self.tail_mass) and self.tail_mass >= 0):
            problems.append(f"tail_mass: {self.tail_mass!r} must be >= 0")
        if not problems:
            total = float(arr.sum()) + self.tail_mass
            if abs(total - 1.0) > NORMALIZATION_TOL:
                problems.append(f"probs: sum {total!r} differs from 1")
        if not problems and arr[0] == 1.0:
            problems.append("probs[0]: mechanism with p_0 = 1 is degenerate")
        if problems:
            raise ValidationError("; ".join(problems), problems)
        nz = np.flatnonzero(arr)
        arr = arr[: nz[-1] + 1].copy()
        arr.setflags(write=False)
        object.__setattr__(self, "probs", arr)
        object.__setattr__(self, "tail_mass", float(self.tail_mass))

    @classmethod
    def point(cls, k: int) -> "OffspringDistribution":
        probs = np.zeros(k + 1)
        probs[k] = 1.0
        return cls(probs)

    @classmethod
    def from_mapping(cls, probs: Mapping[int, float], tail_mass=0.0):
        size = max(int(k) for k in probs) + 1
        dense = np.zeros(size)
        for k, p in probs.items():
            dense[int(k)] = p
        return cls(dense, tail_mass)

    @property
    def K(self) -> int:
        return self.probs.size - 1

    @property
    def exact(self) -> bool:
        return self.tail_mass == 0.0

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.probs)

    @property
    def min_support(self) -> int:
        return int(self.support[0])

    @cached_property
    def mean(self) -> float:
        return float(np.dot(np.arange(self.probs.size), self.probs))

    @cached_property
    def variance(self) -> float:
        j = np.arange(self.probs.size)
        return float(np.dot((j - self.mean) ** 2, self.probs))

    def __call__(self, s):
        return pgf_eval(self, s)

    def __repr__(self):
        terms = ", ".join(f"p_{j}={p:g}" for j, p in enumerate(self.probs) if p)
        tail = f", tail={self.tail_mass:g}" if self.tail_mass else ""
        return f"OffspringDistribution({terms}{tail})"

    def to_json(self) -> dict:
        return {"probs": [float(p) for p in self.probs]}


@dataclass(frozen=True)
class MomentSummary:
    mean: float
    second_factorial_moment: float
    variance: float


@dataclass(frozen=True)
class MechanismSchedule:
    """Cyclic sequence of mechanisms; generation n uses ``mechanisms[n % len]``."""

    mechanisms: tuple = field()

    def __post_init__(self):
        mechs = tuple(self.mechanisms)
        if not mechs:
            raise ValidationError("mechanisms: schedule is empty")
        object.__setattr__(self, "mechanisms", mechs)

    @classmethod
    def pair(cls, a, b) -> "MechanismSchedule":
        return cls((a, b))

    def __len__(self):
        return len(self.mechanisms)

    def __getitem__(self, i):
        return self.mechanisms[i]

    def at(self, n: int) -> OffspringDistribution:
        """Mechanism driving the step from generation n to n + 1."""
        return self.mechanisms[n % len(self.mechanisms)]

    @property
    def a(self):
        return self.mechanisms[0]

    @property
    def b(self):
        return self.mechanisms[1]

    def require_pair(self) -> "MechanismSchedule":
        if len(self.mechanisms) != 2:
            raise ValidationError(
                f"mechanisms: analytics need exactly 2 mechanisms, got {len(self.mechanisms)}"
            )
        return self

    def swapped(self) -> "MechanismSchedule":
        return MechanismSchedule(self.mechanisms[::-1])

    def to_json(self) -> dict:
        return {"mechanisms": [m.to_json() for m in self.mechanisms]}


def distribution_from_json(doc, where="") -> OffspringDistribution:
    """Parse ``{"probs": [...]}`` (dense) or ``{"probs": {"k": p}}`` (sparse)."""
    prefix = f"{where}." if where else ""
    if not isinstance(doc, Mapping) or "probs" not in doc:
        raise ValidationError(f"{prefix}probs: missing")
    raw = doc["probs"]
    tail = doc.get("tail_mass", 0.0)
    problems = []
    if isinstance(raw, Mapping):
        dense = {}
        for key, value in raw.items():
            try:
                idx = int(key)
            except (TypeError, ValueError):
                problems.append(f"{prefix}probs[{key!r}]: index is not an integer")
                continue
            if idx < 0:
                problems.append(f"{prefix}probs[{key!r}]: negative index")
                continue
            dense[idx] = value
        items = dense
        if not dense and not problems:
            problems.append(f"{prefix}probs: empty")
    elif isinstance(raw, Sequence) and not isinstance(raw, (str, bytes)):
        items = dict(enumerate(raw))
    else:
        raise ValidationError(f"{prefix}probs: expected a list or an object")
    for idx, value in items.items():
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            problems.append(f"{prefix}probs[{idx}]: {value!r} is not a number")
    if problems:
        raise ValidationError("; ".join(problems), problems)
    try:
        if isinstance(raw, Mapping):
            return OffspringDistribution.from_mapping(items, tail)
        return OffspringDistribution(np.asarray(raw, dtype=float), tail)
    except ValidationError as exc:
        msgs = [prefix + p for p in exc.problems]
        raise ValidationError("; ".join(msgs), msgs) from None


def schedule_from_json(doc) -> MechanismSchedule:
    if isinstance(doc, (str, bytes)):
        doc = json.loads(doc)
    if not isinstance(doc, Mapping) or not isinstance(doc.get("mechanisms"), list):
        raise ValidationError('mechanisms: expected top-level {"mechanisms": [...]}')
    mechs, problems = [], []
    for i, item in enumerate(doc["mechanisms"]):
        try:
            mechs.append(distribution_from_json(item, where=f"mechanisms[{i}]"))
        except ValidationError as exc:
            problems.extend(exc.problems)
    if problems:
        raise ValidationError("; ".join(problems), problems)
    return MechanismSchedule(tuple(mechs))


def _check_argument(dist: OffspringDistribution, s):
    s = np.asarray(s, dtype=float)
    if not np.all(np.isfinite(s)) or np.any(s < 0):
        raise DomainError(f"s={s!r}: generating function needs finite s >= 0")
    if dist.tail_mass > 0 and np.any(s > 1):
        raise DomainError("s > 1 is not certifiable for a truncated distribution")
    return s


def pgf_eval(dist: OffspringDistribution, s):
    """sum_j p_j s^j, elementwise over array input."""
    s = _check_argument(dist, s)
    out = P.polyval(s, dist.probs)
    return float(out) if out.ndim == 0 else out


def pgf_derivative(dist: OffspringDistribution, s, order: int = 1):
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    s = _check_argument(dist, s)
    coeffs = P.polyder(dist.probs, order) if dist.K >= order else np.zeros(1)
    out = P.polyval(s, coeffs)
    return float(out) if out.ndim == 0 else out


def moments(dist: OffspringDistribution) -> MomentSummary:
    if not dist.exact:
        raise DomainError("moments need a finite-support distribution")
    mean = pgf_derivative(dist, 1.0, 1)
    fact2 = pgf_derivative(dist, 1.0, 2)
    return MomentSummary(mean, fact2, dist.variance)


def smallest_fixed_point(
    pgf: Callable[[float], float],
    slope_at_one: float,
    derivative: Callable[[float], float] | None = None,
    tol: float = 1e-12,
    max_iter: int = 200,
) -> float:
    """Smallest root of pgf(s) = s on [0, 1] for a convex increasing map fixing 1.

    A map with pgf(0) = 0 has 0 as its smallest root. Otherwise, if the slope at
    1 is at most 1 the only root is 1; if it exceeds 1 the root lies in [0, 1)
    and is bracketed by bisection, with Newton steps taken whenever they land
    inside the current bracket.
    """
    if pgf(0.0) == 0.0:
        return 0.0
    if slope_at_one <= 1.0 + CRITICAL_TOL:
        return 1.0

    eta = 0.5
    lo = 0.0
    while pgf(1.0 - eta) - (1.0 - eta) >= 0.0:
        lo = 1.0 - eta
        eta *= 0.5
        if eta < 1e-16:
            raise NonConvergence("no point with pgf(s) < s found below 1")
    hi = 1.0 - eta

    x = lo
    for _ in range(max_iter):
        if hi - lo <= tol:
            break
        step_ok = False
        if derivative is not None:
            h = pgf(x) - x
            dh = derivative(x) - 1.0
            if dh != 0.0:
                cand = x - h / dh
                if lo < cand < hi:
                    x, step_ok = cand, True
        if not step_ok:
            x = 0.5 * (lo + hi)
        h = pgf(x) - x
        if h > 0:
            lo = x
        elif h < 0:
            hi = x
        else:
            return x
        if derivative is not None and step_ok:
            # Newton from inside a convex bracket: probe the other side cheaply.
            probe = x + (tol if h > 0 else -tol)
            if lo < probe < hi:
                hp = pgf(probe) - probe
                if hp > 0:
                    lo = probe
                elif hp < 0:
                    hi = probe
    else:
        raise NonConvergence(
            f"fixed point bracket still {hi - lo:.3e} wide after {max_iter} steps",
            last_gap=hi - lo,
        )
    return 0.5 * (lo + hi)


def classify(pair: MechanismSchedule) -> Regime:
    pair.require_pair()
    m = pair.a.mean * pair.b.mean
    if abs(m - 1.0) <= CRITICAL_TOL:
        return Regime.CRITICAL
    return Regime.SUPERCRITICAL if m > 1.0 else Regime.SUBCRITICAL
