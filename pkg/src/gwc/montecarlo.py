"""Seeded simulation of cyclic-schedule branching paths and empirical estimators.

Randomness is keyed by (seed, path block, generation): each block of
``BLOCK_SIZE`` paths draws generation n from its own Philox stream, so the
trajectories do not depend on how blocks are spread over threads.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import (
    PreconditionViolation,
    ProxyTooClose,
    ResourceBudget,
    UnderpoweredCondition,
    ValidationError,
)
from .mechanism import MechanismSchedule
from .moments import running_gamma

BLOCK_SIZE = 1024
DRAW_CAP = 10 ** 9
PROXY_THRESHOLD = 1e4
PROXY_RATIO = 100.0
MIN_CONDITIONED = 200
EDGE_TOL = 1e-9


def thread_count() -> int:
    raw = os.environ.get("GWC_THREADS")
    if raw is None or raw == "":
        return min(8, os.cpu_count() or 1)
    try:
        n = int(raw)
    except ValueError:
        raise ValidationError(f"GWC_THREADS: {raw!r} is not an integer") from None
    if n < 1:
        raise ValidationError(f"GWC_THREADS: {n} must be >= 1")
    return n


@dataclass(frozen=True)
class SimConfig:
    schedule: MechanismSchedule
    n_max: int
    paths: int
    seed: int = 0
    z0: int = 1
    draw_cap: float = DRAW_CAP

    def __post_init__(self):
        problems = []
        if self.n_max < 1:
            problems.append(f"n_max: {self.n_max} must be >= 1")
        if self.paths < 1:
            problems.append(f"paths: {self.paths} must be >= 1")
        if self.z0 < 1:
            problems.append(f"z0: {self.z0} must be >= 1")
        if not 0 <= self.seed < 1 << 64:
            problems.append(f"seed: {self.seed} must fit in 64 unsigned bits")
        for i, mech in enumerate(self.schedule.mechanisms):
            if not mech.exact:
                problems.append(f"mechanisms[{i}]: simulation needs finite support")
        if problems:
            raise ValidationError("; ".join(problems), problems)

    def expected_draws(self) -> float:
        gam = running_gamma(self.schedule, self.n_max - 1)
        return float(self.paths * self.z0 * gam.sum())


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    trajectories: np.ndarray
    seed: int
    config: SimConfig = field(repr=False)

    @cached_property
    def gamma(self) -> np.ndarray:
        return running_gamma(self.config.schedule, self.config.n_max) * self.config.z0

    @cached_property
    def w_values(self) -> np.ndarray:
        return self.trajectories / self.gamma

    @property
    def paths(self) -> int:
        return self.trajectories.shape[0]


def _stream(seed: int, block: int, generation: int) -> np.random.Generator:
    ss = np.random.SeedSequence(seed, spawn_key=(block, generation))
    return np.random.Generator(np.random.Philox(ss))


def _simulate_block(config: SimConfig, block: int, size: int) -> np.ndarray:
    out = np.zeros((size, config.n_max + 1), dtype=np.int64)
    z = np.full(size, config.z0, dtype=np.int64)
    out[:, 0] = z
    for n in range(config.n_max):
        mech = config.schedule.at(n)
        rng = _stream(config.seed, block, n)
        alive = z > 0
        if alive.any():
            # Offspring counts per support value for each path: exact sum of z draws.
            counts = rng.multinomial(z[alive], mech.probs)
            nxt = np.zeros_like(z)
            nxt[alive] = counts @ np.arange(mech.probs.size, dtype=np.int64)
            z = nxt
        out[:, n + 1] = z
    return out


def simulate(config: SimConfig, threads: int | None = None) -> PathEnsemble:
    expected = config.expected_draws()
    if expected > config.draw_cap:
        raise ResourceBudget(
            f"expected {expected:.3g} offspring draws exceed the cap {config.draw_cap:.3g}"
        )
    threads = thread_count() if threads is None else threads
    sizes = [min(BLOCK_SIZE, config.paths - start) for start in range(0, config.paths, BLOCK_SIZE)]
    if threads <= 1 or len(sizes) == 1:
        parts = [_simulate_block(config, i, s) for i, s in enumerate(sizes)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda args: _simulate_block(config, *args), enumerate(sizes)))
    traj = np.concatenate(parts, axis=0)
    traj.setflags(write=False)
    return PathEnsemble(traj, config.seed, config)


@dataclass(frozen=True)
class Estimate:
    value: float
    se: float
    count: int
    extra: dict = field(default_factory=dict)

    def as_dict(self):
        return {"value": self.value, "se": self.se, "count": self.count, **self.extra}


def _binomial(hits: np.ndarray) -> Estimate:
    n = int(hits.size)
    p = float(hits.mean()) if n else math.nan
    se = math.sqrt(p * (1 - p) / n) if n else math.nan
    return Estimate(p, se, n)


def _ratio_hits(ens: PathEnsemble, n: int, epsilon: float) -> np.ndarray:
    z = ens.trajectories[:, n].astype(float)
    z1 = ens.trajectories[:, n + 1].astype(float)
    omega = ens.config.schedule.at(n).mean
    with np.errstate(divide="ignore", invalid="ignore"):
        dist = np.abs(z1 - omega * z) - epsilon * z
    return dist > EDGE_TOL * np.maximum(1.0, omega * z)


def _check_n(ens, n, need_next=True):
    top = ens.config.n_max - (1 if need_next else 0)
    if not 0 <= n <= top:
        raise ValidationError(f"n: {n} outside 0..{top}")


def estimate_ratio_deviation(ens: PathEnsemble, n: int, epsilon: float) -> Estimate:
    """Fraction of paths with |Z_{n+1}/Z_n - omega_n| > eps; needs p_0 = 0 everywhere."""
    _check_n(ens, n)
    if epsilon <= 0:
        raise ValidationError(f"epsilon: {epsilon!r} must be > 0")
    if any(m.probs[0] != 0 for m in ens.config.schedule.mechanisms):
        raise PreconditionViolation("ratio estimator needs p_0 = 0 for every mechanism")
    return _binomial(_ratio_hits(ens, n, epsilon))


def _check_proxy(ens, n, proxy_horizon, threshold):
    if not n <= proxy_horizon <= ens.config.n_max:
        raise ValidationError(f"proxy_horizon: {proxy_horizon} outside {n}..{ens.config.n_max}")
    g = ens.gamma
    if g[proxy_horizon] < threshold:
        raise ProxyTooClose(f"Gamma_N = {g[proxy_horizon]!r} below proxy threshold {threshold!r}")
    if g[proxy_horizon] / g[n] < PROXY_RATIO:
        raise ProxyTooClose(
            f"Gamma_N / Gamma_n = {g[proxy_horizon] / g[n]!r} < {PROXY_RATIO}; proxy bias not negligible"
        )


def proxy_bias_bound(schedule: MechanismSchedule, proxy_horizon: int, margin: float):
    """Chebyshev bound on P(|W_N - W| > margin) from E(W - W_N)^2 = Var W - Var W_N.

    Only available for two-mechanism supercritical schedules started from one
    individual, where both variances have closed forms.
    """
    from .moments import normalizers, var_w, var_w_n

    if len(schedule) != 2:
        return None
    table = normalizers(schedule)
    if table.m <= 1:
        return None
    gap = max(0.0, var_w(table) - var_w_n(table, proxy_horizon))
    return min(1.0, gap / margin ** 2)


def estimate_w_deviation(ens: PathEnsemble, n: int, epsilon: float, proxy_horizon: int,
                         threshold: float = PROXY_THRESHOLD) -> Estimate:
    """Fraction of paths with |W_n - W_N| > eps, W_N standing in for W.

    ``extra['proxy_bias']`` bounds P(|W_N - W| > eps/10), so the target
    probability at eps lies between the estimate at 1.1 eps minus that bound
    and the estimate at 0.9 eps plus it.
    """
    _check_n(ens, n, need_next=False)
    _check_proxy(ens, n, proxy_horizon, threshold)
    w = ens.w_values
    hits = np.abs(w[:, n] - w[:, proxy_horizon]) > epsilon
    est = _binomial(hits)
    est.extra["proxy_bias"] = proxy_bias_bound(ens.config.schedule, proxy_horizon, epsilon / 10)
    est.extra["proxy_horizon"] = proxy_horizon
    return est


def estimate_conditional_deviation(ens: PathEnsemble, n: int, epsilon: float, delta: float,
                                   proxy_horizon: int,
                                   threshold: float = PROXY_THRESHOLD) -> Estimate:
    """Ratio deviation frequency among paths whose proxy W_N is at least delta."""
    _check_n(ens, n)
    if delta <= 0:
        raise ValidationError(f"delta: {delta!r} must be > 0")
    _check_proxy(ens, n, proxy_horizon, threshold)
    keep = ens.w_values[:, proxy_horizon] >= delta
    k = int(keep.sum())
    if k < MIN_CONDITIONED:
        raise UnderpoweredCondition(f"only {k} paths with W_N >= {delta} (need {MIN_CONDITIONED})")
    est = _binomial(_ratio_hits(ens, n, epsilon)[keep])
    est.extra["condition_frequency"] = k / ens.paths
    est.extra["proxy_horizon"] = proxy_horizon
    return est


@dataclass(frozen=True)
class WMoments:
    mean: float
    mean_se: float
    variance: float
    variance_se: float
    thetas: np.ndarray
    mgf: np.ndarray


def empirical_w_moments(ens: PathEnsemble, n: int, thetas=()) -> WMoments:
    _check_n(ens, n, need_next=False)
    w = ens.w_values[:, n]
    N = w.size
    mean = float(w.mean())
    var = float(w.var(ddof=1)) if N > 1 else 0.0
    centered = w - mean
    m4 = float(np.mean(centered ** 4))
    # Sampling variance of the unbiased variance estimator: (mu4 - sigma^4 (N-3)/(N-1)) / N.
    var_se = math.sqrt(max(m4 - var ** 2 * (N - 3) / (N - 1), 0.0) / N) if N > 1 else math.inf
    thetas = np.asarray(thetas, dtype=float)
    mgf = np.array([np.mean(np.exp(t * w)) for t in thetas])
    return WMoments(mean, math.sqrt(var / N), var, var_se, thetas, mgf)


def extinction_frequency(ens: PathEnsemble, n: int) -> Estimate:
    _check_n(ens, n, need_next=False)
    return _binomial(ens.trajectories[:, n] == 0)


def conditional_mean_cells(ens: PathEnsemble, n: int, top: int = 5):
    """For the most populated values k of Z_n: (k, count, mean Z_{n+1}, se)."""
    _check_n(ens, n)
    z = ens.trajectories[:, n]
    z1 = ens.trajectories[:, n + 1].astype(float)
    values, counts = np.unique(z[z > 0], return_counts=True)
    order = np.argsort(-counts, kind="stable")[:top]
    cells = []
    for i in order:
        k = int(values[i])
        sel = z1[z == k]
        se = float(sel.std(ddof=1) / math.sqrt(sel.size)) if sel.size > 1 else math.inf
        cells.append((k, int(sel.size), float(sel.mean()), se))
    return cells
