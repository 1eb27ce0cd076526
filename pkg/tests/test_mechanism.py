import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gwc.errors import DomainError, ValidationError
from gwc.mechanism import (
    MechanismSchedule,
    OffspringDistribution,
    Regime,
    classify,
    distribution_from_json,
    moments,
    pgf_derivative,
    pgf_eval,
    schedule_from_json,
    smallest_fixed_point,
)

from conftest import dist, pair
from oracles import quadratic_root
from strategies import distributions

QUAD = (0.25, 0, 0.75)


@pytest.mark.parametrize("probs, s, expected", [
    ((0, 1), 0.5, 0.5),
    (QUAD, 1.0, 1.0),
    (QUAD, 1 / 3, 1 / 3),
])
def test_pgf_examples(probs, s, expected):
    assert pgf_eval(dist(*probs), s) == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("probs, s, order, expected", [
    (QUAD, 1.0, 1, 1.5),
    ((0, 1), 0.3, 2, 0.0),
    (QUAD, 0.0, 1, 0.0),
])
def test_derivative_examples(probs, s, order, expected):
    assert pgf_derivative(dist(*probs), s, order) == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("probs, mean, var", [
    ((0, 0.5, 0, 0.5), 2.0, 1.0),
    ((0, 0, 1), 2.0, 0.0),
    (QUAD, 1.5, 0.75),
])
def test_moment_examples(probs, mean, var):
    m = moments(dist(*probs))
    assert m.mean == pytest.approx(mean, abs=1e-14)
    assert m.variance == pytest.approx(var, abs=1e-14)
    assert m.variance == pytest.approx(m.second_factorial_moment + m.mean - m.mean ** 2, abs=1e-12)


def test_fixed_point_examples():
    q = dist(*QUAD)
    rho = smallest_fixed_point(q, q.mean, lambda s: pgf_derivative(q, s))
    assert rho == pytest.approx(1 / 3, abs=1e-12)
    ident = dist(0, 1)
    assert smallest_fixed_point(ident, ident.mean) == 0.0
    sub = dist(0.6, 0.4)
    assert smallest_fixed_point(sub, sub.mean) == 1.0


@pytest.mark.parametrize("a, b, regime", [
    ((0, 0, 1), (0, 0, 0, 1), Regime.SUPERCRITICAL),
    ((0, 0, 1), (0.5, 0.5), Regime.CRITICAL),
    ((0.6, 0.4), (0.6, 0.4), Regime.SUBCRITICAL),
])
def test_classify_examples(a, b, regime):
    assert classify(pair(dist(*a), dist(*b))) is regime


def test_validation_names_sum_and_index():
    with pytest.raises(ValidationError, match="sum 0.9"):
        OffspringDistribution(np.array([0.4, 0.5]))
    with pytest.raises(ValidationError, match=r"probs\[1\]"):
        OffspringDistribution(np.array([1.2, -0.2]))
    with pytest.raises(ValidationError, match="p_0 = 1"):
        OffspringDistribution(np.array([1.0]))


def test_trailing_zeros_trimmed_and_k():
    d = dist(0, 0.5, 0.5, 0, 0)
    assert d.K == 2
    assert d.min_support == 1


def test_json_forms():
    dense = distribution_from_json({"probs": [0, 0.5, 0.5]})
    sparse = distribution_from_json({"probs": {"1": 0.5, "2": 0.5}})
    assert np.array_equal(dense.probs, sparse.probs)
    with pytest.raises(ValidationError, match=r"probs\['x'\]"):
        distribution_from_json({"probs": {"x": 1.0}})


def test_schedule_collects_every_problem():
    doc = {"mechanisms": [{"probs": [0.5, 0.4]}, {"probs": [0.2, -0.1, 0.9]}]}
    with pytest.raises(ValidationError) as info:
        schedule_from_json(json.dumps(doc))
    joined = " ".join(info.value.problems)
    assert "mechanisms[0]" in joined and "mechanisms[1]" in joined


def test_truncated_law_refuses_s_above_one():
    d = OffspringDistribution(np.array([0.2, 0.7]), tail_mass=0.1)
    assert pgf_eval(d, 0.5) == pytest.approx(0.55)
    with pytest.raises(DomainError):
        pgf_eval(d, 1.2)
    with pytest.raises(DomainError):
        pgf_eval(dist(0, 1), -0.1)


def test_require_pair():
    with pytest.raises(ValidationError, match="exactly 2"):
        MechanismSchedule((dist(0, 1),)).require_pair()


@given(distributions())
def test_pgf_normalized_monotone_convex(d):
    assert pgf_eval(d, 1.0) == pytest.approx(1.0, abs=1e-12)
    s = np.linspace(0, 1, 41)
    f = pgf_eval(d, s)
    assert np.all(np.diff(f) >= -1e-15)
    mid = pgf_eval(d, 0.5 * (s[:-1] + s[1:]))
    assert np.all(mid <= 0.5 * (f[:-1] + f[1:]) + 1e-12)


@given(distributions(max_k=4, min_k=2))
def test_fixed_point_properties(d):
    rho = smallest_fixed_point(lambda s: pgf_eval(d, s), d.mean, lambda s: pgf_derivative(d, s))
    assert abs(pgf_eval(d, rho) - rho) <= 1e-10
    if d.mean > 1 + 1e-9 and rho > 0:
        below = np.linspace(0, rho, 12)[:-1]
        assert np.all(pgf_eval(d, below) > below)
        above = np.linspace(rho, 1, 12)[1:-1]
        gap = pgf_eval(d, above) - above
        assert np.all(gap < 1e-13)


@given(st.floats(0.01, 0.99))
def test_quadratic_root_oracle(p0):
    d = dist(p0, 0, 1 - p0)
    rho = smallest_fixed_point(lambda s: pgf_eval(d, s), d.mean, lambda s: pgf_derivative(d, s))
    expected = quadratic_root(p0, 0, 1 - p0) if d.mean > 1 else 1.0
    assert rho == pytest.approx(expected, abs=1e-10)
