import numpy as np
import pytest
from hypothesis import given

from gwc.errors import CriticalCase, DomainError
from gwc.mechanism import OffspringDistribution
from gwc.moments import (
    conditional_mean_exact,
    mean_zn,
    normalizers,
    running_gamma,
    var_w,
    var_w_n,
    var_zn,
    variance_zn,
)

from conftest import dist, pair
from oracles import brute_law, law_mean_var
from strategies import supercritical_pairs

TWO, THREE = OffspringDistribution.point(2), OffspringDistribution.point(3)
SPLIT = dist(0, 0.5, 0, 0.5)


def test_mean_examples():
    t = normalizers(pair(TWO, THREE))
    assert mean_zn(t, 0) == 1.0
    assert mean_zn(t, 3) == 12.0
    assert t.gamma_tilde(3) == 18.0


def test_variance_examples():
    t = normalizers(pair(SPLIT, TWO))
    assert t.sigma_sq == 4.0
    assert var_zn(t, 0) == 0.0
    assert var_zn(t, 1) == pytest.approx(1.0)
    assert var_zn(t, 2) == pytest.approx(4.0)
    assert var_w(t) == pytest.approx(1 / 3)
    assert var_w(normalizers(pair(TWO, THREE))) == 0.0


def test_var_w_domain():
    with pytest.raises(DomainError):
        var_w(normalizers(pair(dist(0.5, 0.5), dist(0.2, 0.8))))


def test_critical_case():
    p = pair(TWO, dist(0.5, 0.5))
    with pytest.raises(CriticalCase):
        var_zn(normalizers(p), 3)
    value, source = variance_zn(p, 3)
    assert source == "exact_distribution" and value == pytest.approx(2.0)


def test_recursion_and_duality():
    p = pair(dist(0.1, 0.2, 0.7), dist(0, 0.4, 0.3, 0.3))
    t = normalizers(p)
    ts = normalizers(p.swapped())
    for n in range(50):
        assert t.gamma(n + 1) == pytest.approx(t.omega(n) * t.gamma(n), rel=1e-14)
        assert ts.gamma(n) == pytest.approx(t.gamma_tilde(n), rel=1e-14)
    np.testing.assert_allclose(running_gamma(p, 5), [t.gamma(n) for n in range(6)])


@given(supercritical_pairs(max_k=3))
def test_variance_against_oracle(p):
    t = normalizers(p)
    for n in range(0, 6):
        mean, var = law_mean_var(brute_law([p.a.probs, p.b.probs], n))
        assert mean == pytest.approx(mean_zn(t, n), rel=1e-9)
        assert var == pytest.approx(var_zn(t, n), rel=1e-9, abs=1e-12)
        if n:
            assert var_w_n(t, n) == pytest.approx(var / mean ** 2, rel=1e-9, abs=1e-12)


def test_martingale_step_small():
    p = pair(dist(0.2, 0.3, 0.5), dist(0, 0.6, 0.1, 0.3))
    t = normalizers(p)
    for n in range(4):
        for k in range(1, 12):
            assert conditional_mean_exact(p, n, k) == pytest.approx(t.omega(n) * k, rel=1e-12)


def test_var_w_n_approaches_var_w(test_pair):
    t = normalizers(test_pair)
    gaps = [abs(var_w_n(t, n) - var_w(t)) for n in range(1, 40)]
    assert all(y <= x for x, y in zip(gaps, gaps[1:]))
    assert gaps[-1] < 1e-6
