import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gwc import limits
from gwc.errors import MonotonicityViolation, NonConvergence, PreconditionViolation
from gwc.iterate import IterationContext, extinction, f_n_eval, zn_distribution
from gwc.limits import (
    functional_residual_q,
    functional_residual_r,
    mgf_wn,
    q_coefficients,
    q_derivative_fd,
    q_derivative_limit,
    q_limit,
    qn_eval,
    r_derivative_at_one,
    r_limit,
    r_n_eval,
    theta1_bound,
)
from gwc.mechanism import OffspringDistribution, pgf_derivative, pgf_eval

from conftest import dist, pair
from oracles import plain_q, schroeder_q

HALF = (0, 0.5, 0.5)


def plain_q_limit(a, b, s, tol=1e-13):
    prev = plain_q(a, b, s, 0)
    for n in range(1, 400):
        cur = plain_q(a, b, s, n)
        if abs(cur - prev) <= tol * max(1, abs(cur)):
            return cur
        prev = cur
    raise AssertionError("oracle did not settle")


def test_normalizer_invariants(skew_ctx):
    eng = limits._engine(skew_ctx)
    ext = extinction(skew_ctx)
    assert eng.norm.gamma_n(0) == 1.0
    assert eng.norm.slope_a == pytest.approx(pgf_derivative(skew_ctx.a, ext.rho_ba))
    for k in range(5):
        assert eng.norm.gamma_n(2 * k + 1) / eng.norm.gamma_n(2 * k) == pytest.approx(eng.norm.slope_a)


def test_qn_examples(skew_ctx, test_ctx):
    ext = extinction(skew_ctx)
    assert qn_eval(skew_ctx, 0, 0.4) == pytest.approx(0.4 - ext.rho_ab)
    for n in (2, 4, 6):
        assert abs(qn_eval(skew_ctx, n, ext.rho_ab)) < 1e-9
    for k in range(4):
        assert abs(qn_eval(skew_ctx, 2 * k + 1, ext.rho_ba)) < 1e-9
    for n in range(1, 6):
        assert qn_eval(test_ctx, 2 * n, 0.6) == pytest.approx(f_n_eval(test_ctx, 2 * n, 0.6) / 0.25 ** n,
                                                              rel=1e-12)


def test_q_identity(identity_ctx):
    approx = q_limit(identity_ctx, [0.1, 0.5, 0.9])
    np.testing.assert_allclose(approx.values(), [0.1, 0.5, 0.9])
    coeffs = q_coefficients(identity_ctx, 6).coeffs
    assert coeffs.tolist() == [0, 1, 0, 0, 0, 0, 0]


def test_q_half_against_plain_iteration(test_ctx):
    oracle = plain_q_limit(np.array(HALF), np.array(HALF), 0.5)
    got = q_limit(test_ctx, [0.5], tol=1e-12).values()[0]
    assert got == pytest.approx(oracle, rel=1e-10)
    assert got == pytest.approx(1.8320105833530, rel=1e-10)


def test_q_vanishes_at_fixed_points(skew_ctx):
    ext = extinction(skew_ctx)
    assert abs(q_limit(skew_ctx, [ext.rho_ab]).values()[0]) < 1e-9
    assert abs(q_limit(skew_ctx, [ext.rho_ba], kind="Q_tilde").values()[0]) < 1e-9


def test_q_requires_supercritical():
    ctx = IterationContext(pair(dist(0.6, 0.4), dist(0.6, 0.4)))
    with pytest.raises(PreconditionViolation):
        q_limit(ctx, [0.5])


def test_q_reports_nonconvergence(test_ctx):
    with pytest.raises(NonConvergence) as info:
        q_limit(test_ctx, [0.9], tol=1e-14, max_steps=3)
    assert info.value.last_gap > 0


def test_q_coefficients_schroeder(test_ctx):
    q = q_coefficients(test_ctx, 40).coeffs
    ref = schroeder_q(HALF, HALF, 40)
    np.testing.assert_allclose(q, ref, rtol=1e-9)
    assert q[1] == 1.0 and q[2] == pytest.approx(2.0, rel=1e-12)
    assert np.all(q >= 0)


def test_q_coefficients_asymmetric():
    a, b = (0, 0.3, 0.7), (0, 0.6, 0.1, 0.3)
    ctx = IterationContext(pair(dist(*a), dist(*b)))
    q = q_coefficients(ctx, 30).coeffs
    np.testing.assert_allclose(q, schroeder_q(a, b, 30), rtol=1e-8)
    qt = q_coefficients(ctx, 30, kind="Q_tilde").coeffs
    assert qt[1] == pytest.approx(1.0, rel=1e-14)
    assert np.all(qt >= 0)
    # Q(f(a; s)) = a_1 Q~(s) in coefficient space.
    fa = np.zeros(31)
    fa[:3] = a
    power = np.eye(1, 31, 0).ravel()
    lhs = np.zeros(31)
    for i in range(31):
        lhs += q[i] * power
        power = np.convolve(power, fa)[:31]
    np.testing.assert_allclose(lhs, a[1] * qt, rtol=1e-8, atol=1e-12)


def test_q_coefficients_preconditions(skew_ctx):
    with pytest.raises(PreconditionViolation):
        q_coefficients(skew_ctx, 10)
    with pytest.raises(PreconditionViolation):
        q_coefficients(IterationContext(pair(OffspringDistribution.point(2), dist(*HALF))), 10)


def test_point_probability_asymptotics(test_ctx):
    q = q_coefficients(test_ctx, 12).coeffs
    gaps = []
    for n in range(2, 9):
        law = zn_distribution(test_ctx, 2 * n, 12)
        gaps.append(abs(law.coeffs[5] / 0.25 ** n - q[5]) / q[5])
    assert all(y < x for x, y in zip(gaps, gaps[1:]))
    assert gaps[-1] < 1e-3


def test_residual_examples(test_ctx, identity_ctx, skew_ctx):
    qi = q_limit(identity_ctx)
    assert functional_residual_q(identity_ctx, qi, q_limit(identity_ctx, kind="Q_tilde")) == 0.0
    aq = q_limit(test_ctx, tol=1e-12)
    at = q_limit(test_ctx, tol=1e-12, kind="Q_tilde")
    assert functional_residual_q(test_ctx, aq, at) <= 1e-6
    # Q on the skew pair reaches ~1e6, so the check is relative to its size.
    aq = q_limit(skew_ctx, tol=1e-12)
    at = q_limit(skew_ctx, tol=1e-12, kind="Q_tilde")
    size = max(abs(v) for v in aq.probe_values.values())
    assert functional_residual_q(skew_ctx, aq, at) <= 1e-6 * size


def test_no_death_case_reduces_to_a1(test_ctx):
    a1 = 0.5
    probes = limits.q_probe_grid()
    q_fa = q_limit(test_ctx, pgf_eval(test_ctx.a, probes), tol=1e-12).values()
    qt = q_limit(test_ctx, probes, tol=1e-12, kind="Q_tilde").values()
    np.testing.assert_allclose(q_fa, a1 * qt, rtol=1e-9)


@given(st.floats(0.05, 0.95))
def test_q_monotone_iterates(s):
    d = dist(*HALF)
    ctx = IterationContext(pair(d, dist(0, 0.3, 0.2, 0.5)))
    seq = [qn_eval(ctx, 2 * n, s) for n in range(25)]
    assert all(y >= x * (1 - 1e-13) for x, y in zip(seq, seq[1:]))


def test_derivative_link(test_ctx, skew_ctx):
    for ctx in (test_ctx, skew_ctx):
        ext = extinction(ctx)
        probes = np.array([0.2, 0.5, 0.8])
        qt_prime = q_derivative_fd(ctx, probes, kind="Q_tilde")
        q_prime_fa = q_derivative_fd(ctx, pgf_eval(ctx.a, probes))
        rhs = q_prime_fa * pgf_derivative(ctx.a, probes) / pgf_derivative(ctx.a, ext.rho_ba)
        np.testing.assert_allclose(qt_prime, rhs, atol=1e-6, rtol=1e-6)
        # Differentiated iterates agree with the finite differences.
        np.testing.assert_allclose(q_derivative_limit(ctx, probes, tol=1e-12),
                                   q_derivative_fd(ctx, probes), rtol=1e-6)


def test_q_grows_toward_one(test_ctx):
    vals = q_limit(test_ctx, [0.9, 0.99, 0.999, 0.9999], tol=1e-12).values()
    assert np.all(np.diff(vals) > 0)
    assert np.all(vals[1:] / vals[:-1] > 2)


def test_r_examples(test_ctx):
    for n in range(6):
        assert r_n_eval(test_ctx, "ab", n, 1.0) == 0.0
    assert r_derivative_at_one(test_ctx) == pytest.approx(1.0, abs=1e-4)
    assert r_derivative_at_one(test_ctx, "ba") == pytest.approx(1.0, abs=1e-4)
    assert functional_residual_r(test_ctx) <= 1e-6


def test_r_asymmetric():
    ctx = IterationContext(pair(dist(0, 0.3, 0.7), dist(0, 0.6, 0.1, 0.3)))
    assert functional_residual_r(ctx) <= 1e-6
    assert r_derivative_at_one(ctx) == pytest.approx(1.0, abs=1e-4)
    approx = r_limit(ctx, "ab")
    probes = np.array(sorted(approx.probe_values))
    seq = np.array([r_n_eval(ctx, "ab", n, probes) for n in range(1, 25)])
    assert np.all(np.diff(seq, axis=0) <= 1e-12 * np.abs(seq[1:]))


def test_r_guard_detects_bad_inverse(test_ctx, monkeypatch):
    real = limits.inverse_offset
    monkeypatch.setattr(limits, "inverse_offset", lambda d, u: 1.2 * real(d, u))
    with pytest.raises(MonotonicityViolation):
        r_limit(test_ctx, "ab", [1.3])


def test_mgf_examples(test_ctx):
    assert mgf_wn(test_ctx, 7, 0.0) == 1.0
    assert mgf_wn(test_ctx, 0, 0.7) == pytest.approx(math.exp(0.7), rel=1e-14)
    assert mgf_wn(test_ctx, 1, 0.7) == pytest.approx(pgf_eval(test_ctx.a, math.exp(0.7 / 1.5)), rel=1e-14)


def test_theta1_deterministic():
    two = OffspringDistribution.point(2)
    ctx = IterationContext(pair(two, two))
    res = theta1_bound(ctx, s0=1.5, N=20)
    np.testing.assert_allclose(res.sequence, 2 * math.log(1.5), rtol=1e-12)
    assert res.limit == pytest.approx(2 * math.log(1.5), rel=1e-10)
    assert 0 < res.theta1 <= 2 * math.log(1.5)


def test_theta1_and_mgf_bound(test_ctx):
    res = theta1_bound(test_ctx, s0=1.5)
    assert res.theta1 > 0
    assert res.theta1 <= res.sequence.min()
    cap = pgf_eval(test_ctx.a, 1.5)
    assert max(mgf_wn(test_ctx, n, res.theta1) for n in range(31)) <= cap


def test_zero_slope_product_rejected():
    # a = {p_2 = 1}, b = identity: rho = 0 and f'(a; 0) = 0, so no normalizer exists.
    ctx = IterationContext(pair(OffspringDistribution.point(2), OffspringDistribution.point(1)))
    with pytest.raises(PreconditionViolation, match="product"):
        q_limit(ctx)
