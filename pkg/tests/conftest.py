import numpy as np
import pytest
from hypothesis import settings

from gwc.iterate import IterationContext
from gwc.mechanism import MechanismSchedule, OffspringDistribution

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def dist(*probs):
    return OffspringDistribution(np.array(probs, dtype=float))


def pair(a, b):
    return MechanismSchedule.pair(a, b)


@pytest.fixture
def test_pair():
    """a = b = {p_1 = 0.5, p_2 = 0.5}."""
    d = dist(0, 0.5, 0.5)
    return pair(d, d)


@pytest.fixture
def test_ctx(test_pair):
    return IterationContext(test_pair)


@pytest.fixture
def identity_ctx():
    d = OffspringDistribution.point(1)
    return IterationContext(pair(d, d))


@pytest.fixture
def skew_ctx():
    """a = {p_0 = 0.25, p_2 = 0.75}, b = {p_3 = 1}: supercritical with a_0 > 0."""
    return IterationContext(pair(dist(0.25, 0, 0.75), OffspringDistribution.point(3)))
