import numpy as np
import pytest

from ertacache import GaussianMixtureField, ScriptedField

# (criterion number, line) pairs appended by tests/test_acceptance.py, printed once at the end.
ACCEPTANCE_LINES: list[tuple[int, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)


def acceptance_field(delay: float = 0.0) -> GaussianMixtureField:
    """The fixed mixture used by every mixture-based acceptance criterion."""
    return GaussianMixtureField.random(64, 3, seed=0, spread=0.5, scale_range=(0.3, 0.6), delay=delay)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def scripted4():
    # rows are indexed by step: r_3=[1], r_2=[2], r_1=[2], r_0=[4]
    return ScriptedField([[4.0], [2.0], [2.0], [1.0]])


@pytest.fixture(scope="session")
def mixture16():
    return GaussianMixtureField.random(16, 3, seed=0)
