import numpy as np
import pytest

from lmdp_lab.core import LMDPModel, make_rng

# Acceptance lines collected by tests/test_acceptance.py and echoed at the end of the run.
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES, key=lambda k: (int("".join(c for c in k if c.isdigit())), k)):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


def random_model(rng, M=2, S=2, A=2, H=2, det_init=False):
    """Dirichlet transitions, uniform Bernoulli reward rates, random mixing weights."""
    T = rng.dirichlet(np.ones(S), size=(M, S, A))
    p = rng.uniform(0, 1, size=(M, S, A))
    nu = np.eye(S)[rng.integers(0, S, M)] if det_init else rng.dirichlet(np.ones(S), size=M)
    w = rng.dirichlet(np.ones(M))
    return LMDPModel(T, np.stack([1 - p, p], axis=-1), nu, H, w)


def switch_model(H=2):
    """Two contexts over two states; action a moves to state a in both.

    Context 0 pays 1 at (s=1, a=0); context 1 pays 1 at (s=0, a=1). Both start
    in state 0 with equal weight. Hand values for H=2: uniform policy 0.5,
    optimal 1.0.
    """
    T = np.zeros((2, 2, 2, 2))
    T[:, :, 0, 0] = 1.0
    T[:, :, 1, 1] = 1.0
    p = np.zeros((2, 2, 2))
    p[0, 1, 0] = 1.0
    p[1, 0, 1] = 1.0
    nu = np.array([[1.0, 0.0], [1.0, 0.0]])
    return LMDPModel(T, np.stack([1 - p, p], axis=-1), nu, H)


@pytest.fixture
def rng():
    return make_rng(12345)


@pytest.fixture
def switch():
    return switch_model()
