import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lmdp_lab.core import make_rng
from lmdp_lab.errors import ConfigurationError, InfeasibleError
from lmdp_lab.generate import generate_deterministic, generate_separated, verify_separation


def test_separated_audit():
    m = generate_separated(3, 7, 2, 10, 0.5, make_rng(0))
    m.validate()
    d = np.abs(m.T[:, None] - m.T[None]).sum(-1)
    off = d[~np.eye(3, dtype=bool)]
    assert off.min() >= 0.5 - 1e-12 and off.max() <= 1.0 + 1e-12
    assert verify_separation(m, 0.5).ok


def test_separated_shares_rewards_and_start_by_default():
    m = generate_separated(3, 4, 2, 5, 0.4, make_rng(1))
    assert np.array_equal(m.R[0], m.R[1]) and np.array_equal(m.nu[0], m.nu[2])
    u = generate_separated(3, 4, 2, 5, 0.4, make_rng(1), shared=False)
    assert not np.array_equal(u.nu[0], u.nu[1])


def test_delta_two_gives_disjoint_supports():
    m = generate_separated(2, 2, 2, 3, 2.0, make_rng(3))
    assert np.all((m.T[0] * m.T[1]).sum(-1) == 0)


def test_delta_two_infeasible_when_M_exceeds_S():
    with pytest.raises(InfeasibleError):
        generate_separated(3, 2, 1, 3, 2.0, make_rng(0))


def test_generator_argument_checks():
    with pytest.raises(ConfigurationError):
        generate_separated(2, 3, 2, 3, 2.5, make_rng(0))
    with pytest.raises(ConfigurationError):
        generate_separated(2, 1, 2, 3, 0.5, make_rng(0))


def test_single_context_is_vacuous():
    m = generate_separated(1, 3, 2, 4, 0.7, make_rng(0))
    assert verify_separation(m, 0.7).ok and verify_separation(m, 0.7).location is None


def test_identical_contexts_fail_verification():
    m = generate_separated(2, 3, 2, 4, 0.0, make_rng(0))
    rep = verify_separation(m, 0.1)
    assert not rep.ok and rep.min_distance == 0.0


def test_budget_exhaustion_reports():
    with pytest.raises(InfeasibleError, match="budget"):
        generate_separated(6, 2, 1, 3, 1.9, make_rng(0), budget=5)


def test_rewards_nonzero():
    m = generate_separated(2, 3, 2, 4, 0.5, make_rng(2), reward_sparsity=1.0)
    assert m.mean_reward.max() > 0


def test_deterministic_generator():
    m = generate_deterministic(3, 4, 2, 5, make_rng(0))
    m.validate()
    assert m.is_deterministic()


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32), M=st.integers(2, 4), delta=st.floats(0.05, 0.9))
def test_generator_soundness(seed, M, delta):
    m = generate_separated(M, 5, 2, 3, delta, make_rng(seed))
    m.validate()
    assert verify_separation(m, delta).ok
