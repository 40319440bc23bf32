import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lmdp_lab.core import MemorylessPolicy, UniformPolicy, exact_value, make_rng
from lmdp_lab.errors import ConfigurationError
from lmdp_lab.planning import (HiddenRewardModel, PBVIPolicy, alpha_policy_eval,
                               backward_induction, deterministic_markov_policies,
                               optimal_value, qmdp_policy, simplex_grid, snap_to_grid,
                               state_action_occupancy, value_difference_bound)

from conftest import random_model

SWITCH_OPTIMAL = 1.0


def test_switch_optimal_by_hand(switch):
    assert optimal_value(switch) == pytest.approx(SWITCH_OPTIMAL)


def test_switch_qmdp_reaches_optimum(switch):
    pol = qmdp_policy(switch)
    assert pol.initial_value() == pytest.approx(1.0)
    assert exact_value(switch, pol) == pytest.approx(SWITCH_OPTIMAL)


def test_switch_pbvi_reaches_optimum(switch):
    assert exact_value(switch, PBVIPolicy(switch, 0.5)) == pytest.approx(SWITCH_OPTIMAL)


def test_backward_induction_single_context():
    # one context, two states, action 1 pays 1 and stays: V_t = H - t
    T = np.zeros((1, 2, 2, 2))
    T[0, :, :, 0] = 1.0
    p = np.zeros((1, 2, 2))
    p[0, :, 1] = 1.0
    from lmdp_lab.core import LMDPModel
    m = LMDPModel(T, np.stack([1 - p, p], -1), np.array([[1.0, 0.0]]), 4)
    q = backward_induction(m)
    assert np.allclose(q.V[0, :, 0], [4, 3, 2, 1, 0])


def test_simplex_grid_counts():
    g = simplex_grid(3, 4)
    assert g.shape == (15, 3) and np.all(g.sum(axis=1) == 4)
    assert len({tuple(r) for r in g}) == 15


def test_snap_to_grid_nearest():
    g = simplex_grid(3, 5) / 5
    rng = make_rng(3)
    for b in rng.dirichlet(np.ones(3), size=50):
        k = snap_to_grid(b, 5)[0] / 5
        best = np.min(np.linalg.norm(g - b, axis=1))
        assert np.linalg.norm(k - b) <= best + 1e-12


def test_pbvi_rejects_bad_epsilon(switch):
    with pytest.raises(ConfigurationError):
        PBVIPolicy(switch, 0.0)


def test_hidden_reward_shape_checked(switch):
    with pytest.raises(ConfigurationError):
        HiddenRewardModel(switch, np.zeros((2, 2)), np.zeros(2))
    with pytest.raises(ConfigurationError):
        HiddenRewardModel(switch, -np.ones((2, 2, 2)), np.zeros(2))


def test_hidden_reward_adds_to_value(switch):
    x = HiddenRewardModel(switch, np.full((2, 2, 2), 0.25), np.array([0.5, 0.5]))
    _, v = alpha_policy_eval(x, UniformPolicy(2))
    assert v == pytest.approx(0.5 + 2 * 0.25 + 0.5)


def test_policy_family_size():
    assert sum(1 for _ in deterministic_markov_policies(2, 2, 2)) == 2 ** 4


def test_occupancy_sums_to_one(rng):
    m = random_model(rng, M=2, H=3)
    occ = state_action_occupancy(m, UniformPolicy(2))
    assert np.allclose(occ.sum(axis=(2, 3)), 1.0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32), H=st.integers(1, 3))
def test_value_ordering(seed, H):
    rng = make_rng(seed)
    m = random_model(rng, M=2, S=2, A=2, H=H)
    opt = optimal_value(m)
    q = qmdp_policy(m)
    assert exact_value(m, q) <= opt + 1e-12
    assert q.initial_value() >= opt - 1e-12
    assert exact_value(m, PBVIPolicy(m, 0.2)) <= opt + 1e-12


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32))
def test_alpha_eval_matches_exact(seed):
    rng = make_rng(seed)
    m = random_model(rng, M=3, S=2, A=2, H=3)
    pol = MemorylessPolicy(rng.dirichlet(np.ones(2), size=(3, 2)))
    _, v = alpha_policy_eval(m, pol)
    assert v == pytest.approx(exact_value(m, pol), abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32))
def test_value_difference_bound_holds(seed):
    rng = make_rng(seed)
    m1 = random_model(rng, H=3)
    m2 = random_model(rng, H=3)
    m2 = type(m2)(m2.T, m2.R, m2.nu, 3, m1.w)
    pol = UniformPolicy(2)
    gap = abs(exact_value(m1, pol) - exact_value(m2, pol))
    assert value_difference_bound(m1, m2, pol) >= gap - 1e-12
