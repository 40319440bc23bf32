import json
import math

import numpy as np
import pytest

from lmdp_lab.core import ActionSequencePolicy, exact_value, make_rng
from lmdp_lab.errors import ConfigurationError, ContractViolation
from lmdp_lab.generate import generate_deterministic, generate_separated
from lmdp_lab.hardness import (INIT, default_repetitions, deterministic_explore, episode_budget,
                               indistinguishability_check, lower_bound_instance,
                               observation_distribution, random_learner_discovery)
from lmdp_lab.planning import optimal_value


def test_two_context_instance_by_hand():
    inst = lower_bound_instance(2, 2)
    T = inst.model.T
    assert inst.sink == 2
    # step 0: context 0 needs action 0, the decoy context 1 needs anything else
    assert T[0, 0, 0, 1] == 1 and T[0, 0, 1, 2] == 1
    assert T[1, 0, 0, 2] == 1 and T[1, 0, 1, 1] == 1
    # last chain state and SINK both lead to SINK
    assert np.all(T[:, 1, :, 2] == 1) and np.all(T[:, 2, :, 2] == 1)
    assert inst.model.R[0, 1, 0, 1] == 1 and inst.model.mean_reward.sum() == 1


@pytest.mark.parametrize("M", [2, 3, 4])
def test_optimal_value_is_one_over_M(M):
    assert optimal_value(lower_bound_instance(M, 2).model) == pytest.approx(1 / M)


def test_only_a_star_pays():
    inst = lower_bound_instance(3, 2, a_star=[1, 0, 1])
    assert exact_value(inst.model, ActionSequencePolicy([1, 0, 1], 2)) == pytest.approx(1 / 3)
    assert exact_value(inst.model, ActionSequencePolicy([1, 1, 1], 2)) == 0.0


@pytest.mark.parametrize("eps", [None, 0.1])
def test_indistinguishable(eps):
    rep = indistinguishability_check(lower_bound_instance(3, 2, eps))
    assert rep.ok and rep.max_gap <= 1e-12 and rep.n_sequences == 7


def test_moved_transition_yields_witness():
    inst = lower_bound_instance(3, 2)
    T = np.array(inst.model.T)
    T[1, 0, 1] = 0.0
    T[1, 0, 1, inst.sink] = 1.0  # context 1 now drops to SINK on action 1 at step 0
    m = inst.model
    broken = type(inst)(type(m)(T, m.R, m.nu, m.H, m.w), inst.a_star, None)
    rep = indistinguishability_check(broken)
    assert not rep.ok and rep.witness is not None


def test_distinguishable_when_broken():
    inst = lower_bound_instance(2, 2)
    d0 = observation_distribution(inst.model, (0, 0))
    d1 = observation_distribution(inst.model, (1, 0))
    assert d0 != d1  # the rewarding sequence shows a reward


def test_argument_checks():
    with pytest.raises(ConfigurationError):
        lower_bound_instance(1, 2)
    with pytest.raises(ConfigurationError):
        lower_bound_instance(2, 2, a_star=[0, 5])
    with pytest.raises(ConfigurationError):
        lower_bound_instance(2, 2, epsilon=0.7)
    with pytest.raises(ConfigurationError):
        random_learner_discovery(lower_bound_instance(2, 2, 0.1), make_rng(0))


def test_discovery_time_positive():
    t = random_learner_discovery(lower_bound_instance(2, 2), make_rng(0))
    assert t >= 1


def test_repetitions_and_budget():
    assert default_repetitions(2) == math.ceil(20 * math.log(3))
    assert episode_budget(4, 4, 2, 2) == pytest.approx(200 * 4 * 64 * 2 * math.log(3))


def test_explore_finds_optimum_small():
    env = generate_deterministic(2, 4, 2, 4, make_rng(5))
    res = deterministic_explore(env, make_rng(1))
    assert exact_value(env, res.policy) == pytest.approx(optimal_value(env))
    assert res.episodes_used <= episode_budget(4, 4, 2, 2)


def test_explore_lower_bound_instance():
    inst = lower_bound_instance(2, 2, a_star=[1, 1])
    res = deterministic_explore(inst.model, make_rng(0))
    assert exact_value(inst.model, res.policy) == pytest.approx(0.5)


def test_explore_rejects_stochastic_env():
    env = generate_separated(2, 3, 2, 3, 0.5, make_rng(0))
    with pytest.raises(ContractViolation):
        deterministic_explore(env, make_rng(0))


def test_atlas_serializes(tmp_path):
    env = generate_deterministic(2, 3, 2, 3, make_rng(2))
    res = deterministic_explore(env, make_rng(3))
    res.atlas.save(tmp_path / "a.json")
    d = json.loads((tmp_path / "a.json").read_text())
    assert d["H"] == 3 and len(d["nodes"]) == len(res.atlas.nodes)


def test_init_marker_used_for_multiple_starts():
    env = generate_deterministic(3, 4, 2, 2, make_rng(1))
    assert len(set(np.argmax(env.nu, axis=1))) == 3
    res = deterministic_explore(env, make_rng(0))
    roots = [res.atlas.nodes[k] for k in res.atlas.roots.values()]
    assert all(any(c[0] == INIT for c in n.C) for n in roots)
