import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lmdp_lab.core import Trajectory, make_rng
from lmdp_lab.errors import ConfigurationError
from lmdp_lab.generate import generate_separated
from lmdp_lab.lucrl import (CSV_HEADER, ConfidenceConfig, CountTables, EpisodeLog,
                            EpisodeRecord, build_optimistic, confidence_radii,
                            default_alpha_smooth, empirical_model, hindsight_belief,
                            infer_belief, model_error, model_error_bruteforce, run_lucrl,
                            update_counts, within_radii)

from conftest import random_model, switch_model


def test_default_constants_formula():
    c = ConfidenceConfig.default(2, 3, 2, 100, eta=0.05)
    L = math.log(4 * 2 * 3 * 2 * 100 / 0.05)
    assert c.c_T == pytest.approx(2 * 3 * L)
    assert c.c_R == pytest.approx(2 * L)
    assert c.c_nu == pytest.approx(2 * 3 * math.log(4 * 2 * 100 / 0.05))
    s = ConfidenceConfig.default(2, 3, 2, 100, scale=1e-3)
    assert s.c_T == pytest.approx(1e-3 * c.c_T)


def test_alpha_smooth_solves_equation():
    a = default_alpha_smooth(5, 0.5)
    assert a * math.log(1 / a) == pytest.approx(0.25 / 1000, rel=1e-9)
    assert default_alpha_smooth(5) == 1e-4


def test_alpha_check():
    with pytest.raises(ConfigurationError):
        ConfidenceConfig(1, 1, 1, alpha_smooth=0.2).check(3)
    with pytest.raises(ConfigurationError):
        ConfidenceConfig(0, 1, 1)


def test_hidden_reward_clips_at_H():
    counts = CountTables.zeros(1, 2, 1)
    counts.trans[0, 0, 0, 0] = 1.0  # N=1
    counts.trans[0, 1, 0, 0] = 400.0  # N=400
    cfg = ConfidenceConfig(c_T=0.1, c_R=0.1, c_nu=4.0)
    x = build_optimistic(counts, cfg, H=5)
    # sqrt(5 * 0.2 / 1) = 1 -> clipped value H
    assert x.hidden[0, 0, 0] == pytest.approx(5.0)
    assert x.hidden[0, 1, 0] == pytest.approx(5 * math.sqrt(1.0 / 400))
    # no episodes: N(m) floors at 1 and the bonus clips at 1
    assert x.init_hidden[0] == pytest.approx(1.0)
    counts.episodes[0] = 16.0
    assert build_optimistic(counts, cfg, 5).init_hidden[0] == pytest.approx(0.5)


def test_update_counts_by_hand():
    c = CountTables.zeros(2, 2, 2)
    traj = Trajectory(((0, 1, 1), (1, 0, 0)), final_state=0)
    update_counts(c, traj, np.array([0.25, 0.75]))
    assert c.trans[:, 0, 1, 1].tolist() == [0.25, 0.75]
    assert c.trans.sum() == pytest.approx(1.0)  # last step adds no transition
    assert c.rew[:, 0, 1, 1].tolist() == [0.25, 0.75]
    assert c.rew[:, 1, 0, 0].tolist() == [0.25, 0.75]
    assert c.init[:, 0].tolist() == [0.25, 0.75]
    assert c.episodes.tolist() == [0.25, 0.75]


def test_empirical_model_uniform_when_unseen():
    m = empirical_model(CountTables.zeros(2, 3, 2), 4)
    assert np.allclose(m.T, 1 / 3) and np.allclose(m.R, 0.5) and np.allclose(m.nu, 1 / 3)


def test_infer_belief_by_hand(switch):
    a = 1e-4
    traj = Trajectory(((0, 1, 1), (1, 0, 0)), final_state=0)
    b = infer_belief(switch, traj, a)
    keep = 1 - 2 * a * 2
    p0 = a * a
    p1 = (a + keep) ** 2
    assert b[0] == pytest.approx(p0 / (p0 + p1), rel=1e-9)


def test_hindsight_belief():
    assert hindsight_belief(2, 3).tolist() == [0, 0, 1]
    with pytest.raises(IndexError):
        hindsight_belief(3, 3)


def test_within_radii(rng):
    m = random_model(rng, M=2, S=3, A=2, H=3)
    c = CountTables.from_model(m, 100.0)
    cfg = ConfidenceConfig(1.0, 1.0, 1.0)
    rad = confidence_radii(c, cfg)
    assert within_radii(m, empirical_model(c, 3), rad)
    far = random_model(make_rng(99), M=2, S=3, A=2, H=3)
    assert not within_radii(far, empirical_model(c, 3), confidence_radii(c, ConfidenceConfig(1e-6, 1e-6, 1e-6)))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32), M=st.integers(1, 4))
def test_model_error_matches_bruteforce(seed, M):
    rng = make_rng(seed)
    a = random_model(rng, M=M, S=3, A=2)
    b = random_model(rng, M=M, S=3, A=2)
    assert model_error(a, b) == pytest.approx(model_error_bruteforce(a, b), abs=1e-12)
    perm = rng.permutation(M)
    assert model_error(a.relabel(perm), a) == pytest.approx(0.0, abs=1e-12)


def test_episode_log_order_and_csv():
    log = EpisodeLog()
    log.append(EpisodeRecord(1, 2, 3.5, 0.1, 0.25))
    with pytest.raises(ValueError):
        log.append(EpisodeRecord(1, 0, 0.0, 0.0, 0.0))
    assert log.to_csv() == CSV_HEADER + "\n1,2,3.5,0.1,0.25\n"


def test_run_lucrl_small_hindsight():
    env = switch_model(H=2)
    log = run_lucrl(env, 60, make_rng(4), baseline_episodes=500,
                    cfg=ConfidenceConfig.default(2, 2, 2, 60, scale=1e-3))
    assert len(log) == 60
    assert log.column("model_error")[-1] < log.initial_model_error
    assert log.baseline_value == pytest.approx(1.0)


def test_run_lucrl_deterministic_csv():
    env = random_model(make_rng(2), M=2, S=3, A=2, H=4)
    a = run_lucrl(env, 25, make_rng(5), mode="inferred", baseline_episodes=200).to_csv()
    b = run_lucrl(env, 25, make_rng(5), mode="inferred", baseline_episodes=200).to_csv()
    assert a == b


def test_run_lucrl_rejects_mode(switch):
    with pytest.raises(ConfigurationError):
        run_lucrl(switch, 1, make_rng(0), mode="oracle")


def test_run_lucrl_with_truth_init_starts_accurate():
    env = random_model(make_rng(3), M=2, S=3, A=2, H=4)
    log = run_lucrl(env, 5, make_rng(1), mode="inferred", init=env, planner="pbvi",
                    epsilon_d=0.25, baseline_episodes=200)
    assert log.initial_model_error == pytest.approx(0.0, abs=1e-12)


@pytest.mark.slow
def test_regret_grows_sublinearly():
    slopes = []
    for seed in range(3):
        env = generate_separated(2, 3, 2, 4, 0.5, make_rng(seed))
        cfg = ConfidenceConfig.default(2, 3, 2, 3000, scale=1e-4)
        c = run_lucrl(env, 3000, make_rng(seed), cfg=cfg).column("cum_pseudo_regret")
        k = np.arange(1, len(c) + 1)
        last = k >= 300  # final decade of episodes
        slopes.append(np.polyfit(np.log(k[last]), np.log(np.maximum(c[last], 1e-9)), 1)[0])
    assert np.median(slopes) <= 0.85, slopes


@pytest.mark.slow
def test_inferred_matches_hindsight_under_separation():
    env = generate_separated(3, 6, 2, 60, 0.5, make_rng(0))
    cfg = ConfidenceConfig.default(3, 6, 2, 150, delta=0.5, scale=1e-6)
    kw = dict(init=env, cfg=cfg, baseline=(0.0, 0.0))
    hs = run_lucrl(env, 150, make_rng(1), mode="hindsight", **kw).column("model_error")[-1]
    inf = run_lucrl(env, 150, make_rng(1), mode="inferred", **kw).column("model_error")[-1]
    assert 0.5 <= inf / hs <= 2.0
