import itertools

import numpy as np
import pytest

from lmdp_lab.core import (ActionSequencePolicy, Trajectory, UniformPolicy, make_rng,
                           sample_episode, trajectory_probability)
from lmdp_lab.errors import EnumerationTooLarge, RankDeficiencyError
from lmdp_lab.generate import generate_separated
from lmdp_lab.psr import (PSRParams, enumerate_sets, estimate_matrices, exact_matrices,
                          joint_matrix_error, psr_initial_state, psr_predict,
                          psr_sequence_probability, psr_state_trace, rank_diagnostics,
                          sample_short_episodes, spectral_learn)

from conftest import random_model


@pytest.fixture(scope="module")
def learned():
    m = random_model(make_rng(21), M=2, S=3, A=2, H=6)
    sets = enumerate_sets(3, 2, 2)
    return m, sets, spectral_learn(exact_matrices(m, sets), 2)


def test_set_sizes_and_codes():
    sets = enumerate_sets(3, 2, 2)
    assert sets.n_tests == 144 and sets.n_histories == 12 and sets.episode_length == 4
    tests = sets.tests()
    for i in (0, 17, 143):
        assert sets.test_index(tests[i]) == i
    hist = sets.history_prefixes()
    assert sets.history_index(hist[7]) == 7


def test_set_limit():
    with pytest.raises(EnumerationTooLarge):
        enumerate_sets(10, 5, 4)


def test_exact_matrix_consistency(learned):
    m, sets, _ = learned
    ex = exact_matrices(m, sets)
    assert ex.P_H.sum() == pytest.approx(1.0)
    # do-probabilities over all tests sum to A^l per history
    assert np.allclose(ex.P_TH.sum(axis=1), 4 * ex.P_H)
    assert np.allclose(ex.P_TOAH.sum(axis=(2, 3)), 4 * ex.P_H[:, None, :])
    for s in range(sets.S):
        assert np.linalg.matrix_rank(ex.P_TH[s], tol=1e-10) <= 2


def test_one_step_probability_matches_truth(learned):
    m, sets, p = learned
    traj = Trajectory(((1, 0, 1),), final_state=2)
    _, truth = trajectory_probability(m.with_horizon(1), ActionSequencePolicy([0], 2), traj,
                                      include_final=True)
    assert psr_sequence_probability(p, traj) == pytest.approx(truth, abs=1e-10)


def test_do_probabilities_sum_to_one(learned):
    _, _, p = learned
    total = 0.0
    for s1, r, s2 in itertools.product(range(3), range(2), range(3)):
        total += psr_sequence_probability(p, Trajectory(((s1, 1, r),), final_state=s2))
    assert total == pytest.approx(1.0, abs=1e-9)


def test_predictions_are_conditionals(learned):
    m, _, p = learned
    traj = sample_episode(m, UniformPolicy(2), make_rng(0))
    b, s = psr_state_trace(p, traj, 3)
    pred = psr_predict(p, b, s).reshape(2, 6)
    assert np.allclose(pred.sum(axis=1), 1.0, atol=1e-9)
    assert psr_initial_state(p, 0) @ p.binf[0] == pytest.approx(1.0)


def test_rank_deficiency_detected():
    m = random_model(make_rng(1), M=1, S=3, A=2, H=4)
    m2 = type(m)(np.concatenate([m.T, m.T]), np.concatenate([m.R, m.R]),
                 np.concatenate([m.nu, m.nu]), 4)
    with pytest.raises(RankDeficiencyError):
        spectral_learn(exact_matrices(m2, enumerate_sets(3, 2, 2)), 2)
    assert not rank_diagnostics(m2).passed


def test_rank_report_passes_on_generic_model(learned):
    m, _, _ = learned
    rep = rank_diagnostics(m)
    assert rep.passed and rep.sigma_L.shape == (3,)
    assert set(rep.to_dict()) >= {"sigma_L", "sigma_P", "p_pi"}


def test_estimates_converge(learned):
    m, sets, _ = learned
    ex = exact_matrices(m, sets)
    e1 = joint_matrix_error(estimate_matrices(sample_short_episodes(m, sets, 2000, make_rng(1)), sets), ex)
    e2 = joint_matrix_error(estimate_matrices(sample_short_episodes(m, sets, 200000, make_rng(1)), sets), ex)
    assert e2 < e1 / 3


def test_estimate_accepts_trajectory_list(learned):
    m, sets, _ = learned
    batch = sample_short_episodes(m, sets, 50, make_rng(2))
    a = estimate_matrices(batch, sets)
    b = estimate_matrices([batch.trajectory(i) for i in range(len(batch))], sets)
    assert np.array_equal(a.P_TH, b.P_TH)


def test_params_roundtrip(tmp_path, learned):
    _, _, p = learned
    p.save(tmp_path / "p.json")
    q = PSRParams.load(tmp_path / "p.json")
    assert np.array_equal(p.B, q.B) and np.array_equal(p.b1, q.b1)


def test_separated_instance_rank_sufficient():
    m = generate_separated(3, 7, 2, 10, 0.5, make_rng(0))
    assert rank_diagnostics(m).passed
