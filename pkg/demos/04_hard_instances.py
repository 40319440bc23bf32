"""Hard instances and exploration of deterministic mixtures.

Every wrong action sequence on the chain instance produces the same
observations, so a learner gets no signal until it guesses the rewarding
sequence. Deterministic mixtures, in contrast, can be mapped by
systematically replaying action paths.
"""
import numpy as np

from lmdp_lab.core import exact_value, make_rng
from lmdp_lab.generate import generate_deterministic
from lmdp_lab.hardness import (deterministic_explore, episode_budget,
                               indistinguishability_check, lower_bound_instance,
                               random_learner_discovery)
from lmdp_lab.planning import optimal_value

for M in (2, 3, 4):
    inst = lower_bound_instance(M, 2)
    rep = indistinguishability_check(inst)
    times = [random_learner_discovery(inst, make_rng(s)) for s in range(50)]
    print(f"M={M}: {rep.n_sequences} wrong sequences identical (gap {rep.max_gap:.0e}), "
          f"optimal value {optimal_value(inst.model):.3f}, "
          f"random learner needs a median of {np.median(times):.0f} episodes (A^M = {2**M})")

print()
for seed in range(5):
    env = generate_deterministic(2, 4, 2, 4, make_rng(seed))
    res = deterministic_explore(env, make_rng(100 + seed))
    print(f"deterministic mixture {seed}: atlas value {exact_value(env, res.policy):.2f}, "
          f"optimum {optimal_value(env):.2f}, episodes {res.episodes_used} "
          f"(budget {episode_budget(4, 4, 2, 2):.0f})")
