"""Optimistic learning when the context is revealed after each episode.

A three-context instance is generated, the learner runs 2000 episodes, and
windows of the episode log are printed next to the planner's value on the
true model.
"""
import numpy as np

from lmdp_lab.core import make_rng
from lmdp_lab.generate import generate_separated, verify_separation
from lmdp_lab.lucrl import ConfidenceConfig, run_lucrl

env = generate_separated(M=3, S=6, A=2, H=20, delta=0.5, rng=make_rng(0))
sep = verify_separation(env, 0.5)
print(f"instance: M={env.M} S={env.S} A={env.A} H={env.H}, "
      f"closest context pair differs by {sep.min_distance:.3f} in l1")

K = 2000
cfg = ConfidenceConfig.default(env.M, env.S, env.A, K, scale=1e-6)
log = run_lucrl(env, K, make_rng(100), mode="hindsight", cfg=cfg)
print(f"Q-MDP on the true model earns {log.baseline_value:.3f} +/- {log.baseline_stderr:.3f}")
print(f"model error before any data: {log.initial_model_error:.2f}\n")

ret, err = log.column("return"), log.column("model_error")
print(" episodes      mean return   model error at end")
for lo in range(0, K, 250):
    hi = lo + 250
    print(f" {lo + 1:5d}-{hi:<5d}   {ret[lo:hi].mean():10.3f}   {err[hi - 1]:12.3f}")
print(f"\ncumulative pseudo-regret after {K} episodes: "
      f"{log.column('cum_pseudo_regret')[-1]:.1f}")
print("trailing-250 return / baseline:",
      f"{np.mean(ret[-250:]) / log.baseline_value:.3f}")
