"""Spectral initialization followed by learning with inferred contexts.

Short episodes feed a PSR; predictions at the end of longer episodes are
clustered per state and linked across states into a full model, which
then seeds the learner. A poorly separated instance shows the pipeline
reporting failure instead.
"""
from lmdp_lab.cluster import recover_lmdp
from lmdp_lab.core import make_rng
from lmdp_lab.errors import StageError
from lmdp_lab.generate import generate_separated
from lmdp_lab.lucrl import ConfidenceConfig, model_error, run_lucrl
from lmdp_lab.psr import enumerate_sets, rank_diagnostics

env = generate_separated(2, 3, 2, 30, 1.5, make_rng(0))
print("rank check on the true model:", rank_diagnostics(env).to_dict()["passed"])
res = recover_lmdp(env, enumerate_sets(3, 2, 2), n0=200_000, n1=3000, H=30, rng=make_rng(50))
for d in res.diagnostics:
    print(f"  stage {d['stage']:<12} {d['status']}")
init = res.model
print(f"recovered model error: {model_error(init, env):.3f}")

cfg = ConfidenceConfig.default(2, 3, 2, 300, delta=1.5, scale=1e-6)
for label, start in (("from scratch", None), ("from recovered model", init)):
    log = run_lucrl(env, 300, make_rng(3), mode="inferred", init=start, cfg=cfg,
                    baseline_episodes=5000)
    print(f"inferred-context learning {label:<22} final model error "
          f"{log.column('model_error')[-1]:.3f}")

hard = generate_separated(3, 7, 2, 40, 0.1, make_rng(0))
try:
    recover_lmdp(hard, enumerate_sets(7, 2, 2), 100_000, 3000, 40, make_rng(1))
except StageError as e:
    print(f"\ndelta=0.1 instance: pipeline stopped at stage '{e.stage}' ({type(e.cause).__name__})")
