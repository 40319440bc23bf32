"""How separation between contexts decides whether the context can be inferred.

For each (delta, H) pair the true model is used as the estimate, and we
count how often the smoothed posterior puts at least 0.99 on the true
context after one episode.
"""
from lmdp_lab.core import make_rng, sample_episode
from lmdp_lab.generate import generate_separated
from lmdp_lab.lucrl import default_alpha_smooth, infer_belief
from lmdp_lab.planning import qmdp_policy

print(" delta   H   share of episodes with belief >= 0.99")
for delta in (0.05, 0.2, 0.5):
    for H in (20, 60):
        env = generate_separated(3, 6, 2, H, delta, make_rng(5))
        alpha = default_alpha_smooth(env.S, delta)
        pol = qmdp_policy(env)
        rng = make_rng(12)
        hits = 0
        for _ in range(300):
            traj = sample_episode(env, pol, rng)
            hits += infer_belief(env, traj, alpha)[traj.true_context] >= 0.99
        print(f" {delta:5.2f} {H:3d}   {hits / 300:.3f}")
print("\nWider separation and longer episodes both make the context identifiable.")
