"""Random LMDP instances with controlled pairwise separation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import LMDPModel
from .errors import ConfigurationError, InfeasibleError

REJECTION_BUDGET = 10**4


def _pair_l1(P: np.ndarray) -> np.ndarray:
    return np.abs(P[:, None] - P[None]).sum(-1)


def _separated_rows(M: int, S: int, delta: float, rng: np.random.Generator,
                    budget: int) -> np.ndarray:
    """M next-state distributions whose pairwise l1 distances lie in [delta, 2 delta]."""
    base = rng.dirichlet(np.ones(S))
    if M == 1 or delta == 0:
        return np.tile(base, (M, 1))
    iu = np.triu_indices(M, 1)
    if delta >= 2 - 1e-12:
        if M > S:
            raise InfeasibleError(f"delta=2 needs disjoint supports but M={M} > S={S}")
        groups = np.array_split(rng.permutation(S), M)
        out = np.zeros((M, S))
        for m, g in enumerate(groups):
            out[m, g] = rng.dirichlet(np.ones(len(g)))
        return out
    worst = "no attempt"
    for attempt in range(budget):
        conc = 1.0 if attempt % 2 == 0 else 0.1
        q = rng.dirichlet(np.full(S, conc), size=M)
        d = _pair_l1(q)[iu]
        lo = delta / d.min() if d.min() > 0 else np.inf
        hi = min(1.0, 2 * delta / d.max())
        if lo <= hi:
            lam = rng.uniform(lo, hi)
            p = (1 - lam) * base + lam * q
            dist = _pair_l1(p)[iu]
            if dist.min() >= delta - 1e-12 and dist.max() <= 2 * delta + 1e-12:
                return p
        worst = f"min l1 {d.min():.3f}, max l1 {d.max():.3f} of perturbations"
    raise InfeasibleError(f"rejection budget {budget} exhausted; last draw: {worst}")


def generate_separated(M: int, S: int, A: int, H: int, delta: float,
                       rng: np.random.Generator, reward_sparsity: float = 0.9,
                       shared: bool = True, budget: int = REJECTION_BUDGET) -> LMDPModel:
    """Uniform-weight LMDP with ``delta <= ||T_i - T_j||_1 <= 2 delta`` at every (s, a).

    Rewards are Bernoulli; a ``reward_sparsity`` fraction of pairs pays nothing,
    and at least one pair pays something. ``shared=False`` draws rewards and
    initial distributions per context.
    """
    if not 0 <= delta <= 2:
        raise ConfigurationError("delta must lie in [0, 2]")
    if delta > 0 and S < 2 and M > 1:
        raise ConfigurationError("separation needs S >= 2")
    if not 0 <= reward_sparsity <= 1:
        raise ConfigurationError("reward_sparsity must lie in [0, 1]")
    T = np.empty((M, S, A, S))
    for s in range(S):
        for a in range(A):
            T[:, s, a] = _separated_rows(M, S, delta, rng, budget)

    def rewards():
        p = rng.uniform(0, 1, size=(S, A)) * (rng.random((S, A)) >= reward_sparsity)
        if not p.any():
            p[rng.integers(S), rng.integers(A)] = rng.uniform(0.5, 1.0)
        return p

    if shared:
        p1 = np.broadcast_to(rewards(), (M, S, A))
        nu = np.broadcast_to(rng.dirichlet(np.ones(S)), (M, S))
    else:
        p1 = np.stack([rewards() for _ in range(M)])
        nu = rng.dirichlet(np.ones(S), size=M)
    R = np.stack([1 - p1, p1], axis=-1)
    return LMDPModel(T, R, np.array(nu), H)


@dataclass(frozen=True)
class SeparationReport:
    ok: bool
    min_distance: float
    location: Optional[tuple]  # (m1, m2, s, a) of the closest pair


def verify_separation(model: LMDPModel, delta: float) -> SeparationReport:
    """Checks every context pair differs by at least ``delta`` on joint observations."""
    if model.M < 2:
        return SeparationReport(True, float("inf"), None)
    P = model.joint_obs
    D = np.abs(P[:, None] - P[None]).sum(-1)  # (M, M, S, A)
    iu = np.triu_indices(model.M, 1)
    pairs = D[iu]  # (npairs, S, A)
    k, s, a = np.unravel_index(int(np.argmin(pairs)), pairs.shape)
    dmin = float(pairs[k, s, a])
    return SeparationReport(dmin >= delta - 1e-12, dmin,
                            (int(iu[0][k]), int(iu[1][k]), int(s), int(a)))


def generate_deterministic(M: int, S: int, A: int, H: int, rng: np.random.Generator,
                           reward_density: float = 0.5) -> LMDPModel:
    """Mixture of M deterministic MDPs: indicator transitions, 0/1 rewards, one start state each."""
    if not 0 <= reward_density <= 1:
        raise ConfigurationError("reward_density must lie in [0, 1]")
    T = np.zeros((M, S, A, S))
    np.put_along_axis(T, rng.integers(0, S, (M, S, A))[..., None], 1.0, axis=-1)
    r = (rng.random((M, S, A)) < reward_density).astype(np.float64)
    nu = np.zeros((M, S))
    nu[np.arange(M), rng.integers(0, S, M)] = 1.0
    return LMDPModel(T, np.stack([1 - r, r], axis=-1), nu, H)
