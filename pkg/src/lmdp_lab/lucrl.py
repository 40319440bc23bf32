"""Optimistic learning in latent MDPs with hindsight or inferred contexts."""
from __future__ import annotations

import io
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import (LMDPModel, Trajectory, initial_belief, make_rng, monte_carlo_value,
                   sample_episode)
from .errors import ConfigurationError
from .io import atomic_write_text
from .planning import HiddenRewardModel, PBVIPolicy, QMDPPolicy


@dataclass
class CountTables:
    """Fractional visit counts per context."""

    trans: np.ndarray  # (M, S, A, S)  N_m(s'|s,a)
    rew: np.ndarray  # (M, S, A, 2)  N_m(r|s,a)
    init: np.ndarray  # (M, S)        N_m(s)
    episodes: np.ndarray  # (M,)      N(m)

    @classmethod
    def zeros(cls, M: int, S: int, A: int) -> "CountTables":
        return cls(np.zeros((M, S, A, S)), np.zeros((M, S, A, 2)), np.zeros((M, S)), np.zeros(M))

    @classmethod
    def from_model(cls, model: LMDPModel, pseudo_count: float) -> "CountTables":
        """Counts as if every (m, s, a) had been seen ``pseudo_count`` times."""
        c = float(pseudo_count)
        return cls(model.T * c, model.R * c, model.nu * c, np.full(model.M, c))

    @property
    def shape(self):
        return self.trans.shape[:3]

    def copy(self) -> "CountTables":
        return CountTables(self.trans.copy(), self.rew.copy(), self.init.copy(),
                           self.episodes.copy())

    def visits(self) -> np.ndarray:
        """``N_m(s, a) = max(1, sum_x N_m(x | s, a))``."""
        return np.maximum(1.0, self.trans.sum(axis=-1))


@dataclass(frozen=True)
class ConfidenceConfig:
    c_T: float
    c_R: float
    c_nu: float
    eta: float = 0.05
    alpha_smooth: float = 1e-4

    def __post_init__(self):
        if min(self.c_T, self.c_R, self.c_nu, self.eta, self.alpha_smooth) <= 0:
            raise ConfigurationError("confidence constants must be positive")

    @classmethod
    def default(cls, M: int, S: int, A: int, K: int, eta: float = 0.05,
                delta: Optional[float] = None, scale: float = 1.0) -> "ConfidenceConfig":
        """l1 concentration radii; ``scale`` multiplies all three constants."""
        K = max(int(K), 1)
        alpha = default_alpha_smooth(S, delta)
        return cls(
            c_T=scale * 2 * S * math.log(4 * M * S * A * K / eta),
            c_R=scale * 2 * math.log(4 * M * S * A * K / eta),
            c_nu=scale * 2 * S * math.log(4 * M * K / eta),
            eta=eta,
            alpha_smooth=alpha,
        )

    def check(self, S: int) -> None:
        if self.alpha_smooth * S >= 0.5:
            raise ConfigurationError(f"alpha_smooth*S = {self.alpha_smooth * S} must be < 0.5")


def default_alpha_smooth(S: int, delta: Optional[float] = None) -> float:
    """Solve ``a ln(1/a) = delta^2 / (200 S)`` on (0, 1/e]; 1e-4 when delta is unknown."""
    if delta is None or delta <= 0:
        return 1e-4
    target = min(delta**2 / (200 * S), 1 / math.e)
    lo, hi = 1e-300, 1 / math.e
    for _ in range(200):
        mid = math.sqrt(lo * hi) if hi / lo > 4 else 0.5 * (lo + hi)
        if mid * math.log(1 / mid) < target:
            lo = mid
        else:
            hi = mid
    return lo


def _normalize_rows(counts: np.ndarray) -> np.ndarray:
    tot = counts.sum(axis=-1, keepdims=True)
    uniform = np.full_like(counts, 1.0 / counts.shape[-1])
    with np.errstate(invalid="ignore", divide="ignore"):
        out = counts / tot
    return np.where(tot > 0, out, uniform)


def empirical_model(counts: CountTables, H: int) -> LMDPModel:
    """Count ratios; rows with no mass become uniform, others sum to exactly 1."""
    return LMDPModel(_normalize_rows(counts.trans), _normalize_rows(counts.rew),
                     _normalize_rows(counts.init), H)


@dataclass(frozen=True)
class Radii:
    T: np.ndarray  # (M, S, A)
    R: np.ndarray  # (M, S, A)
    nu: np.ndarray  # (M,)


def confidence_radii(counts: CountTables, cfg: ConfidenceConfig) -> Radii:
    n = counts.visits()
    n_ep = np.maximum(1.0, counts.episodes)
    return Radii(np.sqrt(cfg.c_T / n), np.sqrt(cfg.c_R / n), np.sqrt(cfg.c_nu / n_ep))


def within_radii(model: LMDPModel, estimate: LMDPModel, radii: Radii) -> bool:
    """True if ``model`` lies in the confidence set centred at ``estimate``."""
    dT = np.abs(model.T - estimate.T).sum(axis=-1)
    dR = np.abs(model.R - estimate.R).sum(axis=-1)
    dnu = np.abs(model.nu - estimate.nu).sum(axis=-1)
    return bool(np.all(dT <= radii.T + 1e-12) and np.all(dR <= radii.R + 1e-12)
                and np.all(dnu <= radii.nu + 1e-12))


def build_optimistic(counts: CountTables, cfg: ConfidenceConfig, H: int) -> HiddenRewardModel:
    n = counts.visits()
    hidden = H * np.minimum(1.0, np.sqrt(5 * (cfg.c_R + cfg.c_T) / n))
    init_hidden = np.minimum(1.0, np.sqrt(cfg.c_nu / np.maximum(1.0, counts.episodes)))
    return HiddenRewardModel(empirical_model(counts, H), hidden, init_hidden)


def hindsight_belief(m_star: int, M: int) -> np.ndarray:
    if not 0 <= m_star < M:
        raise IndexError(f"context {m_star} out of range for M={M}")
    b = np.zeros(M)
    b[m_star] = 1.0
    return b


def infer_belief(estimate: LMDPModel, traj: Trajectory, alpha_smooth: float) -> np.ndarray:
    """Smoothed-likelihood posterior over contexts, accumulated in log space.

    Each step contributes ``log(alpha + (1 - 2 alpha S) P_m(s', r | s, a))``;
    the last step has no next state and uses the reward probability alone.
    """
    S = estimate.S
    scale = 1.0 - 2.0 * alpha_smooth * S
    if scale <= 0:
        raise ConfigurationError("alpha_smooth too large: 1 - 2 alpha S must be positive")
    logp = np.zeros(estimate.M)
    H = traj.H
    for t, (s, a, r) in enumerate(traj.steps):
        if t + 1 < H:
            lik = estimate.T[:, s, a, traj.steps[t + 1][0]] * estimate.R[:, s, a, r]
        else:
            lik = estimate.R[:, s, a, r]
        logp += np.log(alpha_smooth + scale * lik)
    logp -= logp.max()
    p = np.exp(logp)
    return p / p.sum()


def update_counts(counts: CountTables, traj: Trajectory, belief: np.ndarray) -> CountTables:
    """Adds ``belief[m]`` to every count the episode touches, in place; returns counts."""
    b = np.asarray(belief, dtype=np.float64)
    H = traj.H
    for t, (s, a, r) in enumerate(traj.steps):
        counts.rew[:, s, a, r] += b
        if t + 1 < H:
            counts.trans[:, s, a, traj.steps[t + 1][0]] += b
    counts.init[:, traj.steps[0][0]] += b
    counts.episodes += b
    return counts


def pairwise_obs_distance(estimate: LMDPModel, truth: LMDPModel) -> np.ndarray:
    """``D[i, j] = sum_{s,a} || P_i^truth - P_j^estimate ||_1`` on joint observations."""
    P = truth.joint_obs
    Q = estimate.joint_obs
    return np.abs(P[:, None] - Q[None]).sum(axis=(2, 3, 4))


def model_error(estimate: LMDPModel, truth: LMDPModel) -> float:
    """Summed l1 error of joint observation probabilities, minimized over context matchings."""
    if (estimate.M, estimate.S, estimate.A) != (truth.M, truth.S, truth.A):
        raise ConfigurationError("models have different dimensions")
    D = pairwise_obs_distance(estimate, truth)
    rows, cols = linear_sum_assignment(D)
    return float(D[rows, cols].sum())


def model_error_bruteforce(estimate: LMDPModel, truth: LMDPModel) -> float:
    D = pairwise_obs_distance(estimate, truth)
    M = D.shape[0]
    return float(min(sum(D[i, p[i]] for i in range(M))
                     for p in itertools.permutations(range(M))))


# ---------------------------------------------------------------------------
# learning loop

CSV_HEADER = "episode,return,optimistic_value,model_error,cum_pseudo_regret"


@dataclass(frozen=True)
class EpisodeRecord:
    episode: int
    ret: int
    optimistic_value: float
    model_error: float
    cum_pseudo_regret: float


@dataclass
class EpisodeLog:
    records: list = field(default_factory=list)
    baseline_value: float = float("nan")
    baseline_stderr: float = float("nan")
    initial_model_error: float = float("nan")
    degenerate_beliefs: int = 0

    def __len__(self):
        return len(self.records)

    def append(self, rec: EpisodeRecord) -> None:
        if self.records and rec.episode <= self.records[-1].episode:
            raise ValueError("episode index must increase")
        self.records.append(rec)

    def column(self, name: str) -> np.ndarray:
        key = "ret" if name == "return" else name
        return np.array([getattr(r, key) for r in self.records], dtype=np.float64)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(CSV_HEADER + "\n")
        for r in self.records:
            buf.write(f"{r.episode},{r.ret},{r.optimistic_value!r},{r.model_error!r},"
                      f"{r.cum_pseudo_regret!r}\n")
        return buf.getvalue()

    def write_csv(self, path) -> None:
        atomic_write_text(path, self.to_csv())


def make_planner(x, planner: str = "qmdp", epsilon_d: float = 0.1):
    if planner == "qmdp":
        return QMDPPolicy(x)
    if planner == "pbvi":
        return PBVIPolicy(x, epsilon_d)
    raise ConfigurationError(f"unknown planner {planner!r}")


def planner_value(policy) -> float:
    """The planner's own value estimate on the model it was built from."""
    if isinstance(policy, PBVIPolicy):
        model = policy.model
        total = float(model.w @ policy.init_hidden)
        for s in range(model.S):
            ps = float(model.w @ model.nu[:, s])
            if ps > 0:
                b, _ = initial_belief(model, s)
                total += ps * float(policy.action_values(0, b, s).max())
        return total
    return policy.initial_value()


def planner_baseline(env: LMDPModel, planner: str, rng: np.random.Generator,
                     n_episodes: int = 20000, epsilon_d: float = 0.1):
    """Monte Carlo value of the planner run on the true model: (mean, stderr)."""
    pol = make_planner(env, planner, epsilon_d)
    return monte_carlo_value(env, pol, n_episodes, rng)


def run_lucrl(env: LMDPModel, K: int, rng: np.random.Generator, mode: str = "hindsight",
              planner: str = "qmdp", cfg: Optional[ConfidenceConfig] = None,
              init: Optional[LMDPModel] = None, init_count: float = 100.0,
              epsilon_d: float = 0.1, baseline: Optional[tuple] = None,
              baseline_episodes: int = 20000,
              callback: Optional[Callable] = None) -> EpisodeLog:
    """Run ``K`` episodes of optimistic planning, acting, belief estimation, counting.

    ``baseline`` is ``(value, stderr)`` of the planner on the true model; it is
    estimated by Monte Carlo with an independent stream when omitted.
    ``init`` seeds the counts with ``init_count`` pseudo-visits per pair.
    """
    if mode not in ("hindsight", "inferred"):
        raise ConfigurationError(f"unknown mode {mode!r}")
    M, S, A, H = env.M, env.S, env.A, env.H
    if cfg is None:
        cfg = ConfidenceConfig.default(M, S, A, K)
    cfg.check(S)
    log = EpisodeLog()
    if K <= 0:
        return log
    if baseline is None:
        base_rng = make_rng(rng.integers(2**63))
        baseline = planner_baseline(env, planner, base_rng, baseline_episodes, epsilon_d)
    log.baseline_value, log.baseline_stderr = baseline
    counts = CountTables.from_model(init, init_count) if init is not None \
        else CountTables.zeros(M, S, A)
    log.initial_model_error = model_error(empirical_model(counts, H), env)
    cum = 0.0
    for k in range(K):
        optimistic = build_optimistic(counts, cfg, H)
        policy = make_planner(optimistic, planner, epsilon_d)
        opt_value = planner_value(policy)
        traj = sample_episode(env, policy, rng)
        log.degenerate_beliefs += policy.degenerate_updates
        if mode == "hindsight":
            belief = hindsight_belief(traj.true_context, M)
        else:
            belief = infer_belief(optimistic.model, traj, cfg.alpha_smooth)
        update_counts(counts, traj, belief)
        err = model_error(empirical_model(counts, H), env)
        ret = traj.total_reward
        cum += log.baseline_value - ret
        log.append(EpisodeRecord(k + 1, ret, opt_value, err, cum))
        if callback is not None:
            callback(k, counts, traj, belief)
    return log
