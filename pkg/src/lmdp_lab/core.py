"""Latent MDP model, simulation, belief recursion and brute-force oracles.

Indexing conventions used throughout the package:

* ``T[m, s, a, s']`` transition probabilities, ``R[m, s, a, r]`` reward
  probabilities for ``r in {0, 1}``, ``nu[m, s]`` initial distributions.
* An observation ``o = (s', r)`` is flattened to ``o = r * S + s'``.
* Time steps are 0-based inside the code (``t = 0 .. H-1``).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, EnumerationTooLarge

ENUMERATION_LIMIT = 10**7
ATOL = 1e-9


def _frozen(x) -> np.ndarray:
    arr = np.array(x, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class LMDPModel:
    """A mixture of ``M`` tabular MDPs sharing states, actions and horizon."""

    T: np.ndarray
    R: np.ndarray
    nu: np.ndarray
    H: int
    w: Optional[np.ndarray] = None

    def __post_init__(self):
        T = _frozen(self.T)
        if T.ndim != 4 or T.shape[1] != T.shape[3]:
            raise ConfigurationError(f"T must have shape (M,S,A,S), got {T.shape}")
        M, S, A, _ = T.shape
        R = _frozen(self.R)
        nu = _frozen(self.nu)
        if R.shape != (M, S, A, 2):
            raise ConfigurationError(f"R must have shape {(M, S, A, 2)}, got {R.shape}")
        if nu.shape != (M, S):
            raise ConfigurationError(f"nu must have shape {(M, S)}, got {nu.shape}")
        w = np.full(M, 1.0 / M) if self.w is None else self.w
        w = _frozen(w)
        if w.shape != (M,):
            raise ConfigurationError(f"w must have shape {(M,)}, got {w.shape}")
        if int(self.H) < 1 or min(M, S, A) < 1:
            raise ConfigurationError("M, S, A, H must all be >= 1")
        object.__setattr__(self, "T", T)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "nu", nu)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "H", int(self.H))

    @property
    def M(self) -> int:
        return self.T.shape[0]

    @property
    def S(self) -> int:
        return self.T.shape[1]

    @property
    def A(self) -> int:
        return self.T.shape[2]

    @property
    def mean_reward(self) -> np.ndarray:
        """Expected immediate reward, shape (M, S, A)."""
        return self.R[..., 1]

    @property
    def joint_obs(self) -> np.ndarray:
        """``P_m(s', r | s, a)`` flattened to shape (M, S, A, 2S)."""
        P = self.R[:, :, :, :, None] * self.T[:, :, :, None, :]
        return P.reshape(self.M, self.S, self.A, 2 * self.S)

    def validate(self, atol: float = ATOL) -> None:
        """Raise :class:`ConfigurationError` if any stochasticity invariant fails."""
        for name, arr in (("T", self.T), ("R", self.R), ("nu", self.nu), ("w", self.w)):
            if np.any(arr < -atol) or np.any(arr > 1 + atol):
                raise ConfigurationError(f"{name} has entries outside [0, 1]")
            sums = arr.sum(axis=-1)
            if np.any(np.abs(sums - 1.0) > atol):
                raise ConfigurationError(f"{name} rows do not sum to 1 (max dev {np.abs(sums - 1).max():.2e})")

    def with_horizon(self, H: int) -> "LMDPModel":
        return LMDPModel(self.T, self.R, self.nu, H, self.w)

    def relabel(self, perm: Sequence[int]) -> "LMDPModel":
        """Context ``i`` of the result is context ``perm[i]`` of this model."""
        p = np.asarray(perm)
        return LMDPModel(self.T[p], self.R[p], self.nu[p], self.H, self.w[p])

    def is_deterministic(self, rewards: bool = True) -> bool:
        arrs = [self.T, self.nu] + ([self.R] if rewards else [])
        return all(np.all((a == 0.0) | (a == 1.0)) for a in arrs)

    # serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "M": self.M, "S": self.S, "A": self.A, "H": self.H,
            "w": self.w.tolist(), "nu": self.nu.tolist(),
            "T": self.T.tolist(), "R": self.R.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LMDPModel":
        try:
            model = cls(T=d["T"], R=d["R"], nu=d["nu"], H=d["H"], w=d.get("w"))
        except KeyError as exc:
            raise ConfigurationError(f"model JSON missing field {exc}") from None
        for key in ("M", "S", "A"):
            if key in d and int(d[key]) != getattr(model, key):
                raise ConfigurationError(f"model JSON field {key}={d[key]} disagrees with arrays")
        return model

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "LMDPModel":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        from .io import atomic_write_text
        atomic_write_text(path, self.to_json())

    @classmethod
    def load(cls, path) -> "LMDPModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


@dataclass(frozen=True)
class Trajectory:
    """One episode ``(s_t, a_t, r_t)`` for ``t = 1..H``.

    ``final_state`` is ``s_{H+1}``; the simulator always draws it because PSR
    estimation needs the last observation, but probabilities of the episode
    never include that transition.
    """

    steps: tuple
    final_state: Optional[int] = None
    true_context: Optional[int] = None

    @property
    def H(self) -> int:
        return len(self.steps)

    @property
    def states(self) -> list:
        return [s for s, _, _ in self.steps]

    @property
    def actions(self) -> list:
        return [a for _, a, _ in self.steps]

    @property
    def rewards(self) -> list:
        return [r for _, _, r in self.steps]

    @property
    def total_reward(self) -> int:
        return sum(self.rewards)

    def observations(self):
        """Yield ``(s, a, r, s_next)``; ``s_next`` is None past the end when unknown."""
        for t, (s, a, r) in enumerate(self.steps):
            if t + 1 < len(self.steps):
                yield s, a, r, self.steps[t + 1][0]
            else:
                yield s, a, r, self.final_state

    def to_dict(self) -> dict:
        return {"steps": [list(x) for x in self.steps], "final_state": self.final_state,
                "true_context": self.true_context}

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        return cls(tuple(tuple(int(v) for v in x) for x in d["steps"]),
                   d.get("final_state"), d.get("true_context"))


def write_trajectories(path, trajectories) -> None:
    """JSON-lines, one trajectory per line."""
    from .io import atomic_write_text
    atomic_write_text(path, "".join(json.dumps(t.to_dict()) + "\n" for t in trajectories))


def read_trajectories(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [Trajectory.from_dict(json.loads(line)) for line in fh if line.strip()]


def check_trajectory(model: LMDPModel, traj: Trajectory) -> None:
    if traj.H != model.H:
        raise ConfigurationError(f"trajectory length {traj.H} != horizon {model.H}")
    for s, a, r in traj.steps:
        if not (0 <= s < model.S and 0 <= a < model.A and r in (0, 1)):
            raise ConfigurationError(f"step {(s, a, r)} out of bounds")


# ---------------------------------------------------------------------------
# policies


class Policy:
    """Maps ``(t, memory, current state)`` to an action distribution.

    ``memory`` summarizes the observed history. It is created by ``start``
    and advanced by ``advance``; the default memory is the full history
    tuple ``((s, a, r), ...)``. Memories must never be mutated in place so
    that a policy can be replayed over arbitrary histories.
    """

    kind = "history"

    def __init__(self, n_actions: int):
        self.n_actions = int(n_actions)

    def start(self, s1: int):
        return ()

    def advance(self, memory, s: int, a: int, r: int, s_next: int):
        return memory + ((s, a, r),)

    def probs(self, t: int, memory, s: int) -> np.ndarray:
        raise NotImplementedError

    def markov_table(self, H: int, S: int) -> Optional[np.ndarray]:
        """(H, S, A) table if the policy ignores memory, else None."""
        return None


def _one_hot(a: int, A: int) -> np.ndarray:
    p = np.zeros(A)
    p[a] = 1.0
    return p


class MemorylessPolicy(Policy):
    """State -> action distribution, optionally time dependent.

    ``table`` is ``(S, A)`` or ``(H, S, A)``; an integer array of shape ``(S,)``
    or ``(H, S)`` is read as deterministic actions.
    """

    kind = "memoryless"

    def __init__(self, table, n_actions: Optional[int] = None):
        table = np.asarray(table)
        if np.issubdtype(table.dtype, np.integer):
            if n_actions is None:
                raise ConfigurationError("n_actions needed for integer action tables")
            table = np.eye(n_actions)[table]
        super().__init__(table.shape[-1])
        self.table = table.astype(np.float64)

    def start(self, s1):
        return None

    def advance(self, memory, s, a, r, s_next):
        return None

    def probs(self, t, memory, s):
        return self.table[t, s] if self.table.ndim == 3 else self.table[s]

    def markov_table(self, H, S):
        if self.table.ndim == 3:
            return self.table[:H]
        return np.broadcast_to(self.table, (H,) + self.table.shape)


class UniformPolicy(MemorylessPolicy):
    kind = "uniform"

    def __init__(self, n_actions: int):
        super().__init__(np.full((1, n_actions), 1.0 / n_actions))

    def probs(self, t, memory, s):
        return self.table[0]

    def markov_table(self, H, S):
        return np.broadcast_to(self.table[0], (H, S, self.n_actions))


class ActionSequencePolicy(Policy):
    """Plays a fixed open-loop action sequence."""

    kind = "sequence"

    def __init__(self, actions: Sequence[int], n_actions: int):
        super().__init__(n_actions)
        self.actions = tuple(int(a) for a in actions)

    def start(self, s1):
        return None

    def advance(self, memory, s, a, r, s_next):
        return None

    def probs(self, t, memory, s):
        return _one_hot(self.actions[t], self.n_actions)

    def markov_table(self, H, S):
        tab = np.zeros((H, S, self.n_actions))
        for t in range(H):
            tab[t, :, self.actions[t]] = 1.0
        return tab


class FunctionPolicy(Policy):
    """History-dependent policy from a callable ``fn(t, history, s) -> probs``."""

    def __init__(self, fn, n_actions: int):
        super().__init__(n_actions)
        self.fn = fn

    def probs(self, t, memory, s):
        return np.asarray(self.fn(t, memory, s), dtype=np.float64)


def _draw(p: np.ndarray, u: float) -> int:
    c = np.cumsum(p)
    i = int(np.searchsorted(c, u * c[-1], side="right"))
    return min(i, len(p) - 1)


def make_rng(seed) -> np.random.Generator:
    """Project-wide random source: numpy PCG64 seeded with a 64-bit integer."""
    return np.random.Generator(np.random.PCG64(seed))


# ---------------------------------------------------------------------------
# simulation


def sample_episode(model: LMDPModel, policy: Policy, rng: np.random.Generator,
                   context: Optional[int] = None) -> Trajectory:
    if policy.n_actions != model.A:
        raise ConfigurationError(f"policy has {policy.n_actions} actions, model has {model.A}")
    m = _draw(model.w, rng.random()) if context is None else int(context)
    s = _draw(model.nu[m], rng.random())
    memory = policy.start(s)
    steps = []
    for t in range(model.H):
        a = _draw(policy.probs(t, memory, s), rng.random())
        r = int(rng.random() < model.R[m, s, a, 1])
        s_next = _draw(model.T[m, s, a], rng.random())
        steps.append((s, a, r))
        if t + 1 < model.H:
            memory = policy.advance(memory, s, a, r, s_next)
        s = s_next
    return Trajectory(tuple(steps), final_state=s, true_context=m)


def _categorical_rows(cum: np.ndarray, u: np.ndarray) -> np.ndarray:
    # cum: (n, K) cumulative rows, u: (n,)
    idx = (u[:, None] * cum[:, -1:] >= cum).sum(axis=1)
    return np.minimum(idx, cum.shape[1] - 1)


@dataclass
class EpisodeBatch:
    """Vectorized episodes: ``states`` has H+1 columns (last is s_{H+1})."""

    contexts: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray

    def __len__(self):
        return len(self.contexts)

    def returns(self) -> np.ndarray:
        return self.rewards.sum(axis=1)

    def trajectory(self, i: int) -> Trajectory:
        H = self.actions.shape[1]
        steps = tuple((int(self.states[i, t]), int(self.actions[i, t]), int(self.rewards[i, t]))
                      for t in range(H))
        return Trajectory(steps, int(self.states[i, H]), int(self.contexts[i]))


def sample_batch(model: LMDPModel, n: int, rng: np.random.Generator, H: Optional[int] = None,
                 table: Optional[np.ndarray] = None) -> EpisodeBatch:
    """Simulate ``n`` episodes at once under a Markov (H, S, A) action table.

    ``table=None`` means uniformly random actions.
    """
    H = model.H if H is None else int(H)
    n = int(n)
    m = _categorical_rows(np.broadcast_to(np.cumsum(model.w), (n, model.M)), rng.random(n))
    states = np.empty((n, H + 1), dtype=np.int64)
    actions = np.empty((n, H), dtype=np.int64)
    rewards = np.empty((n, H), dtype=np.int64)
    states[:, 0] = _categorical_rows(np.cumsum(model.nu, axis=1)[m], rng.random(n))
    cumT = np.cumsum(model.T, axis=-1)
    for t in range(H):
        s = states[:, t]
        if table is None:
            a = rng.integers(0, model.A, size=n)
        else:
            a = _categorical_rows(np.cumsum(table[t], axis=-1)[s], rng.random(n))
        actions[:, t] = a
        rewards[:, t] = rng.random(n) < model.R[m, s, a, 1]
        states[:, t + 1] = _categorical_rows(cumT[m, s, a], rng.random(n))
    return EpisodeBatch(m, states, actions, rewards)


# ---------------------------------------------------------------------------
# beliefs


def initial_belief(model: LMDPModel, s1: int):
    """Posterior over contexts after seeing ``s1``; returns ``(belief, degenerate)``."""
    b = model.w * model.nu[:, s1]
    z = b.sum()
    if z <= 0.0:
        return np.full(model.M, 1.0 / model.M), True
    return b / z, False


def belief_update(model: LMDPModel, b: np.ndarray, s: int, a: int, r: int, s_next: int):
    """One Bayes step; returns ``(belief, degenerate)``.

    When every context assigns zero likelihood to the observation the belief is
    reset to uniform and ``degenerate`` is True.
    """
    lik = model.T[:, s, a, s_next] * model.R[:, s, a, r]
    post = b * lik
    z = post.sum()
    if z <= 0.0:
        return np.full(model.M, 1.0 / model.M), True
    return post / z, False


def belief_trace(model: LMDPModel, traj: Trajectory) -> list:
    """Beliefs ``b_1 .. b_H`` along a trajectory (before each action)."""
    b, _ = initial_belief(model, traj.steps[0][0])
    out = [b]
    for s, a, r, s_next in list(traj.observations())[:-1]:
        b, _ = belief_update(model, b, s, a, r, s_next)
        out.append(b)
    return out


# ---------------------------------------------------------------------------
# exact oracles


def enumeration_size(model: LMDPModel) -> int:
    return (2 * model.S * model.A) ** model.H


def _guard(model: LMDPModel, limit: int = ENUMERATION_LIMIT) -> None:
    size = enumeration_size(model)
    if size > limit:
        raise EnumerationTooLarge(size, limit)


def trajectory_probability(model: LMDPModel, policy: Policy, traj: Trajectory,
                           include_final: bool = False):
    """Returns ``(per_context, mixture)`` probabilities of an observed episode.

    With ``include_final`` the transition into ``traj.final_state`` is scored too.
    """
    s1 = traj.steps[0][0]
    p = model.nu[:, s1].copy()
    memory = policy.start(s1)
    H = traj.H
    for t, (s, a, r) in enumerate(traj.steps):
        pa = policy.probs(t, memory, s)[a]
        p = p * pa * model.R[:, s, a, r]
        if t + 1 < H:
            s_next = traj.steps[t + 1][0]
            p = p * model.T[:, s, a, s_next]
            memory = policy.advance(memory, s, a, r, s_next)
    if include_final and traj.final_state is not None:
        s, a, _ = traj.steps[-1]
        p = p * model.T[:, s, a, traj.final_state]
    return p, float(model.w @ p)


def enumerate_trajectories(model: LMDPModel, policy: Policy, prune: bool = True,
                           limit: int = ENUMERATION_LIMIT) -> Iterator:
    """Yield ``(trajectory, per_context_probability)`` for every episode.

    With ``prune`` only episodes of positive mixture probability are produced.
    """
    _guard(model, limit)
    S, A, H = model.S, model.A, model.H

    def rec(t, s, memory, p, steps):
        pa = policy.probs(t, memory, s)
        for a in range(A):
            if pa[a] == 0.0 and prune:
                continue
            for r in (0, 1):
                q = p * pa[a] * model.R[:, s, a, r]
                if t + 1 == H:
                    if not prune or np.any(q > 0):
                        yield Trajectory(tuple(steps + [(s, a, r)])), q
                    continue
                for s2 in range(S):
                    q2 = q * model.T[:, s, a, s2]
                    if prune and not np.any(q2 > 0):
                        continue
                    yield from rec(t + 1, s2, policy.advance(memory, s, a, r, s2), q2,
                                   steps + [(s, a, r)])

    for s1 in range(S):
        p0 = model.nu[:, s1].copy()
        if prune and not np.any(p0 > 0):
            continue
        yield from rec(0, s1, policy.start(s1), p0, [])


def exact_value(model: LMDPModel, policy: Policy, limit: int = ENUMERATION_LIMIT) -> float:
    """Expected return by exhaustive enumeration of histories."""
    _guard(model, limit)
    S, A, H = model.S, model.A, model.H
    rbar = model.mean_reward

    def rec(t, s, memory, p):
        # p: unnormalized per-context probability of the history ending in s
        pa = policy.probs(t, memory, s)
        total = 0.0
        for a in range(A):
            if pa[a] == 0.0:
                continue
            pw = p * pa[a]
            total += float(pw @ rbar[:, s, a])
            if t + 1 == H:
                continue
            for r in (0, 1):
                q = pw * model.R[:, s, a, r]
                if not np.any(q > 0):
                    continue
                for s2 in range(S):
                    q2 = q * model.T[:, s, a, s2]
                    if np.any(q2 > 0):
                        total += rec(t + 1, s2, policy.advance(memory, s, a, r, s2), q2)
        return total

    value = 0.0
    for s1 in range(S):
        p0 = model.w * model.nu[:, s1]
        if np.any(p0 > 0):
            value += rec(0, s1, policy.start(s1), p0)
    return value


def monte_carlo_value(model: LMDPModel, policy: Policy, n_episodes: int,
                      rng: np.random.Generator):
    """Sample mean and standard error of the episode return."""
    if n_episodes < 1:
        raise ConfigurationError("n_episodes must be >= 1")
    table = policy.markov_table(model.H, model.S)
    if table is not None:
        returns = sample_batch(model, n_episodes, rng, table=np.asarray(table)).returns()
    else:
        returns = np.array([sample_episode(model, policy, rng).total_reward
                            for _ in range(n_episodes)])
    returns = returns.astype(np.float64)
    mean = float(returns.mean())
    if n_episodes == 1:
        return mean, 0.0
    return mean, float(returns.std(ddof=1) / math.sqrt(n_episodes))
