"""Planners over context beliefs and alpha-vector policy evaluation.

Planners accept either a plain :class:`LMDPModel` or a
:class:`HiddenRewardModel`. Hidden rewards add to the expected immediate
reward used for planning but never appear in simulated trajectories.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from .core import (ENUMERATION_LIMIT, LMDPModel, MemorylessPolicy, Policy, _guard,
                   belief_update, initial_belief)
from .errors import ConfigurationError, EnumerationTooLarge


@dataclass(frozen=True, eq=False)
class HiddenRewardModel:
    """An LMDP plus unobservable per-step and per-context initial bonuses."""

    model: LMDPModel
    hidden: np.ndarray
    init_hidden: np.ndarray

    def __post_init__(self):
        M, S, A = self.model.M, self.model.S, self.model.A
        hidden = np.asarray(self.hidden, dtype=np.float64)
        init_hidden = np.asarray(self.init_hidden, dtype=np.float64)
        if hidden.shape != (M, S, A) or init_hidden.shape != (M,):
            raise ConfigurationError("hidden reward shapes do not match the model")
        if np.any(hidden < 0) or np.any(init_hidden < 0):
            raise ConfigurationError("hidden rewards must be nonnegative")
        object.__setattr__(self, "hidden", hidden)
        object.__setattr__(self, "init_hidden", init_hidden)

    @property
    def expected_reward(self) -> np.ndarray:
        return self.model.mean_reward + self.hidden

    @classmethod
    def plain(cls, model: LMDPModel) -> "HiddenRewardModel":
        return cls(model, np.zeros((model.M, model.S, model.A)), np.zeros(model.M))


PlanningModel = Union[LMDPModel, HiddenRewardModel]


def _parts(x: PlanningModel):
    """(observable model, expected reward incl. hidden, initial hidden reward)."""
    if isinstance(x, HiddenRewardModel):
        return x.model, x.expected_reward, x.init_hidden
    return x, x.mean_reward, np.zeros(x.M)


@dataclass(frozen=True, eq=False)
class QTables:
    Q: np.ndarray  # (M, H, S, A)
    V: np.ndarray  # (M, H + 1, S), V[:, H] == 0


def backward_induction(x: PlanningModel) -> QTables:
    """Finite-horizon Bellman backup for each context separately."""
    model, rbar, _ = _parts(x)
    M, S, A, H = model.M, model.S, model.A, model.H
    Q = np.zeros((M, H, S, A))
    V = np.zeros((M, H + 1, S))
    for t in range(H - 1, -1, -1):
        Q[:, t] = rbar + np.einsum("msan,mn->msa", model.T, V[:, t + 1])
        V[:, t] = Q[:, t].max(axis=-1)
    return QTables(Q, V)


def _argmax_first(v: np.ndarray) -> int:
    return int(np.argmax(v))


class BeliefPolicy(Policy):
    """Base for policies whose memory is the exact context belief under ``model``."""

    kind = "belief"

    def __init__(self, model: LMDPModel):
        super().__init__(model.A)
        self.model = model
        self.degenerate_updates = 0

    def start(self, s1):
        b, bad = initial_belief(self.model, s1)
        self.degenerate_updates += bad
        return b

    def advance(self, memory, s, a, r, s_next):
        b, bad = belief_update(self.model, memory, s, a, r, s_next)
        self.degenerate_updates += bad
        return b

    def action_values(self, t: int, b: np.ndarray, s: int) -> np.ndarray:
        raise NotImplementedError

    def probs(self, t, memory, s):
        p = np.zeros(self.n_actions)
        p[_argmax_first(self.action_values(t, memory, s))] = 1.0
        return p


class QMDPPolicy(BeliefPolicy):
    """Acts greedily on belief-weighted per-context Q values."""

    def __init__(self, x: PlanningModel, tables: QTables = None):
        model, _, init_hidden = _parts(x)
        super().__init__(model)
        self.tables = backward_induction(x) if tables is None else tables
        self.init_hidden = init_hidden

    def action_values(self, t, b, s):
        return b @ self.tables.Q[:, t, s, :]

    def initial_value(self) -> float:
        """Q-MDP estimate of the episode value (upper bound on the model's optimum)."""
        model = self.model
        total = float(model.w @ self.init_hidden)
        for s in range(model.S):
            ps = float(model.w @ model.nu[:, s])
            if ps > 0:
                b, _ = initial_belief(model, s)
                total += ps * float(self.action_values(0, b, s).max())
        return total


def qmdp_policy(x: PlanningModel) -> QMDPPolicy:
    return QMDPPolicy(x)


# ---------------------------------------------------------------------------
# grid value iteration over the context simplex


def simplex_grid(M: int, n: int) -> np.ndarray:
    """Integer compositions of ``n`` into ``M`` parts, lexicographic, shape (G, M)."""
    pts = []
    for bars in itertools.combinations(range(n + M - 1), M - 1):
        prev, comp = -1, []
        for b in bars:
            comp.append(b - prev - 1)
            prev = b
        comp.append(n + M - 2 - prev)
        pts.append(comp)
    return np.array(pts, dtype=np.int64).reshape(-1, M)


def snap_to_grid(b: np.ndarray, n: int) -> np.ndarray:
    """Nearest (Euclidean) lattice point ``k / n`` with ``sum(k) = n``, as counts.

    Largest-remainder rounding; remainder ties go to the lower context index.
    """
    b = np.atleast_2d(b)
    x = b * n
    k = np.floor(x + 1e-12).astype(np.int64)
    k = np.minimum(k, n)
    deficit = n - k.sum(axis=1)
    frac = x - k
    order = np.argsort(-frac, axis=1, kind="stable")
    ranks = np.empty_like(order)
    rows = np.arange(b.shape[0])[:, None]
    ranks[rows, order] = np.arange(b.shape[1])[None, :]
    k = k + (ranks < deficit[:, None])
    return k


class PBVIPolicy(BeliefPolicy):
    """Value iteration on a regular lattice over the context simplex.

    Successor beliefs are snapped to the nearest lattice point; at run time
    the policy does a one-step lookahead from the exact belief.
    """

    GRID_LIMIT = 10**7

    def __init__(self, x: PlanningModel, epsilon_d: float):
        if not 0 < epsilon_d <= 1:
            raise ConfigurationError("epsilon_d must lie in (0, 1]")
        model, rbar, init_hidden = _parts(x)
        super().__init__(model)
        M, S, A, H = model.M, model.S, model.A, model.H
        n = math.ceil(1.0 / epsilon_d - 1e-12)
        size = math.comb(n + M, M) * S * H
        if size > self.GRID_LIMIT:
            raise EnumerationTooLarge(size, self.GRID_LIMIT)
        self.n = n
        self.rbar = rbar
        self.init_hidden = init_hidden
        counts = simplex_grid(M, n)
        self.grid = counts / n
        base = n + 1
        self._radix = base ** np.arange(M)
        self._codes = counts @ self._radix
        self._order = np.argsort(self._codes)
        self._P = model.joint_obs  # (M, S, A, O)
        O = 2 * S
        self._next_state = np.arange(O) % S

        joint = self.grid[:, :, None, None, None] * self._P[None]  # (G, M, S, A, O)
        prob = joint.sum(axis=1)  # (G, S, A, O)
        with np.errstate(invalid="ignore", divide="ignore"):
            post = joint / prob[:, None]
        post = np.where(prob[:, None] > 0, post, 1.0 / M)
        G = self.grid.shape[0]
        post = np.moveaxis(post, 1, -1).reshape(-1, M)
        nxt = self._lookup(snap_to_grid(post, n)).reshape(G, S, A, O)

        V = np.zeros((H + 1, G, S))
        Qg = np.zeros((H, G, S, A))
        imm = np.einsum("gm,msa->gsa", self.grid, rbar)
        for t in range(H - 1, -1, -1):
            cont = prob * V[t + 1][nxt, self._next_state[None, None, None, :]]
            Qg[t] = imm + cont.sum(axis=-1)
            V[t] = Qg[t].max(axis=-1)
        self.V = V
        self.Q = Qg

    def _lookup(self, counts: np.ndarray) -> np.ndarray:
        codes = counts @ self._radix
        pos = np.searchsorted(self._codes[self._order], codes)
        return self._order[pos]

    def grid_index(self, b: np.ndarray) -> int:
        return int(self._lookup(snap_to_grid(b, self.n))[0])

    def action_values(self, t, b, s):
        P = self._P[:, s]  # (M, A, O)
        joint = b[:, None, None] * P
        prob = joint.sum(axis=0)  # (A, O)
        vals = b @ self.rbar[:, s, :]
        if t + 1 < self.model.H:
            with np.errstate(invalid="ignore", divide="ignore"):
                post = joint / prob[None]
            post = np.where(prob[None] > 0, post, 1.0 / self.model.M)
            post = np.moveaxis(post, 0, -1).reshape(-1, self.model.M)
            idx = self._lookup(snap_to_grid(post, self.n)).reshape(prob.shape)
            cont = prob * self.V[t + 1][idx, self._next_state[None, :]]
            vals = vals + cont.sum(axis=-1)
        return vals


def pbvi_policy(x: PlanningModel, epsilon_d: float) -> PBVIPolicy:
    return PBVIPolicy(x, epsilon_d)


# ---------------------------------------------------------------------------
# alpha vectors and enumeration oracles


def alpha_policy_eval(x: PlanningModel, policy: Policy, limit: int = ENUMERATION_LIMIT):
    """History-indexed alpha vectors and the policy value.

    Returns ``(alphas, value)`` where ``alphas[(t, history, s)]`` is the
    length-M vector with ``V_t(h, s) = b(h) . alpha``; ``history`` is the
    tuple of ``(s, a, r)`` steps before ``t``. Vectors are produced for every
    observation branch (including zero-probability ones) reached by actions
    the policy may take.
    """
    model, rbar, init_hidden = _parts(x)
    _guard(model, limit)
    S, A, H = model.S, model.A, model.H
    P = model.joint_obs
    alphas = {}

    def rec(t, s, memory, history):
        pa = policy.probs(t, memory, s)
        alpha = np.zeros(model.M)
        for a in range(A):
            if pa[a] == 0.0:
                continue
            part = rbar[:, s, a].copy()
            if t + 1 < H:
                for r in (0, 1):
                    for s2 in range(S):
                        h2 = history + ((s, a, r),)
                        nxt = rec(t + 1, s2, policy.advance(memory, s, a, r, s2), h2)
                        part += P[:, s, a, r * S + s2] * nxt
            alpha += pa[a] * part
        alphas[(t, history, s)] = alpha
        return alpha

    value = float(model.w @ init_hidden)
    for s1 in range(S):
        a1 = rec(0, s1, policy.start(s1), ())
        value += float((model.w * model.nu[:, s1]) @ a1)
    return alphas, value


def optimal_value(x: PlanningModel, limit: int = ENUMERATION_LIMIT) -> float:
    """Best value over all history-dependent policies, by exhaustive search."""
    model, rbar, init_hidden = _parts(x)
    _guard(model, limit)
    S, A, H = model.S, model.A, model.H
    P = model.joint_obs

    def rec(t, s, p):
        best = -np.inf
        for a in range(A):
            v = float(p @ rbar[:, s, a])
            if t + 1 < H:
                q = p[:, None] * P[:, s, a, :]
                for o in range(2 * S):
                    if np.any(q[:, o] > 0):
                        v += rec(t + 1, o % S, q[:, o])
            best = max(best, v)
        return best

    value = float(model.w @ init_hidden)
    for s1 in range(S):
        p0 = model.w * model.nu[:, s1]
        if np.any(p0 > 0):
            value += rec(0, s1, p0)
    return value


def state_action_occupancy(model: LMDPModel, policy: Policy,
                           limit: int = ENUMERATION_LIMIT) -> np.ndarray:
    """Per-context ``P_m(s_t = s, a_t = a)`` under ``policy``, shape (M, H, S, A)."""
    _guard(model, limit)
    M, S, A, H = model.M, model.S, model.A, model.H
    occ = np.zeros((M, H, S, A))

    def rec(t, s, memory, p):
        pa = policy.probs(t, memory, s)
        for a in range(A):
            if pa[a] == 0.0:
                continue
            pw = p * pa[a]
            occ[:, t, s, a] += pw
            if t + 1 == H:
                continue
            for r in (0, 1):
                q = pw * model.R[:, s, a, r]
                for s2 in range(S):
                    q2 = q * model.T[:, s, a, s2]
                    if np.any(q2 > 0):
                        rec(t + 1, s2, policy.advance(memory, s, a, r, s2), q2)

    for s1 in range(S):
        p0 = model.nu[:, s1].copy()
        if np.any(p0 > 0):
            rec(0, s1, policy.start(s1), p0)
    return occ


def value_difference_bound(x1: PlanningModel, x2: PlanningModel, policy: Policy) -> float:
    """Right-hand side of the simulation-lemma bound on ``|V_1 - V_2|``.

    Expectations are taken under the second model; both models must share
    mixing weights.
    """
    m1, rbar1, _ = _parts(x1)
    m2, rbar2, _ = _parts(x2)
    if not np.allclose(m1.w, m2.w):
        raise ConfigurationError("value-difference bound requires equal mixing weights")
    H = m2.H
    occ = state_action_occupancy(m2, policy)  # (M, H, S, A)
    w = m2.w
    init_term = H * float(w @ np.abs(m1.nu - m2.nu).sum(axis=1))
    dr = np.abs(rbar1 - rbar2)  # (M, S, A)
    reward_term = float(np.einsum("m,mtsa,msa->", w, occ, dr))
    dp = np.abs(m1.joint_obs - m2.joint_obs).sum(axis=-1)
    obs_term = H * float(np.einsum("m,mtsa,msa->", w, occ, dp))
    return init_term + reward_term + obs_term


def deterministic_markov_policies(S: int, A: int, H: int):
    """Every deterministic time-dependent memoryless policy (A ** (S * H) of them)."""
    for acts in itertools.product(range(A), repeat=S * H):
        yield MemorylessPolicy(np.array(acts).reshape(H, S), n_actions=A)
