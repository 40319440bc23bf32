"""Hard instances for latent MDPs and exploration of deterministic mixtures."""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import (ActionSequencePolicy, LMDPModel, Policy, Trajectory, UniformPolicy,
                   sample_episode, trajectory_probability)
from .errors import ConfigurationError, ContractViolation, EnumerationTooLarge
from .io import atomic_write_text

INIT = -1  # marker for the initial-state pseudo observation


@dataclass(frozen=True)
class LowerBoundInstance:
    model: LMDPModel
    a_star: tuple
    epsilon: Optional[float]  # None for the deterministic variant

    @property
    def sink(self) -> int:
        return self.model.S - 1


def lower_bound_instance(M: int, A: int, epsilon: Optional[float] = None,
                         a_star=None) -> LowerBoundInstance:
    """Chain of M time-indexed states plus SINK; only context 0 rewards ``a_star``.

    At time t < M, context 0 and every context whose decoy step has passed
    need ``a_star[t]`` to advance. The decoy context ``M - t`` (0-based,
    t counted from 0 as well) advances on anything except ``a_star[t]``; all
    other contexts always advance. With ``epsilon`` set, rewards at the last
    chain state and at SINK are Ber(1/2), and context 0 playing the last
    action of ``a_star`` gets Ber(1/2 + epsilon).
    """
    if M < 2 or A < 2:
        raise ConfigurationError("need M >= 2 and A >= 2")
    if epsilon is not None and not 0 < epsilon <= 0.5:
        raise ConfigurationError("epsilon must lie in (0, 1/2]")
    a_star = tuple(int(a) for a in (a_star if a_star is not None else [0] * M))
    if len(a_star) != M or not all(0 <= a < A for a in a_star):
        raise ConfigurationError("a_star must hold M valid actions")
    S = M + 1
    sink = M
    T = np.zeros((M, S, A, S))
    T[:, sink, :, sink] = 1.0
    T[:, M - 1, :, sink] = 1.0
    for t in range(M - 1):
        decoy = M - 1 - t
        for m in range(M):
            for a in range(A):
                if m == 0 or m > decoy:
                    nxt = t + 1 if a == a_star[t] else sink
                elif m == decoy:
                    nxt = sink if a == a_star[t] else t + 1
                else:
                    nxt = t + 1
                T[m, t, a, nxt] = 1.0
    p1 = np.zeros((M, S, A))
    if epsilon is None:
        p1[0, M - 1, a_star[-1]] = 1.0
    else:
        p1[:, M - 1, :] = 0.5
        p1[:, sink, :] = 0.5
        p1[0, M - 1, a_star[-1]] = 0.5 + epsilon
    R = np.stack([1 - p1, p1], axis=-1)
    nu = np.zeros((M, S))
    nu[:, 0] = 1.0
    return LowerBoundInstance(LMDPModel(T, R, nu, M), a_star, epsilon)


def surrogate_chain_distribution(inst: LowerBoundInstance) -> dict:
    """Observation-sequence distribution any wrong action sequence must produce.

    One of the ``M - t`` surviving contexts falls into SINK at each step, so
    the chain moves on with probability ``(M - t - 1)/(M - t)``.
    """
    M = inst.model.M
    sink = inst.sink
    eps = inst.epsilon
    out: dict = {}

    def rec(t, s, p, states):
        if t == M:
            seq = tuple(states)
            if eps is None:
                out[(seq, (0,) * M)] = out.get((seq, (0,) * M), 0.0) + p
            else:
                for rs in itertools.product((0, 1), repeat=M):
                    q = p
                    for k, r in enumerate(rs):
                        paying = seq[k] == sink or k == M - 1
                        if paying:
                            q *= 0.5
                        elif r == 1:
                            q = 0.0
                    if q > 0:
                        out[(seq, rs)] = out.get((seq, rs), 0.0) + q
            return
        if t == M - 1 or s == sink:
            rec(t + 1, s, p, states + [s] if t + 1 < M else states)
            return
        alive = M - t
        rec(t + 1, t + 1, p * (alive - 1) / alive, states + [t + 1])
        rec(t + 1, sink, p / alive, states + [sink])

    rec(0, 0, 1.0, [0])
    return out


def observation_distribution(model: LMDPModel, actions) -> dict:
    """Exact law of (states, rewards) under an open-loop action sequence."""
    pol = ActionSequencePolicy(actions, model.A)
    out: dict = {}
    H = model.H

    def rec(t, states, rewards, steps, per_ctx):
        if t == H:
            traj = Trajectory(tuple(steps))
            _, p = trajectory_probability(model, pol, traj)
            if p > 0:
                out[(tuple(states), tuple(rewards))] = p
            return
        s = states[-1]
        a = actions[t]
        for r in (0, 1):
            pr = per_ctx * model.R[:, s, a, r]
            if not pr.any():
                continue
            if t + 1 == H:
                rec(t + 1, states, rewards + [r], steps + [(s, a, r)], pr)
            else:
                for s2 in range(model.S):
                    ps = pr * model.T[:, s, a, s2]
                    if ps.any():
                        rec(t + 1, states + [s2], rewards + [r], steps + [(s, a, r)], ps)

    for s1 in range(model.S):
        if model.nu[:, s1].any():
            rec(0, [s1], [], [], model.nu[:, s1].copy())
    return out


@dataclass
class IndistinguishabilityReport:
    ok: bool
    max_gap: float
    witness: Optional[tuple]  # (wrong sequence 1, wrong sequence 2 or "surrogate")
    n_sequences: int


def _gap(d1: dict, d2: dict) -> float:
    keys = set(d1) | set(d2)
    return max((abs(d1.get(k, 0.0) - d2.get(k, 0.0)) for k in keys), default=0.0)


def indistinguishability_check(inst: LowerBoundInstance, tol: float = 1e-12,
                               limit: int = 10**4) -> IndistinguishabilityReport:
    """Every wrong open-loop sequence must induce the surrogate chain's observation law."""
    model = inst.model
    n = model.A**model.H
    if n > limit:
        raise EnumerationTooLarge(n, limit)
    ref = surrogate_chain_distribution(inst)
    worst, witness = 0.0, None
    first = None
    for seq in itertools.product(range(model.A), repeat=model.H):
        if seq == inst.a_star:
            continue
        d = observation_distribution(model, seq)
        g = _gap(d, ref)
        if g > worst:
            worst, witness = g, (seq, "surrogate")
        if first is None:
            first = (seq, d)
        else:
            g2 = _gap(d, first[1])
            if g2 > worst:
                worst, witness = g2, (seq, first[0])
    return IndistinguishabilityReport(worst <= tol, worst, witness if worst > tol else None, n - 1)


def random_learner_discovery(inst: LowerBoundInstance, rng: np.random.Generator,
                             max_episodes: int = 10**7) -> int:
    """Episodes a uniformly random learner needs before its first reward of 1.

    Only meaningful for the deterministic variant, where a reward reveals ``a_star``.
    """
    if inst.epsilon is not None:
        raise ConfigurationError("discovery time is defined for the deterministic variant")
    pol = UniformPolicy(inst.model.A)
    for k in range(1, max_episodes + 1):
        if sample_episode(inst.model, pol, rng).total_reward > 0:
            return k
    return max_episodes


# ---------------------------------------------------------------------------
# exploration of deterministic mixtures


@dataclass
class AtlasNode:
    t: int
    C: frozenset
    s: int
    path: tuple  # actions leading here
    # outcome bookkeeping per action: {a: {outcome: count}}
    counts: dict = field(default_factory=dict)
    # {a: {outcome: child key}}
    children: dict = field(default_factory=dict)
    # {a: {outcome: summed reward}} used in the stochastic-reward mode
    reward_sums: dict = field(default_factory=dict)

    @property
    def key(self):
        return (self.t, self.C, self.s)


def _key_json(key) -> str:
    t, C, s = key
    return json.dumps([t, sorted(list(c) for c in C), s])


@dataclass
class ReachabilityAtlas:
    H: int
    A: int
    stochastic_rewards: bool
    roots: dict  # initial state -> node key
    nodes: dict = field(default_factory=dict)
    values: dict = field(default_factory=dict)  # key -> optimal value-to-go
    best: dict = field(default_factory=dict)  # key -> greedy action

    def outcome_of(self, s_next: int, r: int):
        return s_next if self.stochastic_rewards else (s_next, r)

    def step(self, key, a: int, s_next: int, r: int):
        """Child node reached from ``key`` by ``a`` with observation (s_next, r); None if unseen."""
        node = self.nodes.get(key)
        if node is None:
            return None
        return node.children.get(a, {}).get(self.outcome_of(s_next, r))

    def probabilities(self, key, a: int) -> dict:
        c = self.nodes[key].counts.get(a, {})
        tot = sum(c.values())
        return {o: n / tot for o, n in c.items()} if tot else {}

    def mean_reward(self, key, a: int, outcome) -> float:
        if not self.stochastic_rewards:
            return float(outcome[1])
        node = self.nodes[key]
        return node.reward_sums[a][outcome] / node.counts[a][outcome]

    def solve(self) -> None:
        """Backward induction over the atlas with empirical branch probabilities."""
        self.values.clear()
        self.best.clear()
        for key in sorted(self.nodes, key=lambda k: -k[0]):
            node = self.nodes[key]
            best_v, best_a = 0.0, 0
            first = True
            for a in range(self.A):
                probs = self.probabilities(key, a)
                if not probs:
                    continue
                v = 0.0
                for o, p in probs.items():
                    child = node.children[a][o]
                    v += p * (self.mean_reward(key, a, o) + self.values.get(child, 0.0))
                if first or v > best_v + 1e-12:
                    best_v, best_a, first = v, a, False
            self.values[key] = best_v
            self.best[key] = best_a

    def to_dict(self) -> dict:
        nodes = []
        for key in sorted(self.nodes, key=_key_json):
            node = self.nodes[key]
            edges = []
            for a in sorted(node.children):
                for o, child in sorted(node.children[a].items()):
                    edges.append({"action": a, "outcome": list(o) if isinstance(o, tuple) else [o],
                                  "count": node.counts[a][o], "to": json.loads(_key_json(child))})
            nodes.append({"key": json.loads(_key_json(key)), "path": list(node.path),
                          "value": self.values.get(key), "best_action": self.best.get(key),
                          "edges": edges})
        return {"H": self.H, "A": self.A, "stochastic_rewards": self.stochastic_rewards,
                "roots": {str(s): json.loads(_key_json(k)) for s, k in sorted(self.roots.items())},
                "nodes": nodes}

    def save(self, path) -> None:
        atomic_write_text(path, json.dumps(self.to_dict(), sort_keys=True) + "\n")


class AtlasPolicy(Policy):
    """Greedy atlas policy; memory is the current atlas node, action 0 once off the atlas."""

    def __init__(self, atlas: ReachabilityAtlas):
        super().__init__(atlas.A)
        self.atlas = atlas

    def start(self, s1):
        return self.atlas.roots.get(s1)

    def advance(self, memory, s, a, r, s_next):
        return None if memory is None else self.atlas.step(memory, a, s_next, r)

    def probs(self, t, memory, s):
        p = np.zeros(self.n_actions)
        p[0 if memory is None else self.atlas.best.get(memory, 0)] = 1.0
        return p


@dataclass
class ExplorationResult:
    atlas: ReachabilityAtlas
    policy: AtlasPolicy
    episodes_used: int


def default_repetitions(M: int, c: float = 10.0) -> int:
    return int(math.ceil(c * M * math.log(M + 1)))


def deterministic_explore(env: LMDPModel, rng: np.random.Generator, c: float = 10.0,
                          stochastic_rewards: bool = False) -> ExplorationResult:
    """Breadth-first discovery of (distinguishing set, state) nodes, then planning on the atlas.

    Each (node, action) probe replays the node's stored path for ``n_rep``
    episodes, takes the action when the node is actually reached, and plays
    action 0 afterwards. Every episode also updates the outcome counts of
    every known node it passes through.
    """
    if not env.is_deterministic(rewards=not stochastic_rewards):
        raise ContractViolation("environment is not deterministic"
                                + ("" if stochastic_rewards else " (transitions and rewards)"))
    M, A, H = env.M, env.A, env.H
    n_rep = default_repetitions(M, c)
    atlas = ReachabilityAtlas(H, A, stochastic_rewards, {})
    episodes = 0

    def run(actions) -> Trajectory:
        nonlocal episodes
        episodes += 1
        return sample_episode(env, ActionSequencePolicy(list(actions) + [0] * (H - len(actions)), A),
                              rng)

    def record(traj: Trajectory, depth: int):
        """Walk the atlas along ``traj`` for ``depth`` steps, counting outcomes; returns last node key."""
        key = atlas.roots.get(traj.steps[0][0])
        for t in range(depth):
            if key is None:
                return None
            s, a, r = traj.steps[t]
            s_next = traj.steps[t + 1][0] if t + 1 < H else traj.final_state
            node = atlas.nodes[key]
            o = atlas.outcome_of(s_next, r)
            cnt = node.counts.setdefault(a, {})
            cnt[o] = cnt.get(o, 0) + 1
            if stochastic_rewards:
                rs = node.reward_sums.setdefault(a, {})
                rs[o] = rs.get(o, 0.0) + r
            key = node.children.get(a, {}).get(o)
        return key

    # initial states
    starts = sorted({run([]).steps[0][0] for _ in range(n_rep)})
    for s1 in starts:
        C = frozenset() if len(starts) == 1 else frozenset({(INIT, INIT, s1, 0)})
        node = AtlasNode(0, C, s1, ())
        atlas.nodes[node.key] = node
        atlas.roots[s1] = node.key
    layer = [atlas.roots[s] for s in starts]

    for t in range(H):
        nxt_layer = []
        for key in layer:
            node = atlas.nodes[key]
            for a in range(A):
                seen: dict = {}
                for _ in range(n_rep):
                    traj = run(node.path + (a,))
                    if record(traj, t) != key:
                        continue
                    s, _, r = traj.steps[t]
                    s_next = traj.steps[t + 1][0] if t + 1 < H else traj.final_state
                    o = atlas.outcome_of(s_next, r)
                    seen[o] = seen.get(o, 0) + 1
                    cnt = node.counts.setdefault(a, {})
                    cnt[o] = cnt.get(o, 0) + 1
                    if stochastic_rewards:
                        rs = node.reward_sums.setdefault(a, {})
                        rs[o] = rs.get(o, 0.0) + r
                outcomes = sorted(set(seen) | set(node.counts.get(a, {})))
                if not outcomes:
                    continue
                kids = node.children.setdefault(a, {})
                for o in outcomes:
                    s_next = o if stochastic_rewards else o[0]
                    if len(outcomes) == 1:
                        C2 = node.C
                    else:
                        r_tag = 0 if stochastic_rewards else o[1]
                        C2 = node.C | {(node.s, a, s_next, r_tag)}
                    if len(C2) >= M:
                        raise ContractViolation(
                            f"distinguishing set of size {len(C2)} >= M={M} at t={t + 1}")
                    ckey = (t + 1, C2, s_next)
                    kids[o] = ckey
                    if ckey not in atlas.nodes:
                        atlas.nodes[ckey] = AtlasNode(t + 1, C2, s_next, node.path + (a,))
                        nxt_layer.append(ckey)
        layer = nxt_layer
    atlas.solve()
    return ExplorationResult(atlas, AtlasPolicy(atlas), episodes)


def episode_budget(H: int, S: int, A: int, M: int) -> float:
    """Desk-scale form of the upper bound on exploration episodes."""
    return 200 * H * (S * A) ** M * M * math.log(M + 1)
