"""Spectral learning of predictive state representations for latent MDPs.

Conventions
-----------
A *test* is ``l`` consecutive ``(a, r, s')`` steps. One step is coded as
``a * 2S + r * S + s'`` and a test is the base-``2AS`` number formed by its
step codes, first step most significant. The observation part of a step,
``o = r * S + s'``, matches ``LMDPModel.joint_obs``.

A *history* ending in state ``s`` is ``k`` ``(s, a, r)`` steps followed by
``s``, where ``k = l - 1`` unless ``history_steps`` says otherwise. Its
prefix is coded step-wise as ``s * 2A + a * 2 + r``. Every ending state
shares the same prefix enumeration, so ``|H_s| = (2SA)^k``.

Samples are short episodes of ``k + l + 1`` actions. The first ``k``
actions follow the sampling policy; the rest are uniform, which is what the
importance weights ``A^l`` and ``A^(l+1)`` correct for.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import EpisodeBatch, LMDPModel, Policy, Trajectory, sample_batch
from .errors import ConfigurationError, EnumerationTooLarge, RankDeficiencyError, VanishingNormalizer
from .io import atomic_write_text

SET_LIMIT = 10**6
SIGMA_FLOOR = 1e-8
NORMALIZER_TOL = 1e-12


@dataclass(frozen=True)
class PSRSets:
    S: int
    A: int
    l: int
    history_steps: Optional[int] = None

    @property
    def k(self) -> int:
        """Number of (s, a, r) steps in a history prefix."""
        return self.l - 1 if self.history_steps is None else self.history_steps

    @property
    def episode_length(self) -> int:
        return self.k + self.l + 1

    @property
    def n_tests(self) -> int:
        return (2 * self.A * self.S) ** self.l

    @property
    def n_histories(self) -> int:
        return (2 * self.A * self.S) ** self.k

    @property
    def n_obs(self) -> int:
        return 2 * self.S

    def tests(self) -> np.ndarray:
        """(n_tests, l, 3) array of (a, r, s') steps in enumeration order."""
        codes = np.arange(self.n_tests)
        base = 2 * self.A * self.S
        out = np.empty((self.n_tests, self.l, 3), dtype=np.int64)
        for k in range(self.l):
            c = (codes // base ** (self.l - 1 - k)) % base
            out[:, k, 0] = c // (2 * self.S)
            out[:, k, 1] = (c // self.S) % 2
            out[:, k, 2] = c % self.S
        return out

    def history_prefixes(self) -> np.ndarray:
        """(n_histories, k, 3) array of (s, a, r) steps."""
        n = self.n_histories
        base = 2 * self.A * self.S
        codes = np.arange(n)
        out = np.empty((n, self.k, 3), dtype=np.int64)
        for k in range(self.k):
            c = (codes // base ** (self.k - 1 - k)) % base
            out[:, k, 0] = c // (2 * self.A)
            out[:, k, 1] = (c // 2) % self.A
            out[:, k, 2] = c % 2
        return out

    def test_index(self, steps: Sequence) -> int:
        idx = 0
        for a, r, s_next in steps:
            idx = idx * 2 * self.A * self.S + a * 2 * self.S + r * self.S + s_next
        return idx

    def history_index(self, steps: Sequence) -> int:
        idx = 0
        for s, a, r in steps:
            idx = idx * 2 * self.A * self.S + s * 2 * self.A + a * 2 + r
        return idx


def enumerate_sets(S: int, A: int, l: int, history_steps: Optional[int] = None) -> PSRSets:
    if l < 1:
        raise ConfigurationError("test length l must be at least 1")
    if history_steps is not None and history_steps < 0:
        raise ConfigurationError("history_steps must be nonnegative")
    if S < 1 or A < 1:
        raise ConfigurationError("S and A must be positive")
    size = max((2 * A * S) ** l, (2 * A * S) ** (l - 1 if history_steps is None else history_steps))
    if size > SET_LIMIT:
        raise EnumerationTooLarge(size, SET_LIMIT)
    return PSRSets(S, A, l, history_steps)


@dataclass
class JointProbMatrices:
    """Joint probabilities of histories and tests, grouped by the history's ending state."""

    sets: PSRSets
    P_H: np.ndarray  # (S, nH)
    P_TH: np.ndarray  # (S, nT, nH)
    P_TOAH: np.ndarray  # (S, A, 2S, nT, nH)
    P_T1: np.ndarray  # (S, nT)
    n_samples: Optional[int] = None  # None for exact matrices
    L: Optional[np.ndarray] = None  # (S, nT, M), exact only
    Hmat: Optional[np.ndarray] = None  # (S, M, nH), exact only


def _step_table(model: LMDPModel) -> np.ndarray:
    """(S, 2AS, M): probability of one test step from each state."""
    S, A, M = model.S, model.A, model.M
    return model.joint_obs.transpose(1, 2, 3, 0).reshape(S, 2 * A * S, M)


def test_matrices(model: LMDPModel, l: int) -> np.ndarray:
    """``L[s, tau, m] = P_m(tau | s, do a_tau)``."""
    P1 = _step_table(model)
    nxt = np.arange(P1.shape[1]) % model.S
    L = P1
    for _ in range(l - 1):
        Lp = L[nxt]  # (2AS, n, M)
        L = (P1[:, :, None, :] * Lp[None]).reshape(model.S, -1, model.M)
    return L


def history_matrices(model: LMDPModel, k: int, policy_table: Optional[np.ndarray] = None) -> np.ndarray:
    """``H[s, m, h] = w_m P_m^pi(h)`` for histories ending in ``s``."""
    M, S, A = model.M, model.S, model.A
    pi = np.full((S, A), 1.0 / A) if policy_table is None else np.asarray(policy_table)
    G = (model.w[:, None] * model.nu)[:, None, :]  # (M, 1, S)
    Q = pi[None, :, :, None, None] * model.R[..., None] * model.T[:, :, :, None, :]  # (M,S,A,2,S')
    for _ in range(k):
        G = (G[:, :, :, None, None, None] * Q[:, None]).reshape(M, -1, S)
    return G.transpose(2, 0, 1)


def exact_matrices(model: LMDPModel, sets: PSRSets,
                   policy_table: Optional[np.ndarray] = None) -> JointProbMatrices:
    """Ground-truth matrices; ``policy_table`` (S, A) is the history sampling policy."""
    if (sets.S, sets.A) != (model.S, model.A):
        raise ConfigurationError("sets do not match the model dimensions")
    S = model.S
    L = test_matrices(model, sets.l)
    Hm = history_matrices(model, sets.k, policy_table)
    P_TH = np.einsum("stm,smh->sth", L, Hm)
    P_H = Hm.sum(axis=1)
    D = model.joint_obs.transpose(1, 2, 3, 0)  # (S, A, 2S, M)
    nxt = np.arange(2 * S) % S
    P_TOAH = np.einsum("otm,saom,smh->saoth", L[nxt], D, Hm, optimize=True)
    P_T1 = np.einsum("stm,ms->st", L, model.w[:, None] * model.nu)
    return JointProbMatrices(sets, P_H, P_TH, P_TOAH, P_T1, None, L, Hm)


def sample_short_episodes(model: LMDPModel, sets: PSRSets, n: int, rng: np.random.Generator,
                          policy_table: Optional[np.ndarray] = None) -> EpisodeBatch:
    """Short episodes of ``k + l + 1`` actions; history steps follow ``policy_table``."""
    H = sets.episode_length
    table = None
    if policy_table is not None:
        table = np.full((H, model.S, model.A), 1.0 / model.A)
        table[: sets.k] = policy_table
    return sample_batch(model.with_horizon(H), n, rng, table=table)


def _batch_arrays(samples, need: int):
    if isinstance(samples, EpisodeBatch):
        return samples.states, samples.actions, samples.rewards
    samples = list(samples)
    if not samples:
        raise ConfigurationError("no samples")
    st, ac, rw = [], [], []
    for tr in samples:
        if tr.H < need or (tr.H == need and tr.final_state is None):
            raise ConfigurationError(f"samples must cover {need} actions plus the final state")
        st.append(tr.states[:need] + [tr.steps[need][0] if tr.H > need else tr.final_state])
        ac.append(tr.actions[:need])
        rw.append(tr.rewards[:need])
    return np.array(st), np.array(ac), np.array(rw)


def estimate_matrices(samples, sets: PSRSets) -> JointProbMatrices:
    """Importance-weighted empirical matrices from short episodes (batch or trajectories)."""
    states, actions, rewards = _batch_arrays(samples, sets.episode_length)
    N = len(states)
    if N == 0:
        raise ConfigurationError("no samples")
    S, A, l, k = sets.S, sets.A, sets.l, sets.k
    nT, nH, n_obs = sets.n_tests, sets.n_histories, 2 * S
    base = 2 * A * S

    def test_code(start):
        c = np.zeros(N, dtype=np.int64)
        for k in range(start, start + l):
            c = c * base + actions[:, k] * 2 * S + rewards[:, k] * S + states[:, k + 1]
        return c

    h = np.zeros(N, dtype=np.int64)
    for i in range(k):
        h = h * base + states[:, i] * 2 * A + actions[:, i] * 2 + rewards[:, i]
    s_end = states[:, k]
    tau = test_code(k)
    a_mid = actions[:, k]
    o_mid = rewards[:, k] * S + states[:, k + 1]
    tau2 = test_code(k + 1)
    tau1 = test_code(0)

    P_H = np.bincount(s_end * nH + h, minlength=S * nH).reshape(S, nH) / N
    P_TH = np.bincount((s_end * nT + tau) * nH + h,
                       minlength=S * nT * nH).reshape(S, nT, nH) * (A**l / N)
    flat = (((s_end * A + a_mid) * n_obs + o_mid) * nT + tau2) * nH + h
    P_TOAH = np.bincount(flat, minlength=S * A * n_obs * nT * nH).reshape(
        S, A, n_obs, nT, nH) * (A ** (l + 1) / N)
    P_T1 = np.bincount(states[:, 0] * nT + tau1, minlength=S * nT).reshape(S, nT) * (A**l / N)
    return JointProbMatrices(sets, P_H, P_TH, P_TOAH, P_T1, N)


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class PSRParams:
    M: int
    S: int
    A: int
    b1: np.ndarray  # (S, M)
    binf: np.ndarray  # (S, M)
    B: np.ndarray  # (S, A, 2S, M, M)
    U: np.ndarray  # (S, nT, M)
    sigma: np.ndarray  # (S, M) leading singular values per ending state

    def to_dict(self) -> dict:
        return {"M": self.M, "S": self.S, "A": self.A, "b1": self.b1.tolist(),
                "binf": self.binf.tolist(), "B": self.B.tolist(), "U": self.U.tolist(),
                "sigma": self.sigma.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "PSRParams":
        arr = {k: np.asarray(d[k], dtype=np.float64) for k in ("b1", "binf", "B", "U", "sigma")}
        return cls(int(d["M"]), int(d["S"]), int(d["A"]), **arr)

    def save(self, path) -> None:
        atomic_write_text(path, json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> "PSRParams":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def spectral_learn(mats: JointProbMatrices, M: int, floor: float = SIGMA_FLOOR) -> PSRParams:
    """Top-M SVD per ending state, then the observable-operator construction."""
    sets = mats.sets
    S, A = sets.S, sets.A
    if M < 1:
        raise ConfigurationError("M must be positive")
    if M > min(sets.n_tests, sets.n_histories):
        raise RankDeficiencyError(0, 0.0, floor)
    U = np.empty((S, sets.n_tests, M))
    V = np.empty((S, sets.n_histories, M))
    inv = np.empty((S, M, M))
    sig = np.empty((S, M))
    for s in range(S):
        u, sv, vt = np.linalg.svd(mats.P_TH[s], full_matrices=False)
        if sv[M - 1] < floor:
            raise RankDeficiencyError(s, float(sv[M - 1]), floor)
        U[s], V[s], sig[s] = u[:, :M], vt[:M].T, sv[:M]
        inv[s] = np.linalg.pinv(U[s].T @ mats.P_TH[s] @ V[s], rcond=floor / sv[0])
    nxt = np.arange(2 * S) % S
    B = np.einsum("sotk,saoth,shj,sji->saoki", U[nxt][None].repeat(S, 0), mats.P_TOAH, V, inv,
                  optimize=True)
    binf = np.einsum("sh,shj,sji->si", mats.P_H, V, inv)
    b1 = np.einsum("stk,st->sk", U, mats.P_T1)
    return PSRParams(M, S, A, b1, binf, B, U, sig)


def _chain(params: PSRParams, state: np.ndarray, s: int, steps) -> tuple:
    v = state
    for a, r, s_next in steps:
        v = params.B[s, a, r * params.S + s_next] @ v
        s = s_next
    return v, s


def psr_sequence_probability(params: PSRParams, traj: Trajectory,
                             policy: Optional[Policy] = None) -> float:
    """Probability of ``(s, a, r)_{1:t-1}, s_t``; ``policy=None`` gives the do-probability."""
    if traj.final_state is None:
        raise ConfigurationError("sequence needs an ending state")
    steps = list(traj.steps)
    weight = 1.0
    if policy is not None:
        mem = policy.start(steps[0][0]) if steps else None
        for t, (s, a, r) in enumerate(steps):
            weight *= float(policy.probs(t, mem, s)[a])
            if weight == 0.0:
                return 0.0
            s_next = steps[t + 1][0] if t + 1 < len(steps) else traj.final_state
            mem = policy.advance(mem, s, a, r, s_next)
    s1 = steps[0][0] if steps else traj.final_state
    obs = [(a, r, steps[t + 1][0] if t + 1 < len(steps) else traj.final_state)
           for t, (_, a, r) in enumerate(steps)]
    v, s_end = _chain(params, params.b1[s1], s1, obs)
    return weight * float(params.binf[s_end] @ v)


def psr_initial_state(params: PSRParams, s1: int) -> np.ndarray:
    """``b_{1,s1}`` scaled so that ``b_inf^T b = 1`` (conditional on the first state)."""
    b = params.b1[s1]
    z = float(params.binf[s1] @ b)
    if abs(z) < NORMALIZER_TOL:
        raise VanishingNormalizer(f"initial normalizer {z:.3e} at state {s1}")
    return b / z


def psr_state_update(params: PSRParams, state: np.ndarray, o: int, a: int, s: int,
                     s_next: int) -> np.ndarray:
    if o % params.S != s_next:
        raise ValueError(f"observation {o} does not end in state {s_next}")
    v = params.B[s, a, o] @ state
    z = float(params.binf[s_next] @ v)
    if abs(z) < NORMALIZER_TOL:
        raise VanishingNormalizer(f"normalizer {z:.3e} after (s={s}, a={a}, o={o})")
    return v / z


def psr_state_trace(params: PSRParams, traj: Trajectory, steps: int) -> tuple:
    """PSR state after the first ``steps`` transitions; returns (state, current state)."""
    s = traj.steps[0][0]
    b = psr_initial_state(params, s)
    for t in range(steps):
        _, a, r = traj.steps[t]
        s_next = traj.steps[t + 1][0] if t + 1 < traj.H else traj.final_state
        b = psr_state_update(params, b, r * params.S + s_next, a, s, s_next)
        s = s_next
    return b, s


def psr_predict(params: PSRParams, state: np.ndarray, s_now: int,
                tests: Optional[np.ndarray] = None) -> np.ndarray:
    """Conditional success probabilities of tests from the current PSR state.

    ``tests=None`` returns all one-step tests as an (A * 2S,) vector indexed
    by ``a * 2S + o``; otherwise ``tests`` is a (k, l, 3) array of steps.
    """
    S = params.S
    if tests is None:
        nxt = np.arange(2 * S) % S
        v = params.B[s_now] @ state  # (A, 2S, M)
        return np.einsum("aom,om->ao", v, params.binf[nxt]).reshape(-1)
    tests = np.asarray(tests)
    out = np.empty(len(tests))
    for i, steps in enumerate(tests):
        v, s_end = _chain(params, state, s_now, steps)
        out[i] = params.binf[s_end] @ v
    return out


# ---------------------------------------------------------------------------
# diagnostics


@dataclass(frozen=True)
class RankReport:
    sigma_L: Optional[np.ndarray]  # (S,) sigma_M(L_s); None when only estimates are known
    sigma_P: np.ndarray  # (S,) sigma_M(P_{T,H_s})
    p_end: np.ndarray  # (S,) probability a sampled history ends in s
    passed: bool

    @property
    def sigma_h(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.p_end > 0, self.sigma_P / self.p_end, 0.0)

    @property
    def p_pi(self) -> float:
        return float(self.p_end.min())

    def to_dict(self) -> dict:
        return {"sigma_L": None if self.sigma_L is None else self.sigma_L.tolist(),
                "sigma_P": self.sigma_P.tolist(), "p_end": self.p_end.tolist(),
                "sigma_h": self.sigma_h.tolist(), "p_pi": self.p_pi, "passed": self.passed}


def _sigma_m(X: np.ndarray, M: int) -> float:
    sv = np.linalg.svd(X, compute_uv=False)
    return float(sv[M - 1]) if len(sv) >= M else 0.0


def rank_diagnostics(source, M: Optional[int] = None, l: int = 2,
                     history_steps: Optional[int] = None, sigma_tau: float = SIGMA_FLOOR,
                     sigma_h: float = SIGMA_FLOOR) -> RankReport:
    """M-th singular values of the test and joint matrices, per ending state.

    ``source`` is an LMDPModel (exact, uniform sampling) or JointProbMatrices.
    """
    if isinstance(source, LMDPModel):
        M = source.M if M is None else M
        source = exact_matrices(source, enumerate_sets(source.S, source.A, l, history_steps))
    if M is None:
        raise ConfigurationError("M is required for estimated matrices")
    S = source.sets.S
    sP = np.array([_sigma_m(source.P_TH[s], M) for s in range(S)])
    p_end = source.P_H.sum(axis=1)
    sL = None
    ok = True
    if source.L is not None:
        sL = np.array([_sigma_m(source.L[s], M) for s in range(S)])
        ok = bool(np.all(sL >= sigma_tau))
    ok = ok and bool(np.all(sP >= sigma_h * p_end)) and bool(np.all(sP > 0))
    return RankReport(sL, sP, p_end, ok)


def joint_matrix_error(est: JointProbMatrices, exact: JointProbMatrices) -> float:
    """Largest per-state spectral-norm error of the test/history matrix."""
    return float(max(np.linalg.norm(est.P_TH[s] - exact.P_TH[s], 2)
                     for s in range(est.sets.S)))
