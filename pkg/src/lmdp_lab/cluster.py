"""Label-free initialization: cluster PSR predictions and stitch contexts across states."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.cluster.vq import kmeans2, vq
from scipy.cluster.hierarchy import DisjointSet

from .core import LMDPModel, make_rng, sample_batch
from .errors import (ConfigurationError, IncompleteModelError, LabelingFailure, LMDPError,
                     StageError)
from .io import atomic_write_text, jsonl_lines
from .psr import (NORMALIZER_TOL, PSRParams, PSRSets, estimate_matrices, rank_diagnostics,
                  sample_short_episodes, spectral_learn)


@dataclass(frozen=True)
class KMeansResult:
    centers: np.ndarray  # (M, d)
    labels: np.ndarray  # (n,)
    cost: float  # sum of squared Euclidean distances


def kmeanspp(points, M: int, restarts: int = 10, rng: Optional[np.random.Generator] = None,
             iters: int = 100, min_cluster_frac: float = 0.0) -> KMeansResult:
    """Best-of-``restarts`` k-means++ followed by Lloyd iterations.

    Restarts leaving a cluster with fewer than ``min_cluster_frac * n / M``
    points lose to any restart that does not, whatever their cost.
    """
    X = np.asarray(points, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if len(X) < M:
        raise ConfigurationError(f"need at least {M} points, got {len(X)}")
    rng = make_rng(0) if rng is None else rng
    uniq = np.unique(X, axis=0)
    if len(uniq) <= M:
        centers = np.concatenate([uniq, np.repeat(uniq[:1], M - len(uniq), axis=0)])
        labels = vq(X, centers)[0]
        return KMeansResult(centers, labels, 0.0)
    best, best_key = None, None
    floor = min_cluster_frac * len(X) / M
    for _ in range(max(1, restarts)):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            centers, _ = kmeans2(X, M, iter=iters, minit="++", rng=rng)
        labels, dist = vq(X, centers)
        cost = float(np.sum(dist**2))
        key = (bool(np.bincount(labels, minlength=M).min() < floor), cost)
        if best is None or key < best_key:
            best, best_key = KMeansResult(centers, labels, cost), key
    return best


def nearest_l1(centers: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Index of the l1-nearest center for each row of ``p``; ties go to the lowest index."""
    d = np.abs(p[:, None, :] - centers[None]).sum(-1)
    return np.argmin(d, axis=1)


@dataclass
class PredictionSet:
    """One-step predictions at the last two steps of each rolled episode.

    ``p_prev`` is taken at state ``s_prev`` (time H-1) and ``p_last`` at
    ``s_last`` (time H). Entries are clamped to [0, 1]. ``contexts`` holds
    the simulator's true context and is used only for diagnostics.
    """

    s1: np.ndarray
    s_prev: np.ndarray
    p_prev: np.ndarray
    s_last: np.ndarray
    p_last: np.ndarray
    contexts: np.ndarray
    skipped: int = 0

    def __len__(self):
        return len(self.s1)


def _psr_batch_states(params: PSRParams, states, actions, rewards, upto: int):
    """Vectorized PSR filtering; yields (t, b_t, bad) for t = 0..upto."""
    S = params.S
    s1 = states[:, 0]
    b = params.b1[s1]
    z = np.einsum("ni,ni->n", params.binf[s1], b)
    bad = np.abs(z) < NORMALIZER_TOL
    b = b / np.where(bad, 1.0, z)[:, None]
    yield 0, b, bad
    for t in range(upto):
        s, a, r, sn = states[:, t], actions[:, t], rewards[:, t], states[:, t + 1]
        v = np.einsum("nij,nj->ni", params.B[s, a, r * S + sn], b)
        z = np.einsum("ni,ni->n", params.binf[sn], v)
        bad = bad | (np.abs(z) < NORMALIZER_TOL) | ~np.isfinite(z)
        b = v / np.where(bad, 1.0, z)[:, None]
        b[bad] = 0.0
        yield t + 1, b, bad


def _predict_batch(params: PSRParams, b: np.ndarray, s: np.ndarray) -> np.ndarray:
    nxt = np.arange(2 * params.S) % params.S
    v = np.einsum("naoij,nj->naoi", params.B[s], b)
    p = np.einsum("naoi,oi->nao", v, params.binf[nxt]).reshape(len(s), -1)
    return np.clip(p, 0.0, 1.0)


def collect_predictions(env: LMDPModel, params: PSRParams, n_episodes: int, H: int,
                        rng: np.random.Generator,
                        policy_table: Optional[np.ndarray] = None) -> PredictionSet:
    """Roll ``n_episodes`` exploration episodes and record predictions at steps H-1 and H.

    ``policy_table`` (S, A) drives the first H-2 actions; the action from
    step H-1 to H is always uniform. Episodes whose PSR normalizer vanishes
    are skipped and counted.
    """
    if H < 2:
        raise ConfigurationError("clustering horizon must be at least 2")
    n = int(n_episodes)
    d = env.A * 2 * env.S
    if n == 0:
        e = np.zeros(0, dtype=np.int64)
        return PredictionSet(e, e, np.zeros((0, d)), e, np.zeros((0, d)), e)
    table = None
    if policy_table is not None:
        table = np.full((H - 1, env.S, env.A), 1.0 / env.A)
        table[: H - 2] = policy_table
    batch = sample_batch(env.with_horizon(H - 1), n, rng, table=table)
    st, ac, rw = batch.states, batch.actions, batch.rewards
    b_prev = b_last = bad = None
    for t, b, bad in _psr_batch_states(params, st, ac, rw, H - 1):
        if t == H - 2:
            b_prev = b.copy()
        if t == H - 1:
            b_last = b
    ok = ~bad
    s_prev, s_last = st[ok, H - 2], st[ok, H - 1]
    return PredictionSet(
        s1=st[ok, 0], s_prev=s_prev, p_prev=_predict_batch(params, b_prev[ok], s_prev),
        s_last=s_last, p_last=_predict_batch(params, b_last[ok], s_last),
        contexts=batch.contexts[ok], skipped=int(bad.sum()))


def cluster_states(preds: PredictionSet, S: int, M: int, restarts: int,
                   rng: np.random.Generator, min_cluster_frac: float = 0.0) -> dict:
    """k-means++ per ending state over the time-(H-1) points; states with < M points are skipped."""
    out = {}
    for s in range(S):
        pts = preds.p_prev[preds.s_prev == s]
        if len(pts) >= M:
            out[s] = kmeanspp(pts, M, restarts, rng, min_cluster_frac=min_cluster_frac)
    return out


@dataclass
class LabelGraph:
    nodes: list  # (state, center) pairs
    edges: dict  # {(node_a, node_b): count}
    components: list  # sorted lists of nodes
    conflicts: list  # components holding two centers of one state
    context_of: dict = field(default_factory=dict)  # node -> context id

    @property
    def consistent(self) -> bool:
        return not self.conflicts


LINK_RULES = ("mutual", "all")


def link_labels(preds: PredictionSet, clusters: dict, M: int, min_edge_count: int = 1,
                rule: str = "mutual") -> LabelGraph:
    """Union (state, center) nodes of consecutive points that land on different states.

    ``rule="all"`` merges along every observed pair. ``rule="mutual"`` keeps,
    for each ordered state pair, only center pairs that are the most frequent
    partner of each other, so a handful of misassigned points cannot merge
    two contexts.
    """
    if rule not in LINK_RULES:
        raise ConfigurationError(f"unknown link rule {rule!r}")
    nodes = [(s, c) for s in sorted(clusters) for c in range(M)]
    edges: dict = {}
    kept = []
    keep = preds.s_prev != preds.s_last
    pairs = sorted({(int(a), int(b)) for a, b in zip(preds.s_prev[keep], preds.s_last[keep])})
    for s_a, s_b in pairs:
        if s_a not in clusters or s_b not in clusters:
            continue
        sel = keep & (preds.s_prev == s_a) & (preds.s_last == s_b)
        C = np.zeros((M, M), dtype=np.int64)
        np.add.at(C, (nearest_l1(clusters[s_a].centers, preds.p_prev[sel]),
                      nearest_l1(clusters[s_b].centers, preds.p_last[sel])), 1)
        for i, j in zip(*np.nonzero(C)):
            key = tuple(sorted([(s_a, int(i)), (s_b, int(j))]))
            edges[key] = edges.get(key, 0) + int(C[i, j])
            if C[i, j] < min_edge_count:
                continue
            if rule == "mutual" and (C[i, j] < C[i].max() or C[i, j] < C[:, j].max()):
                continue
            kept.append(key)
    ds = DisjointSet(nodes)
    for u, v in kept:
        ds.merge(u, v)
    comps = sorted(sorted(c) for c in ds.subsets())
    conflicts = []
    for comp in comps:
        states = [s for s, _ in comp]
        if len(states) != len(set(states)):
            conflicts.append(comp)
    ctx = {}
    if not conflicts:
        for k, comp in enumerate(comps):
            for node in comp:
                ctx[node] = k
    return LabelGraph(nodes, edges, comps, conflicts, ctx)


def assemble_model(clusters: dict, graph: LabelGraph, nu_preds: PredictionSet,
                   M: int, S: int, A: int, H: int) -> LMDPModel:
    """Read per-context transitions and rewards off the linked centers; nu from time-H labels."""
    if not graph.consistent:
        raise LabelingFailure(graph.conflicts)
    gaps = []
    if len(graph.components) != M:
        gaps.append(f"{len(graph.components)} components instead of {M}")
    for k, comp in enumerate(graph.components):
        missing = sorted(set(range(S)) - {s for s, _ in comp})
        if missing:
            gaps.append({"component": k, "missing_states": missing})
    if gaps:
        raise IncompleteModelError(gaps)
    P = np.empty((M, S, A, 2, S))
    for (s, c), m in graph.context_of.items():
        P[m, s] = clusters[s].centers[c].reshape(A, 2, S)
    T = P.sum(axis=3)
    R = P.sum(axis=4)
    nu_counts = np.zeros((M, S))
    for s in range(S):
        sel = nu_preds.s_last == s
        if not sel.any():
            continue
        lab = nearest_l1(clusters[s].centers, nu_preds.p_last[sel])
        ctx = np.array([graph.context_of[(s, int(c))] for c in lab])
        np.add.at(nu_counts, (ctx, nu_preds.s1[sel]), 1.0)

    def rows(x):
        tot = x.sum(-1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(tot > 0, x / tot, 1.0 / x.shape[-1])

    return LMDPModel(rows(T), rows(R), rows(nu_counts), H)


@dataclass
class RecoveryResult:
    model: LMDPModel
    params: PSRParams
    clusters: dict
    graph: LabelGraph
    diagnostics: list

    def write_diagnostics(self, path) -> None:
        atomic_write_text(path, jsonl_lines(self.diagnostics))


def split_thirds(n1: int) -> tuple:
    k = n1 // 3
    return (k + n1 % 3, k, k)


def recover_lmdp(env: LMDPModel, sets: PSRSets, n0: int, n1: int, H: int,
                 rng: np.random.Generator, restarts: int = 10, sigma_floor: float = 1e-8,
                 policy_table: Optional[np.ndarray] = None,
                 min_edge_count: int = 1, link_rule: str = "mutual",
                 min_cluster_frac: float = 0.25) -> RecoveryResult:
    """Short-episode PSR learning, then clustering and cross-state linking.

    Failures raise ``StageError`` tagged with the stage name; the diagnostics
    collected so far ride along on the exception.
    """
    M, S, A = env.M, env.S, env.A
    diag: list = []

    def fail(stage, err):
        diag.append({"stage": stage, "status": "error", "error": type(err).__name__,
                     "message": str(err)})
        raise StageError(stage, err, diag) from err

    stage = "psr-estimate"
    try:
        batch = sample_short_episodes(env, sets, n0, rng, policy_table)
        mats = estimate_matrices(batch, sets)
        rep = rank_diagnostics(mats, M)
        diag.append({"stage": stage, "status": "ok", "n0": int(n0),
                     "sigma_M": rep.sigma_P.tolist(), "p_end": rep.p_end.tolist()})
        stage = "spectral"
        params = spectral_learn(mats, M, sigma_floor)
        diag.append({"stage": stage, "status": "ok", "sigma": params.sigma.tolist()})
        stage = "collect"
        n_a, n_b, n_c = split_thirds(int(n1))
        p1 = collect_predictions(env, params, n_a, H, rng, policy_table)
        p2 = collect_predictions(env, params, n_b, H, rng, policy_table)
        p3 = collect_predictions(env, params, n_c, H, rng, policy_table)
        diag.append({"stage": stage, "status": "ok", "episodes": [n_a, n_b, n_c],
                     "skipped": [p1.skipped, p2.skipped, p3.skipped]})
        stage = "cluster"
        clusters = cluster_states(p1, S, M, restarts, rng, min_cluster_frac)
        diag.append({"stage": stage, "status": "ok",
                     "states": sorted(clusters),
                     "costs": {str(s): c.cost for s, c in sorted(clusters.items())}})
        stage = "link"
        graph = link_labels(p2, clusters, M, min_edge_count, link_rule)
        diag.append({"stage": stage, "status": "ok" if graph.consistent else "FAIL",
                     "components": [[list(n) for n in comp] for comp in graph.components],
                     "edges": len(graph.edges)})
        if not graph.consistent:
            raise LabelingFailure(graph.conflicts)
        stage = "assemble"
        model = assemble_model(clusters, graph, p3, M, S, A, env.H)
        diag.append({"stage": stage, "status": "ok",
                     "coverage": {str(s): M for s in sorted(clusters)}})
    except LMDPError as err:
        fail(stage, err)
    return RecoveryResult(model, params, clusters, graph, diag)
