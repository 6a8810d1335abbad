"""Visual-aware token selection: saliency scores, exact top-S masks, and
density-peak clustering/merging of pruned tokens."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sparsevcd.cache import KvCache
from sparsevcd.errors import ConfigError
from sparsevcd.numerics import stable_softmax, weighted_sum_rows

DENSITY_EPS = 1e-8


@dataclass
class SaliencyScores:
    """Per-token attention relevance ``g``, visual saliency ``p`` and the
    trade-off weight; the aggregate score is ``g + lam * p``."""

    g: np.ndarray
    p: np.ndarray
    lam: float

    def __post_init__(self):
        self.g = np.asarray(self.g, dtype=np.float64)
        self.p = np.asarray(self.p, dtype=np.float64)
        if self.g.shape != self.p.shape:
            raise ValueError("g and p must have equal lengths")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")

    @property
    def delta(self) -> np.ndarray:
        return self.g + self.lam * self.p

    def __len__(self) -> int:
        return int(self.g.shape[0])


@dataclass
class SparsifyMask:
    """Binary retention mask with its budget and protected recency window."""

    flags: np.ndarray
    retained: int
    w_recent: int

    def __post_init__(self):
        self.flags = np.asarray(self.flags, dtype=bool)


@dataclass
class ClusterAssignment:
    """Partition of the pruned tokens: canonical labels plus per-cluster
    (center, ascending member indices, softmax-of-delta merge weights)."""

    labels: np.ndarray
    centers: np.ndarray
    members: list[np.ndarray]
    weights: list[np.ndarray]

    @property
    def n_clusters(self) -> int:
        return len(self.members)


def visual_saliency(cache: KvCache, layers) -> np.ndarray:
    """Softmax-normalised visual saliency over a cache's tokens.

    ``r_i`` is the attention mass token ``i``'s query rows have placed on
    visual-key columns, averaged over the given layers and all heads. The
    requested layers must hold aligned row sets (always true in logical mode).
    """
    layers = list(layers)
    if not layers:
        raise ValueError("visual_saliency: need at least one layer")
    if not cache.has_visual(layers[0]):
        raise ValueError("visual_saliency: no visual tokens")
    n = cache.rows(layers[0])
    if n == 0:
        raise ValueError("visual_saliency: empty cache")
    acc = np.zeros(n)
    count = 0
    for ell in layers:
        if cache.rows(ell) != n:
            raise ValueError("visual_saliency: row sets diverge across the requested layers")
        for h in range(cache.heads):
            acc = acc + cache.r_view(ell, h)
            count += 1
    return stable_softmax(acc / count)


def layer_visual_saliency(cache: KvCache, layer: int) -> np.ndarray:
    """Layer-local saliency, used when compaction has made row sets diverge."""
    n = cache.rows(layer)
    acc = np.zeros(n)
    for h in range(cache.heads):
        acc = acc + cache.r_view(layer, h)
    return stable_softmax(acc / cache.heads)


def select_topS(scores: SaliencyScores, s: int, w_recent: int = 0) -> SparsifyMask:
    """Exact solution of the budgeted retention problem: keep the ``s`` tokens
    with the highest aggregate saliency (ties keep the earlier position).

    With ``w_recent > 0`` the trailing window is force-retained and the
    remaining budget is filled by top saliency; with ``w_recent = 0`` the
    result is the unconstrained optimum of the sparsification objective.
    """
    n = len(scores)
    if not 1 <= s <= n:
        raise ConfigError(f"retention budget {s} outside [1, {n}]")
    if w_recent > s:
        raise ConfigError("recency window cannot exceed the retention budget")
    flags = np.zeros(n, dtype=bool)
    if w_recent > 0:
        flags[n - w_recent:] = True
    budget = s - int(flags.sum())
    if budget > 0:
        open_idx = np.nonzero(~flags)[0]
        delta = scores.delta[open_idx]
        order = np.lexsort((open_idx, -delta))
        flags[open_idx[order[:budget]]] = True
    return SparsifyMask(flags, s, w_recent)


def objective_value(mask, scores: SaliencyScores) -> float:
    """Sparsification objective evaluated literally:
    sum_i (1 - M_i) * g_i  -  lam * sum_i M_i * p_i."""
    flags = mask.flags if isinstance(mask, SparsifyMask) else np.asarray(mask, dtype=bool)
    if flags.shape[0] != len(scores):
        raise ValueError("mask and scores lengths differ")
    m = flags.astype(np.float64)
    keep_term = float(np.add.accumulate((1.0 - m) * scores.g)[-1]) if len(scores) else 0.0
    sal_term = float(np.add.accumulate(m * scores.p)[-1]) if len(scores) else 0.0
    return keep_term - scores.lam * sal_term


def _pairwise_distances(points: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - points[None, :, :]
    return np.sqrt(np.add.accumulate(diff * diff, axis=2)[:, :, -1])


def cluster_pruned(keys, deltas, k: int, rho_merge: float = 0.25,
                   n_clusters: int | None = None) -> ClusterAssignment:
    """k-nearest-neighbour density-peak clustering of the pruned tokens.

    Density is the reciprocal mean distance to the k nearest peers (plus a
    small epsilon); each point's separation is its distance to the nearest
    strictly-denser point (the global peak gets the maximum pairwise
    distance). Centers are the top points by density * separation; the rest
    inherit, in decreasing-density order, the cluster of their nearest denser
    point. All ties break on the lower index.
    """
    points = np.asarray(keys, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 1:
        raise ValueError("cluster_pruned: need a non-empty 2-d key array")
    deltas = np.asarray(deltas, dtype=np.float64)
    n = points.shape[0]
    if deltas.shape != (n,):
        raise ValueError("cluster_pruned: one saliency score per pruned token")
    if k < 1:
        raise ConfigError("knn k must be at least 1")
    if n == 1:
        return ClusterAssignment(np.zeros(1, dtype=np.int64), np.zeros(1, dtype=np.int64),
                                 [np.array([0])], [np.array([1.0])])
    k = min(k, n - 1)
    dist = _pairwise_distances(points)
    rho = np.empty(n)
    for i in range(n):
        nearest = np.sort(np.delete(dist[i], i))[:k]
        rho[i] = 1.0 / (DENSITY_EPS + float(np.mean(nearest)))

    # total order: higher density first, lower index wins ties
    rank_order = np.lexsort((np.arange(n), -rho))
    rank_of = np.empty(n, dtype=np.int64)
    rank_of[rank_order] = np.arange(n)

    sep = np.empty(n)
    nearest_denser = np.full(n, -1, dtype=np.int64)
    max_pairwise = float(dist.max())
    for pos, i in enumerate(rank_order):
        if pos == 0:
            sep[i] = max_pairwise
            continue
        higher = rank_order[:pos]
        d = dist[i, higher]
        best = int(np.lexsort((higher, d))[0])
        nearest_denser[i] = higher[best]
        sep[i] = d[best]

    if n_clusters is None:
        n_clusters = max(1, int(np.ceil(rho_merge * n)))
    n_clusters = min(n_clusters, n)
    gamma = rho * sep
    center_order = np.lexsort((np.arange(n), -gamma))
    centers = np.sort(center_order[:n_clusters])

    labels = np.full(n, -1, dtype=np.int64)
    for cid, c in enumerate(centers):
        labels[c] = cid
    for i in rank_order:
        if labels[i] >= 0:
            continue
        j = nearest_denser[i]
        if j < 0:
            # densest point that is not a center: join the nearest center
            d = dist[i, centers]
            j = centers[int(np.lexsort((centers, d))[0])]
        labels[i] = labels[j]

    members = []
    weights = []
    for cid in range(n_clusters):
        idx = np.nonzero(labels == cid)[0]
        members.append(idx)
        weights.append(stable_softmax(deltas[idx]))
    return ClusterAssignment(labels, centers, members, weights)


def merge_clusters(assignment: ClusterAssignment, keys, values):
    """Weighted-sum aggregate (key, value) per cluster using the assignment's
    merge weights."""
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    out = []
    for idx, w in zip(assignment.members, assignment.weights):
        agg_k = weighted_sum_rows(w, keys[idx])
        agg_v = weighted_sum_rows(w, values[idx])
        out.append((agg_k, agg_v))
    return out
