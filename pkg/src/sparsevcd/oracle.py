"""Independent brute-force reference implementations, used only by tests and
expected-value generation.

Everything here deliberately shares no code with the engine paths it
validates: no imports from the cache, selection, calibration or decoding
modules, and all linear algebra is written out locally (with the same
documented left-to-right accumulation convention the engine follows, so
bit-exact comparisons are meaningful). Keep it that way.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from sparsevcd.models import RMS_EPS, ImageDescriptor, ToyTransformer

ENUMERATION_LIMIT = 20


@dataclass
class OracleReport:
    """Comparison of an engine result against its oracle."""

    instance: str
    oracle_result: object
    engine_result: object
    max_deviation: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_deviation <= self.tolerance


def _dot(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.add.accumulate(a * b)[-1])


def _mv(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.add.accumulate(m * v, axis=1)[:, -1]


def _softmax(x: np.ndarray) -> np.ndarray:
    m = np.max(x)
    e = np.exp(x - m)
    return e / float(np.add.accumulate(e)[-1])


def brute_force_mask(q, keys, p, lam: float, s: int):
    """Exhaustive minimiser of the sparsification objective.

    Enumerates every size-``s`` retention set, evaluates
    ``sum_i ((1 - M_i) <K_i, q>)^2 - M_i * lam * P_i`` literally, and returns
    ``(mask, objective)`` for the minimum; ties keep the first retention set
    in ascending lexicographic order.
    """
    keys = np.asarray(keys, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    n = keys.shape[0]
    if n > ENUMERATION_LIMIT:
        raise ValueError(f"brute_force_mask: refusing L={n} > {ENUMERATION_LIMIT}")
    if not 1 <= s <= n:
        raise ValueError("brute_force_mask: budget outside [1, L]")
    ip = [_dot(keys[i], q) for i in range(n)]
    g = [v * v for v in ip]
    lp = [lam * p[i] for i in range(n)]
    best_keep = None
    best_obj = math.inf
    for keep in itertools.combinations(range(n), s):
        obj = 0.0
        kpos = 0
        for i in range(n):
            if kpos < s and keep[kpos] == i:
                obj -= lp[i]
                kpos += 1
            else:
                obj += g[i]
        if obj < best_obj:
            best_obj = obj
            best_keep = keep
    mask = np.zeros(n, dtype=bool)
    mask[list(best_keep)] = True
    return mask, best_obj


def reference_full_decode(model: ToyTransformer, prompt_ids, image: ImageDescriptor,
                          max_len: int, eos_id: int = 0) -> list[int]:
    """Cache-free greedy decoding: at every step the attention over the entire
    prefix is recomputed from the model weights. No sparsification, no
    calibration, no fusion."""
    if not isinstance(model, ToyTransformer):
        raise TypeError("reference_full_decode only supports the toy transformer")
    prefix = model.embed_visual(image) + model.embed_text(list(prompt_ids))
    tokens: list[int] = []
    for _ in range(max_len):
        embs = prefix + model.embed_text(tokens)
        hidden = _recompute_last_hidden(model, embs)
        logits = _mv(model.unembedding, hidden)
        chosen = int(np.argmax(logits))
        if chosen == eos_id:
            break
        tokens.append(chosen)
    return tokens


def _recompute_last_hidden(model: ToyTransformer, embs) -> np.ndarray:
    sqrt_d = math.sqrt(model.head_dim)
    keys = [[[] for _ in range(model.heads)] for _ in range(model.layers)]
    vals = [[[] for _ in range(model.heads)] for _ in range(model.layers)]
    hidden = None
    for emb in embs:
        x = np.asarray(emb, dtype=np.float64)
        for ell in range(model.layers):
            xn = x / np.sqrt(np.mean(x * x) + RMS_EPS)
            attn_out = np.zeros(model.d_model)
            for h in range(model.heads):
                q = _mv(model.w_q[ell][h], xn)
                k = _mv(model.w_k[ell][h], xn)
                v = _mv(model.w_v[ell][h], xn)
                keys[ell][h].append(k)
                vals[ell][h].append(v)
                scores = _mv(np.asarray(keys[ell][h]), q) / sqrt_d
                row = _softmax(scores)
                ctx = np.add.accumulate(row[:, None] * np.asarray(vals[ell][h]), axis=0)[-1, :]
                attn_out += _mv(model.w_o[ell][h], ctx)
            x = x + attn_out
            xn2 = x / np.sqrt(np.mean(x * x) + RMS_EPS)
            ff = np.maximum(_mv(model.w_ff1[ell], xn2), 0.0)
            x = x + _mv(model.w_ff2[ell], ff)
        hidden = x
    return hidden


def reference_clustering(points, k: int, n_clusters: int):
    """Density-peak clustering written independently of the engine version,
    with extended-precision (compensated) distance accumulation.

    Returns ``(labels, centers)`` with canonical labels: clusters are numbered
    by ascending center index.
    """
    pts = [list(map(float, p)) for p in points]
    n = len(pts)
    if n > 64:
        raise ValueError("reference_clustering: instance too large")
    if n == 0:
        raise ValueError("reference_clustering: empty instance")
    if n == 1:
        return [0], [0]
    k = max(1, min(k, n - 1))
    n_clusters = max(1, min(n_clusters, n))

    dist = [[0.0] * n for _ in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            sq = math.fsum((a - b) * (a - b) for a, b in zip(pts[i], pts[j]))
            d = math.sqrt(sq)
            dist[i][j] = d
            dist[j][i] = d

    rho = []
    for i in range(n):
        near = sorted(dist[i][j] for j in range(n) if j != i)[:k]
        rho.append(1.0 / (1e-8 + math.fsum(near) / k))

    rank_order = sorted(range(n), key=lambda i: (-rho[i], i))
    max_pair = max(max(row) for row in dist)
    sep = [0.0] * n
    nearest_denser = [-1] * n
    for pos, i in enumerate(rank_order):
        if pos == 0:
            sep[i] = max_pair
            continue
        best = min(rank_order[:pos], key=lambda j: (dist[i][j], j))
        nearest_denser[i] = best
        sep[i] = dist[i][best]

    gamma = [rho[i] * sep[i] for i in range(n)]
    centers = sorted(sorted(range(n), key=lambda i: (-gamma[i], i))[:n_clusters])

    labels = [-1] * n
    for cid, c in enumerate(centers):
        labels[c] = cid
    for i in rank_order:
        if labels[i] >= 0:
            continue
        j = nearest_denser[i]
        if j < 0:
            j = min(centers, key=lambda c: (dist[i][c], c))
        labels[i] = labels[j]
    return labels, centers
