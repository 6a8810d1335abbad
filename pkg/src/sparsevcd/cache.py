"""Per-layer/per-head key-value store with logical retention masks, merged-token
records, visual-token flags, and attention accumulators.

A cache instance is owned by exactly one decode session. Two maintenance modes:

* ``logical`` — every token stays physically present; pruning is a per-layer
  boolean mask plus virtual merged-token records, recomputed per step.
* ``compacted`` — pruned rows are physically evicted and each cluster is
  appended as one aggregate row (exempt from later pruning).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from sparsevcd.numerics import matvec, stable_softmax


class _Rows:
    """Growable (n, dim) float64 buffer."""

    def __init__(self, dim: int, cap: int = 16):
        self.dim = dim
        self.data = np.zeros((cap, dim))
        self.n = 0

    def append(self, row: np.ndarray) -> int:
        if self.n == self.data.shape[0]:
            grown = np.zeros((2 * self.data.shape[0], self.dim))
            grown[: self.n] = self.data[: self.n]
            self.data = grown
        self.data[self.n] = row
        self.n += 1
        return self.n - 1

    def view(self) -> np.ndarray:
        return self.data[: self.n]

    def replace(self, rows: np.ndarray) -> None:
        self.n = rows.shape[0]
        cap = max(16, self.n)
        self.data = np.zeros((cap, self.dim))
        self.data[: self.n] = rows

    def clone(self) -> "_Rows":
        out = _Rows(self.dim, self.data.shape[0])
        out.data = self.data.copy()
        out.n = self.n
        return out


class _Scalars:
    """Growable 1-d float64 buffer."""

    def __init__(self, cap: int = 16):
        self.data = np.zeros(cap)
        self.n = 0

    def append(self, value: float) -> None:
        if self.n == self.data.shape[0]:
            grown = np.zeros(2 * self.data.shape[0])
            grown[: self.n] = self.data[: self.n]
            self.data = grown
        self.data[self.n] = value
        self.n += 1

    def view(self) -> np.ndarray:
        return self.data[: self.n]

    def replace(self, values: np.ndarray) -> None:
        self.n = values.shape[0]
        self.data = np.zeros(max(16, self.n))
        self.data[: self.n] = values

    def clone(self) -> "_Scalars":
        out = _Scalars(self.data.shape[0])
        out.data = self.data.copy()
        out.n = self.n
        return out


@dataclass
class MergedRecord:
    """One cluster of pruned tokens merged into a virtual aggregate row."""

    members: np.ndarray          # physical row indices of the members
    weights: np.ndarray          # merge weights, sum to 1
    keys: list[np.ndarray]       # aggregate key per head
    values: list[np.ndarray]     # aggregate value per head
    c: list[float]               # merge-weighted member column accumulators
    r: list[float]               # merge-weighted member visual-mass accumulators
    visual_weight: float         # total merge weight carried by visual members


@dataclass
class SupportView:
    """Attention support for one (layer, head): retained raws then aggregates."""

    keys: np.ndarray
    values: np.ndarray
    c: np.ndarray
    raw_idx: np.ndarray          # physical indices of the retained raw entries
    records: list[MergedRecord]  # logical-mode virtual aggregates, in order

    @property
    def size(self) -> int:
        return self.keys.shape[0]

    @property
    def n_raw(self) -> int:
        return self.raw_idx.shape[0]


@dataclass
class CompactStats:
    evicted: int = 0
    aggregates: int = 0
    no_op: bool = False


class _LayerState:
    def __init__(self, heads: int, dim: int):
        self.keys = [_Rows(dim) for _ in range(heads)]
        self.values = [_Rows(dim) for _ in range(heads)]
        self.mask = _Scalars()      # 1.0 retained / 0.0 pruned, raw+agg rows
        self.visual = _Scalars()
        self.is_agg = _Scalars()
        self.born = _Scalars()      # logical index; -1 for aggregates
        self.c = [_Scalars() for _ in range(heads)]
        self.r = [_Scalars() for _ in range(heads)]
        self.raw_appends = 0        # raw tokens ever appended, eviction-proof
        self.raw_present = 0        # raw rows physically present
        self.merged: list[MergedRecord] = []
        self.merged_ph: dict[int, list[MergedRecord]] = {}
        self.mask_ph: dict[int, np.ndarray] = {}

    @property
    def n_rows(self) -> int:
        return self.keys[0].n


class KvCache:
    """Session-owned KV store; see module docstring for the two modes."""

    def __init__(self, layers: int, heads: int, dim: int, mode: str = "logical",
                 accumulate_raw_scores: bool = False):
        if layers < 1 or heads < 1 or dim < 1:
            raise ValueError("layers, heads and dim must be positive")
        if mode not in ("logical", "compacted"):
            raise ValueError(f"unknown cache mode {mode!r}")
        self.layers = layers
        self.heads = heads
        self.dim = dim
        self.mode = mode
        self.accumulate_raw_scores = accumulate_raw_scores
        self.sqrt_dim = math.sqrt(dim)
        self._layers = [_LayerState(heads, dim) for _ in range(layers)]
        self.n_logical = 0
        self.peak_rows = 0

    # ------------------------------------------------------------------ rows

    def append(self, layer: int, head: int, key, value, visual: bool = False) -> int:
        """Append one token's key/value for (layer, head); returns the row index.

        The logical length advances once per token (on the layer-0/head-0
        append), not once per head.
        """
        key = np.asarray(key, dtype=np.float64)
        value = np.asarray(value, dtype=np.float64)
        if key.shape != (self.dim,) or value.shape != (self.dim,):
            raise ValueError(
                f"append: expected vectors of dim {self.dim}, got {key.shape} and {value.shape}"
            )
        st = self._layers[layer]
        if head == 0:
            st.mask.append(1.0)
            st.visual.append(1.0 if visual else 0.0)
            st.is_agg.append(0.0)
            st.born.append(float(st.raw_appends))
            st.raw_appends += 1
            st.raw_present += 1
            for h in range(self.heads):
                st.c[h].append(0.0)
                st.r[h].append(0.0)
            if layer == 0:
                self.n_logical += 1
        else:
            if st.keys[head].n != st.keys[0].n - 1:
                raise ValueError("append: heads must be filled in order 0..H-1 per token")
        pos = st.keys[head].append(key)
        st.values[head].append(value)
        if head == self.heads - 1:
            self.peak_rows = max(self.peak_rows, st.n_rows)
        return pos

    def rows(self, layer: int) -> int:
        return self._layers[layer].n_rows

    def max_rows(self) -> int:
        return max(st.n_rows for st in self._layers)

    # ------------------------------------------------------------- flags/sets

    def visual_rows(self, layer: int) -> np.ndarray:
        st = self._layers[layer]
        return np.nonzero(st.visual.view() > 0.5)[0]

    def visual_flags(self, layer: int) -> np.ndarray:
        return self._layers[layer].visual.view() > 0.5

    def has_visual(self, layer: int = 0) -> bool:
        return bool(np.any(self._layers[layer].visual.view() > 0.5))

    def raw_rows(self, layer: int) -> np.ndarray:
        st = self._layers[layer]
        return np.nonzero(st.is_agg.view() < 0.5)[0]

    def raw_present(self, layer: int) -> int:
        return self._layers[layer].raw_present

    def mask_view(self, layer: int, head: int | None = None) -> np.ndarray:
        st = self._layers[layer]
        if head is not None and head in st.mask_ph:
            return st.mask_ph[head]
        return st.mask.view() > 0.5

    def born_view(self, layer: int) -> np.ndarray:
        return self._layers[layer].born.view()

    def c_view(self, layer: int, head: int) -> np.ndarray:
        return self._layers[layer].c[head].view()

    def r_view(self, layer: int, head: int) -> np.ndarray:
        return self._layers[layer].r[head].view()

    def key_rows(self, layer: int, head: int) -> np.ndarray:
        return self._layers[layer].keys[head].view()

    def value_rows(self, layer: int, head: int) -> np.ndarray:
        return self._layers[layer].values[head].view()

    # -------------------------------------------------------------- attention

    def support(self, layer: int, head: int) -> SupportView:
        """Current attention support: retained rows followed by virtual aggregates."""
        st = self._layers[layer]
        mask = self.mask_view(layer, head)
        K = st.keys[head].view()
        V = st.values[head].view()
        c = st.c[head].view()
        if head in st.mask_ph:
            records = st.merged_ph.get(head, [])
        else:
            records = st.merged
        if mask.all() and not records:
            return SupportView(K, V, c, np.arange(K.shape[0]), [])
        idx = np.nonzero(mask)[0]
        keys = K[idx]
        values = V[idx]
        cs = c[idx]
        if records:
            keys = np.vstack([keys] + [rec.keys[head][None, :] for rec in records])
            values = np.vstack([values] + [rec.values[head][None, :] for rec in records])
            cs = np.concatenate([cs, np.array([rec.c[head] for rec in records])])
        return SupportView(keys, values, cs, idx, list(records))

    def masked_attention(self, layer: int, head: int, q) -> tuple[np.ndarray, np.ndarray]:
        """Scaled-dot attention over the current support.

        Returns (attention row, raw scaled scores); pruned tokens contribute
        nothing. Raises on empty support.
        """
        q = np.asarray(q, dtype=np.float64)
        if q.shape != (self.dim,):
            raise ValueError(f"masked_attention: query dim {q.shape} != {self.dim}")
        sup = self.support(layer, head)
        if sup.size == 0:
            raise ValueError("masked_attention: empty support")
        scores = matvec(sup.keys, q) / self.sqrt_dim
        return stable_softmax(scores), scores

    def attention_error(self, layer: int, head: int, q) -> float:
        """Squared attention deviation of the current mask:
        sum over pruned raw rows of <K_i, q>^2 (aggregates excluded)."""
        q = np.asarray(q, dtype=np.float64)
        st = self._layers[layer]
        mask = self.mask_view(layer, head)
        raw = st.is_agg.view() < 0.5
        pruned = np.nonzero(raw & ~mask)[0]
        if pruned.shape[0] == 0:
            return 0.0
        ip = matvec(st.keys[head].view()[pruned], q)
        return float(np.add.accumulate(ip * ip)[-1])

    # ----------------------------------------------------------- accumulators

    def record_attention(self, layer: int, head: int, row: np.ndarray,
                         scores: np.ndarray, support: SupportView,
                         query_row: int) -> None:
        """Fold one step's attention row into the accumulators.

        ``row`` indexes the support; column sums get the row (or the raw
        scores when the cache accumulates raw scores), with aggregate entries
        redistributed to their members by merge weight. The querying token's
        visual-mass entry gets the probability mass landing on visual rows.
        """
        st = self._layers[layer]
        contrib = scores if self.accumulate_raw_scores else row
        n_raw = support.n_raw
        c = st.c[head]
        c.data[: c.n][support.raw_idx] += contrib[:n_raw]
        vis_flags = st.visual.view()[support.raw_idx] > 0.5
        vis_mass = float(np.add.accumulate(row[:n_raw] * vis_flags)[-1]) if n_raw else 0.0
        for j, rec in enumerate(support.records):
            amount = contrib[n_raw + j]
            c.data[: c.n][rec.members] += amount * rec.weights
            vis_mass += float(row[n_raw + j]) * rec.visual_weight
        st.r[head].data[query_row] += vis_mass

    # ---------------------------------------------------------- sparsification

    def set_sparsification(self, layer: int, mask: np.ndarray,
                           records: list[MergedRecord], head: int | None = None) -> None:
        """Install a raw-row retention mask plus merged records for a layer.

        ``head=None`` installs the shared per-layer mask; an integer head
        installs a per-head overlay (logical mode only).
        """
        st = self._layers[layer]
        mask = np.asarray(mask, dtype=bool)
        if mask.shape[0] != st.n_rows:
            raise ValueError("set_sparsification: mask length must equal row count")
        if head is None:
            st.mask.data[: st.mask.n] = mask.astype(np.float64)
            st.merged = list(records)
        else:
            st.mask_ph[head] = mask
            st.merged_ph[head] = list(records)

    def clear_sparsification(self, layer: int) -> None:
        st = self._layers[layer]
        st.mask.data[: st.mask.n] = 1.0
        st.merged = []
        st.mask_ph.clear()
        st.merged_ph.clear()

    def has_pending_prune(self) -> bool:
        return any(not self.mask_view(layer).all() for layer in range(self.layers))

    def compact(self) -> CompactStats:
        """Physically apply pending masks: evict pruned raws, materialise one
        aggregate row per merged record, reset masks to all-retained."""
        stats = CompactStats()
        if not self.has_pending_prune():
            stats.no_op = True
            return stats
        for layer in range(self.layers):
            st = self._layers[layer]
            if st.mask_ph:
                raise ValueError("compact: per-head masks cannot be compacted")
            mask = st.mask.view() > 0.5
            if mask.all() and not st.merged:
                continue
            keep = np.nonzero(mask)[0]
            records = st.merged
            stats.evicted += int(st.n_rows - keep.shape[0])
            stats.aggregates += len(records)
            for h in range(self.heads):
                new_k = st.keys[h].view()[keep]
                new_v = st.values[h].view()[keep]
                new_c = st.c[h].view()[keep]
                new_r = st.r[h].view()[keep]
                if records:
                    new_k = np.vstack([new_k] + [rec.keys[h][None, :] for rec in records])
                    new_v = np.vstack([new_v] + [rec.values[h][None, :] for rec in records])
                    new_c = np.concatenate([new_c, np.array([rec.c[h] for rec in records])])
                    new_r = np.concatenate([new_r, np.array([rec.r[h] for rec in records])])
                st.keys[h].replace(new_k)
                st.values[h].replace(new_v)
                st.c[h].replace(new_c)
                st.r[h].replace(new_r)
            n_agg = len(records)
            st.mask.replace(np.ones(keep.shape[0] + n_agg))
            st.visual.replace(np.concatenate([st.visual.view()[keep], np.zeros(n_agg)]))
            st.is_agg.replace(np.concatenate([st.is_agg.view()[keep], np.ones(n_agg)]))
            st.born.replace(np.concatenate([st.born.view()[keep], -np.ones(n_agg)]))
            st.raw_present = int((st.is_agg.view() < 0.5).sum())
            st.merged = []
            self.peak_rows = max(self.peak_rows, st.n_rows)
        return stats

    # ----------------------------------------------------------------- misc

    def clone(self) -> "KvCache":
        out = KvCache(self.layers, self.heads, self.dim, self.mode,
                      self.accumulate_raw_scores)
        out.n_logical = self.n_logical
        out.peak_rows = self.peak_rows
        out._layers = []
        for st in self._layers:
            new = _LayerState(self.heads, self.dim)
            new.keys = [b.clone() for b in st.keys]
            new.values = [b.clone() for b in st.values]
            new.mask = st.mask.clone()
            new.visual = st.visual.clone()
            new.is_agg = st.is_agg.clone()
            new.born = st.born.clone()
            new.c = [b.clone() for b in st.c]
            new.r = [b.clone() for b in st.r]
            new.raw_appends = st.raw_appends
            new.raw_present = st.raw_present
            new.merged = [MergedRecord(rec.members.copy(), rec.weights.copy(),
                                       [k.copy() for k in rec.keys],
                                       [v.copy() for v in rec.values],
                                       list(rec.c), list(rec.r), rec.visual_weight)
                          for rec in st.merged]
            new.mask_ph = {h: m.copy() for h, m in st.mask_ph.items()}
            new.merged_ph = {h: list(rs) for h, rs in st.merged_ph.items()}
            out._layers.append(new)
        return out

    def dump_step_record(self, layer: int) -> dict:
        """JSON-serialisable snapshot of a layer's retention state."""
        st = self._layers[layer]
        return {
            "layer": layer,
            "rows": int(st.n_rows),
            "mask": [int(v) for v in (st.mask.view() > 0.5)],
            "visual": [int(v) for v in (st.visual.view() > 0.5)],
            "aggregates": len(st.merged) + int(st.is_agg.view().sum()),
        }
