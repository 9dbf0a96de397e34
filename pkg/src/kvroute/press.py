"""KV compression presses: expected-attention scoring, chunk and adaptive pruning."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from kvroute.attention import AttentionTensor

Regime = Literal["agnostic", "aware"]
PressKind = Literal["chunk", "adaptive"]
REGIMES = ("agnostic", "aware")
PRESS_KINDS = ("chunk", "adaptive")

# Products like (1 - 0.7) * 10 land a hair above 3; budgets snap to the integer.
_BUDGET_SLACK = 1e-9


def keep_budget(alpha: float, n: int) -> int:
    """Number of survivors ``ceil((1 - alpha) * n)``, robust to float noise."""
    return max(0, min(n, math.ceil((1.0 - alpha) * n - _BUDGET_SLACK)))


def _check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha


@dataclass(frozen=True, eq=False)
class ScoreTensor:
    """Importance per (layer, KV head, position), shape ``(L, H_KV, S)``."""

    scores: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        if s.ndim != 3:
            raise ValueError(f"scores must be (L, H, S), got {s.shape}")
        if not np.all(np.isfinite(s)) or np.any(s < 0):
            raise ValueError("scores must be finite and nonnegative")
        s = s.copy()
        s.flags.writeable = False
        object.__setattr__(self, "scores", s)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.scores.shape


@dataclass(frozen=True, eq=False)
class SurvivalMask:
    """Surviving KV positions per (layer, KV head); ``keep`` has shape ``(L, H, S)``."""

    keep: np.ndarray
    alpha: float = 0.0
    regime: Regime = "agnostic"
    press_kind: PressKind = "chunk"

    def __post_init__(self):
        k = np.asarray(self.keep, dtype=bool)
        if k.ndim != 3:
            raise ValueError(f"keep must be (L, H, S), got {k.shape}")
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.press_kind not in PRESS_KINDS:
            raise ValueError(f"unknown press kind {self.press_kind!r}")
        _check_alpha(self.alpha)
        k = k.copy()
        k.flags.writeable = False
        object.__setattr__(self, "keep", k)

    @classmethod
    def full(cls, num_layers: int, num_heads: int, seq_len: int, **kw) -> SurvivalMask:
        return cls(np.ones((num_layers, num_heads, seq_len), dtype=bool), **kw)

    @property
    def num_layers(self) -> int:
        return self.keep.shape[0]

    @property
    def num_heads(self) -> int:
        return self.keep.shape[1]

    @property
    def seq_len(self) -> int:
        return self.keep.shape[2]

    def survivors(self, layer: int, head: int) -> list[int]:
        return np.flatnonzero(self.keep[layer, head]).tolist()

    def survives(self, t: int, head: int, layer: int = 0) -> bool:
        if not 0 <= t < self.seq_len:
            raise IndexError(f"position {t} outside [0, {self.seq_len})")
        return bool(self.keep[layer, head, t])

    def __eq__(self, other):
        if not isinstance(other, SurvivalMask):
            return NotImplemented
        return (self.alpha == other.alpha and self.regime == other.regime
                and self.press_kind == other.press_kind
                and self.keep.shape == other.keep.shape
                and bool(np.array_equal(self.keep, other.keep)))

    def to_json(self) -> str:
        layers = [
            [{"head": h, "survivors": self.survivors(l, h)} for h in range(self.num_heads)]
            for l in range(self.num_layers)
        ]
        doc = {"alpha": self.alpha, "regime": self.regime, "press_kind": self.press_kind,
               "seq_len": self.seq_len, "layers": layers}
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> SurvivalMask:
        doc = json.loads(text)
        seq_len = int(doc["seq_len"])
        layers = doc["layers"]
        num_heads = len(layers[0]) if layers else 0
        keep = np.zeros((len(layers), num_heads, seq_len), dtype=bool)
        for l, heads in enumerate(layers):
            if len(heads) != num_heads:
                raise ValueError(f"layer {l} lists {len(heads)} heads, expected {num_heads}")
            for entry in heads:
                surv = entry["survivors"]
                if any(not 0 <= j < seq_len for j in surv):
                    raise IndexError(f"survivor outside [0, {seq_len}) in layer {l}")
                keep[l, int(entry["head"]), surv] = True
        return cls(keep, alpha=float(doc["alpha"]), regime=doc["regime"],
                   press_kind=doc["press_kind"])


def mask_survival(mask: SurvivalMask, t: int, head: int, layer: int = 0) -> int:
    """Indicator ``S_h(t, alpha)``: 1 if position ``t`` survives in ``head``."""
    return int(mask.survives(t, head, layer))


def score_expected_attention(attn: AttentionTensor, query_span: range | tuple[int, int] | None = None,
                             num_kv_heads: int | None = None) -> ScoreTensor:
    """Column means of attention, averaged within each KV group.

    In the agnostic regime (``query_span=None``) every destination row counts;
    in the aware regime only rows inside ``query_span`` do.
    """
    w = np.asarray(attn.weights, dtype=np.float64)
    n_layers, n_heads, seq, _ = w.shape
    n_kv = n_heads if num_kv_heads is None else num_kv_heads
    if n_heads % n_kv:
        raise ValueError("num_kv_heads must divide the attention head count")
    if query_span is None:
        rows = w
    else:
        span = range(*query_span) if isinstance(query_span, tuple) else query_span
        if len(span) == 0:
            raise ValueError("aware scoring needs a non-empty query span")
        if span.start < 0 or span.stop > seq:
            raise IndexError(f"query span {span} outside sequence of length {seq}")
        rows = w[:, :, span.start:span.stop]
    per_head = rows.mean(axis=2)  # (L, H, S)
    grouped = per_head.reshape(n_layers, n_kv, n_heads // n_kv, seq).mean(axis=2)
    return ScoreTensor(grouped)


def _chunk_eviction_order(scores: np.ndarray, chunk_size: int) -> np.ndarray:
    """Eviction order of positions for one head's scores.

    Within a chunk the lowest score goes first (ties: lower position). Across
    chunks, the r-th eviction of a chunk of length n is keyed at (r + 0.5) / n,
    a divisor-style apportionment that spreads evictions proportionally and is
    house-monotone, so masks stay nested as alpha grows.
    """
    keys = []
    seq = scores.shape[0]
    for c, start in enumerate(range(0, seq, chunk_size)):
        idx = np.arange(start, min(start + chunk_size, seq))
        order = idx[np.lexsort((idx, scores[idx]))]
        n = len(idx)
        keys.extend(((r + 0.5) / n, c, int(pos)) for r, pos in enumerate(order))
    keys.sort()
    return np.array([pos for _, _, pos in keys], dtype=np.int64)


def press_chunk(scores: ScoreTensor, alpha: float, chunk_size: int = 4,
                regime: Regime = "agnostic") -> SurvivalMask:
    """Chunked pruning with a uniform per-head budget of ``ceil((1 - alpha) * S)``."""
    alpha = _check_alpha(alpha)
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    s = scores.scores
    n_layers, n_heads, seq = s.shape
    n_evict = seq - keep_budget(alpha, seq)
    keep = np.ones_like(s, dtype=bool)
    for l in range(n_layers):
        for h in range(n_heads):
            order = _chunk_eviction_order(s[l, h], chunk_size)
            keep[l, h, order[:n_evict]] = False
    return SurvivalMask(keep, alpha=alpha, regime=regime, press_kind="chunk")


def press_adaptive(scores: ScoreTensor, alpha: float, regime: Regime = "agnostic") -> SurvivalMask:
    """Global pruning: rank every (layer, head, position) entry jointly and evict the bottom."""
    alpha = _check_alpha(alpha)
    s = scores.scores
    flat = s.reshape(-1)
    n_evict = flat.size - keep_budget(alpha, flat.size)
    # flat index order is (layer, head, position) lexicographic: the tie-break
    order = np.lexsort((np.arange(flat.size), flat))
    keep = np.ones(flat.size, dtype=bool)
    keep[order[:n_evict]] = False
    return SurvivalMask(keep.reshape(s.shape), alpha=alpha, regime=regime, press_kind="adaptive")


def apply_press(kind: PressKind, scores: ScoreTensor, alpha: float, regime: Regime = "agnostic",
                chunk_size: int = 4) -> SurvivalMask:
    if kind == "chunk":
        return press_chunk(scores, alpha, chunk_size, regime=regime)
    if kind == "adaptive":
        return press_adaptive(scores, alpha, regime=regime)
    raise ValueError(f"unknown press kind {kind!r}")
