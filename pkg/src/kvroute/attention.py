"""Toy multi-head attention engine with grouped KV heads and survival masks.

The model is deliberately small and untrained: token embeddings are seeded
hash embeddings, projections are random, and there is no MLP. Every layer is
``h <- h + W_O . concat_h(softmax(Q_h K_g^T / (sqrt(D_h) * T)) V_g)`` with a
pre-RMS-norm, which is enough to study how attention routes content between
positions when KV entries are evicted.
"""
from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np

if TYPE_CHECKING:
    from kvroute.press import SurvivalMask

_U64_MAX = 2**64 - 1
DUMP_MAGIC = b"ATN1"
_DUMP_HEADER = struct.Struct("<4sIIIB")


class AttentionDumpError(ValueError):
    """Base class for attention dump validation failures."""


class MalformedHeaderError(AttentionDumpError):
    pass


class DimensionMismatchError(AttentionDumpError):
    pass


class StochasticityError(AttentionDumpError):
    pass


class CausalityError(AttentionDumpError):
    pass


def _per_layer(value, num_layers: int, name: str) -> tuple[float, ...]:
    if isinstance(value, (int, float)):
        return (float(value),) * num_layers
    values = tuple(float(v) for v in value)
    if len(values) != num_layers:
        raise ValueError(f"{name} schedule needs {num_layers} entries, got {len(values)}")
    return values


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 4
    num_query_heads: int = 4
    num_kv_heads: int = 2
    head_dim: int = 8
    max_seq: int = 512
    bytes_per_element: int = 2
    seed: int = 0
    # Softmax temperature; a float or one value per layer. Lower = sharper.
    temperature: float | tuple[float, ...] = 1.0
    # Fraction of projection variance shared by all heads in a layer; 1.0 makes
    # every head identical (unanimous top tokens), 0.0 gives independent heads.
    head_coupling: float | tuple[float, ...] = 0.0

    def __post_init__(self):
        for name in ("num_layers", "num_query_heads", "num_kv_heads", "head_dim",
                     "max_seq", "bytes_per_element"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.num_query_heads % self.num_kv_heads:
            raise ValueError("num_kv_heads must divide num_query_heads")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or not 0 <= self.seed <= _U64_MAX:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")
        temps = _per_layer(self.temperature, self.num_layers, "temperature")
        if any(t <= 0 for t in temps):
            raise ValueError("temperature must be positive")
        couplings = _per_layer(self.head_coupling, self.num_layers, "head_coupling")
        if any(not 0.0 <= c <= 1.0 for c in couplings):
            raise ValueError("head_coupling must lie in [0, 1]")

    @property
    def group_size(self) -> int:
        return self.num_query_heads // self.num_kv_heads

    @property
    def model_dim(self) -> int:
        return self.num_query_heads * self.head_dim

    def kv_head_of(self, query_head: int) -> int:
        return query_head // self.group_size

    def temperatures(self) -> tuple[float, ...]:
        return _per_layer(self.temperature, self.num_layers, "temperature")

    def couplings(self) -> tuple[float, ...]:
        return _per_layer(self.head_coupling, self.num_layers, "head_coupling")


def kv_memory_bytes(cfg: ModelConfig, batch: int, seq: int) -> int:
    """KV-cache footprint ``B * S * L * H_KV * D_h * b`` in bytes.

    Raises ``OverflowError`` if the product does not fit in an unsigned 64-bit
    integer, which is the widest size type a real allocator would accept.
    """
    if batch < 1:
        raise ValueError("batch must be >= 1")
    if seq < 1:
        raise ValueError("seq must be >= 1")
    total = 1
    for factor in (batch, seq, cfg.num_layers, cfg.num_kv_heads, cfg.head_dim,
                   cfg.bytes_per_element):
        total *= factor
        if total > _U64_MAX:
            raise OverflowError("KV memory size exceeds unsigned 64-bit range")
    return total


@dataclass(frozen=True, eq=False)
class AttentionTensor:
    """Per-layer, per-head attention matrices, shape ``(L, H, S, S)``."""

    weights: np.ndarray
    causal: bool = True
    tolerance: float = 1e-9

    def __post_init__(self):
        w = np.asarray(self.weights)
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise DimensionMismatchError(f"expected (L, H, S, S) weights, got shape {w.shape}")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise StochasticityError("attention weights must be finite and nonnegative")
        row_sums = w.sum(axis=-1, dtype=np.float64)
        worst = float(np.max(np.abs(row_sums - 1.0))) if w.size else 0.0
        if worst > self.tolerance:
            raise StochasticityError(f"row sums deviate from 1 by {worst:.3g}")
        if self.causal and np.any(np.triu(w, k=1) != 0):
            raise CausalityError("causal tensor has weight above the diagonal")
        w = w.view()
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @property
    def num_layers(self) -> int:
        return self.weights.shape[0]

    @property
    def num_heads(self) -> int:
        return self.weights.shape[1]

    @property
    def seq_len(self) -> int:
        return self.weights.shape[2]

    def layer(self, index: int) -> np.ndarray:
        return self.weights[index]

    def __eq__(self, other):
        if not isinstance(other, AttentionTensor):
            return NotImplemented
        return (self.causal == other.causal and self.weights.shape == other.weights.shape
                and bool(np.array_equal(self.weights, other.weights)))


@dataclass(frozen=True, eq=False)
class HiddenStates:
    """Forward-pass activations.

    ``residual[l]`` is the residual stream entering layer ``l`` (``residual[0]``
    is the embedding, ``residual[L]`` the final state), shape ``(L+1, S, d)``.
    ``head_outputs[l]`` holds the concatenated per-head attention outputs of
    layer ``l`` before the output projection, shape ``(L, S, H_Q * D_h)``.
    """

    residual: np.ndarray
    head_outputs: np.ndarray

    @property
    def final(self) -> np.ndarray:
        return self.residual[-1]

    def last_token(self, layer: int) -> np.ndarray:
        return self.residual[layer, -1]


def token_id(word: str, vocab_size: int = 1 << 20) -> int:
    """Stable hash of a word into the toy vocabulary."""
    return zlib.crc32(word.encode("utf-8")) % vocab_size


def _mixed_normal(rng: np.random.Generator, shared: np.ndarray, coupling: float, shape) -> np.ndarray:
    private = rng.standard_normal(shape)
    return math.sqrt(coupling) * shared + math.sqrt(1.0 - coupling) * private


class ToyModel:
    """Immutable parameter bundle plus the forward pass."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        d, dh = cfg.model_dim, cfg.head_dim
        rng = np.random.default_rng([cfg.seed, 0x6B76])
        wq, wk, wv = [], [], []
        for coupling in cfg.couplings():
            shared = rng.standard_normal((d, dh))
            q = np.stack([_mixed_normal(rng, shared, coupling, (d, dh))
                          for _ in range(cfg.num_query_heads)])
            shared = rng.standard_normal((d, dh))
            k = np.stack([_mixed_normal(rng, shared, coupling, (d, dh))
                          for _ in range(cfg.num_kv_heads)])
            v = rng.standard_normal((cfg.num_kv_heads, d, dh))
            wq.append(q / math.sqrt(d))
            wk.append(k / math.sqrt(d))
            wv.append(v / math.sqrt(d))
        self.w_q = np.stack(wq)  # (L, H_Q, d, D_h)
        self.w_k = np.stack(wk)  # (L, H_KV, d, D_h)
        self.w_v = np.stack(wv)
        self.w_o = rng.standard_normal((cfg.num_layers, d, d)) / math.sqrt(d)
        self.pos_embed = 0.5 * rng.standard_normal((cfg.max_seq, d))
        for arr in (self.w_q, self.w_k, self.w_v, self.w_o, self.pos_embed):
            arr.flags.writeable = False

    def token_embedding(self, tok: int) -> np.ndarray:
        rng = np.random.default_rng([self.cfg.seed, 0x656D, int(tok)])
        return rng.standard_normal(self.cfg.model_dim)

    def embed(self, tokens: Sequence[int]) -> np.ndarray:
        if len(tokens) == 0:
            raise ValueError("empty token sequence")
        if len(tokens) > self.cfg.max_seq:
            raise ValueError(f"sequence length {len(tokens)} exceeds max_seq {self.cfg.max_seq}")
        rows = [self.token_embedding(t) for t in tokens]
        return np.stack(rows) + self.pos_embed[: len(tokens)]

    def allowed_columns(self, seq_len: int, mask: SurvivalMask | None = None,
                        column_filter: np.ndarray | None = None) -> np.ndarray:
        """Boolean ``(L, H_Q, S, S)`` array of attendable (row, column) pairs.

        Causal structure always applies and a row may always read its own
        position. Mask positions beyond ``mask.seq_len`` are treated as
        surviving: they were appended after compression.
        """
        cfg = self.cfg
        allowed = np.broadcast_to(np.tril(np.ones((seq_len, seq_len), dtype=bool)),
                                  (cfg.num_layers, cfg.num_query_heads, seq_len, seq_len)).copy()
        if mask is not None:
            if mask.seq_len > seq_len:
                raise IndexError(f"mask covers {mask.seq_len} positions but sequence has {seq_len}")
            if mask.num_layers != cfg.num_layers or mask.num_heads != cfg.num_kv_heads:
                raise ValueError("mask shape does not match model (layers, kv heads)")
            keep = np.ones((cfg.num_layers, cfg.num_kv_heads, seq_len), dtype=bool)
            keep[:, :, : mask.seq_len] = mask.keep
            per_query = np.repeat(keep, cfg.group_size, axis=1)
            allowed &= per_query[:, :, None, :]
        if column_filter is not None:
            allowed &= column_filter
        idx = np.arange(seq_len)
        allowed[:, :, idx, idx] = True
        return allowed

    def forward_embeddings(self, x0: np.ndarray, mask: SurvivalMask | None = None,
                           column_filter: np.ndarray | None = None) -> tuple[AttentionTensor, HiddenStates]:
        cfg = self.cfg
        seq_len = x0.shape[0]
        allowed = self.allowed_columns(seq_len, mask, column_filter)
        scale = 1.0 / math.sqrt(cfg.head_dim)
        temps = cfg.temperatures()
        h = np.array(x0, dtype=np.float64)
        residual = [h]
        head_outs, weights = [], []
        for layer in range(cfg.num_layers):
            x = h / np.sqrt(np.mean(h * h, axis=-1, keepdims=True) + 1e-6)
            q = np.einsum("sd,hde->hse", x, self.w_q[layer])
            k = np.einsum("sd,hde->hse", x, self.w_k[layer])
            v = np.einsum("sd,hde->hse", x, self.w_v[layer])
            k = np.repeat(k, cfg.group_size, axis=0)
            v = np.repeat(v, cfg.group_size, axis=0)
            logits = (q @ k.transpose(0, 2, 1)) * (scale / temps[layer])
            # pruned logits are removed before the softmax, not rescaled after
            logits = np.where(allowed[layer], logits, -np.inf)
            logits -= logits.max(axis=-1, keepdims=True)
            a = np.exp(logits)
            a /= a.sum(axis=-1, keepdims=True)
            out = a @ v  # (H_Q, S, D_h)
            concat = out.transpose(1, 0, 2).reshape(seq_len, cfg.model_dim)
            h = h + concat @ self.w_o[layer]
            weights.append(a)
            head_outs.append(concat)
            residual.append(h)
        attn = AttentionTensor(np.stack(weights), causal=True)
        hidden = HiddenStates(np.stack(residual), np.stack(head_outs))
        return attn, hidden

    def forward(self, tokens: Sequence[int], mask: SurvivalMask | None = None,
                column_filter: np.ndarray | None = None) -> tuple[AttentionTensor, HiddenStates]:
        return self.forward_embeddings(self.embed(tokens), mask, column_filter)


def build_toy_model(cfg: ModelConfig) -> ToyModel:
    return ToyModel(cfg)


def forward(model: ToyModel, tokens: Sequence[int], mask: SurvivalMask | None = None):
    return model.forward(tokens, mask)


def save_attention_dump(attn: AttentionTensor, path: str | Path) -> None:
    w = np.ascontiguousarray(attn.weights, dtype="<f4")
    n_layers, n_heads, seq, _ = w.shape
    with open(path, "wb") as fh:
        fh.write(_DUMP_HEADER.pack(DUMP_MAGIC, n_layers, n_heads, seq, int(attn.causal)))
        fh.write(w.tobytes(order="C"))


def load_attention_dump(path: str | Path, tolerance: float = 1e-6) -> AttentionTensor:
    """Read an ``ATN1`` dump and validate it.

    Raises ``MalformedHeaderError`` for a bad or truncated header,
    ``DimensionMismatchError`` when the payload size disagrees with the header,
    and ``StochasticityError``/``CausalityError`` for invalid matrices.
    """
    data = Path(path).read_bytes()
    if len(data) < _DUMP_HEADER.size:
        raise MalformedHeaderError(f"file is {len(data)} bytes, shorter than the header")
    magic, n_layers, n_heads, seq, causal = _DUMP_HEADER.unpack_from(data)
    if magic != DUMP_MAGIC:
        raise MalformedHeaderError(f"bad magic {magic!r}")
    if causal not in (0, 1):
        raise MalformedHeaderError(f"causal flag must be 0 or 1, got {causal}")
    if min(n_layers, n_heads, seq) < 1:
        raise MalformedHeaderError("header dimensions must be positive")
    expected = n_layers * n_heads * seq * seq * 4
    payload = data[_DUMP_HEADER.size:]
    if len(payload) != expected:
        raise DimensionMismatchError(
            f"header declares {expected} payload bytes, file has {len(payload)}")
    w = np.frombuffer(payload, dtype="<f4").reshape(n_layers, n_heads, seq, seq)
    return AttentionTensor(w.astype(np.float32), causal=bool(causal), tolerance=tolerance)
