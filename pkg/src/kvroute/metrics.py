"""Structural and behavioural metrics over masks, attention rows and sweep records."""
from __future__ import annotations

import math
import re
import string
from collections import Counter
from dataclasses import dataclass, fields
from typing import Iterable, Literal, Mapping, Sequence

import numpy as np

from kvroute.press import SurvivalMask

Grade = Literal["correct", "hallucination", "unknown"]
GRADES = ("correct", "hallucination", "unknown")
DEFAULT_UNKNOWN_MARKERS = ("i don't know", "unknown", "cannot be determined")
DEFAULT_F1_THRESHOLD = 0.5


def globally_evicted(mask: SurvivalMask) -> np.ndarray:
    """Boolean ``(S,)``: positions kept by no head of any layer."""
    return ~mask.keep.any(axis=(0, 1))


def eviction_rate(mask: SurvivalMask, seq_len: int | None = None) -> float:
    seq = mask.seq_len if seq_len is None else seq_len
    if seq <= 0:
        raise ValueError("sequence length must be positive")
    if seq != mask.seq_len:
        raise ValueError(f"mask covers {mask.seq_len} positions, not {seq}")
    return float(np.count_nonzero(globally_evicted(mask))) / seq


def ger(mask: SurvivalMask, t_ans: Iterable[int]) -> float:
    """Global eviction ratio over the answer positions."""
    targets = sorted(set(t_ans))
    if not targets:
        raise ValueError("t_ans must be non-empty")
    if targets[0] < 0 or targets[-1] >= mask.seq_len:
        raise IndexError("answer position outside the mask")
    return float(np.count_nonzero(globally_evicted(mask)[targets])) / len(targets)


def top_tokens(rows: np.ndarray) -> list[int]:
    """Per-head argmax over an ``(H, S)`` block of attention rows (lowest index wins ties)."""
    return np.argmax(np.asarray(rows), axis=-1).tolist()


def consensus(top: Sequence[int]) -> float:
    if len(top) == 0:
        raise ValueError("need at least one head")
    return len(set(top)) / len(top)


def agreement_fraction(rows: np.ndarray | Sequence[int]) -> tuple[float, int]:
    """Largest fraction of heads sharing a top token, and that token.

    ``rows`` is either an ``(H, S)`` attention block or precomputed top tokens.
    """
    arr = np.asarray(rows)
    top = top_tokens(arr) if arr.ndim == 2 else arr.astype(int).tolist()
    if not top:
        raise ValueError("need at least one head")
    counts = Counter(top)
    best = max(counts.values())
    t_star = min(t for t, c in counts.items() if c == best)
    return best / len(top), t_star


def layer_consensus(weights: np.ndarray, row: int) -> list[float]:
    """Consensus per layer for one destination row of an ``(L, H, S, S)`` tensor."""
    return [consensus(top_tokens(weights[l, :, row])) for l in range(weights.shape[0])]


_PUNCT = re.compile(f"[{re.escape(string.punctuation.replace(chr(39), ''))}]")


def normalize_tokens(text: str) -> list[str]:
    text = _PUNCT.sub(" ", text.lower())
    return [tok.strip("'") for tok in text.split() if tok.strip("'")]


def token_f1(prediction: str, gold: str) -> float:
    pred, ref = normalize_tokens(prediction), normalize_tokens(gold)
    if not pred or not ref:
        return 0.0
    overlap = sum((Counter(pred) & Counter(ref)).values())
    if overlap == 0:
        return 0.0
    precision, recall = overlap / len(pred), overlap / len(ref)
    return 2 * precision * recall / (precision + recall)


def is_unknown(text: str, markers: Sequence[str] = DEFAULT_UNKNOWN_MARKERS) -> bool:
    norm = normalize_tokens(text)
    return any(norm == normalize_tokens(m) for m in markers)


@dataclass(frozen=True)
class GradedAnswer:
    grade: Grade
    f1: float


def grade_answer(prediction: str, gold: str, unknown_markers: Sequence[str] = DEFAULT_UNKNOWN_MARKERS,
                 threshold: float = DEFAULT_F1_THRESHOLD) -> GradedAnswer:
    if not normalize_tokens(gold):
        raise ValueError("gold answer must be non-empty")
    if not normalize_tokens(prediction):
        return GradedAnswer("unknown", 0.0)
    f1 = token_f1(prediction, gold)
    pred_unknown = is_unknown(prediction, unknown_markers)
    if is_unknown(gold, unknown_markers):
        return GradedAnswer("correct", 1.0) if pred_unknown else GradedAnswer("hallucination", f1)
    if pred_unknown:
        return GradedAnswer("unknown", f1)
    return GradedAnswer("correct" if f1 >= threshold else "hallucination", f1)


def _curve_points(error_curve) -> tuple[np.ndarray, np.ndarray]:
    items = list(error_curve.items()) if isinstance(error_curve, Mapping) else list(error_curve)
    alphas = np.array([float(a) for a, _ in items])
    values = np.array([float(v) for _, v in items])
    if len(alphas) < 3:
        raise ValueError("susceptibility needs at least 3 grid points")
    if len(np.unique(alphas)) != len(alphas):
        raise ValueError("duplicate alpha in error curve")
    order = np.argsort(alphas)
    return alphas[order], values[order]


def susceptibility(error_curve: Mapping[float, float] | Sequence[tuple[float, float]]) -> dict[float, float]:
    """``chi = dH/d alpha``: central differences inside, one-sided at the ends.

    Non-uniform grids use the second-order three-point stencil, written as a
    weighted mean of neighbouring slopes so a flat curve gives exactly zero.
    """
    alphas, values = _curve_points(error_curve)
    h = np.diff(alphas)
    slope = np.diff(values) / h
    chi = np.empty_like(values)
    chi[0], chi[-1] = slope[0], slope[-1]
    left, right = h[:-1], h[1:]
    chi[1:-1] = (right * slope[:-1] + left * slope[1:]) / (left + right)
    return {float(a): float(c) for a, c in zip(alphas, chi)}


@dataclass(frozen=True)
class SweepRecord:
    example_id: str
    task: str
    press_kind: str
    regime: str
    alpha: float
    eviction_rate: float
    ger: float
    consensus: tuple[float, ...]
    grade: str
    reachable: bool
    f1: float
    route_mass: float = 0.0
    prediction: str = ""
    gold: str = ""
    error: str = ""

    def __post_init__(self):
        for name in ("eviction_rate", "ger", "f1"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name}={value} outside [0, 1]")
        if self.grade not in GRADES and not self.error:
            raise ValueError(f"unknown grade {self.grade!r}")

    @property
    def erased(self) -> bool:
        return self.ger >= 1.0

    @property
    def failed(self) -> bool:
        return self.grade != "correct"

    @classmethod
    def csv_header(cls, num_layers: int) -> list[str]:
        cols = []
        for f in fields(cls):
            if f.name == "consensus":
                cols.extend(f"consensus_l{l}" for l in range(num_layers))
            else:
                cols.append(f.name)
        return cols

    def csv_row(self, num_layers: int) -> list[str]:
        row = []
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "consensus":
                padded = list(value) + [None] * (num_layers - len(value))
                row.extend("" if v is None else repr(float(v)) for v in padded)
            elif isinstance(value, bool):
                row.append("1" if value else "0")
            elif isinstance(value, float):
                row.append(repr(value))
            else:
                row.append(str(value))
        return row


@dataclass(frozen=True)
class FailureDecomposition:
    p_erasure: float
    p_fail_given_erasure: float | None
    p_fail_given_intact: float | None
    p_fail: float

    def mixture(self) -> float:
        """Right-hand side of the total-probability identity; undefined cells have zero weight."""
        total = 0.0
        if self.p_fail_given_erasure is not None:
            total += self.p_fail_given_erasure * self.p_erasure
        if self.p_fail_given_intact is not None:
            total += self.p_fail_given_intact * (1.0 - self.p_erasure)
        return total


def failure_decomposition(records: Sequence[SweepRecord]) -> FailureDecomposition:
    """Split failure into erasure (all answer tokens globally evicted) and the rest."""
    if not records:
        raise ValueError("no records")
    n = len(records)
    erased = [r for r in records if r.erased]
    intact = [r for r in records if not r.erased]
    n_fail = sum(r.failed for r in records)

    def rate(rs):
        return sum(r.failed for r in rs) / len(rs) if rs else None

    return FailureDecomposition(len(erased) / n, rate(erased), rate(intact), n_fail / n)


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float | None:
    """Pearson r, or ``None`` when either variable has zero variance."""
    x, y = np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("need two equal-length series with >= 2 points")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx <= 0.0 or syy <= 0.0:
        return None
    return float(dx @ dy) / math.sqrt(sxx * syy)


@dataclass(frozen=True)
class CorrelationResult:
    r: float | None
    rows: list[dict]

    @property
    def defined(self) -> bool:
        return self.r is not None


def correlate_ger_hallucination(records: Sequence[SweepRecord], outcome: str = "hallucination",
                                by: Sequence[str] = ("press_kind", "regime", "alpha")) -> CorrelationResult:
    """Pearson correlation between mean GER and outcome rate across record cells.

    Cells are keyed by ``by`` (default: one point per press, regime and alpha).
    ``outcome`` is ``"hallucination"`` or ``"failure"`` (any non-correct grade).
    """
    if outcome not in ("hallucination", "failure"):
        raise ValueError(f"unknown outcome {outcome!r}")
    cells: dict[tuple, list[SweepRecord]] = {}
    for r in records:
        if r.error:
            continue
        cells.setdefault(tuple(getattr(r, k) for k in by), []).append(r)
    rows = []
    for key in sorted(cells):
        rs = cells[key]
        hit = (lambda r: r.grade == "hallucination") if outcome == "hallucination" else (lambda r: r.failed)
        row = dict(zip(by, key))
        row.update(mean_ger=sum(r.ger for r in rs) / len(rs),
                   rate=sum(map(hit, rs)) / len(rs), n=len(rs))
        rows.append(row)
    if len({row["mean_ger"] for row in rows}) < 2:
        return CorrelationResult(None, rows)
    return CorrelationResult(pearson([r["mean_ger"] for r in rows], [r["rate"] for r in rows]), rows)
