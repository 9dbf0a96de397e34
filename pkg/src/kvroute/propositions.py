"""Executable checks of the routing propositions on small constructed instances."""
from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from kvroute.attention import AttentionTensor, HiddenStates, ModelConfig, ToyModel, build_toy_model
from kvroute.graph import TokenRouteGraph, answer_reachable, build_graph, compress_graph
from kvroute.metrics import agreement_fraction, top_tokens
from kvroute.press import SurvivalMask

MIN_TRIALS = 1000
SE_MULTIPLIER = 4.0


class SetupError(ValueError):
    """The instance violates a proposition's precondition."""


class ContainmentError(ValueError):
    """A routing subgraph uses an edge that the compressed graph does not have."""


class WideCIWarning(UserWarning):
    pass


# --- redundancy -------------------------------------------------------------------

def disjoint_route_instance(k: int, hops: int = 1) -> tuple[TokenRouteGraph, int, int]:
    """Graph with ``k`` head-disjoint routes from the query to position 0.

    Route ``h`` uses only head ``h`` and passes through ``hops - 1`` private
    intermediate positions, one attention hop per layer. Returns
    ``(graph, q, t)`` with ``t = 0`` and ``q`` the last position.
    """
    if k < 1 or hops < 1:
        raise ValueError("k and hops must be >= 1")
    seq = 2 + k * (hops - 1)
    t, q = 0, seq - 1
    labels = np.zeros((hops, seq, seq), dtype=np.int64)
    for h in range(k):
        chain = [q] + [1 + h * (hops - 1) + r for r in range(hops - 1)] + [t]
        # chain[r] reads chain[r+1] at layer hops-1-r
        for r in range(hops):
            labels[hops - 1 - r, chain[r], chain[r + 1]] |= 1 << h
    return TokenRouteGraph(labels, num_heads=k), q, t


def _route_mask(graph: TokenRouteGraph, t: int, survive: Sequence[bool]) -> SurvivalMask:
    keep = np.ones((graph.num_layers, graph.num_heads, graph.seq_len), dtype=bool)
    for h, s in enumerate(survive):
        keep[:, h, t] = bool(s)
    return SurvivalMask(keep)


def _reach_for_patterns(graph: TokenRouteGraph, q: int, t: int, patterns: np.ndarray) -> np.ndarray:
    return np.array([answer_reachable(compress_graph(graph, _route_mask(graph, t, p)), q, [t])
                     for p in patterns], dtype=bool)


def exact_reach_probability(k: int, p: float, hops: int = 1) -> float:
    """Reach probability by enumerating all ``2^k`` per-head survival patterns."""
    graph, q, t = disjoint_route_instance(k, hops)
    patterns = np.array(list(itertools.product([False, True], repeat=k)), dtype=bool)
    reach = _reach_for_patterns(graph, q, t, patterns)
    total = 0.0
    for pattern, hit in zip(patterns, reach):
        if hit:
            n_alive = int(pattern.sum())
            total += p ** n_alive * (1 - p) ** (k - n_alive)
    return total


@dataclass(frozen=True)
class Prop1Result:
    k: int
    p: float
    trials: int
    seed: int
    hops: int
    empirical: float
    bound: float
    standard_error: float
    exact: float
    passed: bool


def verify_prop1(k: int, p: float, trials: int = 100_000, seed: int = 0, hops: int = 1) -> Prop1Result:
    """Monte Carlo reach probability under independent per-head survival of the answer token.

    Passes when the estimate is at least ``1 - (1-p)^k`` minus four binomial
    standard errors. Reachability is evaluated once per distinct survival
    pattern through the real compress and reach path.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if trials < MIN_TRIALS:
        warnings.warn(f"{trials} trials give a wide confidence interval; use >= {MIN_TRIALS}",
                      WideCIWarning, stacklevel=2)
    graph, q, t = disjoint_route_instance(k, hops)
    rng = np.random.default_rng([seed, 0x5031])
    survive = rng.random((trials, k)) < p
    patterns, inverse = np.unique(survive, axis=0, return_inverse=True)
    reach = _reach_for_patterns(graph, q, t, patterns)[np.ravel(inverse)]
    empirical = float(reach.mean())
    bound = 1.0 - (1.0 - p) ** k
    se = math.sqrt(bound * (1.0 - bound) / trials)
    exact = exact_reach_probability(k, p, hops) if k <= 16 else float("nan")
    return Prop1Result(k, p, trials, seed, hops, empirical, bound, se, exact,
                       empirical >= bound - SE_MULTIPLIER * se)


# --- erasure ----------------------------------------------------------------------

@dataclass(frozen=True)
class Prop2Result:
    passed: bool
    max_abs_diff: float
    reachable: bool
    perturbations: int


def _structural_graph(model: ToyModel, tokens: Sequence[int], mask: SurvivalMask) -> TokenRouteGraph:
    attn, _ = model.forward(tokens)
    return compress_graph(build_graph(attn, epsilon=0.0), mask)


def verify_prop2(model: ToyModel, tokens: Sequence[int], mask: SurvivalMask, q: int,
                 t_ans: Sequence[int], perturbations: int = 4, scale: float = 10.0,
                 seed: int = 0) -> Prop2Result:
    """With the answer unreachable, perturbing answer embeddings must not move ``q``'s final state.

    The check is exact (bitwise). Raises ``SetupError`` if the answer is still
    reachable from ``q`` in the compressed graph at epsilon 0.
    """
    if answer_reachable(_structural_graph(model, tokens, mask), q, t_ans):
        raise SetupError("answer is still reachable from the query; proposition does not apply")
    x0 = model.embed(tokens)
    _, base = model.forward_embeddings(x0, mask)
    rng = np.random.default_rng([seed, 0x5032])
    worst = 0.0
    identical = True
    for _ in range(perturbations):
        x = x0.copy()
        for t in t_ans:
            x[t] = x[t] + scale * rng.standard_normal(x.shape[1])
        _, pert = model.forward_embeddings(x, mask)
        a, b = base.final[q], pert.final[q]
        identical &= bool(np.array_equal(a, b))
        worst = max(worst, float(np.max(np.abs(a - b))))
    return Prop2Result(identical, worst, False, perturbations)


def max_output_shift(model: ToyModel, tokens: Sequence[int], mask: SurvivalMask, q: int,
                     t_ans: Sequence[int], scale: float = 10.0, seed: int = 0) -> float:
    """Largest change of ``q``'s final state when answer embeddings are perturbed once."""
    x0 = model.embed(tokens)
    _, base = model.forward_embeddings(x0, mask)
    rng = np.random.default_rng([seed, 0x5033])
    x = x0.copy()
    for t in t_ans:
        x[t] = x[t] + scale * rng.standard_normal(x.shape[1])
    _, pert = model.forward_embeddings(x, mask)
    return float(np.max(np.abs(base.final[q] - pert.final[q])))


def leakage_counterexample(seed: int = 0, seq_len: int = 6) -> dict:
    """Two layers, answer evicted from every head of the last layer only.

    Counting evictions at the readout layer says the answer is gone, yet its
    content was copied into other positions at layer 0 and still reaches the
    query. The multi-layer graph sees this route; the single-layer erasure
    argument does not apply.
    """
    cfg = ModelConfig(num_layers=2, num_query_heads=2, num_kv_heads=2, head_dim=4, max_seq=seq_len, seed=seed)
    model = build_toy_model(cfg)
    tokens = list(range(100, 100 + seq_len))
    q, t = seq_len - 1, 0
    keep = np.ones((2, 2, seq_len), dtype=bool)
    keep[1, :, t] = False
    mask = SurvivalMask(keep, alpha=0.0)
    graph = _structural_graph(model, tokens, mask)
    return {
        "last_layer_evicted": bool(not keep[1, :, t].any()),
        "reachable": answer_reachable(graph, q, [t]),
        "output_shift": max_output_shift(model, tokens, mask, q, [t], seed=seed),
    }


# --- rigidity ---------------------------------------------------------------------

@dataclass(frozen=True)
class Prop3Result:
    rho: float
    t_star: int
    affected_heads: int
    shifted_heads: int
    forced_shift_fraction: float
    answer_mass_before: float
    answer_mass_after: float
    flagged_answer_consensus: bool
    passed: bool


def verify_prop3(rows: np.ndarray, t_ans: Sequence[int] = (), alpha: float = 0.0) -> Prop3Result:
    """Prune the consensus token from the heads that rank it first and recount top tokens.

    ``rows`` is an ``(H, S)`` block of attention rows for one layer and query.
    With ``alpha > 0`` the affected heads also lose the lowest-weight
    ``floor(alpha * (S - 1))`` of their remaining columns. A row left with no
    mass falls back to uniform over its surviving columns. Answer mass is the
    head-averaged attention on ``t_ans``.
    """
    w = np.asarray(rows, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError("rows must be (H, S)")
    n_heads, seq = w.shape
    rho, t_star = agreement_fraction(w)
    top_before = top_tokens(w)
    affected = [h for h, t in enumerate(top_before) if t == t_star]
    after = w.copy()
    extra = int(math.floor(alpha * (seq - 1) + 1e-9))
    for h in affected:
        alive = np.ones(seq, dtype=bool)
        alive[t_star] = False
        if extra:
            cand = np.flatnonzero(alive)
            order = cand[np.lexsort((cand, w[h, cand]))]
            alive[order[:extra]] = False
        row = np.where(alive, w[h], 0.0)
        total = row.sum()
        after[h] = row / total if total > 0 else alive / alive.sum()
    top_after = top_tokens(after)
    shifted = sum(top_after[h] != top_before[h] for h in affected)
    ans = sorted(set(t_ans))
    mass_before = float(w[:, ans].sum(axis=1).mean()) if ans else 0.0
    mass_after = float(after[:, ans].sum(axis=1).mean()) if ans else 0.0
    need = math.ceil(rho * len(affected) - 1e-9)
    return Prop3Result(rho, t_star, len(affected), shifted, shifted / n_heads, mass_before,
                       mass_after, t_star in ans, shifted >= need and shifted / n_heads >= rho - 1e-12)


# --- TR-LT functional sufficiency ------------------------------------------------------

def routing_restricted_forward(model: ToyModel, tokens: Sequence[int], trlt: TokenRouteGraph,
                               compressed: TokenRouteGraph, mask: SurvivalMask | None = None
                               ) -> tuple[AttentionTensor, HiddenStates]:
    """Forward pass where each head may only read along ``trlt``'s edges (plus itself)."""
    if not trlt.is_subgraph_of(compressed):
        raise ContainmentError("routing subgraph is not contained in the compressed graph")
    cfg = model.cfg
    if trlt.num_heads != cfg.num_query_heads or trlt.num_layers != cfg.num_layers:
        raise ValueError("routing subgraph does not match the model's layers and query heads")
    bits = (np.int64(1) << np.arange(cfg.num_query_heads, dtype=np.int64))[None, :, None, None]
    column_filter = (trlt.labels[:, None, :, :] & bits) != 0
    return model.forward(tokens, mask, column_filter=column_filter)


def nearest_token_readout(hidden: HiddenStates, q: int, candidates: Sequence[int]) -> int:
    """Candidate position whose input embedding best aligns with ``q``'s final state."""
    scores = [float(hidden.final[q] @ hidden.residual[0, j]) for j in candidates]
    return candidates[int(np.argmax(scores))]


def report(obj) -> dict:
    return asdict(obj)
