"""Token-route graphs: construction, compression, reachability, disjoint routes, TR-LTs.

Node ``(m, i)`` is the content of position ``i`` after ``m`` layers, ``m`` in
``0..L``. An attention edge ``i -> j`` stored at layer ``l`` means some head of
layer ``l`` reads position ``j`` into position ``i``, so node ``(l+1, i)``
depends on ``(l, j)``. Residual connections make ``(l+1, i)`` depend on
``(l, i)`` and are implicit. Reachability from a query walks these
dependencies downward from ``(q_layer, q)``: a path alternates residual steps
and single attention hops, never chaining two attention edges inside the same
layer.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import networkx as nx
import numpy as np

from kvroute.attention import AttentionTensor
from kvroute.press import SurvivalMask

MAX_HEADS = 63


def _popcount(x: int) -> int:
    return bin(x).count("1")


def _heads_of(bits: int) -> tuple[int, ...]:
    return tuple(h for h in range(MAX_HEADS) if bits >> h & 1)


@dataclass(frozen=True, eq=False)
class TokenRouteGraph:
    """Head-labelled layered graph; ``labels[l, i, j]`` is a bitmask of heads."""

    labels: np.ndarray
    num_heads: int
    epsilon: float = 0.0

    def __post_init__(self):
        lab = np.asarray(self.labels, dtype=np.int64)
        if lab.ndim != 3 or lab.shape[1] != lab.shape[2]:
            raise ValueError(f"labels must be (L, S, S), got {lab.shape}")
        if not 1 <= self.num_heads <= MAX_HEADS:
            raise ValueError(f"num_heads must be in [1, {MAX_HEADS}]")
        lab = lab.copy()
        lab.flags.writeable = False
        object.__setattr__(self, "labels", lab)

    @property
    def num_layers(self) -> int:
        return self.labels.shape[0]

    @property
    def seq_len(self) -> int:
        return self.labels.shape[1]

    @property
    def adjacency(self) -> np.ndarray:
        return self.labels != 0

    def heads(self, layer: int, i: int, j: int) -> tuple[int, ...]:
        return _heads_of(int(self.labels[layer, i, j]))

    def edges(self) -> Iterator[tuple[int, int, int, tuple[int, ...]]]:
        """Yield ``(layer, i, j, heads)`` in (layer, i, j) order."""
        for l, i, j in zip(*np.nonzero(self.labels)):
            yield int(l), int(i), int(j), self.heads(l, i, j)

    def num_edges(self) -> int:
        return int(np.count_nonzero(self.labels))

    def is_subgraph_of(self, other: TokenRouteGraph) -> bool:
        if self.labels.shape != other.labels.shape:
            return False
        return bool(np.all((self.labels & ~other.labels) == 0))

    def __eq__(self, other):
        if not isinstance(other, TokenRouteGraph):
            return NotImplemented
        return (self.num_heads == other.num_heads and self.labels.shape == other.labels.shape
                and bool(np.array_equal(self.labels, other.labels)))

    def to_edge_list(self) -> str:
        lines = [f"{l} {i} {j} " + " ".join(map(str, hs)) for l, i, j, hs in self.edges()]
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def from_edge_list(cls, text: str, num_layers: int, seq_len: int, num_heads: int,
                       epsilon: float = 0.0) -> TokenRouteGraph:
        labels = np.zeros((num_layers, seq_len, seq_len), dtype=np.int64)
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            parts = [int(p) for p in line.split()]
            if len(parts) < 4:
                raise ValueError(f"line {lineno}: expected 'layer i j heads...'")
            l, i, j, *hs = parts
            if not (0 <= l < num_layers and 0 <= i < seq_len and 0 <= j < seq_len):
                raise ValueError(f"line {lineno}: edge ({l}, {i}, {j}) outside the graph")
            if any(not 0 <= h < num_heads for h in hs):
                raise ValueError(f"line {lineno}: head outside [0, {num_heads})")
            for h in hs:
                labels[l, i, j] |= 1 << h
        return cls(labels, num_heads=num_heads, epsilon=epsilon)


@dataclass(frozen=True)
class ReachabilitySet:
    query: int
    positions: frozenset[int]
    hops: dict[int, int] = field(default_factory=dict)

    def __contains__(self, t: int) -> bool:
        return t in self.positions


def default_epsilon(seq_len: int) -> float:
    return 1.0 / seq_len


def build_graph(attn: AttentionTensor, epsilon: float | None = None) -> TokenRouteGraph:
    """Edge ``(l, i) -> (l, j)`` labelled with every head where ``A[l,h,i,j] > epsilon``."""
    eps = default_epsilon(attn.seq_len) if epsilon is None else float(epsilon)
    if eps < 0:
        raise ValueError("epsilon must be >= 0")
    if attn.num_heads > MAX_HEADS:
        raise ValueError(f"at most {MAX_HEADS} heads supported")
    above = np.asarray(attn.weights) > eps  # (L, H, S, S)
    bits = (np.int64(1) << np.arange(attn.num_heads, dtype=np.int64))[None, :, None, None]
    labels = np.where(above, bits, 0).sum(axis=1, dtype=np.int64)
    return TokenRouteGraph(labels, num_heads=attn.num_heads, epsilon=eps)


def compress_graph(graph: TokenRouteGraph, mask: SurvivalMask) -> TokenRouteGraph:
    """Drop head labels whose KV head pruned the source column.

    Query head ``h`` reads KV head ``h // (H / H_KV)``. A row always keeps its
    own position, and positions past ``mask.seq_len`` (appended after
    compression) survive.
    """
    n_layers, seq = graph.num_layers, graph.seq_len
    if mask.num_layers != n_layers:
        raise ValueError("mask and graph disagree on layer count")
    if mask.seq_len > seq:
        raise IndexError("mask covers more positions than the graph")
    if graph.num_heads % mask.num_heads:
        raise ValueError("mask KV heads must divide graph heads")
    group = graph.num_heads // mask.num_heads
    keep = np.ones((n_layers, mask.num_heads, seq), dtype=bool)
    keep[:, :, : mask.seq_len] = mask.keep
    eye = np.eye(seq, dtype=bool)
    new = np.zeros_like(graph.labels)
    for h in range(graph.num_heads):
        bit = np.int64(1) << h
        ok = keep[:, h // group, None, :] | eye  # (L, S, S)
        new |= np.where(ok, graph.labels & bit, 0)
    return TokenRouteGraph(new, num_heads=graph.num_heads, epsilon=graph.epsilon)


def _check_node(graph: TokenRouteGraph, q: int, q_layer: int | None) -> int:
    if not 0 <= q < graph.seq_len:
        raise IndexError(f"position {q} outside [0, {graph.seq_len})")
    layer = graph.num_layers if q_layer is None else q_layer
    if not 0 <= layer <= graph.num_layers:
        raise IndexError(f"layer {layer} outside [0, {graph.num_layers}]")
    return layer


def reachable(graph: TokenRouteGraph, q: int, q_layer: int | None = None) -> ReachabilitySet:
    """Positions whose content can flow into ``(q_layer, q)``; ``q_layer`` defaults to the top.

    0-1 BFS: residual steps cost nothing, attention hops cost one. ``hops[t]``
    is the fewest attention edges needed to reach ``t`` at any layer.
    """
    top = _check_node(graph, q, q_layer)
    adj = graph.adjacency
    dist: dict[tuple[int, int], int] = {(top, q): 0}
    dq = deque([(top, q)])
    while dq:
        m, i = dq.popleft()
        d = dist[(m, i)]
        if m == 0:
            continue
        below = (m - 1, i)
        if dist.get(below, d + 1) > d:
            dist[below] = d
            dq.appendleft(below)
        for j in np.flatnonzero(adj[m - 1, i]).tolist():
            node = (m - 1, j)
            if dist.get(node, d + 2) > d + 1:
                dist[node] = d + 1
                dq.append(node)
    hops: dict[int, int] = {}
    for (_, i), d in dist.items():
        if d < hops.get(i, d + 1):
            hops[i] = d
    return ReachabilitySet(q, frozenset(hops), dict(sorted(hops.items())))


def reachable_positions(graph: TokenRouteGraph, q: int, q_layer: int | None = None) -> np.ndarray:
    """Vectorized layer sweep; returns a boolean ``(S,)`` vector. Same set as ``reachable``."""
    top = _check_node(graph, q, q_layer)
    adj = graph.adjacency
    frontier = np.zeros(graph.seq_len, dtype=bool)
    frontier[q] = True
    seen = frontier.copy()
    for m in range(top, 0, -1):
        frontier = frontier | adj[m - 1][frontier].any(axis=0)
        seen |= frontier
    return seen


def answer_reachable(graph: TokenRouteGraph, q: int, t_ans: Iterable[int],
                     q_layer: int | None = None) -> bool:
    """The event ``T_ans ∩ R(q) != ∅``."""
    targets = sorted(set(t_ans))
    if not targets:
        raise ValueError("t_ans must be non-empty")
    for t in targets:
        if not 0 <= t < graph.seq_len:
            raise IndexError(f"answer position {t} outside sequence")
    seen = reachable_positions(graph, q, q_layer)
    return bool(seen[targets].any())


def head_expanded_network(graph: TokenRouteGraph, q: int, t: int,
                          q_layer: int | None = None) -> tuple[nx.DiGraph, object, object]:
    """Flow network where each (attention edge, head) pair is one unit of capacity.

    A path ends the first time an attention hop lands on ``t``; residual arcs
    are uncapacitated. Returns ``(network, source, sink)``.
    """
    top = _check_node(graph, q, q_layer)
    if not 0 <= t < graph.seq_len:
        raise IndexError(f"position {t} outside sequence")
    net = nx.DiGraph()
    source, sink = ("node", top, q), "sink"
    net.add_node(source)
    net.add_node(sink)
    for m in range(top, 0, -1):
        for i in range(graph.seq_len):
            if i == t and i != q:
                continue
            u = ("node", m, i)
            net.add_edge(u, ("node", m - 1, i))
            for j in np.flatnonzero(graph.labels[m - 1, i]).tolist():
                cap = _popcount(int(graph.labels[m - 1, i, j]))
                v = sink if j == t else ("node", m - 1, j)
                if net.has_edge(u, v):
                    # a self-loop lands on the residual arc, which is already uncapacitated
                    if "capacity" in net[u][v]:
                        net[u][v]["capacity"] += cap
                else:
                    net.add_edge(u, v, capacity=cap)
    return net, source, sink


def head_disjoint_paths(graph: TokenRouteGraph, q: int, t: int, q_layer: int | None = None) -> int:
    """Maximum number of q -> t routes sharing no (edge, head) assignment."""
    net, source, sink = head_expanded_network(graph, q, t, q_layer)
    return int(nx.maximum_flow_value(net, source, sink))


def extract_trlt(graph: TokenRouteGraph, q: int, t_ans: Iterable[int],
                 mask: SurvivalMask | None = None, q_layer: int | None = None) -> TokenRouteGraph | None:
    """Fewest-edge routing backbone from ``q`` to some answer position.

    ``graph`` is compressed by ``mask`` first when one is given. The result
    keeps the full head labels of each chosen edge. ``None`` when no answer
    position is reachable; an empty graph when ``q`` is itself an answer position.
    """
    g = compress_graph(graph, mask) if mask is not None else graph
    targets = set(t_ans)
    if not targets:
        raise ValueError("t_ans must be non-empty")
    top = _check_node(g, q, q_layer)
    adj = g.adjacency
    start = (top, q)
    dist = {start: 0}
    parent: dict[tuple[int, int], tuple[tuple[int, int], bool]] = {}
    dq = deque([start])
    while dq:
        node = dq.popleft()
        m, i = node
        d = dist[node]
        if m == 0:
            continue
        below = (m - 1, i)
        if dist.get(below, d + 1) > d:
            dist[below] = d
            parent[below] = (node, False)
            dq.appendleft(below)
        for j in np.flatnonzero(adj[m - 1, i]).tolist():
            nxt = (m - 1, j)
            if dist.get(nxt, d + 2) > d + 1:
                dist[nxt] = d + 1
                parent[nxt] = (node, True)
                dq.append(nxt)
    hits = [(d, -m, i) for (m, i), d in dist.items() if i in targets]
    if not hits:
        return None
    d, neg_m, i = min(hits)
    node = (-neg_m, i)
    labels = np.zeros_like(g.labels)
    while node != start:
        prev, is_attention = parent[node]
        if is_attention:
            layer, src, dst = node[0], prev[1], node[1]
            labels[layer, src, dst] = g.labels[layer, src, dst]
        node = prev
    return TokenRouteGraph(labels, num_heads=g.num_heads, epsilon=g.epsilon)
