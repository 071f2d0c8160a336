"""Global item-item transition graph: construction, k-hop queries, masked views."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from maerec.corpus import UserSequence

DEFAULT_WINDOW = 2
DEFAULT_NEIGHBOR_CAP = 32


def canonical(u: int, v: int) -> tuple[int, int]:
    return (u, v) if u < v else (v, u)


@dataclass
class TransitionGraph:
    """Undirected, deduplicated item graph with sorted adjacency lists."""

    num_nodes: int
    adjacency: list[np.ndarray]
    edge_set: frozenset[tuple[int, int]]
    degrees: np.ndarray

    @property
    def num_edges(self) -> int:
        return len(self.edge_set)

    def neighbors(self, v: int) -> np.ndarray:
        return self.adjacency[v]

    def has_edge(self, u: int, v: int) -> bool:
        return canonical(u, v) in self.edge_set

    def edges(self) -> frozenset[tuple[int, int]]:
        return self.edge_set


@dataclass
class MaskedGraphView:
    """Exclusion overlay over a base graph; removed edges never show up in queries."""

    base: TransitionGraph
    removed_edges: frozenset[tuple[int, int]]
    _adj_cache: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def num_nodes(self) -> int:
        return self.base.num_nodes

    @property
    def num_edges(self) -> int:
        return self.base.num_edges - len(self.removed_edges)

    def neighbors(self, v: int) -> np.ndarray:
        cached = self._adj_cache.get(v)
        if cached is None:
            base_nbrs = self.base.adjacency[v]
            keep = [u for u in base_nbrs if canonical(int(u), v) not in self.removed_edges]
            cached = np.asarray(keep, dtype=np.int64)
            self._adj_cache[v] = cached
        return cached

    def has_edge(self, u: int, v: int) -> bool:
        key = canonical(u, v)
        return key in self.base.edge_set and key not in self.removed_edges

    def edges(self) -> frozenset[tuple[int, int]]:
        return self.base.edge_set - self.removed_edges

    @property
    def degrees(self) -> np.ndarray:
        deg = np.array(self.base.degrees, copy=True)
        for u, v in self.removed_edges:
            deg[u] -= 1
            deg[v] -= 1
        return deg


def from_edges(num_nodes: int, edges) -> TransitionGraph:
    """Build a graph directly from an iterable of (u, v) pairs."""
    edge_set = set()
    for u, v in edges:
        u, v = int(u), int(v)
        if u == v:
            continue
        edge_set.add(canonical(u, v))
    adjacency: list[set[int]] = [set() for _ in range(num_nodes)]
    for u, v in edge_set:
        adjacency[u].add(v)
        adjacency[v].add(u)
    adj_arrays = [np.array(sorted(nbrs), dtype=np.int64) for nbrs in adjacency]
    degrees = np.array([len(a) for a in adj_arrays], dtype=np.int64)
    return TransitionGraph(num_nodes, adj_arrays, frozenset(edge_set), degrees)


def build_graph(
    sequences: list[UserSequence], window: int = DEFAULT_WINDOW, num_nodes: int | None = None
) -> TransitionGraph:
    """Link every pair of items that co-occur within ``window`` positions in
    any user sequence.  Edges are undirected, deduplicated, without self-loops.
    """
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    if num_nodes is None:
        num_nodes = 1 + max((max(s.items) for s in sequences if s.items), default=-1)
    edges = set()
    for seq in sequences:
        items = seq.items
        n = len(items)
        for t in range(n):
            for dt in range(1, window + 1):
                if t + dt >= n:
                    break
                a, b = items[t], items[t + dt]
                if a != b:
                    edges.add(canonical(a, b))
    return from_edges(num_nodes, edges)


def k_hop_neighbors(
    graph,
    v: int,
    k: int,
    cap: int | None = DEFAULT_NEIGHBOR_CAP,
    seed: int = 0,
) -> np.ndarray:
    """Nodes at hop distance 1..k from v (v excluded), as a sorted array.

    When the neighborhood exceeds ``cap`` a uniform subsample of size
    ``cap`` is drawn, deterministic per (seed, v).
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not 0 <= v < graph.num_nodes:
        raise ValueError(f"node {v} out of range")
    seen = {v}
    found: list[int] = []
    frontier = deque([(v, 0)])
    while frontier:
        node, depth = frontier.popleft()
        if depth == k:
            continue
        for nbr in graph.neighbors(node):
            nbr = int(nbr)
            if nbr not in seen:
                seen.add(nbr)
                found.append(nbr)
                frontier.append((nbr, depth + 1))
    result = np.array(sorted(found), dtype=np.int64)
    if cap is not None and result.size > cap:
        rng = np.random.default_rng([seed, v])
        result = np.sort(rng.choice(result, size=cap, replace=False))
    return result


def remove_edges(graph: TransitionGraph, edges) -> MaskedGraphView:
    """View of ``graph`` without ``edges``.  Every edge must exist in the base."""
    removed = frozenset(canonical(int(u), int(v)) for u, v in edges)
    stray = removed - graph.edge_set
    if stray:
        raise ValueError(f"{len(stray)} edges not present in the graph, e.g. {next(iter(stray))}")
    return MaskedGraphView(graph, removed)


def dump_edges(graph, path) -> None:
    """Write canonical edge pairs as sorted ``u v`` lines (for oracle diffing)."""
    with open(path, "w", encoding="utf-8") as fh:
        for u, v in sorted(graph.edges()):
            fh.write(f"{u} {v}\n")
