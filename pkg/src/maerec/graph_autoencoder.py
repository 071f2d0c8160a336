"""Lightweight graph autoencoder: message-passing encoder over the masked
transition graph and a cross-layer MLP decoder that reconstructs masked edges.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

logger = logging.getLogger(__name__)


@dataclass
class LayerEmbeddings:
    """Node embeddings per propagation layer plus their sum."""

    per_layer: list[torch.Tensor]
    combined: torch.Tensor

    @property
    def num_layers(self) -> int:
        return len(self.per_layer)


def propagation_matrix(graph, normalize: bool = True, dtype=torch.float32) -> torch.Tensor:
    """Sparse adjacency operator for message passing.

    Literal mode aggregates neighbor embeddings by plain summation; the
    normalized mode rescales each edge by 1/sqrt(deg_u * deg_v), which keeps
    layer norms bounded on dense graphs.
    """
    edges = sorted(graph.edges())
    n = graph.num_nodes
    if not edges:
        index = torch.zeros((2, 0), dtype=torch.int64)
        values = torch.zeros(0, dtype=dtype)
        return torch.sparse_coo_tensor(index, values, (n, n)).coalesce()
    arr = np.asarray(edges, dtype=np.int64)
    rows = np.concatenate([arr[:, 0], arr[:, 1]])
    cols = np.concatenate([arr[:, 1], arr[:, 0]])
    if normalize:
        deg = np.maximum(np.asarray(graph.degrees, dtype=np.float64), 1.0)
        vals = 1.0 / np.sqrt(deg[rows] * deg[cols])
    else:
        vals = np.ones(len(rows), dtype=np.float64)
    index = torch.from_numpy(np.stack([rows, cols]))
    values = torch.from_numpy(vals).to(dtype)
    return torch.sparse_coo_tensor(index, values, (n, n)).coalesce()


def encode(
    graph,
    base_embeddings: torch.Tensor,
    num_layers: int,
    normalize: bool = True,
    matrix: torch.Tensor | None = None,
) -> LayerEmbeddings:
    """Residual message passing: e^(l+1) = e^l + A e^l, collecting every layer.

    The combined representation is the sum of layers 1..num_layers.  Passing
    a precomputed ``matrix`` (see :func:`propagation_matrix`) skips rebuilding
    the operator; ``graph`` may then be None.
    """
    if num_layers < 1:
        raise ValueError(f"num_layers must be >= 1, got {num_layers}")
    if matrix is None:
        matrix = propagation_matrix(graph, normalize=normalize, dtype=base_embeddings.dtype)
    layers = []
    e = base_embeddings
    for _ in range(num_layers):
        e = e + torch.sparse.mm(matrix, e)
        layers.append(e)
    combined = layers[0]
    for layer in layers[1:]:
        combined = combined + layer
    return LayerEmbeddings(layers, combined)


def edge_embedding(layer_embs: LayerEmbeddings, v: int, v_other: int) -> torch.Tensor:
    """Cross-layer edge feature: concatenated elementwise products e_v^i * e_v'^j
    over ordered layer pairs (1,1), (1,2), ..., (L,L).
    """
    if v == v_other:
        raise ValueError("edge embedding needs two distinct nodes")
    parts = []
    for left in layer_embs.per_layer:
        for right in layer_embs.per_layer:
            parts.append(left[v] * right[v_other])
    return torch.cat(parts)


def edge_embeddings_batch(
    layer_embs: LayerEmbeddings, left: torch.Tensor, right: torch.Tensor
) -> torch.Tensor:
    """Vectorized :func:`edge_embedding`.

    ``left`` has shape (n,) and ``right`` (n,) or (n, m); the output gains a
    trailing dimension of width L^2 * d.
    """
    parts = []
    expand = right.dim() > left.dim()
    for a in layer_embs.per_layer:
        av = a[left]
        if expand:
            av = av.unsqueeze(1)
        for b in layer_embs.per_layer:
            parts.append(av * b[right])
    return torch.cat(parts, dim=-1)


class EdgeDecoder(nn.Module):
    """Two-layer MLP mapping a cross-layer edge feature to a scalar logit."""

    def __init__(self, num_layers: int, dim: int, hidden_dim: int | None = None):
        super().__init__()
        in_dim = num_layers * num_layers * dim
        hidden_dim = dim if hidden_dim is None else hidden_dim
        self.input = nn.Linear(in_dim, hidden_dim)
        self.output = nn.Linear(hidden_dim, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.output(torch.relu(self.input(x))).squeeze(-1)


def sample_edge_negatives(
    graph, masked_edges, n_neg: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Per masked edge (v, v'), up to ``n_neg`` nodes drawn uniformly without
    replacement from V minus v and its neighbors.

    Returns (negatives, valid), both (n_edges, width).  Rows whose eligible
    pool is smaller than ``n_neg`` are padded; padded slots have valid=False.
    """
    all_nodes = np.arange(graph.num_nodes, dtype=np.int64)
    pools: dict[int, np.ndarray] = {}
    drawn = []
    for v, _ in masked_edges:
        pool = pools.get(v)
        if pool is None:
            pool = np.setdiff1d(all_nodes, np.append(graph.neighbors(v), v))
            pools[v] = pool
        if pool.size == 0:
            drawn.append(np.empty(0, dtype=np.int64))
        elif pool.size <= n_neg:
            drawn.append(rng.permutation(pool))
        else:
            drawn.append(rng.choice(pool, size=n_neg, replace=False))
    width = max((d.size for d in drawn), default=0)
    negatives = np.zeros((len(drawn), width), dtype=np.int64)
    valid = np.zeros((len(drawn), width), dtype=bool)
    for i, d in enumerate(drawn):
        negatives[i, : d.size] = d
        valid[i, : d.size] = True
    return negatives, valid


def reconstruction_loss(
    graph,
    masked_edges,
    layer_embs: LayerEmbeddings,
    decoder: EdgeDecoder,
    n_neg: int = 64,
    seed: int | np.random.Generator = 0,
) -> torch.Tensor:
    """Mean sampled-softmax loss for recovering the masked edges.

    For each masked edge the positive logit competes against the logits of
    sampled non-adjacent nodes; the positive sits in its own denominator.
    An empty mask yields a zero loss (degenerate but valid step).
    """
    dtype = layer_embs.combined.dtype
    edges = sorted(masked_edges)
    if not edges:
        logger.warning("reconstruction loss over an empty mask; returning 0")
        return torch.zeros((), dtype=dtype)
    if n_neg < 1:
        raise ValueError(f"n_neg must be >= 1, got {n_neg}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    negatives, valid = sample_edge_negatives(graph, edges, n_neg, rng)
    if negatives.shape[1] == 0:
        logger.warning("no valid negatives for any masked edge; returning 0")
        return torch.zeros((), dtype=dtype)
    arr = np.asarray(edges, dtype=np.int64)
    left = torch.from_numpy(arr[:, 0])
    pos = torch.from_numpy(arr[:, 1:2])
    negs = torch.from_numpy(negatives)
    candidates = torch.cat([pos, negs], dim=1)
    feats = edge_embeddings_batch(layer_embs, left, candidates)
    logits = decoder(feats)
    pad = torch.from_numpy(~valid)
    logits = logits.masked_fill(torch.cat([pad.new_zeros(pad.shape[0], 1), pad], dim=1), -torch.inf)
    return (torch.logsumexp(logits, dim=1) - logits[:, 0]).mean()
