"""Learnable transition-path masking.

Anchor items are chosen by Gumbel-perturbed semantic relatedness (mean
cosine similarity to a sampled k-hop neighborhood), then a decaying
random walk expands from the anchors and records the traversed edges as
the mask.  A two-valued task reward rescales the relatedness loss
depending on whether the recommendation loss is improving faster than
its recent trailing average.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass

import numpy as np
import torch

from maerec.transition_graph import DEFAULT_NEIGHBOR_CAP, canonical, k_hop_neighbors

logger = logging.getLogger(__name__)

NORM_FLOOR = 1e-12
UNIFORM_CLAMP = 1e-12


@dataclass
class RelatednessTable:
    """Per-node relatedness scores and the neighborhood snapshots behind them."""

    gamma: np.ndarray
    gamma_perturbed: np.ndarray
    neighborhoods: list[np.ndarray]


@dataclass
class PathMask:
    """Result of the expand/sample walk: nodes reached and edges to mask."""

    anchors: np.ndarray
    nodes: frozenset[int]
    masked_edges: frozenset[tuple[int, int]]
    depth: int
    ratio: float


def gumbel_from_uniform(mu) -> np.ndarray:
    """Standard Gumbel noise -log(-log(mu)) with mu clamped away from {0, 1}."""
    mu = np.clip(np.asarray(mu, dtype=np.float64), UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP)
    return -np.log(-np.log(mu))


def gumbel_perturb(gamma: np.ndarray, seed: int) -> np.ndarray:
    """Add one independent Gumbel(0, 1) draw per score."""
    rng = np.random.default_rng(seed)
    return np.asarray(gamma, dtype=np.float64) + gumbel_from_uniform(rng.random(len(gamma)))


def semantic_relatedness(
    graph,
    embeddings: np.ndarray,
    k: int,
    cap: int | None = DEFAULT_NEIGHBOR_CAP,
    seed: int = 0,
) -> RelatednessTable:
    """Score each node by the mean cosine similarity between its embedding and
    a sampled k-hop neighborhood.  Isolated nodes score 0.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.shape[0] != graph.num_nodes:
        raise ValueError(
            f"embedding rows ({emb.shape[0]}) != graph nodes ({graph.num_nodes})"
        )
    norms = np.linalg.norm(emb, axis=1)
    floored = norms < NORM_FLOOR
    if floored.any():
        logger.warning("%d embedding rows below norm floor %g", floored.sum(), NORM_FLOOR)
        norms = np.maximum(norms, NORM_FLOOR)
    unit = emb / norms[:, None]

    gamma = np.zeros(graph.num_nodes, dtype=np.float64)
    neighborhoods: list[np.ndarray] = []
    for v in range(graph.num_nodes):
        nbrs = k_hop_neighbors(graph, v, k, cap=cap, seed=seed)
        neighborhoods.append(nbrs)
        if nbrs.size:
            gamma[v] = float(np.mean(unit[nbrs] @ unit[v]))
    gamma_perturbed = gumbel_perturb(gamma, seed)
    return RelatednessTable(gamma, gamma_perturbed, neighborhoods)


def relatedness_scores(
    embeddings: torch.Tensor,
    nodes: np.ndarray,
    neighborhoods: list[np.ndarray],
) -> torch.Tensor:
    """Differentiable relatedness for ``nodes`` against frozen neighborhood
    snapshots (one entry of ``neighborhoods`` per graph node).
    """
    norms = embeddings.norm(dim=1).clamp_min(NORM_FLOOR)
    unit = embeddings / norms[:, None]
    owners = []
    flat = []
    counts = np.zeros(len(nodes), dtype=np.int64)
    for i, v in enumerate(nodes):
        nbrs = neighborhoods[int(v)]
        counts[i] = len(nbrs)
        if len(nbrs):
            owners.append(np.full(len(nbrs), i, dtype=np.int64))
            flat.append(nbrs)
    gamma = embeddings.new_zeros(len(nodes))
    if not flat:
        return gamma
    owners_t = torch.from_numpy(np.concatenate(owners))
    flat_t = torch.from_numpy(np.concatenate(flat).astype(np.int64))
    nodes_t = torch.from_numpy(np.asarray(nodes, dtype=np.int64))
    cos = (unit[nodes_t[owners_t]] * unit[flat_t]).sum(dim=1)
    gamma = gamma.index_add(0, owners_t, cos)
    denom = torch.from_numpy(np.maximum(counts, 1)).to(gamma.dtype)
    return gamma / denom


def select_anchors(gamma_perturbed: np.ndarray, num_anchors: int) -> np.ndarray:
    """The ``num_anchors`` nodes with the largest perturbed score.

    With Gumbel-perturbed scores this samples without replacement
    proportionally to softmax of the unperturbed scores.
    """
    n = len(gamma_perturbed)
    if num_anchors >= n:
        if num_anchors > n:
            logger.warning("requested %d anchors from %d nodes; taking all", num_anchors, n)
        return np.arange(n, dtype=np.int64)
    order = np.argsort(-gamma_perturbed, kind="stable")
    return np.sort(order[:num_anchors])


def expand_sample(
    graph, anchors: np.ndarray, ratio: float, depth: int, seed: int
) -> PathMask:
    """Grow a node set from the anchors for ``depth`` admission rounds.

    Round j (j = 2 .. depth+1) admits each frontier candidate independently
    with probability ratio**j and masks the edges linking it to the nodes
    that reached it.  Admission decays with distance, so the walk yields
    variable-length paths of at most 2 * depth edges through an anchor.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    rng = np.random.default_rng(seed)
    current: set[int] = {int(a) for a in anchors}
    masked: set[tuple[int, int]] = set()
    for round_index in range(2, depth + 2):
        admit_prob = ratio**round_index
        frontier: set[int] = set()
        for node in current:
            frontier.update(int(u) for u in graph.neighbors(node))
        frontier -= current
        if not frontier:
            break
        admitted = [w for w in sorted(frontier) if rng.random() < admit_prob]
        for w in admitted:
            for u in graph.neighbors(w):
                u = int(u)
                if u in current:
                    masked.add(canonical(u, w))
        current.update(admitted)
    return PathMask(
        anchors=np.asarray(sorted(int(a) for a in anchors), dtype=np.int64),
        nodes=frozenset(current),
        masked_edges=frozenset(masked),
        depth=depth,
        ratio=ratio,
    )


class TaskAdaptiveState:
    """Trailing window of recommendation-loss values used for the mask reward."""

    def __init__(self, window: int = 5, low_reward: float = 0.1):
        if window <= 1:
            raise ValueError(f"window must be > 1, got {window}")
        if not 0.0 < low_reward < 1.0:
            raise ValueError(f"low_reward must be in (0, 1), got {low_reward}")
        self.window = window
        self.low_reward = low_reward
        self.history: deque[float] = deque(maxlen=window + 1)


def task_reward(state: TaskAdaptiveState, current_rec_loss: float) -> float:
    """Reward 1 when the loss is dropping faster than its trailing average,
    otherwise the small constant.  Records the current value afterwards.

    The first two calls are warm-up and return 1.
    """
    h = state.history
    if len(h) < 2:
        reward = 1.0
    else:
        values = list(h)
        improvement = values[-1] - current_rec_loss
        previous = [values[i - 1] - values[i] for i in range(1, len(values))]
        reward = 1.0 if improvement > float(np.mean(previous)) else state.low_reward
    h.append(float(current_rec_loss))
    return reward


def mask_loss(gamma_perturbed, reward: float):
    """Negated, reward-scaled sum of perturbed relatedness scores."""
    if isinstance(gamma_perturbed, torch.Tensor):
        if gamma_perturbed.numel() == 0:
            raise ValueError("mask loss needs a nonempty node subset")
        return -reward * gamma_perturbed.sum()
    arr = np.asarray(gamma_perturbed, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("mask loss needs a nonempty node subset")
    return float(-reward * arr.sum())
