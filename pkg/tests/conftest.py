"""Shared fixtures and oracle helpers for the test suite."""

from __future__ import annotations

import numpy as np
import pytest
import torch

from maerec.corpus import UserSequence, leave_one_out_split
from maerec.transition_graph import TransitionGraph, from_edges


def random_graph(rng: np.random.Generator, num_nodes: int, edge_prob: float) -> TransitionGraph:
    edges = []
    for u in range(num_nodes):
        for v in range(u + 1, num_nodes):
            if rng.random() < edge_prob:
                edges.append((u, v))
    return from_edges(num_nodes, edges)


def random_sequences(
    rng: np.random.Generator, num_users: int, num_items: int, min_len: int = 3, max_len: int = 12
) -> list[UserSequence]:
    out = []
    for u in range(num_users):
        length = int(rng.integers(min_len, max_len + 1))
        out.append(UserSequence(u, [int(i) for i in rng.integers(0, num_items, size=length)]))
    return out


def finite_difference_grads(fn, tensors, eps: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradients of the scalar ``fn()`` with respect to each
    tensor in ``tensors`` (must be float64 leaves that ``fn`` reads)."""
    grads = []
    for tensor in tensors:
        flat = tensor.detach().reshape(-1)
        grad = np.zeros(flat.numel(), dtype=np.float64)
        for i in range(flat.numel()):
            orig = float(flat[i])
            with torch.no_grad():
                flat[i] = orig + eps
            up = float(fn())
            with torch.no_grad():
                flat[i] = orig - eps
            down = float(fn())
            with torch.no_grad():
                flat[i] = orig
            grad[i] = (up - down) / (2.0 * eps)
        grads.append(grad.reshape(tuple(tensor.shape)))
    return grads


def max_relative_error(actual: np.ndarray, expected: np.ndarray) -> float:
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    scale = max(float(np.abs(expected).max(initial=0.0)), 1e-10)
    return float(np.abs(actual - expected).max(initial=0.0)) / scale


def assert_gradients_match(fn, tensors, rel_tol: float = 1e-4, eps: float = 1e-5) -> None:
    """Autograd gradients of fn() must match central finite differences."""
    for t in tensors:
        if t.grad is not None:
            t.grad = None
    loss = fn()
    loss.backward()
    numeric = finite_difference_grads(fn, tensors, eps=eps)
    for tensor, num in zip(tensors, numeric):
        ana = tensor.grad.detach().numpy() if tensor.grad is not None else np.zeros_like(num)
        err = max_relative_error(ana, num)
        assert err <= rel_tol, f"gradient mismatch: rel err {err:.3e} > {rel_tol}"


@pytest.fixture(scope="session")
def synth_corpus_default():
    from maerec.cli import synth_corpus

    sequences, cluster_of = synth_corpus(1000, 500, seed=7)
    return sequences, cluster_of


@pytest.fixture(scope="session")
def synth_split(synth_corpus_default):
    sequences, _ = synth_corpus_default
    return leave_one_out_split(sequences)
