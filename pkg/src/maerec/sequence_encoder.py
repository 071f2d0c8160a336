"""Causal multi-head Transformer over graph-refined item embeddings."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

PAD = -1


@dataclass
class SequenceBatch:
    """Left-padded item index matrix with optional per-position targets."""

    items: np.ndarray
    lengths: np.ndarray
    users: np.ndarray
    targets: np.ndarray | None = None

    @property
    def mask(self) -> np.ndarray:
        return self.items != PAD


def make_batch(rows, pad_to: int | None = None) -> SequenceBatch:
    """Assemble (user, items[, targets]) rows into a left-padded batch."""
    users = np.array([r[0] for r in rows], dtype=np.int64)
    lengths = np.array([len(r[1]) for r in rows], dtype=np.int64)
    width = int(lengths.max()) if pad_to is None else pad_to
    items = np.full((len(rows), width), PAD, dtype=np.int64)
    targets = None
    with_targets = len(rows[0]) > 2 and rows[0][2] is not None
    if with_targets:
        targets = np.full((len(rows), width), PAD, dtype=np.int64)
    for i, row in enumerate(rows):
        seq = row[1]
        items[i, width - len(seq):] = seq
        if with_targets:
            targets[i, width - len(seq):] = row[2]
    return SequenceBatch(items, lengths, users, targets)


def _dropout(x: torch.Tensor, p: float, gen: torch.Generator | None) -> torch.Tensor:
    if gen is None or p <= 0.0:
        return x
    keep = (torch.rand(x.shape, generator=gen, dtype=x.dtype) >= p).to(x.dtype)
    return x * keep / (1.0 - p)


class AttentionBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int, dropout: float, use_layernorm: bool, use_residual: bool):
        super().__init__()
        if dim % num_heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {num_heads}")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.dropout = dropout
        self.use_residual = use_residual
        self.query = nn.Linear(dim, dim, bias=False)
        self.key = nn.Linear(dim, dim, bias=False)
        self.value = nn.Linear(dim, dim, bias=False)
        self.ff_in = nn.Linear(dim, dim)
        self.ff_out = nn.Linear(dim, dim)
        self.norm = nn.LayerNorm(dim) if use_layernorm else None

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, t, _ = x.shape
        return x.view(b, t, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(
        self,
        x: torch.Tensor,
        key_valid: torch.Tensor,
        dropout_gen: torch.Generator | None = None,
        attention_sink: list | None = None,
    ) -> torch.Tensor:
        b, t, d = x.shape
        h = self.norm(x) if self.norm is not None else x
        h = _dropout(h, self.dropout, dropout_gen)
        q, k, v = self._split(self.query(h)), self._split(self.key(h)), self._split(self.value(h))
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        causal = torch.ones(t, t, dtype=torch.bool).tril()
        blocked = ~(causal[None, None] & key_valid[:, None, None, :])
        logits = logits.masked_fill(blocked, torch.finfo(x.dtype).min / 4)
        weights = torch.softmax(logits, dim=-1)
        if attention_sink is not None:
            attention_sink.append(weights.detach())
        weights = _dropout(weights, self.dropout, dropout_gen)
        attended = (weights @ v).transpose(1, 2).reshape(b, t, d)
        y = x + attended if self.use_residual else attended
        z = self.ff_out(torch.relu(self.ff_in(y)))
        return y + z if self.use_residual else z


class SequenceEncoder(nn.Module):
    """Stack of causal attention blocks; the sequence representation is the
    sum of all block outputs, with padded positions zeroed.
    """

    def __init__(
        self,
        dim: int,
        max_len: int,
        num_blocks: int = 2,
        num_heads: int = 4,
        dropout: float = 0.2,
        use_layernorm: bool = True,
        use_residual: bool = True,
    ):
        super().__init__()
        self.max_len = max_len
        self.positional = nn.Parameter(torch.zeros(max_len, dim))
        self.blocks = nn.ModuleList(
            AttentionBlock(dim, num_heads, dropout, use_layernorm, use_residual)
            for _ in range(num_blocks)
        )

    def embed_sequence(
        self, items: torch.Tensor, lengths: torch.Tensor, item_table: torch.Tensor
    ) -> torch.Tensor:
        """Item embedding plus learned positional embedding; zeros at padding.

        Positions count from the start of each (possibly truncated) sequence,
        so extra left padding does not shift them.
        """
        if int(items.max()) >= item_table.shape[0]:
            raise IndexError("item index out of range of the embedding table")
        t = items.shape[1]
        if int(lengths.max()) > self.max_len:
            raise IndexError(f"sequence longer than max_len={self.max_len}")
        valid = items != PAD
        positions = torch.arange(t) + (lengths[:, None] - t)
        emb = item_table[items.clamp(min=0)] + self.positional[positions.clamp(min=0)]
        return emb * valid.unsqueeze(-1).to(emb.dtype)

    def encode_sequence(
        self,
        embedded: torch.Tensor,
        valid: torch.Tensor,
        dropout_gen: torch.Generator | None = None,
        attention_sink: list | None = None,
    ) -> torch.Tensor:
        x = embedded
        total = torch.zeros_like(x)
        for block in self.blocks:
            x = block(x, valid, dropout_gen=dropout_gen, attention_sink=attention_sink)
            total = total + x
        return total * valid.unsqueeze(-1).to(total.dtype)

    def forward(
        self,
        items: torch.Tensor,
        lengths: torch.Tensor,
        item_table: torch.Tensor,
        dropout_gen: torch.Generator | None = None,
    ) -> torch.Tensor:
        emb = self.embed_sequence(items, lengths, item_table)
        return self.encode_sequence(emb, items != PAD, dropout_gen=dropout_gen)
