"""Leave-one-out ranking evaluation: HR@K / NDCG@K with bucket breakdowns."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from maerec.corpus import SplitCorpus, bucket_label

logger = logging.getLogger(__name__)

DEFAULT_KS = (5, 10, 20)


@dataclass
class MetricsReport:
    """Aggregated ranking metrics plus the per-bucket breakdown.

    The model interface required by :func:`evaluate` is two methods:
    ``eval_item_matrix() -> (num_items, d)`` and
    ``eval_last_position(list_of_item_lists) -> (batch, d)``.
    """

    protocol: str
    ks: tuple[int, ...]
    num_users: int
    hr: dict[int, float]
    ndcg: dict[int, float]
    bucket_counts: dict[str, int] = field(default_factory=dict)
    bucket_hr: dict[str, dict[int, float]] = field(default_factory=dict)
    bucket_ndcg: dict[str, dict[int, float]] = field(default_factory=dict)
    tag: str = ""

    def rows(self) -> list[tuple[str, int, str, float]]:
        """CSV-ready (metric, K, tag, value) rows, overall first."""
        out = []
        scope = self.tag or "overall"
        for k in self.ks:
            out.append(("HR", k, scope, self.hr[k]))
            out.append(("NDCG", k, scope, self.ndcg[k]))
        for bucket in self.bucket_counts:
            btag = f"{scope}|bucket={bucket}" if self.tag else f"bucket={bucket}"
            for k in self.ks:
                out.append(("HR", k, btag, self.bucket_hr[bucket][k]))
                out.append(("NDCG", k, btag, self.bucket_ndcg[bucket][k]))
        return out

    def format_table(self) -> str:
        lines = [f"protocol: {self.protocol}   users: {self.num_users}"]
        header = "metric   " + "".join(f"@{k:<8}" for k in self.ks)
        lines.append(header)
        lines.append("HR       " + "".join(f"{self.hr[k]:<9.4f}" for k in self.ks))
        lines.append("NDCG     " + "".join(f"{self.ndcg[k]:<9.4f}" for k in self.ks))
        for bucket, count in self.bucket_counts.items():
            lines.append(
                f"  {bucket} (n={count}): "
                + "  ".join(
                    f"HR@{k}={self.bucket_hr[bucket][k]:.4f} NDCG@{k}={self.bucket_ndcg[bucket][k]:.4f}"
                    for k in self.ks
                )
            )
        return "\n".join(lines)


def rank_target(
    seq_embedding: np.ndarray,
    target: int,
    candidates: np.ndarray,
    item_matrix: np.ndarray,
) -> int:
    """1-indexed rank of the target among candidates by descending dot
    product, ties broken by ascending item index."""
    candidates = np.asarray(candidates, dtype=np.int64)
    hits = np.flatnonzero(candidates == target)
    if hits.size == 0:
        raise ValueError(f"target {target} missing from the candidate set")
    scores = item_matrix[candidates] @ np.asarray(seq_embedding, dtype=np.float64)
    target_score = scores[hits[0]]
    better = int((scores > target_score).sum())
    tied_before = int(((scores == target_score) & (candidates < target)).sum())
    return 1 + better + tied_before


def hr_ndcg(ranks, k: int) -> tuple[float, float]:
    """Hit ratio and NDCG at cutoff k for a collection of 1-indexed ranks."""
    ranks = np.asarray(ranks, dtype=np.int64)
    if ranks.size == 0:
        raise ValueError("hr_ndcg needs at least one rank")
    hits = ranks <= k
    hr = float(hits.mean())
    gains = np.where(hits, 1.0 / np.log2(ranks + 1.0), 0.0)
    return hr, float(gains.mean())


def _sampled_candidates(
    split: SplitCorpus, user: int, target: int, num_negatives: int, seed: int
) -> np.ndarray:
    rng = np.random.default_rng([seed, user])
    pool = np.setdiff1d(
        np.arange(split.num_items, dtype=np.int64),
        np.fromiter(split.user_items(user), dtype=np.int64),
    )
    if pool.size < num_negatives:
        logger.warning("user %d: only %d eligible negatives", user, pool.size)
        negatives = pool
    else:
        negatives = rng.choice(pool, size=num_negatives, replace=False)
    return np.concatenate([[target], negatives])


def evaluate(
    model,
    split: SplitCorpus,
    protocol: str = "sampled",
    num_negatives: int = 100,
    seed: int = 0,
    ks: tuple[int, ...] = DEFAULT_KS,
    target: str = "test",
    batch_size: int = 256,
    tag: str = "",
) -> MetricsReport:
    """Rank each user's held-out item against the full catalog or against
    sampled negatives, then aggregate HR/NDCG overall and per length bucket.
    """
    if protocol not in ("sampled", "full"):
        raise ValueError(f"unknown protocol {protocol!r}")
    if target == "validation":
        targets = split.validation_targets
    elif target == "test":
        targets = split.test_targets
    else:
        raise ValueError(f"unknown target split {target!r}")
    if not targets:
        raise ValueError(f"no {target} targets in the split")

    users = sorted(targets)
    inputs = []
    for user in users:
        items = list(split.train_sequence(user).items)
        if target == "test" and user in split.validation_targets:
            items.append(split.validation_targets[user])
        inputs.append(items)

    item_matrix = model.eval_item_matrix()
    embeddings = model.eval_last_position(inputs, batch_size=batch_size)

    ranks = np.zeros(len(users), dtype=np.int64)
    if protocol == "full":
        all_items = np.arange(split.num_items, dtype=np.int64)
        for i, user in enumerate(users):
            ranks[i] = rank_target(embeddings[i], targets[user], all_items, item_matrix)
    else:
        for i, user in enumerate(users):
            candidates = _sampled_candidates(split, user, targets[user], num_negatives, seed)
            ranks[i] = rank_target(embeddings[i], targets[user], candidates, item_matrix)

    label = "full" if protocol == "full" else f"sampled({num_negatives})"
    report = MetricsReport(
        protocol=label,
        ks=tuple(ks),
        num_users=len(users),
        hr={},
        ndcg={},
        tag=tag,
    )
    for k in ks:
        report.hr[k], report.ndcg[k] = hr_ndcg(ranks, k)

    lengths = np.array([split.full_length(u) for u in users])
    for bucket in sorted({bucket_label(int(l)) for l in lengths}):
        member = np.array([bucket_label(int(l)) == bucket for l in lengths])
        report.bucket_counts[bucket] = int(member.sum())
        report.bucket_hr[bucket] = {}
        report.bucket_ndcg[bucket] = {}
        for k in ks:
            hr_b, ndcg_b = hr_ndcg(ranks[member], k)
            report.bucket_hr[bucket][k] = hr_b
            report.bucket_ndcg[bucket][k] = ndcg_b
    return report


def write_metrics_csv(reports, path) -> None:
    """Write one or more reports as (metric, K, tag, value) CSV rows."""
    if isinstance(reports, MetricsReport):
        reports = [reports]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("metric,K,tag,value\n")
        for report in reports:
            for metric, k, tag, value in report.rows():
                fh.write(f"{metric},{k},{tag},{value:.10g}\n")
