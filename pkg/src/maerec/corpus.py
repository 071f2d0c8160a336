"""Interaction-log ingestion, leave-one-out splitting and corpus perturbations."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_MIN_SEQ_LEN = 3
DEFAULT_MAX_LEN = 50

# Sequence-length buckets for the sparsity breakdown; upper bound None = open.
SPARSITY_BUCKETS = ((3, 5), (5, 10), (10, 20), (20, None))


class CorpusFormatError(ValueError):
    """A corpus file line that cannot be parsed (carries the line number)."""


class EmptyCorpusError(ValueError):
    """No usable sequences remain after filtering."""


@dataclass(frozen=True)
class InteractionRecord:
    user: str
    item: str
    timestamp: int


@dataclass
class UserSequence:
    """One user's temporally ordered interactions, in dense item indices."""

    user: int
    items: list[int]

    def __len__(self) -> int:
        return len(self.items)


@dataclass
class SplitCorpus:
    """Leave-one-out split: per-user train sequence plus held-out targets."""

    train_sequences: list[UserSequence]
    validation_targets: dict[int, int]
    test_targets: dict[int, int]
    num_items: int
    num_users: int
    _item_sets: dict[int, frozenset[int]] = field(default_factory=dict, repr=False)

    def full_length(self, user: int) -> int:
        extra = 1 if user in self.validation_targets else 0
        return len(self._train_by_user[user].items) + extra + 1

    def user_items(self, user: int) -> frozenset[int]:
        """All items of the user's original sequence (train + held out)."""
        cached = self._item_sets.get(user)
        if cached is None:
            items = set(self._train_by_user[user].items)
            if user in self.validation_targets:
                items.add(self.validation_targets[user])
            items.add(self.test_targets[user])
            cached = frozenset(items)
            self._item_sets[user] = cached
        return cached

    @property
    def _train_by_user(self) -> dict[int, UserSequence]:
        by_user = getattr(self, "_by_user_cache", None)
        if by_user is None:
            by_user = {s.user: s for s in self.train_sequences}
            self._by_user_cache = by_user
        return by_user

    def train_sequence(self, user: int) -> UserSequence:
        return self._train_by_user[user]


def read_interactions(path, fmt: str = "triples") -> list[InteractionRecord]:
    """Parse a corpus file into records.

    ``triples`` lines are ``user<TAB>item<TAB>timestamp``; ``sequences``
    lines are ``user<TAB>item1,item2,...`` (positions become timestamps).
    Lines starting with ``#`` and blank lines are skipped.
    """
    if fmt not in ("triples", "sequences"):
        raise ValueError(f"unknown corpus format: {fmt!r}")
    records: list[InteractionRecord] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if fmt == "triples":
                if len(parts) != 3:
                    raise CorpusFormatError(
                        f"line {lineno}: expected user<TAB>item<TAB>timestamp, got {line!r}"
                    )
                user, item, ts = parts
                try:
                    timestamp = int(ts)
                except ValueError as exc:
                    raise CorpusFormatError(
                        f"line {lineno}: non-integer timestamp {ts!r}"
                    ) from exc
                if not user or not item:
                    raise CorpusFormatError(f"line {lineno}: empty user or item id")
                records.append(InteractionRecord(user, item, timestamp))
            else:
                if len(parts) != 2 or not parts[0]:
                    raise CorpusFormatError(
                        f"line {lineno}: expected user<TAB>item1,item2,..., got {line!r}"
                    )
                user, item_csv = parts
                items = item_csv.split(",")
                if any(not it for it in items):
                    raise CorpusFormatError(f"line {lineno}: empty item id")
                for pos, item in enumerate(items):
                    records.append(InteractionRecord(user, item, pos))
    return records


def build_sequences(
    records: list[InteractionRecord], min_seq_len: int = DEFAULT_MIN_SEQ_LEN
) -> tuple[list[UserSequence], list[str], list[str]]:
    """Group records into per-user sequences with dense re-indexing.

    Records are sorted by timestamp within each user (stable, so input
    order breaks ties); users with fewer than ``min_seq_len`` interactions
    are dropped.  Returns the sequences plus the dense-index -> original-id
    maps for users and items, assigned in order of first appearance.
    """
    per_user: dict[str, list[InteractionRecord]] = {}
    for rec in records:
        per_user.setdefault(rec.user, []).append(rec)

    user_ids: list[str] = []
    item_ids: list[str] = []
    item_index: dict[str, int] = {}
    sequences: list[UserSequence] = []
    for user, recs in per_user.items():
        if len(recs) < min_seq_len:
            continue
        recs = sorted(recs, key=lambda r: r.timestamp)
        dense_user = len(user_ids)
        user_ids.append(user)
        items = []
        for rec in recs:
            idx = item_index.get(rec.item)
            if idx is None:
                idx = len(item_ids)
                item_index[rec.item] = idx
                item_ids.append(rec.item)
            items.append(idx)
        sequences.append(UserSequence(dense_user, items))
    if not sequences:
        raise EmptyCorpusError(
            f"no users with at least {min_seq_len} interactions"
        )
    return sequences, user_ids, item_ids


def load_corpus(
    path, fmt: str = "triples", min_seq_len: int = DEFAULT_MIN_SEQ_LEN
) -> list[UserSequence]:
    sequences, _, _ = build_sequences(read_interactions(path, fmt), min_seq_len)
    return sequences


def num_items_of(sequences: list[UserSequence]) -> int:
    return 1 + max(max(s.items) for s in sequences) if sequences else 0


def leave_one_out_split(
    sequences: list[UserSequence], use_validation: bool = False
) -> SplitCorpus:
    """Hold out each user's last item for test (and second-to-last for
    validation when enabled); the remainder is the train sequence.

    Users too short for the requested split are dropped with a warning.
    """
    min_len = 3 if use_validation else 2
    train: list[UserSequence] = []
    val: dict[int, int] = {}
    test: dict[int, int] = {}
    dropped = 0
    for seq in sequences:
        if len(seq.items) < min_len:
            dropped += 1
            continue
        items = list(seq.items)
        test[seq.user] = items.pop()
        if use_validation:
            val[seq.user] = items.pop()
        train.append(UserSequence(seq.user, items))
    if dropped:
        logger.warning("leave-one-out: dropped %d users too short to split", dropped)
    if not train:
        raise EmptyCorpusError("no users survive the leave-one-out split")
    return SplitCorpus(
        train_sequences=train,
        validation_targets=val,
        test_targets=test,
        num_items=num_items_of(sequences),
        num_users=len(train),
    )


def prefix_instances(
    sequence: UserSequence, max_len: int = DEFAULT_MAX_LEN
) -> list[tuple[list[int], int]]:
    """All (prefix, next-item) training instances of a sequence.

    Prefixes keep only their most recent ``max_len`` items.
    """
    items = sequence.items
    out = []
    for t in range(1, len(items)):
        lo = max(0, t - max_len)
        out.append((items[lo:t], items[t]))
    return out


def inject_noise(
    sequences: list[UserSequence],
    ratio: float,
    seed: int,
    num_items: int | None = None,
) -> list[UserSequence]:
    """Replace floor(ratio * length) positions per sequence with random items.

    Replacement items are drawn uniformly from the items NOT present in
    that user's original sequence.  Deterministic for a fixed seed.
    """
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"noise ratio must be in [0, 1), got {ratio}")
    if num_items is None:
        num_items = num_items_of(sequences)
    rng = np.random.default_rng(seed)
    out = []
    for seq in sequences:
        items = list(seq.items)
        n_replace = int(ratio * len(items))
        if n_replace == 0:
            out.append(UserSequence(seq.user, items))
            continue
        own = np.unique(np.asarray(seq.items, dtype=np.int64))
        pool = np.setdiff1d(np.arange(num_items, dtype=np.int64), own)
        if pool.size == 0:
            logger.warning("user %d interacted with every item; left unchanged", seq.user)
            out.append(UserSequence(seq.user, items))
            continue
        positions = rng.choice(len(items), size=n_replace, replace=False)
        replacements = rng.choice(pool, size=n_replace, replace=True)
        for pos, rep in zip(positions, replacements):
            items[int(pos)] = int(rep)
        out.append(UserSequence(seq.user, items))
    return out


def bucket_label(length: int) -> str:
    for lo, hi in SPARSITY_BUCKETS:
        if hi is None or length < hi:
            return f"[{lo},{hi if hi is not None else 'inf'})"
    raise AssertionError("unreachable")


def sparsity_buckets(sequences: list[UserSequence]) -> dict[str, list[int]]:
    """Partition users into the sequence-length buckets of SPARSITY_BUCKETS."""
    buckets: dict[str, list[int]] = {
        f"[{lo},{hi if hi is not None else 'inf'})": [] for lo, hi in SPARSITY_BUCKETS
    }
    for seq in sequences:
        buckets[bucket_label(len(seq.items))].append(seq.user)
    return buckets


def write_sequences(path, sequences: list[UserSequence]) -> None:
    """Serialize sequences in the ``sequences`` text format (dense indices)."""
    with open(path, "w", encoding="utf-8") as fh:
        for seq in sequences:
            fh.write(f"{seq.user}\t{','.join(str(i) for i in seq.items)}\n")


def write_metadata(path, user_ids: list[str], item_ids: list[str], **extra) -> None:
    """Sidecar key-value metadata: counts plus dense-index -> original-id maps."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"num_users={len(user_ids)}\n")
        fh.write(f"num_items={len(item_ids)}\n")
        for key, value in extra.items():
            fh.write(f"{key}={value}\n")
        for idx, orig in enumerate(user_ids):
            fh.write(f"user.{idx}={orig}\n")
        for idx, orig in enumerate(item_ids):
            fh.write(f"item.{idx}={orig}\n")
