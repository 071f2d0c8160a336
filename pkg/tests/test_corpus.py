"""Corpus ingestion, splitting and perturbation tests."""

import numpy as np
import pytest

from conftest import random_sequences
from maerec.corpus import (
    CorpusFormatError,
    EmptyCorpusError,
    InteractionRecord,
    UserSequence,
    build_sequences,
    bucket_label,
    inject_noise,
    leave_one_out_split,
    load_corpus,
    prefix_instances,
    read_interactions,
    sparsity_buckets,
    write_metadata,
    write_sequences,
)


def write(tmp_path, text, name="corpus.txt"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


class TestLoadCorpus:
    def test_sorts_by_timestamp(self, tmp_path):
        path = write(tmp_path, "u1\tc\t30\nu1\ta\t10\nu1\tb\t20\n")
        seqs = load_corpus(path, "triples")
        assert len(seqs) == 1
        # a, b, c appear in timestamp order; dense ids assigned in that order
        assert seqs[0].items == [0, 1, 2]

    def test_min_seq_len_filter(self, tmp_path):
        path = write(tmp_path, "u1\ta\t1\nu1\tb\t2\nu1\tc\t3\nu2\ta\t1\nu2\tb\t2\n")
        seqs = load_corpus(path, "triples", min_seq_len=3)
        assert len(seqs) == 1
        assert seqs[0].user == 0

    def test_timestamp_ties_keep_input_order(self, tmp_path):
        path = write(tmp_path, "u\tx\t5\nu\ty\t5\nu\tz\t5\n")
        seqs = load_corpus(path, "triples")
        assert seqs[0].items == [0, 1, 2]

    def test_comments_and_blank_lines(self, tmp_path):
        path = write(tmp_path, "# header\n\nu\ta\t1\nu\tb\t2\nu\tc\t3\n")
        assert len(load_corpus(path, "triples")) == 1

    def test_sequences_format(self, tmp_path):
        path = write(tmp_path, "u1\ta,b,c\nu2\tc,a,d\n")
        seqs = load_corpus(path, "sequences")
        assert seqs[0].items == [0, 1, 2]
        assert seqs[1].items == [2, 0, 3]

    def test_malformed_line_reports_number(self, tmp_path):
        path = write(tmp_path, "u\ta\t1\nu\tb\n")
        with pytest.raises(CorpusFormatError, match="line 2"):
            read_interactions(path, "triples")

    def test_bad_timestamp(self, tmp_path):
        path = write(tmp_path, "u\ta\txyz\n")
        with pytest.raises(CorpusFormatError, match="line 1"):
            read_interactions(path, "triples")

    def test_empty_after_filtering(self, tmp_path):
        path = write(tmp_path, "u\ta\t1\n")
        with pytest.raises(EmptyCorpusError):
            load_corpus(path, "triples", min_seq_len=3)

    def test_unknown_format(self, tmp_path):
        path = write(tmp_path, "u\ta\t1\n")
        with pytest.raises(ValueError, match="format"):
            read_interactions(path, "json")

    def test_matches_sort_and_group_oracle(self, tmp_path):
        rng = np.random.default_rng(11)
        records = []
        for u in range(50):
            for _ in range(int(rng.integers(1, 9))):
                records.append(
                    (f"user{u}", f"item{rng.integers(0, 30)}", int(rng.integers(0, 50)))
                )
        rng.shuffle(records)
        path = write(tmp_path, "".join(f"{u}\t{i}\t{t}\n" for u, i, t in records))

        seqs, user_ids, item_ids = build_sequences(read_interactions(path, "triples"), 3)

        # Independent oracle: group, stable sort per user by timestamp, filter.
        grouped = {}
        for idx, (u, i, t) in enumerate(records):
            grouped.setdefault(u, []).append((t, idx, i))
        expected = {
            u: [i for _, _, i in sorted(recs, key=lambda r: (r[0], r[1]))]
            for u, recs in grouped.items()
            if len(recs) >= 3
        }
        got = {user_ids[s.user]: [item_ids[i] for i in s.items] for s in seqs}
        assert got == expected

    def test_dense_reindex_is_bijection(self, tmp_path):
        rng = np.random.default_rng(3)
        lines = []
        for u in range(20):
            for t in range(4):
                lines.append(f"u{u}\titem{rng.integers(0, 40)}\t{t}\n")
        path = write(tmp_path, "".join(lines))
        seqs, user_ids, item_ids = build_sequences(read_interactions(path, "triples"), 3)
        assert len(set(user_ids)) == len(user_ids)
        assert len(set(item_ids)) == len(item_ids)
        used = {i for s in seqs for i in s.items}
        assert used == set(range(len(item_ids)))


class TestSplit:
    def test_with_validation(self):
        split = leave_one_out_split([UserSequence(0, [1, 2, 3, 4])], use_validation=True)
        assert split.train_sequences[0].items == [1, 2]
        assert split.validation_targets == {0: 3}
        assert split.test_targets == {0: 4}

    def test_without_validation(self):
        split = leave_one_out_split([UserSequence(0, [1, 2, 3])])
        assert split.train_sequences[0].items == [1, 2]
        assert split.test_targets == {0: 3}
        assert split.validation_targets == {}

    def test_too_short_users_dropped(self, caplog):
        seqs = [UserSequence(0, [1, 2]), UserSequence(1, [1, 2, 3])]
        with caplog.at_level("WARNING"):
            split = leave_one_out_split(seqs, use_validation=True)
        assert split.num_users == 1
        assert "dropped 1" in caplog.text

    def test_reconstruction_oracle(self):
        rng = np.random.default_rng(5)
        seqs = random_sequences(rng, 100, 40)
        split = leave_one_out_split(seqs, use_validation=True)
        for seq in seqs:
            rebuilt = list(split.train_sequence(seq.user).items)
            rebuilt.append(split.validation_targets[seq.user])
            rebuilt.append(split.test_targets[seq.user])
            assert rebuilt == seq.items

    def test_user_items_covers_original(self):
        seqs = [UserSequence(0, [4, 5, 4, 6])]
        split = leave_one_out_split(seqs, use_validation=True)
        assert split.user_items(0) == frozenset({4, 5, 6})
        assert split.full_length(0) == 4


class TestPrefixInstances:
    def test_basic_pattern(self):
        got = prefix_instances(UserSequence(0, [7, 8, 9]))
        assert got == [([7], 8), ([7, 8], 9)]

    def test_length_two(self):
        assert len(prefix_instances(UserSequence(0, [1, 2]))) == 1

    def test_truncation_window(self):
        got = prefix_instances(UserSequence(0, [1, 2, 3, 4]), max_len=2)
        assert got[-1] == ([2, 3], 4)

    def test_count_is_length_minus_one(self):
        rng = np.random.default_rng(0)
        for seq in random_sequences(rng, 20, 30, min_len=2, max_len=15):
            for max_len in (2, 5, 50):
                assert len(prefix_instances(seq, max_len)) == len(seq.items) - 1


class TestInjectNoise:
    def test_zero_ratio_is_identity(self):
        seqs = [UserSequence(0, [1, 2, 3])]
        out = inject_noise(seqs, 0.0, seed=1, num_items=10)
        assert out[0].items == [1, 2, 3]

    def test_replacement_count(self):
        seqs = [UserSequence(0, list(range(8)))]
        out = inject_noise(seqs, 0.25, seed=1, num_items=50)
        changed = sum(a != b for a, b in zip(seqs[0].items, out[0].items))
        assert changed == 2

    def test_replacements_outside_original(self):
        rng = np.random.default_rng(9)
        seqs = random_sequences(rng, 40, 25)
        out = inject_noise(seqs, 0.35, seed=2, num_items=25)
        for before, after in zip(seqs, out):
            original = set(before.items)
            for a, b in zip(before.items, after.items):
                if a != b:
                    assert b not in original

    def test_preserves_lengths_and_users(self):
        rng = np.random.default_rng(10)
        seqs = random_sequences(rng, 30, 20)
        out = inject_noise(seqs, 0.2, seed=3, num_items=20)
        assert [s.user for s in out] == [s.user for s in seqs]
        assert [len(s.items) for s in out] == [len(s.items) for s in seqs]

    def test_deterministic(self):
        seqs = random_sequences(np.random.default_rng(1), 10, 15)
        a = inject_noise(seqs, 0.3, seed=4, num_items=15)
        b = inject_noise(seqs, 0.3, seed=4, num_items=15)
        assert [s.items for s in a] == [s.items for s in b]

    def test_bad_ratio(self):
        with pytest.raises(ValueError):
            inject_noise([], 1.0, seed=0, num_items=5)
        with pytest.raises(ValueError):
            inject_noise([], -0.1, seed=0, num_items=5)


class TestSparsityBuckets:
    def test_boundaries(self):
        assert bucket_label(3) == "[3,5)"
        assert bucket_label(4) == "[3,5)"
        assert bucket_label(5) == "[5,10)"
        assert bucket_label(19) == "[10,20)"
        assert bucket_label(20) == "[20,inf)"
        assert bucket_label(500) == "[20,inf)"

    def test_partition(self):
        rng = np.random.default_rng(2)
        seqs = random_sequences(rng, 80, 30, min_len=3, max_len=30)
        buckets = sparsity_buckets(seqs)
        total = sum(len(users) for users in buckets.values())
        assert total == len(seqs)
        seen = [u for users in buckets.values() for u in users]
        assert len(set(seen)) == len(seen)


class TestSerialization:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(8)
        seqs = random_sequences(rng, 12, 10)
        path = tmp_path / "prepared.txt"
        write_sequences(path, seqs)
        reloaded = load_corpus(path, "sequences")
        assert [len(s.items) for s in reloaded] == [len(s.items) for s in seqs]
        # structure preserved up to dense re-indexing
        _, _, item_ids = build_sequences(read_interactions(path, "sequences"), 3)
        for orig, new in zip(seqs, reloaded):
            assert [int(item_ids[i]) for i in new.items] == orig.items

    def test_metadata_contents(self, tmp_path):
        path = tmp_path / "meta.txt"
        write_metadata(path, ["alice", "bob"], ["x", "y", "z"], min_seq_len=3)
        lines = path.read_text().splitlines()
        assert "num_users=2" in lines
        assert "num_items=3" in lines
        assert "user.1=bob" in lines
        assert "item.2=z" in lines
