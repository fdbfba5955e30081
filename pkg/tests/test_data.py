"""Interaction loading, core filtering, the split, and batch assembly."""

import logging

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mltfr import (
    DataFormatError,
    EmptyDatasetError,
    InteractionSequence,
    batch_and_negatives,
    core_filter,
    load_interactions,
    read_id_map,
    split_leave_one_out,
    write_id_map,
)
from mltfr.data import pad_prefixes, parse_interaction_line


def seqs(*item_lists):
    return [InteractionSequence(user_id=u + 1, items=list(items)) for u, items in enumerate(item_lists)]


def brute_force_core(sequences, min_core):
    """Oracle: repeatedly re-apply both rules until nothing changes."""
    current = [(s.user_id, tuple(s.items)) for s in sequences]
    while True:
        counts = {}
        for _, items in current:
            for it in items:
                counts[it] = counts.get(it, 0) + 1
        trimmed = []
        for uid, items in current:
            kept = tuple(it for it in items if counts[it] >= min_core)
            if len(kept) >= min_core:
                trimmed.append((uid, kept))
        if trimmed == current:
            return current
        current = trimmed


class TestParsing:
    def test_malformed_line_reports_its_number(self, tmp_path):
        path = tmp_path / "raw.txt"
        path.write_text("1 2 3\n7\n")
        with pytest.raises(DataFormatError, match="line 2"):
            load_interactions(path, min_core=1)

    def test_non_integer_token_rejected(self):
        with pytest.raises(DataFormatError, match="line 4"):
            parse_interaction_line("1 2 x", 4)

    def test_blank_lines_skipped(self, tmp_path):
        path = tmp_path / "raw.txt"
        path.write_text("\n1 10 11\n\n2 10 11\n")
        data = load_interactions(path, min_core=1)
        assert len(data.sequences) == 2


class TestCoreFilter:
    def test_shared_items_survive_min_core_one(self):
        data = core_filter(seqs([1, 2, 3, 4, 5], [1, 2, 3, 4, 5], [1, 2, 3, 4, 5]), 1)
        assert len(data) == 3
        assert {it for s in data for it in s.items} == {1, 2, 3, 4, 5}

    def test_rare_item_removed_at_five_core(self):
        base = [[10, 11, 12, 13, 14, 15]] * 5
        base[0] = base[0] + [99]  # 99 occurs once
        result = core_filter(seqs(*base), 5)
        assert all(99 not in s.items for s in result)
        assert all(len(s.items) >= 5 for s in result)

    @settings(max_examples=40, deadline=None)
    @given(
        data=st.lists(
            st.lists(st.integers(1, 12), min_size=1, max_size=10), min_size=1, max_size=12
        ),
        min_core=st.integers(1, 4),
    )
    def test_fixpoint_matches_brute_force(self, data, min_core):
        sequences = seqs(*data)
        result = core_filter(sequences, min_core)
        oracle = brute_force_core(sequences, min_core)
        assert [(s.user_id, tuple(s.items)) for s in result] == oracle
        # fixpoint post-conditions
        counts = {}
        for s in result:
            for it in s.items:
                counts[it] = counts.get(it, 0) + 1
        assert all(len(s.items) >= min_core for s in result)
        assert all(c >= min_core for c in counts.values())


class TestLoadAndReindex:
    def test_dense_ids_start_at_one(self, tmp_path):
        path = tmp_path / "raw.txt"
        path.write_text("40 100 200 300\n50 100 200 300\n60 300 200 100\n")
        data = load_interactions(path, min_core=3)
        assert data.n_items == 3
        assert sorted({it for s in data.sequences for it in s.items}) == [1, 2, 3]
        assert sorted(data.item_id_map) == [100, 200, 300]
        assert sorted(data.item_id_map.values()) == [1, 2, 3]
        assert sorted(data.user_id_map.values()) == [1, 2, 3]

    def test_everything_filtered_is_an_error(self, tmp_path):
        path = tmp_path / "raw.txt"
        path.write_text("1 10 11\n2 12 13\n")
        with pytest.raises(EmptyDatasetError):
            load_interactions(path, min_core=5)

    def test_id_map_round_trip(self, tmp_path):
        mapping = {100: 1, 250: 2, 999: 3}
        path = tmp_path / "items.map"
        write_id_map(path, mapping)
        assert read_id_map(path) == mapping
        assert path.read_text().splitlines()[0] == "100\t1"


class TestSplit:
    def test_long_sequence_keeps_prefix(self):
        train, holdout = split_leave_one_out(seqs([1, 2, 3, 4]))
        assert train[0].items == [1, 2, 3]
        assert holdout[0].prefix == [1, 2, 3]
        assert holdout[0].target == 4

    def test_three_item_sequence_is_eval_only(self):
        train, holdout = split_leave_one_out(seqs([1, 2, 3]))
        assert train == []
        assert len(holdout) == 1
        assert holdout[0].prefix == [1, 2]
        assert holdout[0].target == 3

    def test_short_sequences_skipped_with_warning(self, caplog):
        with caplog.at_level(logging.WARNING):
            train, holdout = split_leave_one_out(seqs([5], [1, 2, 3, 4]))
        assert len(holdout) == 1
        assert "skipped 1" in caplog.text


class TestBatching:
    def test_truncation_keeps_most_recent_items(self):
        train = seqs([1, 2, 3, 4, 5, 6, 7])
        [batch] = batch_and_negatives(train, 10, 4, max_len=5, seed=0, shuffle=False)
        # most recent 5 of the sequence are 3..7; the last becomes the target
        assert batch.item_matrix.tolist() == [[0, 3, 4, 5, 6]]
        assert batch.targets.tolist() == [7]
        assert batch.positives().tolist() == [[3, 4, 5, 6, 7]]

    def test_valid_mask_matches_nonzero(self):
        train = seqs([1, 2, 3, 4], [5, 6, 7, 8, 9])
        [batch] = batch_and_negatives(train, 9, 4, max_len=6, seed=1, shuffle=False)
        assert torch.equal(batch.valid_mask, batch.item_matrix != 0)
        assert (batch.targets != 0).all()

    def test_negatives_avoid_positives_and_stay_in_catalog(self):
        train = seqs(*[[i % 7 + 1 for i in range(j, j + 6)] for j in range(40)])
        for batch in batch_and_negatives(train, 7, 8, max_len=6, seed=3):
            pos = batch.positives()
            valid = batch.valid_mask
            assert ((batch.negatives != pos) | ~valid).all()
            assert ((batch.negatives >= 1) | ~valid).all()
            assert ((batch.negatives <= 7) | ~valid).all()
            assert (batch.negatives[~valid] == 0).all()

    def test_history_exclusion(self):
        train = seqs(*[[1, 2, 3, 4] for _ in range(10)])
        for batch in batch_and_negatives(train, 12, 4, max_len=5, seed=2, exclude_history=True):
            for row in range(batch.item_matrix.shape[0]):
                negs = batch.negatives[row][batch.valid_mask[row]]
                assert all(int(n) not in {1, 2, 3, 4} for n in negs)

    def test_same_seed_and_epoch_reproduce_batches(self):
        train = seqs(*[[i + 1, i + 2, i + 3, i + 4] for i in range(30)])
        a = batch_and_negatives(train, 40, 8, 5, seed=11, epoch=2)
        b = batch_and_negatives(train, 40, 8, 5, seed=11, epoch=2)
        c = batch_and_negatives(train, 40, 8, 5, seed=11, epoch=3)
        for x, y in zip(a, b):
            assert torch.equal(x.item_matrix, y.item_matrix)
            assert torch.equal(x.negatives, y.negatives)
        assert any(
            not torch.equal(x.negatives, y.negatives) or not torch.equal(x.item_matrix, y.item_matrix)
            for x, y in zip(a, c)
        )

    def test_negative_frequencies_near_uniform(self):
        # 10k draws against a fixed positive over a 100-item catalog; each
        # item's count should sit within 3 sigma of the uniform expectation.
        train = seqs(*[[1, 1, 1, 1, 1] for _ in range(2500)])
        counts = np.zeros(101, dtype=np.int64)
        for batch in batch_and_negatives(train, 100, 128, max_len=5, seed=17):
            negs = batch.negatives[batch.valid_mask].numpy()
            counts += np.bincount(negs, minlength=101)
        assert counts[0] == 0 and counts[1] == 0  # padding and the positive
        draws = counts[2:]
        n = draws.sum()
        assert n == 10000
        p = 1.0 / 99.0
        sigma = np.sqrt(n * p * (1 - p))
        assert np.abs(draws - n * p).max() <= 3 * sigma

    def test_pad_prefixes_left_pads(self):
        matrix, valid = pad_prefixes([[4, 5], [1, 2, 3]], max_len=4)
        assert matrix.tolist() == [[0, 0, 4, 5], [0, 1, 2, 3]]
        assert valid.tolist() == [[False, False, True, True], [False, True, True, True]]
