"""Interaction data pipeline.

Covers loading whitespace-delimited interaction files, iterative core
filtering, dense re-indexing, the leave-one-out split, and mini-batch
assembly with per-position negative sampling.  All sampling is driven by
seeds derived from (seed, purpose, epoch), so batch composition for a given
epoch is reproducible no matter what ran before.
"""

from __future__ import annotations

import logging
import os
import random
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import DataFormatError, EmptyDatasetError, EmptySequenceError
from .seeding import derive_seed

logger = logging.getLogger(__name__)


@dataclass
class InteractionSequence:
    """One user's time-ordered item sequence (dense 1-based item IDs)."""

    user_id: int
    items: list[int]
    timestamps: list[int] | None = None


@dataclass
class EvalInstance:
    """A held-out next-item prediction case: prefix plus ground-truth target."""

    user_id: int
    prefix: list[int]
    target: int


@dataclass
class InteractionData:
    """Filtered, densely re-indexed sequences plus the raw-to-dense ID maps."""

    sequences: list[InteractionSequence]
    n_items: int
    item_id_map: dict[int, int] = field(default_factory=dict)
    user_id_map: dict[int, int] = field(default_factory=dict)


@dataclass
class SequenceBatch:
    """A left-padded training batch.

    ``item_matrix`` holds model inputs (0 = padding, most recent item in the
    last column).  The positive for column c is the item in column c+1; for
    the final column it is ``targets``.  ``negatives`` holds one sampled
    negative per position, differing from that position's positive.
    """

    item_matrix: torch.Tensor
    valid_mask: torch.Tensor
    targets: torch.Tensor
    negatives: torch.Tensor

    def positives(self) -> torch.Tensor:
        """Per-position positives: inputs shifted left, target in the last column."""
        return torch.cat([self.item_matrix[:, 1:], self.targets.unsqueeze(1)], dim=1)

    def validate(self) -> None:
        if not torch.equal(self.valid_mask, self.item_matrix != 0):
            raise EmptySequenceError("valid_mask must be true exactly where item_matrix != 0")
        if (self.targets == 0).any():
            raise EmptySequenceError("targets must never be the padding ID 0")
        pos = self.positives()
        clash = (self.negatives == pos) & self.valid_mask
        if clash.any():
            raise EmptySequenceError("a negative equals the positive at a valid position")


def parse_interaction_line(line: str, line_number: int) -> InteractionSequence:
    tokens = line.split()
    if len(tokens) < 2:
        raise DataFormatError("expected 'user_id item_1 ... item_k'", line_number)
    try:
        values = [int(t) for t in tokens]
    except ValueError as exc:
        raise DataFormatError(f"non-integer token ({exc})", line_number) from None
    return InteractionSequence(user_id=values[0], items=values[1:])


def core_filter(
    sequences: list[InteractionSequence], min_core: int
) -> list[InteractionSequence]:
    """Iteratively drop items and users with fewer than ``min_core`` interactions.

    Repeats removal until a fixpoint: every surviving user sequence has at
    least ``min_core`` items and every surviving item occurs at least
    ``min_core`` times across the corpus.
    """
    seqs = [(s.user_id, list(s.items)) for s in sequences]
    while True:
        item_counts: dict[int, int] = {}
        for _, items in seqs:
            for it in items:
                item_counts[it] = item_counts.get(it, 0) + 1
        keep_items = {it for it, c in item_counts.items() if c >= min_core}
        changed = False
        next_seqs = []
        for uid, items in seqs:
            kept = [it for it in items if it in keep_items]
            if len(kept) != len(items):
                changed = True
            if len(kept) >= min_core:
                next_seqs.append((uid, kept))
            else:
                changed = True
        seqs = next_seqs
        if not changed:
            break
    return [InteractionSequence(user_id=uid, items=items) for uid, items in seqs]


def load_interactions(path: str | os.PathLike, min_core: int = 5) -> InteractionData:
    """Read an interaction file, core-filter it, and re-index IDs densely from 1."""
    raw: list[InteractionSequence] = []
    with open(path, encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            raw.append(parse_interaction_line(line, line_number))
    filtered = core_filter(raw, min_core)
    if not filtered:
        raise EmptyDatasetError(
            f"{path}: no sequences survive {min_core}-core filtering"
        )
    item_ids = sorted({it for s in filtered for it in s.items})
    item_map = {raw_id: dense for dense, raw_id in enumerate(item_ids, start=1)}
    user_ids = sorted({s.user_id for s in filtered})
    user_map = {raw_id: dense for dense, raw_id in enumerate(user_ids, start=1)}
    filtered.sort(key=lambda s: user_map[s.user_id])
    sequences = [
        InteractionSequence(
            user_id=user_map[s.user_id], items=[item_map[it] for it in s.items]
        )
        for s in filtered
    ]
    return InteractionData(
        sequences=sequences,
        n_items=len(item_ids),
        item_id_map=item_map,
        user_id_map=user_map,
    )


def write_id_map(path: str | os.PathLike, mapping: dict[int, int]) -> None:
    """Persist a raw-to-dense ID map, one ``raw<TAB>dense`` line per entry."""
    with open(path, "w", encoding="utf-8") as fh:
        for raw_id in sorted(mapping):
            fh.write(f"{raw_id}\t{mapping[raw_id]}\n")


def read_id_map(path: str | os.PathLike) -> dict[int, int]:
    mapping: dict[int, int] = {}
    with open(path, encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataFormatError("expected 'raw<TAB>dense'", line_number)
            mapping[int(parts[0])] = int(parts[1])
    return mapping


def split_leave_one_out(
    sequences: list[InteractionSequence],
) -> tuple[list[InteractionSequence], list[EvalInstance]]:
    """Hold out each user's final item for evaluation.

    The training prefix is kept only when it has at least 3 items; the user is
    still evaluated whenever the prefix is non-empty.  Sequences shorter than
    2 cannot produce an evaluation case and are skipped (counted in a single
    warning).
    """
    train: list[InteractionSequence] = []
    holdout: list[EvalInstance] = []
    skipped = 0
    for seq in sequences:
        if len(seq.items) < 2:
            skipped += 1
            continue
        prefix = seq.items[:-1]
        holdout.append(EvalInstance(user_id=seq.user_id, prefix=prefix, target=seq.items[-1]))
        if len(prefix) >= 3:
            train.append(InteractionSequence(user_id=seq.user_id, items=prefix))
    if skipped:
        logger.warning("split_leave_one_out: skipped %d sequences shorter than 2", skipped)
    return train, holdout


def _sample_negatives(
    positives: np.ndarray,
    valid: np.ndarray,
    n_items: int,
    rng: np.random.Generator,
    history: list[set[int]] | None = None,
) -> np.ndarray:
    """Uniform negatives over [1, n_items] excluding each position's positive.

    When ``history`` is given, negatives additionally avoid every item in that
    row's full input sequence (rejection sampling).
    """
    if n_items < 2:
        raise EmptySequenceError("negative sampling needs a catalog of at least 2 items")
    draws = rng.integers(1, n_items, size=positives.shape)
    negatives = draws + (draws >= positives)
    if history is not None:
        for row, items in enumerate(history):
            for col in np.nonzero(valid[row])[0]:
                guard = 0
                while negatives[row, col] in items or negatives[row, col] == positives[row, col]:
                    negatives[row, col] = rng.integers(1, n_items + 1)
                    guard += 1
                    if guard > 10000:
                        raise EmptySequenceError(
                            "cannot sample a negative outside the user history; catalog too small"
                        )
    negatives[~valid] = 0
    return negatives


def batch_and_negatives(
    train: list[InteractionSequence],
    n_items: int,
    batch_size: int,
    max_len: int,
    seed: int,
    epoch: int = 0,
    exclude_history: bool = False,
    shuffle: bool = True,
) -> list[SequenceBatch]:
    """Assemble one epoch of left-padded batches with sampled negatives.

    Each sequence is truncated to its most recent ``max_len`` items; the last
    item becomes the target and the rest the model input.  Batch order and
    negative draws depend only on (seed, epoch).
    """
    if not train:
        return []
    order = list(range(len(train)))
    if shuffle:
        random.Random(derive_seed(seed, "batch-order", epoch)).shuffle(order)
    rng = np.random.default_rng(derive_seed(seed, "negatives", epoch))
    batches: list[SequenceBatch] = []
    for start in range(0, len(order), batch_size):
        chunk = [train[i] for i in order[start : start + batch_size]]
        b = len(chunk)
        item_matrix = np.zeros((b, max_len), dtype=np.int64)
        positives = np.zeros((b, max_len), dtype=np.int64)
        targets = np.zeros(b, dtype=np.int64)
        history: list[set[int]] = []
        for row, seq in enumerate(chunk):
            kept = seq.items[-max_len:]
            inputs, target = kept[:-1], kept[-1]
            if not inputs:
                raise EmptySequenceError(
                    f"user {seq.user_id}: sequence too short to form an input/target pair"
                )
            item_matrix[row, max_len - len(inputs):] = inputs
            positives[row, max_len - len(inputs):] = kept[1:]
            targets[row] = target
            history.append(set(seq.items))
        valid = item_matrix != 0
        negatives = _sample_negatives(
            positives, valid, n_items, rng, history if exclude_history else None
        )
        batch = SequenceBatch(
            item_matrix=torch.from_numpy(item_matrix),
            valid_mask=torch.from_numpy(valid),
            targets=torch.from_numpy(targets),
            negatives=torch.from_numpy(negatives),
        )
        batch.validate()
        batches.append(batch)
    return batches


def pad_prefixes(prefixes: list[list[int]], max_len: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Left-pad evaluation prefixes (truncated to the most recent ``max_len`` items)."""
    b = len(prefixes)
    item_matrix = np.zeros((b, max_len), dtype=np.int64)
    for row, prefix in enumerate(prefixes):
        kept = prefix[-max_len:]
        if not kept:
            raise EmptySequenceError(f"evaluation prefix at row {row} is empty")
        item_matrix[row, max_len - len(kept):] = kept
    matrix = torch.from_numpy(item_matrix)
    return matrix, matrix != 0
