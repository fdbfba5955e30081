"""Ranking metrics and model evaluation.

Targets are ranked against the full catalog (or a candidate pool) with ties
broken in favour of the lower item ID, so results are reproducible down to
the bit.  The ``MLTFR_THREADS`` environment variable caps the number of
torch threads used while scoring.
"""

from __future__ import annotations

import math
import os
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
import torch

from .data import EvalInstance, InteractionSequence, pad_prefixes
from .errors import ConfigurationError
from .model import Recommender

THREADS_ENV = "MLTFR_THREADS"


@dataclass
class MetricsReport:
    """Hit rate and NDCG at a cutoff, plus the optional candidate-pool top-1 rate."""

    k: int
    hr: float
    ndcg: float
    n_users: int
    top1: float | None = None

    def as_dict(self) -> dict:
        out = {"k": self.k, "hr": self.hr, "ndcg": self.ndcg, "n_users": self.n_users}
        if self.top1 is not None:
            out["top1"] = self.top1
        return out


@contextmanager
def capped_threads():
    """Clamp torch threads to MLTFR_THREADS for the duration of the block."""
    requested = os.environ.get(THREADS_ENV)
    previous = torch.get_num_threads()
    if requested:
        try:
            cap = int(requested)
        except ValueError:
            raise ConfigurationError(f"{THREADS_ENV} must be an integer, got {requested!r}")
        if cap < 1:
            raise ConfigurationError(f"{THREADS_ENV} must be >= 1, got {cap}")
        torch.set_num_threads(min(previous, cap))
    try:
        yield
    finally:
        torch.set_num_threads(previous)


def rank_of_target(scores: torch.Tensor | np.ndarray, target: int) -> int:
    """1-based rank of the target item among scores for items 1..N.

    ``scores[i]`` is the score of item ``i + 1``.  Ties are broken by the
    lower item ID, so an item tied with the target outranks it only when its
    ID is smaller.
    """
    s = np.asarray(scores, dtype=np.float64)
    if not 1 <= target <= s.shape[-1]:
        raise ConfigurationError(f"target {target} outside catalog of {s.shape[-1]} items")
    target_score = s[target - 1]
    better = int((s > target_score).sum())
    tied_lower = int((s[: target - 1] == target_score).sum())
    return 1 + better + tied_lower


def rank_metrics(ranks: list[int] | np.ndarray, k: int) -> MetricsReport:
    """HR@k and NDCG@k from 1-based target ranks.

    A rank within the cutoff contributes 1 to HR and 1/log2(rank+1) to NDCG;
    anything deeper contributes 0 to both.
    """
    if k < 1:
        raise ConfigurationError(f"cutoff k must be >= 1, got {k}")
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise ConfigurationError("rank_metrics needs at least one ranked user")
    hits = ranks <= k
    hr = float(hits.mean())
    gains = np.where(hits, 1.0 / np.log2(ranks + 1.0), 0.0)
    return MetricsReport(k=k, hr=hr, ndcg=float(gains.mean()), n_users=int(ranks.size))


def compute_improvement(hr_base: float, ndcg_base: float, hr_model: float, ndcg_model: float) -> float:
    """Geometric-mean relative improvement, in percent.

    100 * (sqrt((hr_m / hr_b) * (ndcg_m / ndcg_b)) - 1); identical metrics
    give exactly 0.
    """
    if hr_base <= 0 or ndcg_base <= 0:
        raise ConfigurationError("baseline metrics must be positive to compute improvement")
    if hr_model < 0 or ndcg_model < 0:
        raise ConfigurationError("model metrics must be non-negative")
    return 100.0 * (math.sqrt((hr_model / hr_base) * (ndcg_model / ndcg_base)) - 1.0)


def model_ranks(
    model: Recommender,
    holdout: list[EvalInstance],
    batch_size: int = 256,
    candidates: dict[int, list[int]] | None = None,
) -> np.ndarray:
    """Rank every held-out target under the model (deterministic forward)."""
    was_training = model.training
    model.eval()
    ranks = np.zeros(len(holdout), dtype=np.int64)
    max_len = model.backbone_cfg.max_len
    try:
        with torch.no_grad(), capped_threads():
            for start in range(0, len(holdout), batch_size):
                chunk = holdout[start : start + batch_size]
                matrix, valid = pad_prefixes([inst.prefix for inst in chunk], max_len)
                h = model.user_states(matrix, valid)
                scores = h @ model.item_table.catalog().transpose(0, 1)
                for row, inst in enumerate(chunk):
                    if candidates is None:
                        ranks[start + row] = rank_of_target(scores[row].numpy(), inst.target)
                    else:
                        pool = candidates[inst.user_id]
                        pool_scores = scores[row].numpy()[[c - 1 for c in pool]]
                        target_pos = pool.index(inst.target)
                        better = int((pool_scores > pool_scores[target_pos]).sum())
                        tied_lower = sum(
                            1
                            for j, c in enumerate(pool)
                            if pool_scores[j] == pool_scores[target_pos] and c < inst.target
                        )
                        ranks[start + row] = 1 + better + tied_lower
    finally:
        model.train(was_training)
    return ranks


def evaluate_model(
    model: Recommender,
    holdout: list[EvalInstance],
    k: int,
    batch_size: int = 256,
    candidates: dict[int, list[int]] | None = None,
) -> MetricsReport:
    """Full-catalog (or candidate-pool) HR@k / NDCG@k over the holdout."""
    ranks = model_ranks(model, holdout, batch_size, candidates)
    report = rank_metrics(ranks, k)
    if candidates is not None:
        report.top1 = float((ranks == 1).mean())
    return report


def popularity_ranks(
    train: list[InteractionSequence], holdout: list[EvalInstance], n_items: int
) -> np.ndarray:
    """Target ranks under a global popularity scorer (training frequencies)."""
    counts = np.zeros(n_items, dtype=np.float64)
    for seq in train:
        for item in seq.items:
            counts[item - 1] += 1
    return np.array([rank_of_target(counts, inst.target) for inst in holdout], dtype=np.int64)
