"""Loss, the two-round training procedure, gradient checking, checkpoints.

Round 1 trains the backbone, experts and gate end to end.  The experts are
then Fisher-scored and merged into a frozen consensus expert, and round 2
continues from the round-1 weights (same optimizer state) with the scaled
consensus offset added.  Variants without a consensus expert run a single
round with the combined epoch budget so totals stay comparable.

Every source of randomness is derived from (seed, purpose, epoch, step), so
epoch e of a continued run consumes exactly the randomness epoch e of a
longer single round would have.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field, replace

import torch
from torch.nn.functional import logsigmoid

from .consensus import FisherScore, estimate_fisher, merge_consensus
from .data import InteractionSequence, EvalInstance, SequenceBatch, batch_and_negatives
from .errors import ConfigurationError
from .evaluation import evaluate_model
from .model import Recommender
from .seeding import derive_seed
from .vocab import VocabEmbedding, load_vocab, save_vocab

logger = logging.getLogger(__name__)

LOGIT_CLAMP = 30.0


@dataclass
class TrainConfig:
    batch_size: int = 128
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs_round1: int = 30
    epochs_round2: int = 10
    eval_every: int = 0  # epochs between validation passes; 0 disables early stopping
    patience: int = 5
    eval_k: int = 20
    seed: int = 0
    exclude_history: bool = False
    fisher_fraction: float = 0.1
    fisher_cap: int = 200

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if self.epochs_round1 < 1:
            raise ConfigurationError(f"epochs_round1 must be >= 1, got {self.epochs_round1}")
        if self.epochs_round2 < 0:
            raise ConfigurationError(f"epochs_round2 must be >= 0, got {self.epochs_round2}")
        if self.patience < 1:
            raise ConfigurationError(f"patience must be >= 1, got {self.patience}")
        if not 0 < self.fisher_fraction <= 1:
            raise ConfigurationError(
                f"fisher_fraction must be in (0, 1], got {self.fisher_fraction}"
            )


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    loss: float
    hr: float | None = None
    ndcg: float | None = None


@dataclass
class TrainResult:
    model: Recommender
    history: list[EpochRecord]
    fisher: list[FisherScore] = field(default_factory=list)


def bce_loss(pos_logits: torch.Tensor, neg_logits: torch.Tensor) -> torch.Tensor:
    """Summed binary cross-entropy over positive/negative logit pairs.

    Logits are clamped to +/-30 before the log-sigmoid for numerical safety;
    the loss is a sum (not a mean) over all supervised slots.
    """
    if pos_logits.shape != neg_logits.shape:
        raise ConfigurationError(
            f"positive and negative logits must align, got {tuple(pos_logits.shape)} "
            f"vs {tuple(neg_logits.shape)}"
        )
    if pos_logits.numel() == 0:
        return torch.zeros((), dtype=pos_logits.dtype)
    pos = pos_logits.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
    neg = neg_logits.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
    return -(logsigmoid(pos).sum() + logsigmoid(-neg).sum())


def run_epoch(
    model: Recommender,
    optimizer: torch.optim.Optimizer,
    train: list[InteractionSequence],
    n_items: int,
    cfg: TrainConfig,
    epoch: int,
) -> float:
    """One pass over the training sequences; returns the summed epoch loss."""
    model.train()
    batches = batch_and_negatives(
        train, n_items, cfg.batch_size, model.backbone_cfg.max_len,
        cfg.seed, epoch=epoch, exclude_history=cfg.exclude_history,
    )
    total = 0.0
    for step, batch in enumerate(batches):
        torch.manual_seed(derive_seed(cfg.seed, "dropout", epoch, step))
        noise_seed = derive_seed(cfg.seed, "gumbel", epoch, step)
        pos, neg = model.training_logits(batch, noise_seed=noise_seed, train=True)
        loss = bce_loss(pos, neg)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        total += float(loss.item())
    return total


def fisher_batches(
    train: list[InteractionSequence], n_items: int, cfg: TrainConfig, max_len: int
) -> list[SequenceBatch]:
    """The deterministic subset of batches used for Fisher estimation."""
    all_batches = batch_and_negatives(
        train, n_items, cfg.batch_size, max_len,
        derive_seed(cfg.seed, "fisher"), epoch=0, exclude_history=cfg.exclude_history,
    )
    n_subset = max(1, math.ceil(len(all_batches) * cfg.fisher_fraction))
    n_subset = min(n_subset, cfg.fisher_cap, len(all_batches))
    return all_batches[:n_subset]


def _run_phase(
    model: Recommender,
    optimizer: torch.optim.Optimizer,
    train: list[InteractionSequence],
    holdout: list[EvalInstance],
    n_items: int,
    cfg: TrainConfig,
    phase: str,
    n_epochs: int,
    start_epoch: int,
    history: list[EpochRecord],
) -> int:
    """Run up to ``n_epochs`` epochs with optional HR-based early stopping."""
    best_hr = -1.0
    bad_evals = 0
    epoch = start_epoch
    for _ in range(n_epochs):
        loss = run_epoch(model, optimizer, train, n_items, cfg, epoch)
        record = EpochRecord(epoch=epoch, phase=phase, loss=loss)
        if cfg.eval_every > 0 and holdout and (epoch - start_epoch + 1) % cfg.eval_every == 0:
            report = evaluate_model(model, holdout, cfg.eval_k)
            record.hr, record.ndcg = report.hr, report.ndcg
            if report.hr > best_hr:
                best_hr = report.hr
                bad_evals = 0
            else:
                bad_evals += 1
        history.append(record)
        epoch += 1
        if cfg.eval_every > 0 and bad_evals >= cfg.patience:
            logger.info("%s: stopping after %d evaluations without improvement", phase, bad_evals)
            break
    return epoch


def train_two_rounds(
    model: Recommender,
    train: list[InteractionSequence],
    holdout: list[EvalInstance],
    n_items: int,
    cfg: TrainConfig,
) -> TrainResult:
    """Train the model; the ``full`` variant gets the consensus round.

    Round 1 never touches a consensus expert.  When the model variant is
    ``full``, the converged experts are Fisher-scored, merged, frozen and
    attached, and round 2 continues with the same optimizer.  Other variants
    spend the whole epoch budget in a single round.
    """
    if not train:
        raise ConfigurationError("cannot train without training sequences")
    optimizer = torch.optim.Adam(
        (p for p in model.parameters() if p.requires_grad),
        lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps,
    )
    history: list[EpochRecord] = []
    fisher: list[FisherScore] = []
    two_rounds = model.variant == "full"
    round1_epochs = cfg.epochs_round1 if two_rounds else cfg.epochs_round1 + cfg.epochs_round2
    next_epoch = _run_phase(
        model, optimizer, train, holdout, n_items, cfg,
        "round1", round1_epochs, 0, history,
    )
    if two_rounds:
        subset = fisher_batches(train, n_items, cfg, model.backbone_cfg.max_len)
        fisher = estimate_fisher(model, subset)
        sc = merge_consensus(model.experts, fisher)
        model.attach_consensus(sc)
        _run_phase(
            model, optimizer, train, holdout, n_items, cfg,
            "round2", cfg.epochs_round2, next_epoch, history,
        )
    return TrainResult(model=model, history=history, fisher=fisher)


def write_history(path: str | os.PathLike, history: list[EpochRecord], k: int = 20) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"epoch,phase,loss,hr@{k},ndcg@{k}\n")
        for rec in history:
            hr = "" if rec.hr is None else repr(rec.hr)
            ndcg = "" if rec.ndcg is None else repr(rec.ndcg)
            fh.write(f"{rec.epoch},{rec.phase},{rec.loss!r},{hr},{ndcg}\n")


# ---------------------------------------------------------------------------
# Gradient checking

GRADIENT_GROUPS = (
    ("item_table", "item_table."),
    ("alignment", ("experts.", ".align")),
    ("cross_attention", ("experts.", ".attn.")),
    ("gating", "gate."),
    ("backbone", "encoder."),
    ("injection", "injection."),
    ("consensus", "sc."),
)


def _group_of(name: str) -> str:
    for group, pattern in GRADIENT_GROUPS:
        if isinstance(pattern, tuple):
            prefix, fragment = pattern
            if name.startswith(prefix) and fragment in name:
                return group
        elif name.startswith(pattern):
            return group
    return "other"


@dataclass
class GroupCheck:
    name: str
    max_rel_err: float
    n_entries: int
    frozen: bool = False

    def passed(self, tol: float) -> bool:
        return self.frozen or self.max_rel_err < tol


@dataclass
class GradCheckReport:
    groups: list[GroupCheck]
    tol: float

    @property
    def passed(self) -> bool:
        return all(g.passed(self.tol) for g in self.groups)

    def failures(self) -> list[str]:
        return [g.name for g in self.groups if not g.passed(self.tol)]


# Central differences resolve a gradient only down to roughly
# eps_machine * |loss| / step; differences below this are rounding noise in
# the two loss evaluations, not a real analytic/numeric mismatch.
FD_NOISE_FLOOR = 1e-7


def _relative_error(a: float, b: float) -> float:
    if abs(a - b) < FD_NOISE_FLOOR:
        return 0.0
    denom = max(abs(a), abs(b))
    if denom < 1e-10:
        return 0.0
    return abs(a - b) / denom


def check_gradients(
    model: Recommender,
    batch: SequenceBatch,
    step: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare autograd gradients to central finite differences per entry.

    The model must be in 64-bit precision; the forward pass runs with noise
    and dropout off so the loss surface is deterministic, and with the token
    filter in its soft diagnostic mode, since the straight-through forward is
    piecewise constant in the token scores and has no finite difference to
    match.  The straight-through backward is defined as the soft gradient, so
    this checks exactly the quantity autograd propagates.  Frozen parameters
    (no gradient requirement) are verified to receive no gradient and are
    reported as their own passing groups.
    """
    params = list(model.named_parameters())
    if any(p.dtype != torch.float64 for _, p in params):
        raise ConfigurationError("gradient checking requires a float64 model")
    was_training = model.training
    model.eval()
    original_filter = model.filter_cfg
    model.filter_cfg = replace(original_filter, soft_forward=True)

    def loss_fn() -> torch.Tensor:
        pos, neg = model.training_logits(batch, noise_seed=0, train=False)
        return bce_loss(pos, neg)

    try:
        model.zero_grad(set_to_none=True)
        loss_fn().backward()
        group_err: dict[str, float] = {}
        group_count: dict[str, int] = {}
        frozen_groups: set[str] = set()
        for name, param in params:
            group = _group_of(name)
            if not param.requires_grad:
                frozen_groups.add(group)
                if param.grad is not None and param.grad.abs().max() > 0:
                    raise ConfigurationError(f"frozen parameter {name} received gradient")
                continue
            analytic = (
                param.grad.detach().clone()
                if param.grad is not None
                else torch.zeros_like(param)
            )
            flat = param.data.view(-1)
            for idx in range(flat.numel()):
                original = flat[idx].item()
                with torch.no_grad():
                    flat[idx] = original + step
                    upper = loss_fn().item()
                    flat[idx] = original - step
                    lower = loss_fn().item()
                    flat[idx] = original
                fd = (upper - lower) / (2.0 * step)
                err = _relative_error(analytic.view(-1)[idx].item(), fd)
                group_err[group] = max(group_err.get(group, 0.0), err)
                group_count[group] = group_count.get(group, 0) + 1
        groups = [
            GroupCheck(name=g, max_rel_err=group_err[g], n_entries=group_count[g])
            for g in sorted(group_err)
        ]
        groups.extend(
            GroupCheck(name=g, max_rel_err=0.0, n_entries=0, frozen=True)
            for g in sorted(frozen_groups - set(group_err))
        )
        return GradCheckReport(groups=groups, tol=tol)
    finally:
        model.filter_cfg = original_filter
        model.zero_grad(set_to_none=True)
        model.train(was_training)


# ---------------------------------------------------------------------------
# Checkpoints

def save_checkpoint(directory: str | os.PathLike, model: Recommender) -> None:
    """Write every parameter and buffer as a VEM1 block plus a manifest.

    Manifest lines are ``name<TAB>shape<TAB>frozen<TAB>file``; shapes are
    comma-separated so 1-D and higher-rank tensors restore exactly.  Blocks
    are float32, the interchange precision of the container format.
    """
    os.makedirs(directory, exist_ok=True)
    entries: list[tuple[str, torch.Tensor, bool]] = []
    for name, param in model.named_parameters():
        entries.append((name, param.detach(), not param.requires_grad))
    for name, buf in model.named_buffers():
        entries.append((name, buf.detach(), True))
    with open(os.path.join(directory, "manifest.tsv"), "w", encoding="utf-8") as fh:
        for i, (name, tensor, frozen) in enumerate(entries):
            filename = f"block_{i:04d}.vem"
            shape = ",".join(str(s) for s in tensor.shape)
            fh.write(f"{name}\t{shape}\t{int(frozen)}\t{filename}\n")
            if tensor.ndim == 2:
                block = tensor
            elif tensor.ndim < 2:
                block = tensor.reshape(1, -1)
            else:
                block = tensor.reshape(tensor.shape[0], -1)
            save_vocab(
                os.path.join(directory, filename),
                VocabEmbedding(block.to(torch.float32), name=name, source="checkpoint"),
            )


def load_checkpoint(directory: str | os.PathLike, model: Recommender) -> None:
    """Restore a checkpoint written by :func:`save_checkpoint` into ``model``."""
    state = dict(model.named_parameters())
    state.update(dict(model.named_buffers()))
    manifest = os.path.join(directory, "manifest.tsv")
    with open(manifest, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            name, shape_text, _, filename = line.rstrip("\n").split("\t")
            if name not in state:
                raise ConfigurationError(f"checkpoint block {name!r} has no matching tensor")
            shape = tuple(int(s) for s in shape_text.split(",") if s)
            block = load_vocab(os.path.join(directory, filename)).matrix
            with torch.no_grad():
                state[name].copy_(block.reshape(shape).to(state[name].dtype))
