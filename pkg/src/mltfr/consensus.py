"""Semantic-consensus expert: Fisher scoring, merging, and frozen inference.

After the first training round, each expert receives a scalar importance
score: the mean squared per-sequence gradient of the sequence log-likelihood
over all of that expert's parameter entries.  Shape-compatible experts are
averaged with those scores as weights into a single frozen parameter set.
At inference the frozen parameters run the usual pool/score/filter/attend
pipeline once per contributing vocabulary and the outputs are averaged.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import torch
from torch import nn

from .data import SequenceBatch
from .errors import ConfigurationError
from .filtering import FilterConfig
from .integration import CrossAttention
from .model import Recommender, TokenExpert, expert_offsets
from .seeding import torch_generator
from .vocab import VocabEmbedding, load_vocab, save_vocab

logger = logging.getLogger(__name__)


@dataclass
class FisherScore:
    """Scalar importance of one expert's parameters."""

    index: int
    name: str
    value: float
    n_samples: int


def sequence_log_likelihood(model: Recommender, batch: SequenceBatch, row: int) -> torch.Tensor:
    """Log-likelihood of one sequence: sum of log-sigmoid terms over its slots."""
    single = SequenceBatch(
        item_matrix=batch.item_matrix[row : row + 1],
        valid_mask=batch.valid_mask[row : row + 1],
        targets=batch.targets[row : row + 1],
        negatives=batch.negatives[row : row + 1],
    )
    pos, neg = model.training_logits(single, noise_seed=0, train=False)
    pos = pos.clamp(-30.0, 30.0)
    neg = neg.clamp(-30.0, 30.0)
    return torch.nn.functional.logsigmoid(pos).sum() + torch.nn.functional.logsigmoid(-neg).sum()


def estimate_fisher(
    model: Recommender, batches: list[SequenceBatch], max_samples: int | None = None
) -> list[FisherScore]:
    """Per-expert scalar Fisher scores from a sequential per-sequence pass.

    For each sequence the squared gradient of its log-likelihood is averaged
    over all entries of each expert's parameters; scores average these over
    sequences.  If every score comes out zero the experts are indistinguishable
    and uniform fallback weights are returned with a warning.
    """
    if not model.experts:
        raise ConfigurationError("the model has no token experts to score")
    was_training = model.training
    model.eval()
    expert_params = [list(expert.parameters()) for expert in model.experts]
    totals = [0.0 for _ in model.experts]
    n_samples = 0
    try:
        for batch in batches:
            for row in range(batch.item_matrix.shape[0]):
                if max_samples is not None and n_samples >= max_samples:
                    break
                ll = sequence_log_likelihood(model, batch, row)
                flat = [p for params in expert_params for p in params]
                grads = torch.autograd.grad(ll, flat, allow_unused=True)
                offset = 0
                for r, params in enumerate(expert_params):
                    total = 0.0
                    count = 0
                    for p, g in zip(params, grads[offset : offset + len(params)]):
                        count += p.numel()
                        if g is not None:
                            total += float((g.detach() ** 2).sum())
                    totals[r] += total / count
                    offset += len(params)
                n_samples += 1
            if max_samples is not None and n_samples >= max_samples:
                break
    finally:
        model.train(was_training)
    if n_samples == 0:
        raise ConfigurationError("Fisher estimation received no sequences")
    values = [t / n_samples for t in totals]
    if all(v == 0.0 for v in values):
        logger.warning("all Fisher scores are zero; falling back to uniform weights")
        values = [1.0 for _ in values]
    return [
        FisherScore(index=r, name=model.experts[r].name, value=v, n_samples=n_samples)
        for r, v in enumerate(values)
    ]


class ConsensusExpert(nn.Module):
    """Frozen Fisher-merged expert applied across its contributors' vocabularies."""

    def __init__(
        self,
        align_weight: torch.Tensor,
        align_bias: torch.Tensor,
        attn: CrossAttention,
        vocabularies: list[torch.Tensor],
        contributor_names: list[str],
        fisher_values: list[float],
    ):
        super().__init__()
        if not vocabularies:
            raise ConfigurationError("a consensus expert needs at least one vocabulary")
        self.align_weight = nn.Parameter(align_weight.detach().clone())
        self.align_bias = nn.Parameter(align_bias.detach().clone())
        self.attn = attn
        self.n_vocabularies = len(vocabularies)
        for j, vocab in enumerate(vocabularies):
            self.register_buffer(f"vocab_{j}", vocab.detach().clone())
        self.contributor_names = list(contributor_names)
        self.fisher_values = list(fisher_values)
        for p in self.parameters():
            p.requires_grad_(False)

    def vocabularies(self) -> list[torch.Tensor]:
        return [getattr(self, f"vocab_{j}") for j in range(self.n_vocabularies)]

    def forward(
        self,
        embeddings: torch.Tensor,
        valid_mask: torch.Tensor,
        cfg: FilterConfig,
        noise_seed: int = 0,
    ) -> torch.Tensor:
        """Mean pipeline output over the contributing vocabularies."""
        total = None
        for j, vocab in enumerate(self.vocabularies()):
            out = expert_offsets(
                embeddings, valid_mask, vocab, self.align_weight, self.align_bias,
                self.attn, cfg, torch_generator("noise", noise_seed, "sc", j),
            )
            total = out if total is None else total + out
        return total / self.n_vocabularies


def merge_consensus(
    experts: list[TokenExpert] | nn.ModuleList, fisher: list[FisherScore]
) -> ConsensusExpert:
    """Fisher-weighted average of all shape-compatible experts.

    Contributors are the largest group of experts sharing a parameter shape
    signature (vocabulary width, embedding width, head count); ties go to the
    group containing the earliest expert.  Experts outside the group are
    excluded and logged.
    """
    experts = list(experts)
    if len(experts) != len(fisher):
        raise ConfigurationError(
            f"{len(experts)} experts but {len(fisher)} Fisher scores"
        )
    groups: dict[tuple[int, int, int], list[int]] = {}
    for idx, expert in enumerate(experts):
        groups.setdefault(expert.shape_signature(), []).append(idx)
    signature = max(groups, key=lambda sig: (len(groups[sig]), -min(groups[sig])))
    contributors = groups[signature]
    excluded = [experts[i].name for i in range(len(experts)) if i not in contributors]
    if excluded:
        logger.info("consensus merge excludes shape-incompatible experts: %s", excluded)
    if len(contributors) == 1:
        logger.info(
            "consensus merge degenerates to the single expert %r",
            experts[contributors[0]].name,
        )
    weights = [fisher[i].value for i in contributors]
    total = sum(weights)
    if total <= 0:
        logger.warning("contributor Fisher mass is zero; using uniform merge weights")
        weights = [1.0 for _ in contributors]
        total = float(len(contributors))
    weights = [w / total for w in weights]

    def merged(attr: str) -> torch.Tensor:
        return sum(
            w * getattr(experts[i], attr).detach() for w, i in zip(weights, contributors)
        )

    def merged_attn(attr: str) -> torch.Tensor:
        return sum(
            w * getattr(experts[i].attn, attr).detach() for w, i in zip(weights, contributors)
        )

    d_llm, d_emb, heads = signature
    attn = CrossAttention(d_emb, d_llm, heads, dtype=experts[contributors[0]].align_weight.dtype)
    with torch.no_grad():
        attn.w_query.copy_(merged_attn("w_query"))
        attn.w_key.copy_(merged_attn("w_key"))
        attn.w_value.copy_(merged_attn("w_value"))
        attn.w_out.copy_(merged_attn("w_out"))
    return ConsensusExpert(
        align_weight=merged("align_weight"),
        align_bias=merged("align_bias"),
        attn=attn,
        vocabularies=[experts[i].vocab_matrix for i in contributors],
        contributor_names=[experts[i].name for i in contributors],
        fisher_values=[fisher[i].value for i in contributors],
    )


_SC_PARAMS = ("align_weight", "align_bias", "attn.w_query", "attn.w_key", "attn.w_value", "attn.w_out")


def save_consensus(directory: str | os.PathLike, sc: ConsensusExpert) -> None:
    """Persist the frozen expert: a name/fisher manifest plus VEM1 blocks."""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "consensus.tsv"), "w", encoding="utf-8") as fh:
        for name, value in zip(sc.contributor_names, sc.fisher_values):
            fh.write(f"{name}\t{value!r}\n")
    state = dict(sc.named_parameters())
    for key in _SC_PARAMS:
        tensor = state[key].detach()
        block = tensor if tensor.ndim == 2 else tensor.unsqueeze(0)
        save_vocab(
            os.path.join(directory, f"{key.replace('.', '_')}.vem"),
            VocabEmbedding(block.to(torch.float32), name=key, source="consensus"),
        )
    for j, vocab in enumerate(sc.vocabularies()):
        save_vocab(
            os.path.join(directory, f"vocab_{j}.vem"),
            VocabEmbedding(vocab.to(torch.float32), name=sc.contributor_names[j], source="consensus"),
        )


def load_consensus(directory: str | os.PathLike, heads: int, dtype: torch.dtype = torch.float32) -> ConsensusExpert:
    names: list[str] = []
    values: list[float] = []
    with open(os.path.join(directory, "consensus.tsv"), encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            name, value = line.rstrip("\n").split("\t")
            names.append(name)
            values.append(float(value))
    blocks = {
        key: load_vocab(os.path.join(directory, f"{key.replace('.', '_')}.vem")).matrix.to(dtype)
        for key in _SC_PARAMS
    }
    align_weight = blocks["align_weight"]
    d_llm, d_emb = align_weight.shape
    attn = CrossAttention(d_emb, d_llm, heads, dtype=dtype)
    with torch.no_grad():
        attn.w_query.copy_(blocks["attn.w_query"])
        attn.w_key.copy_(blocks["attn.w_key"])
        attn.w_value.copy_(blocks["attn.w_value"])
        attn.w_out.copy_(blocks["attn.w_out"])
    vocabularies = [
        load_vocab(os.path.join(directory, f"vocab_{j}.vem")).matrix.to(dtype)
        for j in range(len(names))
    ]
    return ConsensusExpert(
        align_weight=blocks["align_weight"],
        align_bias=blocks["align_bias"].squeeze(0),
        attn=attn,
        vocabularies=vocabularies,
        contributor_names=names,
        fisher_values=values,
    )
