"""Full recommender assembly.

Combines the item table, per-vocabulary token experts, the routing gate, the
optional frozen consensus expert, and a sequence encoder backbone.  Ablation
variants share this class: ``backbone_only`` skips semantic offsets entirely,
``llm_te``/``llm_re`` replace the expert machinery with a mean-pooled
projection of each vocabulary, and ``wo_sc`` runs the expert mixture without
a consensus term.
"""

from __future__ import annotations

from dataclasses import replace

import torch
from torch import nn

from .backbone import BackboneConfig, SequenceEncoder
from .data import SequenceBatch
from .errors import ConfigurationError
from .filtering import FilterConfig, filter_tokens, pool_user_interest, score_tokens
from .integration import CrossAttention
from .moe import GateNetwork, aggregate_experts, combine_with_consensus
from .seeding import derive_seed, torch_generator
from .vocab import ItemTable, VocabEmbedding

VARIANTS = ("full", "wo_sc", "llm_te", "llm_re", "backbone_only")


def expert_offsets(
    embeddings: torch.Tensor,
    valid_mask: torch.Tensor,
    vocab_matrix: torch.Tensor,
    align_weight: torch.Tensor,
    align_bias: torch.Tensor,
    attn: CrossAttention,
    cfg: FilterConfig,
    noise: int | torch.Generator,
) -> torch.Tensor:
    """One expert's pipeline: pool, score, filter, cross-attend."""
    interest = pool_user_interest(embeddings, valid_mask)
    scores = score_tokens(vocab_matrix, align_weight, align_bias, interest)
    selection = filter_tokens(scores, vocab_matrix, cfg, noise)
    return attn(embeddings, selection.domain_tokens)


class TokenExpert(nn.Module):
    """A frozen vocabulary plus its trainable alignment and attention weights."""

    def __init__(
        self,
        vocab: VocabEmbedding,
        d_emb: int,
        heads: int = 4,
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.name = vocab.name
        self.register_buffer("vocab_matrix", vocab.matrix.to(dtype))
        d_llm = vocab.dim
        gen = torch_generator("align", seed)
        self.align_weight = nn.Parameter(0.02 * torch.randn(d_llm, d_emb, generator=gen, dtype=dtype))
        self.align_bias = nn.Parameter(torch.zeros(d_emb, dtype=dtype))
        self.attn = CrossAttention(d_emb, d_llm, heads, seed=derive_seed("attn", seed), dtype=dtype)

    def shape_signature(self) -> tuple[int, int, int]:
        return (self.vocab_matrix.shape[1], self.align_weight.shape[1], self.attn.heads)

    def forward(
        self,
        embeddings: torch.Tensor,
        valid_mask: torch.Tensor,
        cfg: FilterConfig,
        noise: int | torch.Generator = 0,
    ) -> torch.Tensor:
        return expert_offsets(
            embeddings, valid_mask, self.vocab_matrix,
            self.align_weight, self.align_bias, self.attn, cfg, noise,
        )


class MeanVocabInjection(nn.Module):
    """Naive vocabulary injection: project each vocabulary's mean token.

    The projection of the mean-pooled full matrix is a single d_emb vector
    per vocabulary (summed across vocabularies) added uniformly to every
    sequence position.
    """

    def __init__(
        self,
        vocabularies: list[VocabEmbedding],
        d_emb: int,
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        if not vocabularies:
            raise ConfigurationError("mean-vocabulary injection needs at least one vocabulary")
        self.projections = nn.ParameterList()
        for i, vocab in enumerate(vocabularies):
            self.register_buffer(f"mean_{i}", vocab.matrix.mean(dim=0).to(dtype))
            gen = torch_generator("injection", seed, i)
            self.projections.append(
                nn.Parameter(0.02 * torch.randn(vocab.dim, d_emb, generator=gen, dtype=dtype))
            )

    def forward(self) -> torch.Tensor:
        total = None
        for i, proj in enumerate(self.projections):
            vec = getattr(self, f"mean_{i}") @ proj
            total = vec if total is None else total + vec
        return total


class Recommender(nn.Module):
    """ID-based sequential recommender with filtered-vocabulary offsets."""

    def __init__(
        self,
        n_items: int,
        vocabularies: list[VocabEmbedding],
        backbone_cfg: BackboneConfig,
        filter_cfg: FilterConfig | None = None,
        reprogram_heads: int = 4,
        alpha: float = 0.2,
        variant: str = "full",
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        if variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}, got {variant!r}")
        if alpha < 0:
            raise ConfigurationError(f"alpha must be non-negative, got {alpha}")
        self.variant = variant
        self.alpha = alpha
        self.filter_cfg = filter_cfg or FilterConfig()
        self.backbone_cfg = backbone_cfg
        self.dtype_ = dtype
        self.item_table = ItemTable(n_items, backbone_cfg.d_emb, seed=derive_seed(seed, "items"), dtype=dtype)
        self.experts = nn.ModuleList()
        self.gate: GateNetwork | None = None
        self.injection: MeanVocabInjection | None = None
        self.sc = None  # ConsensusExpert, attached after the first training round
        if variant in ("full", "wo_sc"):
            if not vocabularies:
                raise ConfigurationError(f"variant {variant!r} needs at least one vocabulary")
            for i, vocab in enumerate(vocabularies):
                self.experts.append(
                    TokenExpert(vocab, backbone_cfg.d_emb, reprogram_heads,
                                seed=derive_seed(seed, "expert", i), dtype=dtype)
                )
            self.gate = GateNetwork(
                len(vocabularies), backbone_cfg.d_emb, backbone_cfg.max_len,
                seed=derive_seed(seed, "gate"), dtype=dtype,
            )
        elif variant in ("llm_te", "llm_re"):
            self.injection = MeanVocabInjection(
                vocabularies, backbone_cfg.d_emb, seed=derive_seed(seed, "injection"), dtype=dtype
            )
        self.encoder = SequenceEncoder(backbone_cfg, seed=derive_seed(seed, "backbone"), dtype=dtype)

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    def attach_consensus(self, sc) -> None:
        if self.variant != "full":
            raise ConfigurationError(f"variant {self.variant!r} does not use a consensus expert")
        self.sc = sc

    def semantic_offsets(
        self,
        embeddings: torch.Tensor,
        valid_mask: torch.Tensor,
        noise_seed: int = 0,
        train: bool = False,
    ) -> torch.Tensor | None:
        """The additive offset for each sequence position, or None for backbone_only."""
        if self.variant == "backbone_only":
            return None
        if self.injection is not None:
            return self.injection()
        cfg = replace(self.filter_cfg, train_mode=train)
        outputs = [
            expert(embeddings, valid_mask, cfg, torch_generator("noise", noise_seed, "expert", m))
            for m, expert in enumerate(self.experts)
        ]
        routing = self.gate(embeddings)
        base = aggregate_experts(routing, outputs)
        if self.sc is not None and self.alpha != 0:
            sc_out = self.sc(embeddings, valid_mask, cfg, noise_seed)
            return combine_with_consensus(base, sc_out, self.alpha)
        return base

    def fused_input(
        self,
        item_matrix: torch.Tensor,
        valid_mask: torch.Tensor,
        noise_seed: int = 0,
        train: bool = False,
    ) -> torch.Tensor:
        embeddings = self.item_table(item_matrix)
        offsets = self.semantic_offsets(embeddings, valid_mask, noise_seed, train)
        return embeddings if offsets is None else embeddings + offsets

    def training_logits(
        self, batch: SequenceBatch, noise_seed: int = 0, train: bool = True
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Positive and negative logits for every supervised slot in the batch.

        The causal style supervises every valid position (next-item targets);
        the bidirectional style supervises the appended mask slot against the
        sequence target.
        """
        fused = self.fused_input(batch.item_matrix, batch.valid_mask, noise_seed, train)
        if self.backbone_cfg.style == "causal":
            states = self.encoder.forward_states(fused, batch.valid_mask)
            pos_emb = self.item_table(batch.positives())
            neg_emb = self.item_table(batch.negatives)
            pos_logits = (states * pos_emb).sum(-1)[batch.valid_mask]
            neg_logits = (states * neg_emb).sum(-1)[batch.valid_mask]
        else:
            h = self.encoder.encode_sequence(fused, batch.valid_mask)
            pos_logits = (h * self.item_table(batch.targets)).sum(-1)
            neg_logits = (h * self.item_table(batch.negatives[:, -1])).sum(-1)
        return pos_logits, neg_logits

    def user_states(self, item_matrix: torch.Tensor, valid_mask: torch.Tensor) -> torch.Tensor:
        """Deterministic user representations for ranking (noise off)."""
        fused = self.fused_input(item_matrix, valid_mask, noise_seed=0, train=False)
        return self.encoder.encode_sequence(fused, valid_mask)
