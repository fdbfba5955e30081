"""User-conditioned vocabulary filtering.

Each expert pools a user's sequence into an interest vector, aligns its
vocabulary into the recommendation embedding space, scores every token by
cosine similarity against the interest, and keeps the top K tokens through a
Gumbel-softmax relaxation with a straight-through estimator.  The forward
pass hands raw vocabulary rows downstream bit-for-bit; gradients flow through
the soft token distribution.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ConfigurationError, DegenerateInterestError, EmptySequenceError
from .seeding import torch_generator

TAU_RANGE = (0.3, 1.0)


@dataclass
class FilterConfig:
    """Top-K size, softmax temperature, and whether selection noise is on.

    ``soft_forward`` is a diagnostic mode for gradient checking: selected
    tokens are weighted by their soft probabilities instead of the 0/1
    straight-through indicator, which makes the whole forward surface
    differentiable so finite differences are meaningful.
    """

    top_k: int = 256
    tau: float = 0.7
    train_mode: bool = False
    soft_forward: bool = False

    def __post_init__(self):
        if self.top_k < 1:
            raise ConfigurationError(f"top_k must be >= 1, got {self.top_k}")
        if self.tau <= 0:
            raise ConfigurationError(f"tau must be positive, got {self.tau}")


@dataclass
class SelectionResult:
    """Outcome of one filtering pass.

    ``indices`` lists the selected token rows in score order (ties broken by
    the lower index).  ``soft_dist`` is the relaxed distribution over the
    vocabulary, ``st_weights`` the straight-through 0/1 weights, and
    ``domain_tokens`` the selected raw vocabulary rows scaled by their
    straight-through weight (a forward no-op).
    """

    indices: torch.Tensor
    soft_dist: torch.Tensor
    st_weights: torch.Tensor
    domain_tokens: torch.Tensor


def pool_user_interest(embeddings: torch.Tensor, valid_mask: torch.Tensor) -> torch.Tensor:
    """Mean of the sequence embeddings over valid positions.

    Accepts a single (k, d) sequence or a (B, k, d) batch; the mask matches
    the leading shape.
    """
    if embeddings.ndim not in (2, 3):
        raise EmptySequenceError(f"expected (k, d) or (B, k, d), got {tuple(embeddings.shape)}")
    mask = valid_mask.to(embeddings.dtype)
    counts = mask.sum(dim=-1)
    if (counts == 0).any():
        raise EmptySequenceError("cannot pool a sequence with no valid positions")
    summed = (embeddings * mask.unsqueeze(-1)).sum(dim=-2)
    return summed / counts.unsqueeze(-1)


def align_vocab(
    vocab_matrix: torch.Tensor, align_weight: torch.Tensor, align_bias: torch.Tensor
) -> torch.Tensor:
    """Project the V x d_llm vocabulary into the d_emb recommendation space."""
    return vocab_matrix @ align_weight + align_bias


def _unit_rows(x: torch.Tensor) -> torch.Tensor:
    """Row-normalize; rows with zero norm map to zero vectors."""
    norms = x.norm(dim=-1, keepdim=True)
    unit = x / norms.clamp_min(torch.finfo(x.dtype).tiny)
    return torch.where(norms > 0, unit, torch.zeros_like(x))


def score_tokens(
    vocab_matrix: torch.Tensor,
    align_weight: torch.Tensor,
    align_bias: torch.Tensor,
    interest: torch.Tensor,
) -> torch.Tensor:
    """Cosine similarity between every aligned token and the interest vector.

    ``interest`` may be (d_emb,) or (B, d_emb); the result is (V,) or (B, V).
    Aligned tokens with zero norm score 0 by convention; a zero-norm interest
    is an error because its direction is undefined.
    """
    interest_norms = interest.norm(dim=-1)
    if (interest_norms == 0).any():
        raise DegenerateInterestError("interest vector has zero norm; cosine is undefined")
    aligned = align_vocab(vocab_matrix, align_weight, align_bias)
    unit_tokens = _unit_rows(aligned)
    unit_interest = _unit_rows(interest)
    return unit_interest @ unit_tokens.transpose(-1, -2) if interest.ndim > 1 else (
        unit_tokens @ unit_interest
    )


def gumbel_noise(
    shape: tuple[int, ...],
    generator: torch.Generator,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Standard Gumbel(0, 1) draws via -log(-log(u)), u uniform in (0, 1)."""
    u = torch.rand(shape, generator=generator, dtype=dtype)
    eps = torch.finfo(dtype).eps
    u = u.clamp(min=eps, max=1.0 - eps)
    return -torch.log(-torch.log(u))


def filter_tokens(
    scores: torch.Tensor,
    vocab_matrix: torch.Tensor,
    cfg: FilterConfig,
    seed: int | torch.Generator = 0,
) -> SelectionResult:
    """Select the top ``cfg.top_k`` tokens through a relaxed distribution.

    Scores may be (V,) or (B, V).  In train mode Gumbel noise perturbs the
    scores before the temperature softmax; selection takes the K largest
    soft probabilities (ties broken by the lower index).  ``domain_tokens``
    equals the gathered raw vocabulary rows in the forward pass while the
    straight-through weights route gradients onto the soft distribution.
    """
    v = vocab_matrix.shape[0]
    if scores.shape[-1] != v:
        raise ConfigurationError(
            f"scores cover {scores.shape[-1]} tokens but the vocabulary has {v}"
        )
    if cfg.top_k > v:
        raise ConfigurationError(f"top_k={cfg.top_k} exceeds vocabulary size {v}")
    if cfg.train_mode:
        gen = seed if isinstance(seed, torch.Generator) else torch_generator("gumbel", seed)
        noise = gumbel_noise(tuple(scores.shape), gen, dtype=scores.dtype)
    else:
        noise = torch.zeros_like(scores)
    soft = torch.softmax((scores + noise) / cfg.tau, dim=-1)
    # Stable descending sort keeps the lower index first among equal values.
    order = torch.argsort(soft, dim=-1, descending=True, stable=True)
    indices = order[..., : cfg.top_k]
    hard = torch.zeros_like(soft)
    hard.scatter_(-1, indices, 1.0)
    st_weights = hard + (soft - soft.detach())
    gathered = vocab_matrix[indices]
    weights = soft if cfg.soft_forward else st_weights
    selected_weights = torch.gather(weights, -1, indices)
    domain_tokens = gathered * selected_weights.unsqueeze(-1)
    return SelectionResult(
        indices=indices, soft_dist=soft, st_weights=st_weights, domain_tokens=domain_tokens
    )
