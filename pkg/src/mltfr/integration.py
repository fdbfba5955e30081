"""Cross-attention between sequence embeddings and filtered vocabulary tokens.

Queries come from the item embedding sequence, keys and values from the
selected raw vocabulary rows.  Multi-head scaled dot-product attention plus an
output projection yields one semantic offset per sequence position; the
result is used directly (no residual connection or layer normalization here).
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .errors import ConfigurationError
from .seeding import torch_generator


class CrossAttention(nn.Module):
    """Multi-head cross-attention from a d_emb sequence onto d_llm tokens."""

    def __init__(
        self,
        d_emb: int,
        d_llm: int,
        heads: int = 4,
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        if d_emb % heads != 0:
            raise ConfigurationError(f"d_emb={d_emb} is not divisible by heads={heads}")
        self.d_emb = d_emb
        self.d_llm = d_llm
        self.heads = heads
        self.d_head = d_emb // heads
        gen = torch_generator("cross_attention", seed)

        def init(rows: int, cols: int) -> nn.Parameter:
            return nn.Parameter(0.02 * torch.randn(rows, cols, generator=gen, dtype=dtype))

        self.w_query = init(d_emb, d_emb)
        self.w_key = init(d_llm, d_emb)
        self.w_value = init(d_llm, d_emb)
        self.w_out = init(d_emb, d_emb)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        # (..., n, d_emb) -> (..., heads, n, d_head)
        *lead, n, _ = x.shape
        return x.reshape(*lead, n, self.heads, self.d_head).transpose(-3, -2)

    def forward(
        self,
        embeddings: torch.Tensor,
        domain_tokens: torch.Tensor,
        return_weights: bool = False,
    ):
        """Attend each sequence position onto the domain tokens.

        ``embeddings`` is (k, d_emb) or (B, k, d_emb); ``domain_tokens`` is
        (K, d_llm) or (B, K, d_llm) correspondingly.  Returns a tensor shaped
        like ``embeddings`` (and the per-head attention weights on request).
        """
        if embeddings.shape[-1] != self.d_emb:
            raise ConfigurationError(
                f"expected embeddings of width {self.d_emb}, got {embeddings.shape[-1]}"
            )
        if domain_tokens.shape[-1] != self.d_llm:
            raise ConfigurationError(
                f"expected domain tokens of width {self.d_llm}, got {domain_tokens.shape[-1]}"
            )
        queries = self._split(embeddings @ self.w_query)
        keys = self._split(domain_tokens @ self.w_key)
        values = self._split(domain_tokens @ self.w_value)
        logits = queries @ keys.transpose(-1, -2) / math.sqrt(self.d_head)
        weights = torch.softmax(logits, dim=-1)
        context = weights @ values  # (..., heads, k, d_head)
        merged = context.transpose(-3, -2).reshape(*embeddings.shape[:-1], self.d_emb)
        out = merged @ self.w_out
        if return_weights:
            return out, weights
        return out
