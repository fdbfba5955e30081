"""Sequence encoder backbones.

Two styles share one transformer stack: a causal encoder that reads the user
state off the last valid position (lower-triangular attention), and a
bidirectional encoder that appends a learnable mask-token slot and reads the
state there.  Inputs are left-padded; padded rows are zeroed between blocks
and excluded from attention so their content can never reach the user state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigurationError, EmptySequenceError
from .seeding import torch_generator

STYLES = ("causal", "bidirectional")
_MASKED = -1e30


@dataclass
class BackboneConfig:
    style: str = "causal"
    layers: int = 2
    heads: int = 2
    d_emb: int = 64
    dropout: float = 0.2
    max_len: int = 50
    position_embeddings: bool = True

    def __post_init__(self):
        if self.style not in STYLES:
            raise ConfigurationError(f"style must be one of {STYLES}, got {self.style!r}")
        if self.layers < 0:
            raise ConfigurationError(f"layers must be >= 0, got {self.layers}")
        if self.d_emb % self.heads != 0:
            raise ConfigurationError(
                f"d_emb={self.d_emb} is not divisible by heads={self.heads}"
            )
        if not 0 <= self.dropout < 1:
            raise ConfigurationError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.max_len < 1:
            raise ConfigurationError(f"max_len must be >= 1, got {self.max_len}")


class SelfAttention(nn.Module):
    def __init__(self, d_emb: int, heads: int, gen: torch.Generator, dtype: torch.dtype):
        super().__init__()
        self.heads = heads
        self.d_head = d_emb // heads

        def init(rows: int, cols: int) -> nn.Parameter:
            return nn.Parameter(0.02 * torch.randn(rows, cols, generator=gen, dtype=dtype))

        self.w_query = init(d_emb, d_emb)
        self.w_key = init(d_emb, d_emb)
        self.w_value = init(d_emb, d_emb)
        self.w_out = init(d_emb, d_emb)

    def forward(self, x: torch.Tensor, attn_mask: torch.Tensor) -> torch.Tensor:
        b, k, d = x.shape
        def split(t):
            return t.reshape(b, k, self.heads, self.d_head).transpose(1, 2)
        q, kk, v = split(x @ self.w_query), split(x @ self.w_key), split(x @ self.w_value)
        logits = q @ kk.transpose(-1, -2) / math.sqrt(self.d_head)
        logits = logits + attn_mask  # (b, 1, k, k) additive
        weights = torch.softmax(logits, dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(b, k, d)
        return out @ self.w_out


class EncoderLayer(nn.Module):
    def __init__(self, d_emb: int, heads: int, dropout: float, gen: torch.Generator, dtype: torch.dtype):
        super().__init__()
        self.attn = SelfAttention(d_emb, heads, gen, dtype)
        self.norm_attn = nn.LayerNorm(d_emb, dtype=dtype)
        self.ff_in = nn.Parameter(0.02 * torch.randn(d_emb, d_emb, generator=gen, dtype=dtype))
        self.ff_in_bias = nn.Parameter(torch.zeros(d_emb, dtype=dtype))
        self.ff_out = nn.Parameter(0.02 * torch.randn(d_emb, d_emb, generator=gen, dtype=dtype))
        self.ff_out_bias = nn.Parameter(torch.zeros(d_emb, dtype=dtype))
        self.norm_ff = nn.LayerNorm(d_emb, dtype=dtype)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, attn_mask: torch.Tensor, keep: torch.Tensor) -> torch.Tensor:
        x = self.norm_attn(x + self.drop(self.attn(x, attn_mask)))
        hidden = torch.relu(x @ self.ff_in + self.ff_in_bias)
        x = self.norm_ff(x + self.drop(hidden @ self.ff_out + self.ff_out_bias))
        return x * keep


class SequenceEncoder(nn.Module):
    """Transformer stack mapping fused sequence embeddings to user states."""

    def __init__(self, cfg: BackboneConfig, seed: int = 0, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.cfg = cfg
        gen = torch_generator("backbone", seed)
        # One extra slot so the bidirectional style can append its mask token.
        self.pos_emb = nn.Parameter(
            0.02 * torch.randn(cfg.max_len + 1, cfg.d_emb, generator=gen, dtype=dtype)
        )
        self.mask_token = nn.Parameter(0.02 * torch.randn(cfg.d_emb, generator=gen, dtype=dtype))
        self.layers = nn.ModuleList(
            EncoderLayer(cfg.d_emb, cfg.heads, cfg.dropout, gen, dtype) for _ in range(cfg.layers)
        )
        self.input_drop = nn.Dropout(cfg.dropout)

    def _attn_mask(self, valid: torch.Tensor, causal: bool) -> torch.Tensor:
        b, k = valid.shape
        dtype = self.pos_emb.dtype
        allowed = valid.unsqueeze(1).expand(b, k, k)  # keys must be valid
        if causal:
            tril = torch.tril(torch.ones(k, k, dtype=torch.bool, device=valid.device))
            allowed = allowed & tril
        mask = torch.zeros(b, k, k, dtype=dtype, device=valid.device)
        mask[~allowed] = _MASKED
        return mask.unsqueeze(1)  # broadcast over heads

    def _run(self, x: torch.Tensor, valid: torch.Tensor, causal: bool) -> torch.Tensor:
        if x.shape[1] > self.cfg.max_len + 1:
            raise ConfigurationError(
                f"sequence length {x.shape[1]} exceeds max_len+1={self.cfg.max_len + 1}"
            )
        keep = valid.unsqueeze(-1).to(x.dtype)
        if self.cfg.position_embeddings:
            x = x + self.pos_emb[: x.shape[1]]
        x = x * keep
        x = self.input_drop(x)
        attn_mask = self._attn_mask(valid, causal)
        for layer in self.layers:
            x = layer(x, attn_mask, keep)
        return x

    def forward_states(self, fused: torch.Tensor, valid_mask: torch.Tensor) -> torch.Tensor:
        """Per-position states for next-item training (causal style only)."""
        if self.cfg.style != "causal":
            raise ConfigurationError("per-position states are only defined for the causal style")
        return self._run(fused, valid_mask, causal=True)

    def encode_sequence(self, fused: torch.Tensor, valid_mask: torch.Tensor) -> torch.Tensor:
        """User state h for a (B, k, d) fused batch.

        Causal: the state at the last valid position (the final column under
        left padding).  Bidirectional: the state at an appended mask-token
        slot that attends over the whole sequence.
        """
        single = fused.ndim == 2
        if single:
            fused = fused.unsqueeze(0)
            valid_mask = valid_mask.unsqueeze(0)
        if not valid_mask.any(dim=1).all():
            raise EmptySequenceError("cannot encode a sequence with no valid positions")
        if self.cfg.style == "causal":
            if not valid_mask[:, -1].all():
                raise EmptySequenceError("causal encoding expects left-padded input")
            states = self._run(fused, valid_mask, causal=True)
            h = states[:, -1]
        else:
            b = fused.shape[0]
            slot = self.mask_token.expand(b, 1, -1)
            extended = torch.cat([fused, slot], dim=1)
            valid_ext = torch.cat(
                [valid_mask, torch.ones(b, 1, dtype=torch.bool, device=valid_mask.device)], dim=1
            )
            states = self._run(extended, valid_ext, causal=False)
            h = states[:, -1]
        return h.squeeze(0) if single else h


def predict_scores(
    h: torch.Tensor, item_weight: torch.Tensor, candidates: torch.Tensor | None = None
) -> torch.Tensor:
    """Inner-product scores of user states against item embeddings.

    ``item_weight`` is the full (N+1, d) table including the padding row;
    scores cover items 1..N, or just ``candidates`` (1-based IDs) when given.
    """
    if candidates is None:
        return h @ item_weight[1:].transpose(0, 1)
    cand_emb = item_weight[candidates]  # (..., C, d)
    return (cand_emb @ h.unsqueeze(-1)).squeeze(-1)
