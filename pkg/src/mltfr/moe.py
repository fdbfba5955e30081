"""Item-level expert routing and aggregation.

A lightweight linear gate scores every expert at every sequence position and
softmax-normalizes across experts, so each position mixes expert outputs with
convex weights.  The consensus offset, when present, is added on top with a
fixed scale rather than competing inside the gate.
"""

from __future__ import annotations

import torch
from torch import nn

from .errors import ConfigurationError
from .seeding import torch_generator


class GateNetwork(nn.Module):
    """Per-position softmax routing over experts.

    Expert m scores position t as ``w_m . e_t + b_m[t]``; the bias vector is
    learned per absolute position up to ``k_max`` and truncated or
    zero-extended when a shorter or longer sequence arrives.
    """

    def __init__(
        self,
        n_experts: int,
        d_emb: int,
        k_max: int,
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        if n_experts < 1:
            raise ConfigurationError(f"need at least one expert, got {n_experts}")
        if k_max < 1:
            raise ConfigurationError(f"position bias needs k_max >= 1, got {k_max}")
        self.n_experts = n_experts
        self.k_max = k_max
        gen = torch_generator("gate", seed)
        self.weight = nn.Parameter(0.02 * torch.randn(n_experts, d_emb, generator=gen, dtype=dtype))
        self.bias = nn.Parameter(torch.zeros(n_experts, k_max, dtype=dtype))

    def _bias_for(self, k: int) -> torch.Tensor:
        if k <= self.k_max:
            return self.bias[:, :k]
        pad = torch.zeros(
            self.n_experts, k - self.k_max, dtype=self.bias.dtype, device=self.bias.device
        )
        return torch.cat([self.bias, pad], dim=1)

    def forward(self, embeddings: torch.Tensor) -> torch.Tensor:
        """Routing weights for a (k, d) sequence or (B, k, d) batch.

        Returns (n_experts, k) or (B, n_experts, k); each position's column
        sums to 1 across experts.
        """
        k = embeddings.shape[-2]
        logits = embeddings @ self.weight.transpose(0, 1)  # (..., k, n)
        logits = logits.transpose(-1, -2) + self._bias_for(k)  # (..., n, k)
        return torch.softmax(logits, dim=-2)


def aggregate_experts(routing: torch.Tensor, expert_outputs: list[torch.Tensor]) -> torch.Tensor:
    """Positionwise convex combination of per-expert offset matrices.

    ``routing`` is (..., n, k); each expert output is (..., k, d_emb).  The
    routing weight for expert m at position t scales that expert's whole
    embedding row.
    """
    n = routing.shape[-2]
    if n != len(expert_outputs):
        raise ConfigurationError(
            f"routing covers {n} experts but {len(expert_outputs)} outputs were given"
        )
    stacked = torch.stack(expert_outputs, dim=-3)  # (..., n, k, d)
    return (routing.unsqueeze(-1) * stacked).sum(dim=-3)


def combine_with_consensus(
    base: torch.Tensor, consensus: torch.Tensor | None, alpha: float
) -> torch.Tensor:
    """Add the scaled consensus offset; ``alpha == 0`` returns ``base`` unchanged."""
    if alpha == 0 or consensus is None:
        return base
    return alpha * consensus + base
