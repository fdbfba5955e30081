"""Vocabulary embedding store.

Frozen LLM vocabulary matrices are the raw material for every expert.  They
are kept in a small binary container (magic ``VEM1``, two little-endian u32
counts, then row-major float32 data) with an optional ``<path>.meta`` text
sidecar carrying ``name=`` / ``source=`` lines.  Synthetic generators provide
clustered and unstructured stand-ins for experiments that do not ship a real
LLM checkpoint.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import VemFormatError, VemLengthError, VemValidationError
from .seeding import torch_generator

MAGIC = b"VEM1"
_HEADER = struct.Struct("<4sII")


@dataclass
class VocabEmbedding:
    """A frozen V x d_llm vocabulary embedding matrix plus provenance."""

    matrix: torch.Tensor
    name: str = "vocab"
    source: str = "unknown"
    cluster_labels: list[int] | None = None

    def __post_init__(self):
        if self.matrix.ndim != 2:
            raise VemValidationError(
                f"vocabulary matrix must be 2-D, got shape {tuple(self.matrix.shape)}"
            )
        v, d = self.matrix.shape
        if v < 1 or d < 1:
            raise VemValidationError(f"vocabulary matrix must be non-empty, got {v}x{d}")
        if not torch.isfinite(self.matrix).all():
            raise VemValidationError(f"vocabulary {self.name!r} contains non-finite values")
        if self.cluster_labels is not None and len(self.cluster_labels) != v:
            raise VemValidationError(
                f"cluster label count {len(self.cluster_labels)} != vocabulary size {v}"
            )

    @property
    def vocab_size(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def save_vocab(path: str | os.PathLike, vocab: VocabEmbedding) -> None:
    """Write ``vocab`` in the VEM1 container format plus its meta sidecar."""
    matrix = vocab.matrix.detach().to(torch.float32).cpu().numpy()
    v, d = matrix.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, v, d))
        fh.write(np.ascontiguousarray(matrix).tobytes())
    with open(f"{os.fspath(path)}.meta", "w", encoding="utf-8") as fh:
        fh.write(f"name={vocab.name}\n")
        fh.write(f"source={vocab.source}\n")


def load_vocab(path: str | os.PathLike) -> VocabEmbedding:
    """Read a VEM1 container; the meta sidecar is honoured when present."""
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) < _HEADER.size or header[:4] != MAGIC:
            raise VemFormatError(f"{path}: missing VEM1 magic")
        _, v, d = _HEADER.unpack(header)
        payload = fh.read(v * d * 4)
    if len(payload) < v * d * 4:
        raise VemLengthError(
            f"{path}: expected {v * d * 4} data bytes for {v}x{d}, got {len(payload)}"
        )
    matrix = torch.from_numpy(
        np.frombuffer(payload, dtype="<f4", count=v * d).reshape(v, d).copy()
    )
    name = os.path.basename(os.fspath(path))
    source = "file"
    meta_path = f"{os.fspath(path)}.meta"
    if os.path.exists(meta_path):
        with open(meta_path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line.startswith("name="):
                    name = line[len("name="):]
                elif line.startswith("source="):
                    source = line[len("source="):]
    return VocabEmbedding(matrix=matrix, name=name, source=source)


def synth_vocab(
    vocab_size: int,
    dim: int,
    n_clusters: int,
    spread: float = 0.1,
    seed: int = 0,
    name: str = "synthetic-clustered",
) -> VocabEmbedding:
    """Clustered Gaussian vocabulary.

    Cluster centroids are drawn from N(0, I); each token is its centroid plus
    ``spread`` times standard Gaussian noise.  Tokens are assigned round-robin
    so cluster sizes differ by at most one.
    """
    if not (1 <= n_clusters <= vocab_size):
        raise VemValidationError(
            f"n_clusters must be in [1, vocab_size], got {n_clusters} for V={vocab_size}"
        )
    gen = torch_generator("synth_vocab", seed)
    centroids = torch.randn(n_clusters, dim, generator=gen)
    labels = [i % n_clusters for i in range(vocab_size)]
    noise = torch.randn(vocab_size, dim, generator=gen)
    matrix = centroids[torch.tensor(labels)] + spread * noise
    return VocabEmbedding(
        matrix=matrix.to(torch.float32),
        name=name,
        source=f"synthetic-clustered(V={vocab_size},d={dim},c={n_clusters},spread={spread},seed={seed})",
        cluster_labels=labels,
    )


def random_vocab(
    vocab_size: int,
    dim: int,
    seed: int = 0,
    scale: float = 0.02,
    name: str = "synthetic-random",
) -> VocabEmbedding:
    """Unstructured Gaussian vocabulary with entries N(0, scale^2)."""
    gen = torch_generator("random_vocab", seed)
    matrix = scale * torch.randn(vocab_size, dim, generator=gen)
    return VocabEmbedding(
        matrix=matrix.to(torch.float32),
        name=name,
        source=f"synthetic-random(V={vocab_size},d={dim},seed={seed},scale={scale})",
    )


class ItemTable(nn.Module):
    """Learnable item embeddings with row 0 reserved for padding.

    Row 0 is pinned to zero: it is initialised to zero and, because the
    embedding uses ``padding_idx=0``, it never receives gradient, so the
    optimizer leaves it untouched.
    """

    def __init__(self, n_items: int, d_emb: int, seed: int = 0, dtype: torch.dtype = torch.float32):
        super().__init__()
        if n_items < 1:
            raise VemValidationError(f"catalog must contain at least one item, got {n_items}")
        self.n_items = n_items
        self.d_emb = d_emb
        weight = 0.02 * torch.randn(
            n_items + 1, d_emb, generator=torch_generator("item_table", seed), dtype=dtype
        )
        weight[0].zero_()
        self.emb = nn.Embedding(n_items + 1, d_emb, padding_idx=0, _weight=weight)

    @property
    def weight(self) -> torch.Tensor:
        return self.emb.weight

    def forward(self, item_ids: torch.Tensor) -> torch.Tensor:
        return self.emb(item_ids)

    def catalog(self) -> torch.Tensor:
        """Embeddings of real items 1..N (row 0 excluded)."""
        return self.emb.weight[1:]

    def padding_row_is_zero(self) -> bool:
        return bool((self.emb.weight[0] == 0).all())
