"""Deterministic seed derivation.

Every stochastic draw in the package (Gumbel noise, negative sampling, batch
shuffling, dropout, parameter init) uses a seed derived from the experiment
seed plus a purpose tag and loop counters, never a shared global stream.  Two
runs with the same seed therefore consume identical randomness even when
optional branches (e.g. the consensus expert) are toggled on or off.
"""

import hashlib

import torch


def derive_seed(*parts) -> int:
    """Hash the parts into a stable 63-bit seed.

    Parts may be ints or strings; the mapping is fixed across runs, platforms
    and Python processes (no reliance on salted ``hash()``).
    """
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") & 0x7FFF_FFFF_FFFF_FFFF


def torch_generator(*parts) -> torch.Generator:
    """A CPU torch generator seeded via :func:`derive_seed`."""
    gen = torch.Generator(device="cpu")
    gen.manual_seed(derive_seed(*parts))
    return gen
