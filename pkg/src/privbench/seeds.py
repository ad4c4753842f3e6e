"""Keyed seed derivation.

Each stage draws from its own stream ``sha256("<root>:<stage>")``, so adding
or removing a stage never shifts the randomness of another.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def derive_seed(root: int, stage: str) -> int:
    digest = hashlib.sha256(f"{int(root)}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def numpy_rng(root: int, stage: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, stage))


def torch_generator(root: int, stage: str) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(root, stage))
