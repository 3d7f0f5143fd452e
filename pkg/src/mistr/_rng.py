"""Deterministic seed fan-out.

Every stochastic stage of the pipeline owns an independent stream derived
from the master seed and a textual label, so any single tree, imputation,
or forest is reproducible in isolation and results do not depend on worker
count or scheduling.
"""
from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["derive_seed", "derive_tree_seeds", "spawn_generator"]

_MASK64 = (1 << 64) - 1


def derive_seed(master: int, *labels: object) -> int:
    """Derive a 64-bit child seed from a master seed and a label path.

    Stable across platforms and Python versions (SHA-256 based, no
    ``hash()`` involvement).
    """
    h = hashlib.sha256()
    h.update(str(int(master)).encode())
    for lab in labels:
        h.update(b"/")
        h.update(str(lab).encode())
    return int.from_bytes(h.digest()[:8], "little") & _MASK64


def derive_tree_seeds(master: int, label: str, count: int) -> np.ndarray:
    """Per-tree uint64 seeds for a numba kernel, one per ensemble member."""
    base = derive_seed(master, label)
    # splitmix64 walk from the base: cheap, well-dispersed, deterministic
    out = np.empty(count, dtype=np.uint64)
    state = base
    for i in range(count):
        state = (state + 0x9E3779B97F4A7C15) & _MASK64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        out[i] = (z ^ (z >> 31)) & _MASK64
    return out


def spawn_generator(master: int, *labels: object) -> np.random.Generator:
    """A numpy Generator seeded from the derived child seed."""
    return np.random.default_rng(derive_seed(master, *labels))
