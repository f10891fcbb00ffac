"""Keyed, counter-based random streams.

Every random decision in the package draws from a Philox generator whose
128-bit key is a hash of ``(seed, *path)``. Two calls with the same key
produce identical streams no matter what else ran before them, so masks and
initialisations can be generated in any order (or in parallel) and still be
bit-identical.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_key(seed: int, *path) -> tuple[int, int]:
    """Hash a seed and a path of labels into a 128-bit Philox key."""
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    h = hashlib.blake2b(digest_size=16)
    h.update(int(seed).to_bytes(8, "little"))
    for part in path:
        token = str(part).encode("utf-8")
        h.update(len(token).to_bytes(4, "little"))
        h.update(token)
    digest = h.digest()
    return int.from_bytes(digest[:8], "little"), int.from_bytes(digest[8:], "little")


def derive_seed(seed: int, *path) -> int:
    """A 64-bit child seed; useful for logging sub-seeds in reports."""
    lo, _ = derive_key(seed, *path)
    return lo


def keyed_generator(seed: int, *path) -> np.random.Generator:
    lo, hi = derive_key(seed, *path)
    key = np.array([lo, hi], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def sample_without_replacement(rng: np.random.Generator, candidates: np.ndarray, k: int) -> np.ndarray:
    """Choose ``k`` distinct entries of ``candidates`` by a partial Fisher-Yates shuffle.

    The first ``k`` positions of a working copy are shuffled in place; the
    remaining tail is never touched. Returns the chosen entries in draw order.
    """
    pool = np.array(candidates, copy=True)
    n = pool.shape[0]
    if k < 0 or k > n:
        raise ValueError(f"cannot draw {k} items from {n} candidates")
    if k == 0:
        return pool[:0]
    # swap targets j_i uniform on [i, n)
    targets = rng.integers(np.arange(k), n)
    for i, j in enumerate(targets.tolist()):
        if i != j:
            pool[i], pool[j] = pool[j], pool[i]
    return pool[:k]
