"""Run-length codec for binary masks (flattened, zeros-first convention)."""

from __future__ import annotations

import numpy as np


def rle_encode(mask: np.ndarray) -> list[int]:
    """Encode a binary array as alternating run lengths, starting with the
    length of the leading zero run (possibly 0)."""
    flat = np.asarray(mask).reshape(-1).astype(np.uint8)
    if flat.size == 0:
        return []
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0] == 1:
        runs = [0] + runs
    return [int(r) for r in runs]


def rle_decode(runs: list[int], size: int) -> np.ndarray:
    out = np.zeros(size, dtype=np.uint8)
    pos = 0
    val = 0
    for r in runs:
        if val:
            out[pos:pos + r] = 1
        pos += r
        val ^= 1
    if pos != size:
        raise ValueError(f"run lengths sum to {pos}, expected {size}")
    return out
