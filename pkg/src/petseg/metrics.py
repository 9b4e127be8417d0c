"""Segmentation metrics."""

from __future__ import annotations

import numpy as np

from .volume import LabelVolume


def dsc(g, s) -> float:
    """Dice similarity coefficient 2|G n S| / (|G| + |S|).

    Both masks empty is defined as 1.0 (correctly predicted absence).
    """
    g = (g.data if isinstance(g, LabelVolume) else np.asarray(g)).astype(bool)
    s = (s.data if isinstance(s, LabelVolume) else np.asarray(s)).astype(bool)
    if g.shape != s.shape:
        raise ValueError(f"shape mismatch {g.shape} vs {s.shape}")
    denom = int(g.sum()) + int(s.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((g & s).sum()) / denom
