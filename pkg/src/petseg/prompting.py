"""Prompt simulation: ground-truth seeded initial points and error-region
refinement points, mirroring an interactive correction workflow."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .net import NEGATIVE, POSITIVE, PromptPoint
from .volume import LabelVolume


class EmptyMaskError(ValueError):
    pass


@dataclass
class PromptPolicy:
    perturb_radius: int = 2  # voxels of jitter on sampled points
    seed: int = 0
    mode: str = "volumetric_3d"  # or "slicewise_2d"

    def __post_init__(self):
        if self.perturb_radius < 0:
            raise ValueError("perturb_radius must be >= 0")
        self._rng = np.random.default_rng(self.seed)

    def reset(self):
        self._rng = np.random.default_rng(self.seed)


def _as_mask(m) -> np.ndarray:
    return m.data if isinstance(m, LabelVolume) else np.asarray(m)


def _sample_from(mask: np.ndarray, rng: np.random.Generator) -> tuple[int, int, int]:
    idx = np.argwhere(mask)
    pick = idx[rng.integers(len(idx))]
    return tuple(int(c) for c in pick)


def initial_prompt(gt, policy: PromptPolicy) -> PromptPoint:
    """A positive point sampled uniformly from the foreground, jittered within
    perturb_radius but re-drawn until it stays inside the foreground (10
    attempts, then the unjittered point)."""
    mask = _as_mask(gt)
    if not mask.any():
        raise EmptyMaskError("no foreground to prompt")
    rng = policy._rng
    base = _sample_from(mask, rng)
    if policy.perturb_radius == 0:
        return PromptPoint(coord=base, polarity=POSITIVE)
    r = policy.perturb_radius
    for _ in range(10):
        jit = tuple(int(np.clip(b + rng.integers(-r, r + 1), 0, s - 1))
                    for b, s in zip(base, mask.shape))
        if mask[jit]:
            return PromptPoint(coord=jit, polarity=POSITIVE)
    return PromptPoint(coord=base, polarity=POSITIVE)


def next_prompt(gt, prev_pred, policy: PromptPolicy) -> PromptPoint:
    """A corrective point from the error region of the previous prediction.

    Samples from the larger of the false-negative set (positive point) and
    false-positive set (negative point); ties go to false negatives. An empty
    error region falls back to initial_prompt.
    """
    g = _as_mask(gt).astype(bool)
    p = _as_mask(prev_pred).astype(bool)
    if g.shape != p.shape:
        raise ValueError(f"shape mismatch {g.shape} vs {p.shape}")
    fn = g & ~p
    fp = p & ~g
    n_fn, n_fp = int(fn.sum()), int(fp.sum())
    if n_fn == 0 and n_fp == 0:
        return initial_prompt(gt, policy)
    if n_fn >= n_fp:
        return PromptPoint(coord=_sample_from(fn, policy._rng), polarity=POSITIVE)
    return PromptPoint(coord=_sample_from(fp, policy._rng), polarity=NEGATIVE)


def slicewise_budget(gt, points_per_slice: int, seed: int = 0) -> list[tuple[int, list[PromptPoint]]]:
    """Per-axial-slice positive prompts, the budget model of 2D slice-by-slice
    segmentation: points_per_slice points for every slice with foreground."""
    if points_per_slice not in (1, 3, 5):
        raise ValueError("points_per_slice must be 1, 3 or 5")
    mask = _as_mask(gt)
    if not mask.any():
        raise EmptyMaskError("no foreground to prompt")
    rng = np.random.default_rng(seed)
    out = []
    for z in range(mask.shape[0]):
        sl = mask[z]
        if not sl.any():
            continue
        idx = np.argwhere(sl)
        pts = []
        for _ in range(points_per_slice):
            y, x = idx[rng.integers(len(idx))]
            pts.append(PromptPoint(coord=(z, int(y), int(x)), polarity=POSITIVE))
        out.append((z, pts))
    return out


def occupied_slice_count(gt) -> int:
    mask = _as_mask(gt)
    return int(np.any(mask, axis=(1, 2)).sum())
