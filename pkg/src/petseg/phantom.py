"""Synthetic whole-body-like PET phantoms with clean and corrupted labels.

Images are sums of ellipsoidal "organ" uptake over a background, blurred to
model partial-volume softening, with signal-proportional noise. Ground-truth
labels are the unblurred ellipsoid indicators; a separate corruption pass
produces the low-quality label set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .volume import LabelVolume, Quality, Volume


@dataclass
class OrganSpec:
    name: str
    center: tuple[float, float, float]  # voxels
    radii: tuple[float, float, float]  # voxels
    uptake: float


@dataclass
class PhantomSpec:
    shape: tuple[int, int, int] = (64, 64, 64)
    organs: list[OrganSpec] = field(default_factory=list)
    background_uptake: float = 0.2
    blur_sigma: float = 1.0  # voxels; models partial-volume effect
    noise_scale: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.blur_sigma < 0 or self.noise_scale < 0:
            raise ValueError("blur_sigma and noise_scale must be >= 0")
        for o in self.organs:
            if any(r <= 0 for r in o.radii):
                raise ValueError(f"organ {o.name}: radii must be positive")


@dataclass
class CorruptionSpec:
    dilate_erode_range: tuple[int, int] = (0, 1)  # morphological radius interval
    boundary_flip_rate: float = 0.3
    drop_rate: float = 0.0
    dilate_prob: float = 0.5  # probability the morphological step dilates (vs erodes)
    seed: int = 0

    def __post_init__(self):
        if not (0 <= self.boundary_flip_rate <= 1 and 0 <= self.drop_rate <= 1):
            raise ValueError("rates must lie in [0,1]")
        if not 0 <= self.dilate_prob <= 1:
            raise ValueError("rates must lie in [0,1]")
        if self.dilate_erode_range[0] > self.dilate_erode_range[1]:
            raise ValueError("dilate_erode_range bounds out of order")


def ellipsoid_mask(shape, center, radii) -> np.ndarray:
    """Binary indicator of the discrete ellipsoid (<= 1 in normalized coords)."""
    grids = np.ogrid[[slice(0, s) for s in shape]]
    q = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    return (q <= 1.0).astype(np.uint8)


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, dict[str, LabelVolume]]:
    """Render the phantom image and its clean per-organ labels.

    Overlapping organs are permitted; for label assignment, later organs in
    the list take precedence. Deterministic for a fixed seed.
    """
    rng = np.random.default_rng(spec.seed)
    image = np.full(spec.shape, spec.background_uptake, dtype=np.float64)
    owner = np.full(spec.shape, -1, dtype=np.int32)
    masks = []
    for idx, organ in enumerate(spec.organs):
        m = ellipsoid_mask(spec.shape, organ.center, organ.radii)
        masks.append(m)
        image += m * organ.uptake
        owner[m > 0] = idx

    if spec.blur_sigma > 0:
        image = ndimage.gaussian_filter(image, spec.blur_sigma)
    if spec.noise_scale > 0:
        image = image * (1.0 + spec.noise_scale * rng.standard_normal(spec.shape))
    image = np.clip(image, 0.0, None)

    labels = {
        organ.name: LabelVolume(
            data=((owner == idx)).astype(np.uint8),
            target_name=organ.name,
            quality=Quality.HQ,
        )
        for idx, organ in enumerate(spec.organs)
    }
    vol = Volume(data=image.astype(np.float32), spacing=(3.0, 3.0, 3.0), id=f"phantom{spec.seed:05d}")
    return vol, labels


def _ball(radius: int) -> np.ndarray:
    if radius <= 0:
        return np.ones((1, 1, 1), dtype=bool)
    g = np.ogrid[-radius:radius + 1, -radius:radius + 1, -radius:radius + 1]
    return (g[0] ** 2 + g[1] ** 2 + g[2] ** 2) <= radius ** 2


def boundary_band(mask: np.ndarray, width: int = 1) -> np.ndarray:
    """Voxels within ``width`` morphological steps of the mask boundary."""
    m = mask.astype(bool)
    ball = _ball(width)
    dil = ndimage.binary_dilation(m, structure=ball)
    ero = ndimage.binary_erosion(m, structure=ball)
    return dil & ~ero


def corrupt_labels(label: LabelVolume, cspec: CorruptionSpec) -> LabelVolume:
    """Produce a low-quality label: random dilation/erosion, boundary voxel
    flips, and (with drop_rate) full mask dropout. Deterministic per seed."""
    rng = np.random.default_rng(cspec.seed)
    m = label.data.astype(bool)

    lo, hi = cspec.dilate_erode_range
    radius = int(rng.integers(lo, hi + 1))
    if radius > 0:
        if rng.random() < cspec.dilate_prob:
            m = ndimage.binary_dilation(m, structure=_ball(radius))
        else:
            m = ndimage.binary_erosion(m, structure=_ball(radius))

    if cspec.boundary_flip_rate > 0 and m.any():
        band = boundary_band(m.astype(np.uint8))
        flips = band & (rng.random(m.shape) < cspec.boundary_flip_rate)
        m = m ^ flips

    if rng.random() < cspec.drop_rate:
        m = np.zeros_like(m)

    return LabelVolume(data=m.astype(np.uint8), target_name=label.target_name, quality=Quality.LQ)


def default_organs(shape=(64, 64, 64), rng: np.random.Generator | None = None) -> list[OrganSpec]:
    """Five-organ recipe roughly mimicking a torso layout, jittered per rng."""
    d, h, w = shape
    base = [
        ("liver", (0.45, 0.40, 0.60), (0.18, 0.16, 0.16), 1.2),
        ("kidney_l", (0.62, 0.55, 0.36), (0.08, 0.07, 0.07), 1.6),
        ("kidney_r", (0.62, 0.55, 0.70), (0.08, 0.07, 0.07), 1.6),
        ("heart", (0.28, 0.42, 0.45), (0.11, 0.11, 0.11), 1.8),
        ("spleen", (0.48, 0.52, 0.26), (0.09, 0.08, 0.08), 1.0),
    ]
    organs = []
    for name, c, r, uptake in base:
        center = np.array([c[0] * d, c[1] * h, c[2] * w], dtype=float)
        radii = np.array([r[0] * d, r[1] * h, r[2] * w], dtype=float)
        if rng is not None:
            center += rng.uniform(-0.03, 0.03, 3) * np.array(shape)
            radii *= rng.uniform(0.85, 1.15, 3)
            uptake *= rng.uniform(0.9, 1.1)
        organs.append(OrganSpec(name, tuple(center), tuple(np.maximum(radii, 2.0)), uptake))
    return organs


def benchmark_spec(seed: int, shape=(64, 64, 64), blur_sigma=1.0, noise_scale=0.05) -> PhantomSpec:
    """One randomized benchmark phantom: jittered 5-organ layout."""
    rng = np.random.default_rng(seed)
    return PhantomSpec(
        shape=shape,
        organs=default_organs(shape, rng),
        background_uptake=0.2,
        blur_sigma=blur_sigma,
        noise_scale=noise_scale,
        seed=seed,
    )
