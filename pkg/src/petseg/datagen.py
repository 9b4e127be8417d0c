"""Benchmark dataset builder: phantom volumes, HQ/LQ label splits, manifest."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .phantom import CorruptionSpec, benchmark_spec, corrupt_labels, generate_phantom
from .volume import DatasetManifest, ManifestEntry, Quality, save_label, save_volume


def build_benchmark(out_dir, n_hq: int = 40, n_lq: int = 160, n_test: int = 60,
                    shape=(64, 64, 64), blur_sigma: float = 1.5,
                    noise_scale: float = 0.05,
                    corruption: CorruptionSpec | None = None,
                    seed: int = 0, organs: list[str] | None = None) -> DatasetManifest:
    """Generate the default benchmark: HQ train / LQ train / test phantoms.

    LQ entries carry corrupted labels; HQ train and test entries carry the
    clean ground truth. ``organs`` restricts which targets are written.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    # Default corruption is biased toward dilation: preliminary annotations
    # tend to oversegment systematically rather than err symmetrically, and a
    # symmetric corruption would average out over a large LQ set.
    corruption = corruption or CorruptionSpec(dilate_erode_range=(1, 2), dilate_prob=1.0)
    entries = []
    counts = [("train_hq", n_hq), ("train_lq", n_lq), ("test", n_test)]
    idx = 0
    for split, count in counts:
        for _ in range(count):
            phantom_seed = seed * 1_000_003 + idx
            spec = benchmark_spec(phantom_seed, shape=shape, blur_sigma=blur_sigma,
                                  noise_scale=noise_scale)
            vol, labels = generate_phantom(spec)
            vid = f"p{idx:05d}"
            save_volume(vol, out_dir / f"{vid}.raw")
            label_paths = {}
            quality = Quality.LQ if split == "train_lq" else Quality.HQ
            for name, lab in labels.items():
                if organs and name not in organs:
                    continue
                if split == "train_lq":
                    cs = CorruptionSpec(
                        dilate_erode_range=corruption.dilate_erode_range,
                        boundary_flip_rate=corruption.boundary_flip_rate,
                        drop_rate=corruption.drop_rate,
                        dilate_prob=corruption.dilate_prob,
                        seed=phantom_seed * 31 + hash(name) % 1000,
                    )
                    lab = corrupt_labels(lab, cs)
                lpath = f"{vid}_{name}.raw"
                save_label(lab, out_dir / lpath, spacing=vol.spacing)
                label_paths[name] = lpath
            entries.append(ManifestEntry(volume_path=f"{vid}.raw", label_paths=label_paths,
                                         quality=quality, split=split, volume_id=vid))
            idx += 1
    manifest = DatasetManifest(entries=entries, seed=seed)
    manifest.save(out_dir / "manifest.json")
    return manifest
