"""petseg: point-promptable 3D PET segmentation with noise-robust training."""

from .volume import (DatasetManifest, LabelVolume, ManifestEntry, Quality, Volume,
                     extract_patch, load_volume, normalize_intensity, save_volume)
from .net import NetConfig, PromptPoint, SegModel, load_checkpoint, save_checkpoint
from .metrics import dsc

__all__ = [
    "DatasetManifest", "LabelVolume", "ManifestEntry", "Quality", "Volume",
    "extract_patch", "load_volume", "normalize_intensity", "save_volume",
    "NetConfig", "PromptPoint", "SegModel", "load_checkpoint", "save_checkpoint",
    "dsc",
]
