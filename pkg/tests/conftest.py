import numpy as np
import pytest
import torch

from petseg.net import NetConfig, SegModel


@pytest.fixture(scope="session")
def tiny_cfg():
    return NetConfig(input_size=(16, 16, 16), patch_size=4, embed_dim=32, depth=1,
                     num_heads=2, decoder_dim=32)


@pytest.fixture(scope="session")
def tiny_model(tiny_cfg):
    torch.manual_seed(0)
    m = SegModel(tiny_cfg)
    m.eval()
    return m


def ball_mask(shape, center, radius):
    grids = np.ogrid[[slice(0, s) for s in shape]]
    q = sum((g - c) ** 2 for g, c in zip(grids, center))
    return (q <= radius ** 2).astype(np.uint8)
