import numpy as np
import pytest
import torch

from petseg.net import (NEGATIVE, POSITIVE, NetConfig, PromptPoint, SegModel,
                        load_checkpoint, save_checkpoint)
from petseg.prompting import PromptPolicy

from conftest import ball_mask


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        NetConfig(input_size=(60, 64, 64), patch_size=8)
    with pytest.raises(ValueError, match="divisible"):
        NetConfig(embed_dim=90, num_heads=4)


def test_token_count():
    cfg = NetConfig(input_size=(64, 64, 64), patch_size=8, embed_dim=96, depth=1, num_heads=4)
    m = SegModel(cfg)
    x = torch.rand(1, 1, 64, 64, 64)
    tokens = m.encode_image(x)
    assert tokens.shape == (1, 512, 96)  # (64/8)^3 = 512


def test_encoder_deterministic(tiny_model, tiny_cfg):
    x = torch.rand(1, 1, *tiny_cfg.input_size)
    with torch.no_grad():
        a = tiny_model.encode_image(x)
        b = tiny_model.encode_image(x)
    assert torch.equal(a, b)


def test_encoder_permutation_equivariance(tiny_cfg):
    # with positional encoding zeroed, swapping two input patches swaps the
    # corresponding token rows
    torch.manual_seed(1)
    m = SegModel(tiny_cfg)
    m.eval()
    with torch.no_grad():
        m.image_encoder.pos_embed.zero_()
    ps = tiny_cfg.patch_size
    x = torch.rand(1, 1, *tiny_cfg.input_size)
    xp = x.clone()
    # swap patch (0,0,0) with patch (0,0,1): token indices 0 and 1
    xp[..., :ps, :ps, :ps], xp[..., :ps, :ps, ps:2 * ps] = \
        x[..., :ps, :ps, ps:2 * ps].clone(), x[..., :ps, :ps, :ps].clone()
    with torch.no_grad():
        t = m.encode_image(x)
        tp = m.encode_image(xp)
    torch.testing.assert_close(tp[0, 0], t[0, 1], rtol=1e-4, atol=1e-5)
    torch.testing.assert_close(tp[0, 1], t[0, 0], rtol=1e-4, atol=1e-5)
    torch.testing.assert_close(tp[0, 2:], t[0, 2:], rtol=1e-4, atol=1e-5)


def test_encoder_shape_mismatch(tiny_model):
    with pytest.raises(ValueError, match="expected input"):
        tiny_model.encode_image(torch.rand(1, 1, 8, 8, 8))


def test_point_embedding_function_of_coord_and_polarity(tiny_model):
    pe = tiny_model.prompt_encoder
    coords = torch.tensor([[[4.0, 5.0, 6.0], [4.0, 5.0, 6.0]]])
    pols = torch.tensor([[POSITIVE, POSITIVE]])
    with torch.no_grad():
        emb = pe.embed_points(coords, pols)
    assert torch.equal(emb[0, 0], emb[0, 1])

    with torch.no_grad():
        opp = pe.embed_points(coords, torch.tensor([[POSITIVE, NEGATIVE]]))
    assert not torch.equal(opp[0, 0], opp[0, 1])


def test_point_out_of_bounds_rejected(tiny_model, tiny_cfg):
    pe = tiny_model.prompt_encoder
    bad = torch.tensor([[[float(tiny_cfg.input_size[0]), 0.0, 0.0]]])
    with pytest.raises(ValueError, match="outside volume bounds"):
        pe.embed_points(bad, torch.tensor([[POSITIVE]]))


def test_dense_embedding_shapes(tiny_model, tiny_cfg):
    pe = tiny_model.prompt_encoder
    grid = tiny_cfg.grid_shape
    with torch.no_grad():
        none_emb = pe.embed_mask(None, batch=1)
        zero_emb = pe.embed_mask(torch.zeros(1, 1, *tiny_cfg.input_size))
    assert tuple(none_emb.shape) == (1, tiny_cfg.embed_dim, *grid)
    assert tuple(zero_emb.shape) == (1, tiny_cfg.embed_dim, *grid)


def test_decode_output_range_and_shape(tiny_model, tiny_cfg):
    x = torch.rand(1, 1, *tiny_cfg.input_size)
    with torch.no_grad():
        f = tiny_model.encode_image(x)
        prob = tiny_model.decode(f, [PromptPoint((8, 8, 8))], None)
    assert tuple(prob.shape[-3:]) == tiny_cfg.input_size
    assert torch.all(prob > 0) and torch.all(prob < 1)
    assert torch.all(torch.isfinite(prob))


def test_duplicate_point_changes_output(tiny_model, tiny_cfg):
    x = torch.rand(1, 1, *tiny_cfg.input_size)
    with torch.no_grad():
        f = tiny_model.encode_image(x)
        one = tiny_model.decode(f, [PromptPoint((8, 8, 8))], None)
        two = tiny_model.decode(f, [PromptPoint((8, 8, 8)), PromptPoint((8, 8, 8))], None)
    assert not torch.equal(one, two)


@pytest.mark.parametrize("group", ["encoder_block", "prompt_embed", "decoder_head"])
def test_finite_difference_gradients(group):
    torch.manual_seed(3)
    cfg = NetConfig(input_size=(16, 16, 16), patch_size=4, embed_dim=16, depth=1, num_heads=2)
    model = SegModel(cfg).double()
    model.eval()
    x = torch.rand(1, 1, 16, 16, 16, dtype=torch.float64)
    points = [PromptPoint((8, 8, 8)), PromptPoint((4, 12, 6), NEGATIVE)]

    param = {
        "encoder_block": model.image_encoder.blocks[0].attn.q.weight,
        "prompt_embed": model.prompt_encoder.polarity_embed.weight,
        "decoder_head": model.mask_decoder.hyper_mlp.fc2.weight,
    }[group]

    def f():
        fi = model.image_encoder(x)
        return model.decode(fi, points, None).mean()

    model.zero_grad()
    out = f()
    out.backward()
    grad = param.grad.detach().clone()

    rng = np.random.default_rng(0)
    h = 1e-5
    flat_idx = rng.choice(param.numel(), size=4, replace=False)
    for fi_ in flat_idx:
        idx = np.unravel_index(fi_, param.shape)
        with torch.no_grad():
            orig = param[idx].item()
            param[idx] = orig + h
            up = f().item()
            param[idx] = orig - h
            down = f().item()
            param[idx] = orig
        numeric = (up - down) / (2 * h)
        analytic = grad[idx].item()
        denom = max(abs(numeric), abs(analytic), 1e-8)
        assert abs(numeric - analytic) / denom < 1e-2, (group, idx, numeric, analytic)


def test_predict_iterative_contracts(tiny_model, tiny_cfg):
    gt = ball_mask(tiny_cfg.input_size, (8, 8, 8), 4)
    x = np.random.default_rng(0).random(tiny_cfg.input_size).astype(np.float32)

    before = dict(tiny_model.stats)
    stack = tiny_model.predict_iterative(x, None, n_pt=3, gt=gt,
                                         policy=PromptPolicy(seed=0))
    assert len(stack) == 3
    # encoder invoked exactly once per call, loop starts from the zero mask
    assert tiny_model.stats["encode_calls"] == before["encode_calls"] + 1
    assert tiny_model.stats["zero_initial_masks"] == before["zero_initial_masks"] + 1

    one = tiny_model.predict_iterative(x, None, n_pt=1, gt=gt, policy=PromptPolicy(seed=0))
    assert len(one) == 1
    np.testing.assert_array_equal(one.mean, one.final)

    with pytest.raises(ValueError, match="n_pt"):
        tiny_model.predict_iterative(x, None, n_pt=0, gt=gt)
    with pytest.raises(ValueError, match="external prompts"):
        tiny_model.predict_iterative(x, [PromptPoint((1, 1, 1))], n_pt=2, gt=None)


def test_predict_iterative_deterministic(tiny_model, tiny_cfg):
    gt = ball_mask(tiny_cfg.input_size, (8, 8, 8), 4)
    x = np.random.default_rng(1).random(tiny_cfg.input_size).astype(np.float32)
    a = tiny_model.predict_iterative(x, None, 2, gt=gt, policy=PromptPolicy(seed=7))
    b = tiny_model.predict_iterative(x, None, 2, gt=gt, policy=PromptPolicy(seed=7))
    for pa, pb in zip(a.predictions, b.predictions):
        np.testing.assert_array_equal(pa, pb)


def test_checkpoint_roundtrip(tmp_path, tiny_model, tiny_cfg):
    path = tmp_path / "m.pt"
    save_checkpoint(tiny_model, path)
    back = load_checkpoint(path)
    assert back.cfg == tiny_cfg
    x = torch.rand(1, 1, *tiny_cfg.input_size)
    with torch.no_grad():
        a = tiny_model.decode(tiny_model.encode_image(x), [PromptPoint((8, 8, 8))], None)
        b = back.decode(back.encode_image(x), [PromptPoint((8, 8, 8))], None)
    assert torch.equal(a, b)


def test_checkpoint_schema_rejected(tmp_path):
    torch.save({"schema": "bogus/9", "config": {}, "state_dict": {}}, tmp_path / "x.pt")
    with pytest.raises(ValueError, match="schema"):
        load_checkpoint(tmp_path / "x.pt")
