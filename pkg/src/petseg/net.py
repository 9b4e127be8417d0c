"""Point-promptable 3D segmentation network.

Three components: a ViT-style volumetric image encoder, a prompt encoder for
point prompts and the previous-iteration mask, and a mask decoder with
two-way cross attention. One forward pass segments one object; the mask at
iteration 0 is the all-zero volume, and each refinement feeds the previous
probability mask back as a dense prompt alongside the cumulative point set.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CKPT_SCHEMA = "seganypet-ckpt/1"

POSITIVE = 1
NEGATIVE = 0


@dataclass(frozen=True)
class PromptPoint:
    coord: tuple[int, int, int]  # (d, h, w) voxel index
    polarity: int = POSITIVE  # POSITIVE or NEGATIVE


@dataclass
class NetConfig:
    input_size: tuple[int, int, int] = (64, 64, 64)
    patch_size: int = 8
    embed_dim: int = 96
    depth: int = 4
    num_heads: int = 4
    decoder_dim: int = 96

    def __post_init__(self):
        for s in self.input_size:
            if s % self.patch_size != 0:
                raise ValueError(
                    f"input_size {self.input_size} not divisible by patch_size {self.patch_size}"
                )
        if self.embed_dim % self.num_heads != 0:
            raise ValueError("embed_dim must be divisible by num_heads")

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        return tuple(s // self.patch_size for s in self.input_size)

    @classmethod
    def paper_scale(cls) -> "NetConfig":
        # full-scale reference configuration; too heavy for desk use
        return cls(input_size=(128, 128, 128), patch_size=16, embed_dim=768,
                   depth=16, num_heads=12, decoder_dim=384)


@dataclass
class PredictionStack:
    """Per-iteration probability volumes from one prompting loop."""

    predictions: list[np.ndarray]
    prompts: list[PromptPoint] = field(default_factory=list)

    def __len__(self):
        return len(self.predictions)

    @property
    def mean(self) -> np.ndarray:
        return np.mean(np.stack(self.predictions), axis=0)

    @property
    def final(self) -> np.ndarray:
        return self.predictions[-1]


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int, kv_dim: int | None = None):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        kv_dim = kv_dim or dim
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(kv_dim, dim)
        self.v = nn.Linear(kv_dim, dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, q, k, v):
        B, Nq, C = q.shape
        h = self.num_heads
        q = self.q(q).reshape(B, Nq, h, C // h).transpose(1, 2)
        k = self.k(k).reshape(B, k.shape[1], h, C // h).transpose(1, 2)
        v = self.v(v).reshape(B, v.shape[1], h, C // h).transpose(1, 2)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(B, Nq, C))


class MLP(nn.Module):
    def __init__(self, dim: int, hidden: int, out_dim: int | None = None):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, out_dim or dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class EncoderBlock(nn.Module):
    """Pre-norm self-attention block, MLP ratio 4."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, dim * 4)

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h)
        x = x + self.mlp(self.norm2(x))
        return x


class ImageEncoder3D(nn.Module):
    """Non-overlapping cubic patch embedding + learned absolute 3D positional
    encoding, followed by standard self-attention blocks."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Conv3d(1, cfg.embed_dim, kernel_size=cfg.patch_size,
                                     stride=cfg.patch_size)
        n_tokens = int(np.prod(cfg.grid_shape))
        self.pos_embed = nn.Parameter(torch.zeros(1, n_tokens, cfg.embed_dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(EncoderBlock(cfg.embed_dim, cfg.num_heads)
                                    for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(cfg.embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, 1, D, H, W) -> (B, N, C)
        if tuple(x.shape[-3:]) != tuple(self.cfg.input_size):
            raise ValueError(f"expected input {self.cfg.input_size}, got {tuple(x.shape[-3:])}")
        t = self.patch_embed(x)  # (B, C, Dp, Hp, Wp)
        t = t.flatten(2).transpose(1, 2)
        t = t + self.pos_embed
        for blk in self.blocks:
            t = blk(t)
        return self.norm(t)


class FourierPositionEncoding(nn.Module):
    """Random Fourier feature encoding of normalized 3D coordinates."""

    def __init__(self, dim: int, scale: float = 1.0):
        super().__init__()
        self.register_buffer("gauss", torch.randn(3, dim // 2) * scale)

    def forward(self, coords: torch.Tensor) -> torch.Tensor:
        # coords in [0,1], shape (..., 3)
        proj = (2 * coords - 1) @ self.gauss * (2 * math.pi)
        return torch.cat([torch.sin(proj), torch.cos(proj)], dim=-1)


class PromptEncoder3D(nn.Module):
    """Encodes point prompts (sparse) and the previous mask (dense).

    Points: Fourier positional embedding of the voxel coordinate plus a
    learned polarity embedding. Previous mask: strided 3D convolutions with
    layer norm and GELU down to the token grid; a learned no-mask embedding
    stands in when no previous mask exists.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.pe = FourierPositionEncoding(cfg.embed_dim)
        self.polarity_embed = nn.Embedding(2, cfg.embed_dim)
        self.no_mask_embed = nn.Parameter(torch.zeros(1, cfg.embed_dim))
        nn.init.normal_(self.no_mask_embed, std=0.02)

        n_down = int(round(math.log2(cfg.patch_size)))
        chans = [1] + [max(cfg.embed_dim // 4, 8)] * (n_down - 1) + [cfg.embed_dim]
        layers = []
        for i in range(n_down):
            layers.append(nn.Conv3d(chans[i], chans[i + 1], kernel_size=2, stride=2))
            layers.append(ChannelLayerNorm(chans[i + 1]))
            layers.append(nn.GELU())
        self.mask_down = nn.Sequential(*layers)

    def embed_points(self, coords: torch.Tensor, polarities: torch.Tensor) -> torch.Tensor:
        # coords: (B, K, 3) voxel indices; polarities: (B, K) in {0,1}
        size = torch.tensor(self.cfg.input_size, dtype=coords.dtype, device=coords.device)
        normed = (coords + 0.5) / size
        if (normed < 0).any() or (normed > 1).any():
            raise ValueError("prompt point outside volume bounds")
        return self.pe(normed) + self.polarity_embed(polarities)

    def embed_mask(self, prev_mask: torch.Tensor | None, batch: int = 1) -> torch.Tensor:
        grid = self.cfg.grid_shape
        if prev_mask is None:
            e = self.no_mask_embed.reshape(1, -1, 1, 1, 1)
            return e.expand(batch, -1, *grid)
        return self.mask_down(prev_mask)

    def forward(self, coords, polarities, prev_mask=None):
        sparse = self.embed_points(coords, polarities)
        dense = self.embed_mask(prev_mask, batch=coords.shape[0])
        return sparse, dense


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel axis of (B, C, D, H, W) feature maps."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)

    def forward(self, x):
        return self.norm(x.movedim(1, -1)).movedim(-1, 1)


class TwoWayBlock(nn.Module):
    """Bidirectional attention between prompt tokens and image tokens."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.self_attn = Attention(dim, num_heads)
        self.norm1 = nn.LayerNorm(dim)
        self.cross_t2i = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, dim * 4)
        self.norm3 = nn.LayerNorm(dim)
        self.cross_i2t = Attention(dim, num_heads)
        self.norm4 = nn.LayerNorm(dim)

    def forward(self, tokens, img, token_pe, img_pe):
        q = tokens + token_pe
        tokens = self.norm1(tokens + self.self_attn(q, q, tokens))
        tokens = self.norm2(tokens + self.cross_t2i(tokens + token_pe, img + img_pe, img))
        tokens = self.norm3(tokens + self.mlp(tokens))
        img = self.norm4(img + self.cross_i2t(img + img_pe, tokens + token_pe, tokens))
        return tokens, img


class MaskDecoder3D(nn.Module):
    """Fuses image and prompt embeddings into a full-resolution probability map.

    The dense prompt embedding is added to the image tokens; a learned mask
    token attends with the sparse prompt tokens through two two-way blocks;
    transposed convolutions upscale the image features and the mask token
    (via an MLP head) selects the output channel by inner product.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        dim = cfg.embed_dim
        self.mask_token = nn.Parameter(torch.zeros(1, 1, dim))
        nn.init.normal_(self.mask_token, std=0.02)
        self.blocks = nn.ModuleList(TwoWayBlock(dim, cfg.num_heads) for _ in range(2))
        self.final_t2i = Attention(dim, cfg.num_heads)
        self.final_norm = nn.LayerNorm(dim)

        up_dim = max(dim // 4, 8)
        self.upscale = nn.Sequential(
            nn.ConvTranspose3d(dim, dim // 2, kernel_size=2, stride=2),
            ChannelLayerNorm(dim // 2),
            nn.GELU(),
            nn.ConvTranspose3d(dim // 2, up_dim, kernel_size=2, stride=2),
            nn.GELU(),
        )
        self.hyper_mlp = MLP(dim, dim, up_dim)

    def forward(self, img_tokens: torch.Tensor, sparse: torch.Tensor,
                dense: torch.Tensor, img_pe: torch.Tensor) -> torch.Tensor:
        # img_tokens: (B, N, C); sparse: (B, K, C); dense: (B, C, *grid)
        B = img_tokens.shape[0]
        grid = self.cfg.grid_shape
        img = img_tokens + dense.flatten(2).transpose(1, 2)
        tokens = torch.cat([self.mask_token.expand(B, -1, -1), sparse], dim=1)
        token_pe = torch.zeros_like(tokens)
        token_pe[:, 1:] = sparse  # prompt embeddings double as their own PE
        pe = img_pe.expand(B, -1, -1)
        for blk in self.blocks:
            tokens, img = blk(tokens, img, token_pe, pe)
        tokens = self.final_norm(tokens + self.final_t2i(tokens + token_pe, img + pe, img))
        mask_tok = tokens[:, 0]

        feat = img.transpose(1, 2).reshape(B, -1, *grid)
        feat = self.upscale(feat)  # (B, up_dim, 4*grid)
        w = self.hyper_mlp(mask_tok)  # (B, up_dim)
        logits = torch.einsum("bc,bcdhw->bdhw", w, feat).unsqueeze(1)
        logits = F.interpolate(logits, size=self.cfg.input_size, mode="trilinear",
                               align_corners=False)
        return logits.squeeze(1)


class SegModel(nn.Module):
    """The complete promptable segmentation model.

    ``stats`` counts encoder invocations and verifies that every prompting
    loop starts from the all-zero mask.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.image_encoder = ImageEncoder3D(cfg)
        self.prompt_encoder = PromptEncoder3D(cfg)
        self.mask_decoder = MaskDecoder3D(cfg)
        pe_grid = self._grid_pe()
        self.register_buffer("img_pe", pe_grid)
        self.stats = {"encode_calls": 0, "zero_initial_masks": 0, "loops": 0}

    def _grid_pe(self) -> torch.Tensor:
        grid = self.cfg.grid_shape
        axes = [torch.linspace(0.5 / g, 1 - 0.5 / g, g) for g in grid]
        coords = torch.stack(torch.meshgrid(*axes, indexing="ij"), dim=-1).reshape(-1, 3)
        with torch.no_grad():
            return self.prompt_encoder.pe(coords).unsqueeze(0)

    def encode_image(self, x: torch.Tensor) -> torch.Tensor:
        self.stats["encode_calls"] += 1
        return self.image_encoder(x)

    def decode(self, f_img: torch.Tensor, points: list[PromptPoint],
               prev_mask: torch.Tensor | None) -> torch.Tensor:
        """Decode one probability volume from cached image tokens, the
        cumulative point set, and the previous mask (None = no-mask state)."""
        device = f_img.device
        dtype = f_img.dtype
        coords = torch.tensor([p.coord for p in points], dtype=dtype, device=device).unsqueeze(0)
        pols = torch.tensor([[p.polarity for p in points]], dtype=torch.long, device=device)
        sparse, dense = self.prompt_encoder(coords, pols, prev_mask)
        logits = self.mask_decoder(f_img, sparse, dense, self.img_pe.to(dtype))
        return torch.sigmoid(logits)

    def iterative_forward(self, x: torch.Tensor, point_fn, n_pt: int) -> list[torch.Tensor]:
        """Run the prompting loop with gradients.

        ``point_fn(i, prev_prob)`` returns the i-th PromptPoint given the
        previous prediction (numpy, detached); the point set is cumulative.
        The image is encoded exactly once; iteration 0 consumes the all-zero
        mask via the no-mask dense embedding path after an explicit zero
        initialization.
        """
        if n_pt < 1:
            raise ValueError("n_pt must be >= 1")
        self.stats["loops"] += 1
        f_img = self.encode_image(x)
        prev = torch.zeros(1, 1, *self.cfg.input_size, dtype=x.dtype, device=x.device)
        assert float(prev.abs().max()) == 0.0
        self.stats["zero_initial_masks"] += 1
        points: list[PromptPoint] = []
        preds: list[torch.Tensor] = []
        for i in range(n_pt):
            prev_np = prev.detach().squeeze().cpu().numpy()
            points.append(point_fn(i, prev_np))
            mask_in = None if i == 0 else prev
            prob = self.decode(f_img, points, mask_in)
            preds.append(prob)
            prev = prob.detach().unsqueeze(1)
        return preds

    def predict_iterative(self, x_np: np.ndarray, prompts: list[PromptPoint] | None,
                          n_pt: int, gt=None, policy=None) -> PredictionStack:
        """Inference-mode prompting loop.

        With ``gt`` given, prompts beyond any provided ones are generated from
        error regions; otherwise ``prompts`` must supply all n_pt points.
        """
        from . import prompting  # local import to avoid a cycle

        if n_pt < 1:
            raise ValueError("n_pt must be >= 1")
        provided = list(prompts or [])
        if gt is None and len(provided) < n_pt:
            raise ValueError(f"need {n_pt} external prompts in interactive mode, got {len(provided)}")
        policy = policy or prompting.PromptPolicy()

        def point_fn(i, prev_prob):
            if i < len(provided):
                return provided[i]
            pred = (prev_prob > 0.5).astype(np.uint8)
            if i == 0:
                return prompting.initial_prompt(gt, policy)
            return prompting.next_prompt(gt, pred, policy)

        was_training = self.training
        self.eval()
        x = torch.from_numpy(np.array(x_np, dtype=np.float32)).reshape(1, 1, *x_np.shape)
        with torch.no_grad():
            preds = self.iterative_forward(x, point_fn, n_pt)
        if was_training:
            self.train()
        collected = [p.squeeze(0).cpu().numpy() for p in preds]
        return PredictionStack(predictions=collected, prompts=[])


def save_checkpoint(model: SegModel, path) -> None:
    torch.save({
        "schema": CKPT_SCHEMA,
        "config": asdict(model.cfg),
        "state_dict": model.state_dict(),
    }, path)


def load_checkpoint(path) -> SegModel:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("schema") != CKPT_SCHEMA:
        raise ValueError(f"unknown checkpoint schema {blob.get('schema')!r}")
    cfg_d = blob["config"]
    cfg_d["input_size"] = tuple(cfg_d["input_size"])
    model = SegModel(NetConfig(**cfg_d))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model


def config_to_json(cfg: NetConfig) -> str:
    return json.dumps(asdict(cfg))
