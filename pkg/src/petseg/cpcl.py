"""Noise-robust training engine for the promptable model.

Mixed-quality training: high-quality labels supervise directly; low-quality
labels pass through uncertainty-gated rectification, and predictions across
prompt iterations are pulled toward their mean (cross-prompting consistency).
The total objective is

    total = l_seg_hq + lambda_t * (l_cps + beta * l_seg_lq)

with lambda_t ramped up over training so noisy terms cannot dominate early.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import prompting
from .net import NetConfig, PromptPoint, SegModel, save_checkpoint
from .phantom import boundary_band
from .volume import (DatasetManifest, LabelVolume, Quality, load_label,
                     load_volume, normalize_intensity)

DICE_EPS = 1e-5
PROB_EPS = 1e-7


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class CpclConfig:
    n_pt: int = 3
    beta: float = 5.0
    omega_max: float = 0.1
    t_max: int = 1000  # total optimizer steps
    # Uncertainty threshold (nats). With the default label-shell eligibility
    # (rectify_band=1, rectify_fg_only=True) a threshold of 0.15 nats flips an
    # annotation-boundary foreground voxel unless the prompt consensus is
    # >= ~97.7% confident it really is foreground; the shell restriction keeps
    # iteration-count artifacts deep inside the structure from flipping.
    H: float = 0.15
    lr: float = 8e-4
    weight_decay: float = 0.1
    batch_size: int = 2
    epochs: int = 0  # informational; t_max drives the loop
    milestones: tuple[int, ...] = ()
    gamma: float = 0.1
    squared_ramp: bool = False
    grad_accum: int = 1
    strategy: str = "cpcl"  # cpcl | consistency | finetune
    # Rectification is restricted to voxels within this many morphological
    # steps of the annotation boundary (0 disables the restriction). Annotation
    # errors live at the boundary; far-field voxels keep their labels even when
    # predictions disagree there (e.g. at the boundaries of other structures).
    rectify_band: int = 1
    # Restrict rectification further to the annotation's own foreground shell.
    # Preliminary annotations systematically oversegment (see the default
    # benchmark corruption), so rectification should only be able to shrink the
    # mask; without this, the entropy gate flips as many just-outside background
    # voxels to foreground as it corrects, since prediction entropy is high on
    # both sides of the boundary while the errors sit only on one.
    rectify_fg_only: bool = True
    perturb_radius: int = 2
    val_every: int = 0  # 0 disables validation checkpointing
    seed: int = 0

    def __post_init__(self):
        if self.n_pt < 1:
            raise ValueError("n_pt must be >= 1")
        if self.beta < 0 or self.omega_max < 0:
            raise ValueError("beta and omega_max must be >= 0")
        if self.rectify_band < 0:
            raise ValueError("rectify_band must be >= 0")
        if not (0 <= self.H <= math.log(2) + 1e-12):
            raise ValueError("H must lie in [0, ln 2]")
        if self.strategy not in ("cpcl", "consistency", "finetune"):
            raise ValueError(f"unknown strategy {self.strategy!r}")


@dataclass
class LossReport:
    step: int
    lr: float
    lambda_t: float
    l_seg_hq: float
    l_cps: float
    l_seg_lq: float
    total: float
    mean_uncertainty: float
    rectified_fraction: float


# ---------------------------------------------------------------------------
# Loss and uncertainty primitives (torch in, torch out; numpy also accepted)


def _stack_list(stack):
    if hasattr(stack, "predictions"):
        return stack.predictions
    return list(stack)


def mean_prediction(stack):
    """Voxelwise mean over the per-iteration predictions."""
    preds = _stack_list(stack)
    if len(preds) == 0:
        raise ValueError("empty prediction stack")
    if torch.is_tensor(preds[0]):
        return torch.stack(preds).mean(dim=0)
    return np.mean(np.stack(preds), axis=0)


def consistency_loss(stack, detach_mean: bool = True):
    """Sum over iterations of the voxel-mean squared gap to the stack mean.

    The mean is treated as a constant target (stop-gradient) to stabilize the
    regularizer. Voxel-mean normalization keeps the loss scale independent of
    patch size.
    """
    preds = _stack_list(stack)
    if len(preds) == 0:
        raise ValueError("empty prediction stack")
    if torch.is_tensor(preds[0]):
        mean = torch.stack(preds).mean(dim=0)
        if detach_mean:
            mean = mean.detach()
        return sum(((mean - p) ** 2).mean() for p in preds)
    mean = np.mean(np.stack(preds), axis=0)
    return float(sum(((mean - p) ** 2).mean() for p in preds))


def entropy_uncertainty(mean_pred):
    """Binary predictive entropy in nats, elementwise; 0*log(0) == 0."""
    if torch.is_tensor(mean_pred):
        p = mean_pred
        return -(torch.special.xlogy(p, p) + torch.special.xlogy(1 - p, 1 - p))
    from scipy.special import xlogy

    p = np.asarray(mean_pred, dtype=np.float64)
    return -(xlogy(p, p) + xlogy(1 - p, 1 - p))


def rectify_labels(y, u, H: float, eligible=None):
    """Flip exactly the label voxels whose uncertainty exceeds H.

    Accepts a LabelVolume (returns quality RECTIFIED) or a plain array.
    ``eligible`` optionally limits which voxels may flip; voxels outside it
    keep their labels regardless of uncertainty. In volumes containing
    several structures, prediction entropy is also high at the boundaries of
    structures other than the annotated one, and flipping those background
    voxels manufactures false positives. Annotation errors are boundary-local,
    so restricting flips to the annotation's own boundary neighbourhood keeps
    rectification pointed at voxels that can actually be mislabelled.
    """
    if isinstance(y, LabelVolume):
        data = rectify_labels(y.data, u, H, eligible=eligible)
        return LabelVolume(data=data, target_name=y.target_name, quality=Quality.RECTIFIED)
    y = np.asarray(y)
    u = np.asarray(u)
    if y.shape != u.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {u.shape}")
    flip = u > H
    if eligible is not None:
        flip = flip & np.asarray(eligible, dtype=bool)
    out = y.astype(np.int64) + flip * ((-1) ** y.astype(np.int64))
    return out.astype(np.uint8)


def dice_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    inter = (pred * target).sum()
    denom = pred.sum() + target.sum()
    return 1 - (2 * inter + DICE_EPS) / (denom + DICE_EPS)


def bce_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    p = pred.clamp(PROB_EPS, 1 - PROB_EPS)
    return -(target * p.log() + (1 - target) * (1 - p).log()).mean()


def supervised_loss(stack, target) -> torch.Tensor:
    """Mean over prompt iterations of soft Dice + binary cross-entropy."""
    preds = _stack_list(stack)
    if len(preds) == 0:
        raise ValueError("empty prediction stack")
    if not torch.is_tensor(preds[0]):
        preds = [torch.from_numpy(np.asarray(p, dtype=np.float64)) for p in preds]
    if not torch.is_tensor(target):
        target = torch.from_numpy(np.asarray(target, dtype=np.float64))
    target = target.to(preds[0].dtype).reshape(preds[0].shape)
    total = sum(dice_loss(p, target) + bce_loss(p, target) for p in preds)
    return total / len(preds)


def ramp_up_lambda(t: int, t_max: int, omega_max: float, squared: bool = False) -> float:
    """Time-dependent ramp omega_max * exp(-5 * (1 - t/t_max)), optionally with
    the squared exponent variant."""
    if t_max <= 0:
        raise ValueError("t_max must be positive")
    frac = 1.0 - t / t_max
    exponent = -5.0 * (frac * frac if squared else frac)
    return omega_max * math.exp(exponent)


# ---------------------------------------------------------------------------
# Data access


@dataclass
class TrainSample:
    image: np.ndarray  # normalized, input-sized
    label: np.ndarray  # binary, same shape
    target_name: str
    quality: Quality
    volume_id: str


def load_samples(manifest: DatasetManifest, split: str, root: Path,
                 input_size: tuple[int, int, int]) -> list[TrainSample]:
    """Materialize (image, per-target label) pairs for a split, cropped to the
    model input size around each target's centroid when needed."""
    from .volume import extract_patch

    samples = []
    for e in manifest.split(split):
        vol = normalize_intensity(load_volume(root / e.volume_path, id=e.volume_id))
        for tname, lpath in e.label_paths.items():
            lab = load_label(root / lpath, target_name=tname, quality=e.quality)
            if not lab.data.any():
                continue
            if vol.shape == tuple(input_size):
                img, msk = vol.data.copy(), lab.data.copy()
            else:
                center = np.round(np.argwhere(lab.data).mean(axis=0)).astype(int)
                img = extract_patch(vol.data, center, input_size)
                msk = extract_patch(lab.data, center, input_size)
            samples.append(TrainSample(image=img.astype(np.float32), label=msk.astype(np.uint8),
                                       target_name=tname, quality=e.quality, volume_id=e.volume_id))
    return samples


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class TrainResult:
    checkpoint_last: Path
    checkpoint_best: Path | None
    metrics_path: Path
    reports: list[LossReport] = field(default_factory=list)


def _sample_loss(model: SegModel, sample: TrainSample, cfg: CpclConfig,
                 policy: prompting.PromptPolicy, rectified: bool):
    """Forward one sample through the prompting loop; returns (preds, stats)."""
    x = torch.from_numpy(sample.image).reshape(1, 1, *sample.image.shape)
    label = sample.label

    def point_fn(i, prev_prob):
        if i == 0:
            return prompting.initial_prompt(label, policy)
        return prompting.next_prompt(label, (prev_prob > 0.5).astype(np.uint8), policy)

    preds = model.iterative_forward(x, point_fn, cfg.n_pt)
    return preds


def train(manifest: DatasetManifest, net_cfg: NetConfig, cfg: CpclConfig,
          out_dir, root=None, log_fn=None) -> TrainResult:
    """Run the full mixed-quality training procedure.

    Each step draws one HQ sample and (when available) one LQ sample. Images
    are encoded once per prompting loop; prompts are generated from error
    regions against the sample's own label. LQ supervision uses the rectified
    label; the consistency term applies to LQ loops only.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    root = Path(root) if root is not None else Path(".")

    hq = load_samples(manifest, "train_hq", root, net_cfg.input_size)
    if not hq:
        raise ValueError("train_hq is empty")
    lq = load_samples(manifest, "train_lq", root, net_cfg.input_size)
    val = load_samples(manifest, "test", root, net_cfg.input_size) if cfg.val_every else []

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = SegModel(net_cfg)
    model.train()
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=list(cfg.milestones),
                                                 gamma=cfg.gamma)
    policy = prompting.PromptPolicy(perturb_radius=cfg.perturb_radius, seed=cfg.seed)

    metrics_path = out_dir / "metrics.csv"
    ckpt_last = out_dir / "last.pt"
    ckpt_best = out_dir / "best.pt"
    best_dsc = -1.0
    reports: list[LossReport] = []

    (out_dir / "train-config.json").write_text(json.dumps({
        "cpcl": {**asdict(cfg), "milestones": list(cfg.milestones)},
        "net": {**asdict(net_cfg), "input_size": list(net_cfg.input_size)},
        "seed": cfg.seed,
    }, indent=2))

    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "lr", "lambda_t", "l_seg_hq", "l_cps", "l_seg_lq",
                         "total", "mean_uncertainty", "rectified_fraction"])

        band_cache: dict[int, np.ndarray] = {}
        for step in range(1, cfg.t_max + 1):
            opt.zero_grad()
            lam = ramp_up_lambda(step, cfg.t_max, cfg.omega_max, cfg.squared_ramp)

            hq_sample = hq[rng.integers(len(hq))]
            preds_hq = _sample_loss(model, hq_sample, cfg, policy, rectified=False)
            l_hq = supervised_loss(preds_hq, hq_sample.label)

            l_cps = torch.zeros(())
            l_lq = torch.zeros(())
            mean_u = 0.0
            rect_frac = 0.0
            if lq:
                lq_sample = lq[rng.integers(len(lq))]
                preds_lq = _sample_loss(model, lq_sample, cfg, policy, rectified=True)
                if cfg.strategy == "finetune":
                    # mixed fine-tuning: LQ supervised at full weight on raw labels
                    l_hq = l_hq + supervised_loss(preds_lq, lq_sample.label)
                else:
                    mean_pred = mean_prediction(preds_lq).detach()
                    u = entropy_uncertainty(mean_pred).squeeze(0).cpu().numpy()
                    mean_u = float(u.mean())
                    if cfg.strategy == "cpcl":
                        band = None
                        if cfg.rectify_band > 0:
                            band = band_cache.get(id(lq_sample))
                            if band is None:
                                band = boundary_band(lq_sample.label, width=cfg.rectify_band)
                                if cfg.rectify_fg_only:
                                    band = band & lq_sample.label.astype(bool)
                                band_cache[id(lq_sample)] = band
                        target = rectify_labels(lq_sample.label, u, cfg.H, eligible=band)
                        rect_frac = float((target != lq_sample.label).mean())
                    else:  # consistency: raw labels, no rectification
                        target = lq_sample.label
                    l_lq = supervised_loss(preds_lq, target)
                    l_cps = consistency_loss(preds_lq)

            total = l_hq + lam * (l_cps + cfg.beta * l_lq)
            if not torch.isfinite(total):
                raise TrainingDiverged(
                    f"non-finite loss at step {step}: hq={float(l_hq.detach())} "
                    f"cps={float(l_cps.detach())} lq={float(l_lq.detach())} lambda={lam}")
            total.backward()
            opt.step()
            sched.step()

            v_hq, v_cps, v_lq = (float(l_hq.detach()), float(l_cps.detach()),
                                 float(l_lq.detach()))
            report = LossReport(
                step=step, lr=opt.param_groups[0]["lr"], lambda_t=lam,
                l_seg_hq=v_hq, l_cps=v_cps, l_seg_lq=v_lq,
                total=v_hq + lam * (v_cps + cfg.beta * v_lq),
                mean_uncertainty=mean_u, rectified_fraction=rect_frac,
            )
            reports.append(report)
            writer.writerow([report.step, report.lr, report.lambda_t, report.l_seg_hq,
                             report.l_cps, report.l_seg_lq, report.total,
                             report.mean_uncertainty, report.rectified_fraction])
            if log_fn:
                log_fn(report)

            if val and cfg.val_every and step % cfg.val_every == 0:
                d = _quick_val(model, val, cfg)
                if d > best_dsc:
                    best_dsc = d
                    save_checkpoint(model, ckpt_best)

    save_checkpoint(model, ckpt_last)
    if best_dsc < 0:
        save_checkpoint(model, ckpt_best)
    return TrainResult(checkpoint_last=ckpt_last,
                       checkpoint_best=ckpt_best if ckpt_best.exists() else None,
                       metrics_path=metrics_path, reports=reports)


def _quick_val(model: SegModel, samples, cfg: CpclConfig, limit: int = 8) -> float:
    from .metrics import dsc

    scores = []
    policy = prompting.PromptPolicy(perturb_radius=cfg.perturb_radius, seed=cfg.seed)
    for s in samples[:limit]:
        stack = model.predict_iterative(s.image, None, n_pt=1, gt=s.label, policy=policy)
        pred = (stack.final > 0.5).astype(np.uint8)
        scores.append(dsc(s.label, pred))
    return float(np.mean(scores)) if scores else -1.0
