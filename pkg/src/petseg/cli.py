"""Command-line entry points: generate, train, eval, ablate, serve, export-slice."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np


def _error(msg: str, code: int = 1) -> int:
    print(json.dumps({"error": msg}), file=sys.stderr)
    return code


def _net_config(args):
    from .net import NetConfig

    return NetConfig(input_size=tuple(args.input_size), patch_size=args.patch_size,
                     embed_dim=args.embed_dim, depth=args.depth,
                     num_heads=args.num_heads, decoder_dim=args.embed_dim)


def _add_net_args(p):
    p.add_argument("--input-size", type=int, nargs=3, default=[64, 64, 64])
    p.add_argument("--patch-size", type=int, default=8)
    p.add_argument("--embed-dim", type=int, default=96)
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--num-heads", type=int, default=4)


def cmd_generate(args) -> int:
    from .datagen import build_benchmark
    from .phantom import CorruptionSpec

    corruption = CorruptionSpec(dilate_erode_range=(args.corrupt_radius_min, args.corrupt_radius_max),
                                boundary_flip_rate=args.corrupt, drop_rate=args.drop_rate,
                                dilate_prob=args.dilate_prob)
    n_test = args.test if args.test is not None else max(args.count // 4, 1)
    manifest = build_benchmark(args.out, n_hq=args.count, n_lq=args.lq, n_test=n_test,
                               shape=tuple(args.shape), noise_scale=args.noise,
                               corruption=corruption, seed=args.seed)
    print(f"wrote {len(manifest.entries)} volumes + manifest.json to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .cpcl import CpclConfig, train
    from .net import NetConfig
    from .volume import DatasetManifest

    if args.config:
        doc = json.loads(Path(args.config).read_text())
        net_doc = doc.get("net", {})
        net_doc["input_size"] = tuple(net_doc.get("input_size", (64, 64, 64)))
        cpcl_doc = doc.get("cpcl", {})
        cpcl_doc["milestones"] = tuple(cpcl_doc.get("milestones", ()))
        net_cfg = NetConfig(**net_doc)
        cfg = CpclConfig(**cpcl_doc)
        manifest_path = Path(doc["manifest"])
    else:
        net_cfg = _net_config(args)
        from .cpcl import CpclConfig as _C

        cfg = _C(t_max=args.steps, n_pt=args.n_pt, strategy=args.strategy, seed=args.seed)
        manifest_path = Path(args.manifest)

    manifest = DatasetManifest.load(manifest_path)
    if not manifest.split("train_hq"):
        return _error("train_hq is empty")
    result = train(manifest, net_cfg, cfg, args.out, root=manifest_path.parent)
    print(f"checkpoint: {result.checkpoint_last}")
    print(f"metrics: {result.metrics_path}")
    return 0


def cmd_eval(args) -> int:
    from .evaluation import evaluate_promptable
    from .net import load_checkpoint
    from .volume import DatasetManifest

    model = load_checkpoint(args.ckpt)
    manifest_path = Path(args.manifest)
    manifest = DatasetManifest.load(manifest_path)
    report = evaluate_promptable(model, manifest, args.points, root=manifest_path.parent,
                                 seed=args.seed)
    report.save(args.out)
    for c in report.cells:
        print(f"{c.target:12s} {c.prompt_setting:4s} DSC {c.mean_dsc:.4f} +/- {c.std_dsc:.4f}"
              f" (n={c.n_volumes})")
    return 0


def cmd_ablate(args) -> int:
    from .cpcl import CpclConfig
    from .evaluation import ablation_suite
    from .volume import DatasetManifest

    manifest_path = Path(args.manifest)
    manifest = DatasetManifest.load(manifest_path)
    net_cfg = _net_config(args)
    cfg = CpclConfig(t_max=args.steps, n_pt=args.n_pt)
    report, summary = ablation_suite(manifest, net_cfg, cfg, seeds=args.seeds,
                                     out_dir=args.out, root=manifest_path.parent,
                                     n_points=args.points)
    report.save(args.out)
    for strategy, score in summary.items():
        print(f"{strategy:12s} mean DSC {score:.4f}")
    return 0


def cmd_serve(args) -> int:
    from .service import serve

    ckpt = args.ckpt or os.environ.get("MODEL_CKPT")
    if not ckpt:
        return _error("no checkpoint: pass --ckpt or set MODEL_CKPT")
    data_dir = args.data or os.environ.get("DATA_DIR")
    port = args.port or int(os.environ.get("PORT", "8000"))
    serve(ckpt, data_dir=data_dir, port=port, static_dir=args.static)
    return 0


def cmd_export_slice(args) -> int:
    from .volume import load_volume, normalize_intensity

    vol = normalize_intensity(load_volume(args.volume))
    if not (0 <= args.index < vol.shape[args.axis]):
        return _error(f"index {args.index} out of range for axis {args.axis}")
    sl = np.take(vol.data, args.index, axis=args.axis)
    out = Path(args.out)
    np.save(out, (sl * 255).astype(np.uint8))
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="petseg")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("generate", help="generate a phantom benchmark dataset")
    g.add_argument("--count", type=int, default=40, help="HQ training volumes")
    g.add_argument("--lq", type=int, default=160, help="LQ training volumes")
    g.add_argument("--test", type=int, default=None, help="test volumes (default count/4)")
    g.add_argument("--out", required=True)
    g.add_argument("--shape", type=int, nargs=3, default=[64, 64, 64])
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--corrupt", type=float, default=0.3, help="boundary flip rate")
    g.add_argument("--corrupt-radius-min", type=int, default=1)
    g.add_argument("--corrupt-radius-max", type=int, default=2)
    g.add_argument("--dilate-prob", type=float, default=1.0,
                   help="probability the morphological corruption dilates (vs erodes)")
    g.add_argument("--drop-rate", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="train-config.json (overrides other flags)")
    t.add_argument("--manifest")
    t.add_argument("--out", default="runs/train")
    t.add_argument("--steps", type=int, default=1000)
    t.add_argument("--n-pt", type=int, default=3)
    t.add_argument("--strategy", choices=["cpcl", "consistency", "finetune"], default="cpcl")
    t.add_argument("--seed", type=int, default=0)
    _add_net_args(t)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--points", type=int, default=1, choices=[1, 3, 5])
    e.add_argument("--out", default="runs/eval")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--split", default="test")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="run the training-strategy ablation")
    a.add_argument("--manifest", required=True)
    a.add_argument("--out", default="runs/ablate")
    a.add_argument("--steps", type=int, default=600)
    a.add_argument("--n-pt", type=int, default=3)
    a.add_argument("--points", type=int, default=1)
    a.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    _add_net_args(a)
    a.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("serve", help="start the interactive segmentation service")
    s.add_argument("--ckpt")
    s.add_argument("--data")
    s.add_argument("--port", type=int, default=0)
    s.add_argument("--static", help="directory of UI assets to serve at /")
    s.set_defaults(fn=cmd_serve)

    x = sub.add_parser("export-slice", help="dump one windowed slice as .npy")
    x.add_argument("--volume", required=True)
    x.add_argument("--axis", type=int, default=0, choices=[0, 1, 2])
    x.add_argument("--index", type=int, required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(fn=cmd_export_slice)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError) as e:
        return _error(str(e))


if __name__ == "__main__":
    sys.exit(main())
