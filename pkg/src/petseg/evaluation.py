"""Benchmark harness: prompt-setting sweeps, training-strategy ablation, and
2D-vs-3D prompt budget accounting."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import cpcl, prompting
from .metrics import dsc
from .net import NetConfig, SegModel, load_checkpoint
from .volume import DatasetManifest


@dataclass
class EvalCell:
    target: str
    prompt_setting: str
    method: str
    mean_dsc: float
    std_dsc: float
    n_volumes: int
    prompts_per_volume: float
    seconds_per_volume: float


@dataclass
class EvalReport:
    cells: list[EvalCell] = field(default_factory=list)
    seeds: list[int] = field(default_factory=list)

    def mean_over_targets(self, prompt_setting: str, method: str = "") -> float:
        vals = [c.mean_dsc for c in self.cells
                if c.prompt_setting == prompt_setting and (not method or c.method == method)]
        return float(np.mean(vals))

    def save(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        doc = {"seeds": self.seeds, "cells": [asdict(c) for c in self.cells]}
        (out_dir / "report.json").write_text(json.dumps(doc, indent=2))
        with open(out_dir / "report.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["target", "prompt_setting", "method", "mean_dsc", "std_dsc",
                        "n_volumes", "prompts_per_volume", "seconds_per_volume"])
            for c in self.cells:
                w.writerow([c.target, c.prompt_setting, c.method, c.mean_dsc, c.std_dsc,
                            c.n_volumes, c.prompts_per_volume, c.seconds_per_volume])


def evaluate_promptable(model: SegModel | None, manifest: DatasetManifest, n_points: int,
                        root=".", seed: int = 0, method: str = "model",
                        perturb_radius: int = 2, predict_fn=None,
                        input_size=None) -> EvalReport:
    """Per-volume, per-target DSC of the final-iteration mask under simulated
    error-region prompting with ``n_points`` cumulative points.

    ``predict_fn(image, gt, n_points, policy) -> prob volume`` can replace the
    model (used for harness self-tests with oracle stubs); pass ``input_size``
    in that case.
    """
    if input_size is None:
        input_size = model.cfg.input_size
    samples = cpcl.load_samples(manifest, "test", Path(root), input_size)
    by_target: dict[str, list[float]] = {}
    times: list[float] = []
    for k, s in enumerate(samples):
        policy = prompting.PromptPolicy(perturb_radius=perturb_radius, seed=seed * 100003 + k)
        t0 = time.perf_counter()
        if predict_fn is not None:
            prob = predict_fn(s.image, s.label, n_points, policy)
        else:
            stack = model.predict_iterative(s.image, None, n_pt=n_points, gt=s.label,
                                            policy=policy)
            prob = stack.final
        times.append(time.perf_counter() - t0)
        pred = (prob > 0.5).astype(np.uint8)
        by_target.setdefault(s.target_name, []).append(dsc(s.label, pred))

    report = EvalReport(seeds=[seed])
    for target, scores in sorted(by_target.items()):
        report.cells.append(EvalCell(
            target=target, prompt_setting=f"{n_points}pt", method=method,
            mean_dsc=float(np.mean(scores)), std_dsc=float(np.std(scores)),
            n_volumes=len(scores), prompts_per_volume=float(n_points),
            seconds_per_volume=float(np.mean(times)),
        ))
    return report


STRATEGIES = ("finetune", "consistency", "cpcl")


def ablation_suite(manifest: DatasetManifest, net_cfg: NetConfig, cfg: cpcl.CpclConfig,
                   seeds: list[int], out_dir, root=".", n_points: int = 1,
                   log_fn=None) -> tuple[EvalReport, dict]:
    """Train the three strategies per seed and evaluate each on the test split.

    Returns the consolidated report plus {strategy: mean DSC over seeds}.
    """
    out_dir = Path(out_dir)
    report = EvalReport(seeds=list(seeds))
    per_strategy: dict[str, list[float]] = {s: [] for s in STRATEGIES}
    for seed in seeds:
        for strategy in STRATEGIES:
            run_cfg = cpcl.CpclConfig(**{**asdict(cfg), "strategy": strategy, "seed": seed})
            run_dir = out_dir / f"{strategy}_s{seed}"
            result = cpcl.train(manifest, net_cfg, run_cfg, run_dir, root=root, log_fn=log_fn)
            model = load_checkpoint(result.checkpoint_last)
            sub = evaluate_promptable(model, manifest, n_points, root=root, seed=seed,
                                      method=strategy)
            overall = sub.mean_over_targets(f"{n_points}pt")
            per_strategy[strategy].append(overall)
            report.cells.extend(sub.cells)
    summary = {s: float(np.mean(v)) for s, v in per_strategy.items()}
    return report, summary


def prompt_budget_report(labels, settings=(1, 3, 5), wallclock_fn=None) -> list[dict]:
    """Tabulate 2D slice-by-slice vs 3D volumetric prompt budgets.

    For a target spanning N occupied axial slices, the 2D protocol needs
    k*N prompts at k points per slice; the 3D protocol needs k total.
    """
    rows = []
    for i, gt in enumerate(labels):
        n = prompting.occupied_slice_count(gt)
        for k in settings:
            rows.append({
                "volume": i, "occupied_slices": n,
                "mode_2d_prompts": k * n, "mode_3d_prompts": k,
                "points_per_slice": k,
                "seconds_3d": wallclock_fn(gt, k) if wallclock_fn else None,
            })
    return rows
