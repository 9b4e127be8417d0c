"""Acceptance suite.

One test per release criterion; each prints a single ``[PASS]``/``[FAIL]``
line (visible with ``pytest -v -s`` or in the captured-output section of a
failure). Training-based criteria are marked ``slow``:

    pytest tests/test_acceptance.py -m "not slow"   # oracle/invariant checks
    pytest tests/test_acceptance.py -m slow          # training runs (minutes-hours)
"""

import csv
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from petseg import prompting
from petseg.cpcl import (CpclConfig, consistency_loss, entropy_uncertainty,
                         rectify_labels, ramp_up_lambda, train, load_samples)
from petseg.datagen import build_benchmark
from petseg.evaluation import (ablation_suite, evaluate_promptable,
                               prompt_budget_report)
from petseg.metrics import dsc
from petseg.net import NetConfig, PromptPoint, SegModel, NEGATIVE, load_checkpoint
from petseg.phantom import CorruptionSpec
from petseg.volume import DatasetManifest


def _check(name: str, ok: bool, detail: str = ""):
    status = "PASS" if ok else "FAIL"
    print(f"[{status}] {name}" + (f" — {detail}" if detail else ""), flush=True)
    assert ok, f"{name}: {detail}"


# ---------------------------------------------------------------------------
# Shared data fixtures

TOY_NET = NetConfig()  # 64^3 input, patch 8, embed 96, depth 4
ABLATION_STEPS = 2000
ABLATION_MILESTONES = (1200, 1800)


@pytest.fixture(scope="session")
def bench_dir(tmp_path_factory):
    """Default benchmark: 40 HQ / 160 LQ / 60 test phantoms, flip rate 0.3."""
    out = tmp_path_factory.mktemp("bench")
    build_benchmark(out, seed=0)
    return out


@pytest.fixture(scope="session")
def ablation_results(bench_dir, tmp_path_factory):
    """Train finetune/consistency/cpcl x 3 seeds on the default benchmark."""
    out = tmp_path_factory.mktemp("ablation")
    manifest = DatasetManifest.load(bench_dir / "manifest.json")
    cfg = CpclConfig(t_max=ABLATION_STEPS, milestones=ABLATION_MILESTONES)
    t0 = time.time()
    report, summary = ablation_suite(manifest, TOY_NET, cfg, seeds=[0, 1, 2],
                                     out_dir=out, root=bench_dir, n_points=1)
    report.save(out)
    return {"summary": summary, "out": out, "elapsed": time.time() - t0}


# ---------------------------------------------------------------------------
# Exact-math oracles and invariants


def test_rectification_matches_brute_force_oracle():
    """Label rectification equals a scalar triple-loop on 200 random cases."""
    rng = np.random.default_rng(0)
    violations = 0
    for _ in range(200):
        y = (rng.random((8, 8, 8)) > rng.uniform(0.2, 0.8)).astype(np.uint8)
        u = rng.random((8, 8, 8)) * math.log(2)
        H = rng.uniform(0.0, math.log(2))
        expect = y.astype(np.int64).copy()
        for i in range(8):
            for j in range(8):
                for k in range(8):
                    if u[i, j, k] > H:
                        yi = int(y[i, j, k])
                        expect[i, j, k] = yi + (-1) ** yi
        if not np.array_equal(rectify_labels(y, u, H), expect.astype(np.uint8)):
            violations += 1
    _check("rectification == brute-force oracle (200 random 8^3 triples, exact)",
           violations == 0, f"{violations} mismatching cases")


def test_entropy_bounds_and_reference_values():
    rng = np.random.default_rng(1)
    p = rng.random(10_000)
    u = entropy_uncertainty(p)
    in_bounds = bool(np.all(u >= 0) and np.all(u <= math.log(2) + 1e-12))
    half = float(entropy_uncertainty(np.array(0.5)))
    nine = float(entropy_uncertainty(np.array(0.9)))
    direct = -(0.9 * math.log(0.9) + 0.1 * math.log(0.1))
    ok = (in_bounds
          and abs(half - math.log(2)) < 1e-6
          and abs(nine - direct) < 1e-6
          and abs(direct - 0.3251) < 1e-4)
    _check("entropy in [0, ln 2]; H(0.5)=ln 2, H(0.9)=0.3251",
           ok, f"H(0.5)={half:.8f} H(0.9)={nine:.8f}")


def test_consistency_loss_identities():
    rng = np.random.default_rng(2)
    single = consistency_loss([rng.random((6, 6, 6))])
    p = rng.random((6, 6, 6))
    identical = consistency_loss([p, p.copy(), p.copy()])
    hand = consistency_loss([np.full((4, 4, 4), 0.2), np.full((4, 4, 4), 0.6)])
    ok = (single == 0.0 and identical < 1e-12 and abs(hand - 0.08) < 1e-9)
    _check("consistency: n_pt=1 -> 0 exact; identical stack < 1e-12; "
           "hand case 0.08 within 1e-9",
           ok, f"single={single} identical={identical} hand={hand:.12f}")


def test_lambda_schedule_endpoints():
    end = ramp_up_lambda(1000, 1000, 0.1)
    start = ramp_up_lambda(0, 1000, 0.1)
    ok = end == 0.1 and abs(start - 0.1 * math.exp(-5)) < 1e-9
    _check("lambda(t_max)=0.1 exact; lambda(0)=0.1*e^-5 within 1e-9",
           ok, f"lambda(t_max)={end} lambda(0)={start:.12f}")


def test_total_loss_reconstruction_every_logged_step(tmp_path):
    """Every metrics.csv row satisfies total = l_hq + lambda*(l_cps + beta*l_lq)."""
    data = tmp_path / "data"
    build_benchmark(data, n_hq=2, n_lq=2, n_test=1, shape=(16, 16, 16),
                    blur_sigma=0.7, seed=7)
    manifest = DatasetManifest.load(data / "manifest.json")
    net = NetConfig(input_size=(16, 16, 16), patch_size=4, embed_dim=32,
                    depth=1, num_heads=2)
    cfg = CpclConfig(t_max=15, milestones=(10,), seed=0)
    result = train(manifest, net, cfg, tmp_path / "run", root=data)
    worst = 0.0
    with open(result.metrics_path) as fh:
        for row in csv.DictReader(fh):
            lhs = float(row["total"])
            rhs = (float(row["l_seg_hq"]) + float(row["lambda_t"])
                   * (float(row["l_cps"]) + cfg.beta * float(row["l_seg_lq"])))
            worst = max(worst, abs(lhs - rhs))
    _check("total = l_seg_hq + lambda*(l_cps + beta*l_seg_lq) at every logged step",
           worst < 1e-6, f"worst residual {worst:.3e} over 15 steps")


def test_gradients_match_finite_differences():
    t0 = time.time()
    torch.manual_seed(3)
    cfg = NetConfig(input_size=(16, 16, 16), patch_size=4, embed_dim=16,
                    depth=1, num_heads=2)
    model = SegModel(cfg).double()
    model.eval()
    x = torch.rand(1, 1, 16, 16, 16, dtype=torch.float64)
    points = [PromptPoint((8, 8, 8)), PromptPoint((4, 12, 6), NEGATIVE)]
    params = [model.image_encoder.blocks[0].attn.q.weight,
              model.prompt_encoder.polarity_embed.weight,
              model.mask_decoder.hyper_mlp.fc2.weight]

    def f():
        return model.decode(model.image_encoder(x), points, None).mean()

    worst = 0.0
    rng = np.random.default_rng(0)
    for param in params:
        model.zero_grad()
        f().backward()
        grad = param.grad.detach().clone()
        h = 1e-5
        for fi in rng.choice(param.numel(), size=3, replace=False):
            idx = np.unravel_index(fi, param.shape)
            with torch.no_grad():
                orig = param[idx].item()
                param[idx] = orig + h
                up = f().item()
                param[idx] = orig - h
                down = f().item()
                param[idx] = orig
            numeric = (up - down) / (2 * h)
            analytic = grad[idx].item()
            worst = max(worst, abs(numeric - analytic)
                        / max(abs(numeric), abs(analytic), 1e-8))
    elapsed = time.time() - t0
    _check("analytic gradients vs central differences, rel err < 1e-2, < 2 min",
           worst < 1e-2 and elapsed < 120,
           f"worst rel err {worst:.3e}, {elapsed:.1f}s")


def test_zero_initial_mask_and_single_encode_per_loop():
    torch.manual_seed(4)
    cfg = NetConfig(input_size=(16, 16, 16), patch_size=4, embed_dim=32,
                    depth=1, num_heads=2)
    model = SegModel(cfg)
    model.eval()
    rng = np.random.default_rng(5)
    gt = np.zeros(cfg.input_size, dtype=np.uint8)
    gt[4:12, 4:12, 4:12] = 1
    loops = 10
    for k in range(loops):
        policy = prompting.PromptPolicy(perturb_radius=1, seed=k)
        model.predict_iterative(rng.random(cfg.input_size, dtype=np.float64)
                                .astype(np.float32), None, n_pt=3, gt=gt,
                                policy=policy)
    ok = (model.stats["loops"] == loops
          and model.stats["zero_initial_masks"] == loops
          and model.stats["encode_calls"] == loops)
    _check("every loop starts from an all-zero mask and encodes exactly once",
           ok, f"stats={model.stats} over {loops} loops")


def test_prompt_placement_property_1000_pairs():
    rng = np.random.default_rng(6)
    violations = 0
    for k in range(1000):
        shape = (12, 12, 12)
        gt = (rng.random(shape) > rng.uniform(0.3, 0.95)).astype(np.uint8)
        pred = (rng.random(shape) > rng.uniform(0.3, 0.95)).astype(np.uint8)
        if not gt.any():
            gt[tuple(rng.integers(0, 12, size=3))] = 1
        policy = prompting.PromptPolicy(perturb_radius=0, seed=k)
        pt = prompting.next_prompt(gt, pred, policy)
        fn = gt.astype(bool) & ~pred.astype(bool)
        fp = pred.astype(bool) & ~gt.astype(bool)
        c = tuple(pt.coord)
        if pt.polarity == prompting.POSITIVE:
            # positive points must lie in FN, or in foreground when both
            # error sets are empty (fallback to an initial prompt)
            if not (fn[c] or (not fn.any() and not fp.any() and gt[c])):
                violations += 1
        else:
            if not fp[c]:
                violations += 1
    _check("1,000 randomized next_prompt placements land in the declared error set",
           violations == 0, f"{violations} violations")


def test_dsc_matches_brute_force_oracle():
    rng = np.random.default_rng(7)
    bad = 0
    for _ in range(100):
        g = (rng.random((9, 9, 9)) > rng.uniform(0.2, 0.9)).astype(np.uint8)
        s = (rng.random((9, 9, 9)) > rng.uniform(0.2, 0.9)).astype(np.uint8)
        inter = sum(1 for i in range(9) for j in range(9) for k in range(9)
                    if g[i, j, k] and s[i, j, k])
        tot = int(g.sum()) + int(s.sum())
        expect = 1.0 if tot == 0 else 2.0 * inter / tot
        if dsc(g, s) != expect or dsc(g, s) != dsc(s, g):
            bad += 1
    identity = dsc(np.ones((3, 3, 3), np.uint8), np.ones((3, 3, 3), np.uint8))
    both_empty = dsc(np.zeros((3, 3, 3), np.uint8), np.zeros((3, 3, 3), np.uint8))
    _check("DSC == brute-force set counts on 100 pairs; symmetric; identity = 1",
           bad == 0 and identity == 1.0 and both_empty == 1.0,
           f"{bad} mismatches")


def test_prompt_budget_accounting():
    rng = np.random.default_rng(8)
    labels = []
    expected_n = []
    for _ in range(5):
        lab = np.zeros((32, 16, 16), dtype=np.uint8)
        lo = rng.integers(0, 10)
        hi = lo + rng.integers(3, 20)
        lab[lo:hi, 4:10, 4:10] = 1
        labels.append(lab)
        expected_n.append(hi - lo)
    rows = prompt_budget_report(labels, settings=(1, 3, 5))
    ok = True
    for row in rows:
        n = expected_n[row["volume"]]
        k = row["points_per_slice"]
        if row["occupied_slices"] != n or row["mode_2d_prompts"] != k * n \
                or row["mode_3d_prompts"] != k:
            ok = False
    _check("2D budgets {N,3N,5N} with N = occupied slices; 3D budgets {1,3,5} exact",
           ok, f"{len(rows)} rows checked")


# ---------------------------------------------------------------------------
# Training-based criteria


@pytest.mark.slow
def test_overfit_single_phantom(tmp_path):
    """Toy model reaches DSC >= 0.95 on one phantom within 300 steps."""
    t0 = time.time()
    data = tmp_path / "data"
    build_benchmark(data, n_hq=1, n_lq=0, n_test=0, seed=3)
    manifest = DatasetManifest.load(data / "manifest.json")
    # restrict to the largest target so "one phantom" means one organ loop
    entry = manifest.entries[0]
    entry.label_paths = {"liver": entry.label_paths["liver"]}
    cfg = CpclConfig(t_max=300, milestones=(200, 270), n_pt=2, seed=0)
    result = train(manifest, TOY_NET, cfg, tmp_path / "run", root=data)
    model = load_checkpoint(result.checkpoint_last)
    model.eval()
    sample = load_samples(manifest, "train_hq", data, TOY_NET.input_size)[0]
    policy = prompting.PromptPolicy(perturb_radius=2, seed=1)
    stack = model.predict_iterative(sample.image, None, n_pt=1, gt=sample.label,
                                    policy=policy)
    score = dsc(sample.label, (stack.final > 0.5).astype(np.uint8))
    elapsed = time.time() - t0
    _check("overfit one phantom: DSC >= 0.95 within 300 steps, < 10 min",
           score >= 0.95 and elapsed < 600,
           f"DSC={score:.4f} in {elapsed:.0f}s")


@pytest.mark.slow
def test_training_strategy_ablation(ablation_results):
    """finetune < consistency < cpcl mean DSC, cpcl - finetune >= 1 DSC point."""
    s = ablation_results["summary"]
    gap = (s["cpcl"] - s["finetune"]) * 100.0
    ok = (s["finetune"] < s["consistency"] < s["cpcl"]) and gap >= 1.0
    _check("ablation ordering finetune < consistency < cpcl with gap >= 1.0 DSC pt",
           ok,
           f"finetune={s['finetune']:.4f} consistency={s['consistency']:.4f} "
           f"cpcl={s['cpcl']:.4f} gap={gap:.2f}pt "
           f"({ablation_results['elapsed']/60:.0f} min)")


@pytest.mark.slow
def test_monotone_prompt_benefit(bench_dir, ablation_results):
    """Mean DSC non-decreasing across 1 -> 3 -> 5 points on >= 20 phantoms."""
    ckpt = ablation_results["out"] / "cpcl_s0" / "last.pt"
    model = load_checkpoint(ckpt)
    model.eval()
    manifest = DatasetManifest.load(bench_dir / "manifest.json")
    means = {}
    n_vols = 0
    for n_points in (1, 3, 5):
        report = evaluate_promptable(model, manifest, n_points, root=bench_dir,
                                     seed=11, method="cpcl")
        means[n_points] = report.mean_over_targets(f"{n_points}pt")
        n_vols = sum(c.n_volumes for c in report.cells)
    ok = n_vols >= 20 and means[1] <= means[3] + 1e-9 and means[3] <= means[5] + 1e-9
    _check("mean DSC non-decreasing across 1->3->5 points over >= 20 phantoms",
           ok, f"{means[1]:.4f} -> {means[3]:.4f} -> {means[5]:.4f} "
               f"({n_vols} volume-targets)")
