"""Acceptance criteria, each checked at its stated tolerance.

The learnability, ablation and threshold checks train on the default
synthetic set (2000 train / 500 test) and take roughly an hour on one CPU
core. Artifacts land in ``results/acceptance``.
"""

from __future__ import annotations

import itertools
import json
import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from conftest import record
from cscl import nn
from cscl.autodiff import ParamStore, Tensor
from cscl.cli import run_grad_check, tiny_problem
from cscl.config import GenConfig, RunConfig
from cscl.contextual import build_contextual_matrix, contextual_gt, select_reliable_suspicious, selection_masks
from cscl.data import generate_dataset, write_dataset
from cscl.heads import box_iou, consistency_loss
from cscl.metrics import auc, multilabel_suite
from cscl.semantic import build_semantic_vector, semantic_gt
from cscl.train import Checkpoint, evaluate, predict, sweep_threshold, train

SEEDS = (0, 1, 2)
RESULTS = Path(__file__).resolve().parent.parent / "results" / "acceptance"
TRAIN_BUDGET_S = 15 * 60


# ---------------------------------------------------------------- 1. gradients


def test_gradient_fidelity():
    cfg, pairs = tiny_problem(0)
    t0 = time.perf_counter()
    err = run_grad_check(cfg, pairs, n_coords=200, seed=0)
    dt = time.perf_counter() - t0
    ok = err < 1e-4 and dt < 60
    record("gradient fidelity", ok, f"max rel err {err:.2e} over 200 coords (< 1e-4), {dt:.1f}s (< 60s)")
    assert ok


# ---------------------------------------------------------------- 2. matrices


def test_consistency_matrix_properties():
    d = 16
    store = ParamStore(np.float64)
    rng = np.random.default_rng(0)
    phi = nn.MLP(store, "phi", [d, d, d], rng)
    worst_asym = worst_diag = worst_scale = 0.0
    in_range = sem_in_range = sel_same = True
    for trial in range(1000):
        r = np.random.default_rng([1, trial])
        n = int(r.integers(2, 17))
        x = r.standard_normal((n, d)) * r.uniform(0.01, 100)
        feats, m = build_contextual_matrix(phi, Tensor(x))
        M = m.data
        worst_asym = max(worst_asym, np.abs(M - M.T).max())
        worst_diag = max(worst_diag, np.abs(np.diag(M) - 1).max())
        in_range &= bool(M.min() >= 0 and M.max() <= 1)
        c = float(r.uniform(1e-3, 1e3))
        Mc = nn.consistency_scores(Tensor(feats.data * c), Tensor(feats.data * c)).data
        worst_scale = max(worst_scale, np.abs(Mc - M).max())
        mask = np.ones((1, n), bool)
        k = int(r.integers(1, n))
        for a, b in zip(selection_masks(M[None], mask, k), selection_masks(Mc[None], mask, k)):
            sel_same &= bool(np.array_equal(a, b))
        g = r.standard_normal((1, 1, d)) * r.uniform(0.01, 100)
        _, _, s = build_semantic_vector(phi, Tensor(x[None]), Tensor(g))
        sem_in_range &= bool(s.data.min() >= 0 and s.data.max() <= 1)
    ok = (worst_asym < 1e-12 and worst_diag < 1e-12 and in_range and sem_in_range
          and worst_scale < 1e-12 and sel_same)
    record("consistency-matrix properties", ok,
           f"asym {worst_asym:.1e}, |diag-1| {worst_diag:.1e}, range ok={in_range}, semantic range ok={sem_in_range}, "
           f"scale drift {worst_scale:.1e}, selections identical={sel_same} (1000 inputs)")
    assert ok


# ---------------------------------------------------------------- 3. oracles


def test_oracle_equivalence():
    gt_ok = all(
        contextual_gt(lab).tolist() == [[int(a == b) for b in lab] for a in lab]
        and semantic_gt(lab).tolist() == [1 - v for v in lab]
        for n in range(1, 9) for lab in itertools.product([0, 1], repeat=n)
    )
    r = np.random.default_rng(7)
    sel_ok = True
    for _ in range(1000):
        n = int(r.integers(2, 12))
        M = np.round(r.uniform(size=(n, n)), 2)
        a, k = int(r.integers(n)), int(r.integers(1, n))
        cand = [j for j in range(n) if j != a]
        got = select_reliable_suspicious(M, a, k)
        sel_ok &= got.reliable_idx.tolist() == sorted(cand, key=lambda j: (-M[a, j], j))[:k]
        sel_ok &= got.suspicious_idx.tolist() == sorted(cand, key=lambda j: (M[a, j], j))[:k]
    auc_err = 0.0
    for _ in range(500):
        n = int(r.integers(2, 50))
        s, y = np.round(r.uniform(size=n), 2), r.integers(0, 2, n)
        y[:2] = [0, 1]
        pos, neg = s[y == 1], s[y == 0]
        oracle = sum((p > q) + 0.5 * (p == q) for p in pos for q in neg) / (len(pos) * len(neg))
        auc_err = max(auc_err, abs(auc(s, y) - oracle))
    ml_err = 0.0
    for _ in range(500):
        n = int(r.integers(2, 30))
        s, y = np.round(r.uniform(size=(n, 4)), 2), (r.uniform(size=(n, 4)) < 0.4).astype(int)
        aps, f1s, tot = [], [], np.zeros(3)
        for c in range(4):
            order = sorted(range(n), key=lambda i: (-s[i, c], i))
            hits, precs = 0, []
            for rank, i in enumerate(order, 1):
                if y[i, c]:
                    hits += 1
                    precs.append(hits / rank)
            if precs:
                aps.append(sum(precs) / len(precs))
            pred = s[:, c] >= 0.5
            cnt = np.array([(pred & (y[:, c] == 1)).sum(), (pred & (y[:, c] == 0)).sum(), (~pred & (y[:, c] == 1)).sum()])
            tot += cnt
            f1s.append(_f1(*cnt))
        got = multilabel_suite(s, y)
        want = (np.mean(aps) if aps else 0.0, np.mean(f1s), _f1(*tot))
        ml_err = max(ml_err, max(abs(a - b) for a, b in zip(got, want)))
    iou = float(box_iou(np.array([0, 0, 2, 2.0]), np.array([1, 1, 3, 3.0])))
    ok = gt_ok and sel_ok and auc_err < 1e-9 and ml_err < 1e-9 and iou == 1 / 7
    record("oracle equivalence", ok,
           f"gt exhaustive ok={gt_ok}, selection 1000/1000 ok={sel_ok}, AUC err {auc_err:.1e}, "
           f"mAP/CF1/OF1 err {ml_err:.1e}, IoU={iou!r} (1/7)")
    assert ok


def _f1(tp, fp, fn):
    p = tp / (tp + fp) if tp + fp else 0.0
    rc = tp / (tp + fn) if tp + fn else 0.0
    return 2 * p * rc / (p + rc) if p + rc else 0.0


# ---------------------------------------------------------------- 4. loss


def test_loss_sanity():
    r = np.random.default_rng(3)
    gt = r.integers(0, 2, (7, 7))
    half = abs(float(consistency_loss(Tensor(np.full((7, 7), 0.5)), gt).data) - math.log(2))
    exact = float(consistency_loss(Tensor(gt.astype(float)), gt).data)
    ok = half < 1e-12 and exact < 1e-6
    record("loss sanity", ok, f"|L(0.5) - ln2| = {half:.1e} (< 1e-12), L(p=gt) = {exact:.1e} (< 1e-6)")
    assert ok


# ---------------------------------------------------------------- 5-7. training on the default set


@pytest.fixture(scope="session")
def default_data():
    gen = GenConfig()
    return generate_dataset(gen, "train"), generate_dataset(gen, "test")


class Runs:
    def __init__(self, data):
        self.data = data
        self.cache = {}

    def get(self, seed: int, baseline: bool):
        key = (seed, baseline)
        if key not in self.cache:
            cfg = replace(RunConfig(), seed=seed)
            if baseline:
                cfg = cfg.baseline()
            t0 = time.perf_counter()
            ckpt = train(cfg, self.data[0])
            seconds = time.perf_counter() - t0
            report = evaluate(ckpt, self.data[1])
            RESULTS.mkdir(parents=True, exist_ok=True)
            tag = f"{'baseline' if baseline else 'full'}_s{seed}"
            report.write(RESULTS / f"{tag}_report.json")
            (RESULTS / f"{tag}_log.json").write_text(json.dumps(ckpt.log, indent=1))
            self.cache[key] = (ckpt, report, seconds)
        return self.cache[key]


@pytest.fixture(scope="session")
def runs(default_data):
    return Runs(default_data)


def test_end_to_end_learnability(runs):
    results = [runs.get(s, False) for s in SEEDS]
    aucs = [r.auc for _, r, _ in results]
    f1s = [r.f1 for _, r, _ in results]
    ious = [r.iou_m for _, r, _ in results]
    secs = [t for _, _, t in results]
    epochs = results[0][0].config.epochs
    first5 = [e["total"] for e in results[0][0].log[:5]]
    decreasing = all(a > b for a, b in zip(first5, first5[1:]))
    ok = (np.mean(aucs) >= 0.90 and np.mean(f1s) >= 0.70 and np.mean(ious) >= 0.50
          and max(secs) < TRAIN_BUDGET_S and epochs <= 30)
    record("end-to-end learnability", ok,
           f"mean AUC {np.mean(aucs):.4f} (>= 0.90), token F1 {np.mean(f1s):.4f} (>= 0.70), "
           f"IoU_m {np.mean(ious):.4f} (>= 0.50) over seeds {SEEDS}; {epochs} epochs, "
           f"slowest run {max(secs) / 60:.1f} min (< 15); first-5-epoch loss strictly decreasing={decreasing}")
    assert decreasing
    assert ok


def test_directional_ablation(runs):
    rows, ok = [], True
    for s in SEEDS:
        full, base = runs.get(s, False)[1], runs.get(s, True)[1]
        win = full.iou_m > base.iou_m and full.f1 > base.f1
        ok &= win
        rows.append(f"s{s}: IoU_m {full.iou_m:.4f} vs {base.iou_m:.4f}, F1 {full.f1:.4f} vs {base.f1:.4f}")
    record("directional ablation (full > baseline)", ok, "; ".join(rows))
    assert ok


def test_threshold_stability(runs, default_data):
    ckpt = runs.get(0, False)[0]
    taus = np.round(np.arange(0.05, 0.951, 0.05), 10)
    rows, summary = sweep_threshold(ckpt, default_data[1], taus)
    recalls = [r[2] for r in rows]
    monotone = all(a >= b for a, b in zip(recalls[::-1], recalls[::-1][1:]))  # tau decreasing
    from cscl.analysis import write_csv

    RESULTS.mkdir(parents=True, exist_ok=True)
    write_csv(RESULTS / "threshold_sweep.csv", ["tau", "precision", "recall", "f1"], rows)
    (RESULTS / "threshold_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    ok = monotone and summary["f1_band_0.3_0.7"] is not None
    record("threshold stability report", ok,
           f"recall non-increasing as tau falls={monotone}; F1 band over [0.3, 0.7] = "
           f"{summary['f1_band_0.3_0.7']:.4f} (min {summary['f1_min_0.3_0.7']:.4f}, max {summary['f1_max_0.3_0.7']:.4f})")
    assert ok


# ---------------------------------------------------------------- 8. determinism


def test_determinism(tmp_path, default_data):
    gen = GenConfig()
    a = write_dataset(gen, tmp_path / "a")
    b = write_dataset(gen, tmp_path / "b")
    data_same = a == b
    small = replace(RunConfig(), epochs=1, precision="float64")
    train_pairs, test_pairs = default_data[0][:256], default_data[1][:128]
    blobs, reports = [], []
    for i in range(2):
        ckpt = train(small, train_pairs)
        ckpt.save(tmp_path / f"c{i}.json")
        loaded = Checkpoint.load(tmp_path / f"c{i}.json")
        blobs.append((tmp_path / f"c{i}.json").read_bytes())
        reports.append(evaluate(loaded, test_pairs).to_json())
        reports.append(evaluate(ckpt, test_pairs).to_json())
    ok = data_same and blobs[0] == blobs[1] and len(set(reports)) == 1
    record("determinism", ok,
           f"dataset files identical={data_same}, checkpoints byte-identical={blobs[0] == blobs[1]}, "
           f"reports identical (incl. save/load)={len(set(reports)) == 1}")
    assert ok
