"""Threshold sweep plus consistency-matrix and PCA exports for one checkpoint.

    python scripts/sweep_and_export.py --ckpt runs/seeds/full_s0.json --data runs/data --out runs/analysis
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

import numpy as np

from cscl.analysis import write_csv
from cscl.cli import load_split
from cscl.train import Checkpoint, export_analysis, sweep_threshold


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--ckpt", required=True)
    ap.add_argument("--data", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--n-samples", type=int, default=200)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = Checkpoint.load(args.ckpt)
    pairs = load_split(args.data, "test")
    taus = np.round(np.arange(0.05, 0.951, 0.05), 10)
    rows, summary = sweep_threshold(ckpt, pairs, taus)
    write_csv(out / "threshold_sweep.csv", ["tau", "precision", "recall", "f1"], rows)
    (out / "threshold_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for tau, p, r, f in rows:
        print(f"tau {tau:.2f}  P {p:.4f}  R {r:.4f}  F1 {f:.4f}")
    print(json.dumps(summary))
    written = export_analysis(ckpt, pairs[: args.n_samples], out / "export")
    print(f"{len(written)} analysis files in {out / 'export'}")


if __name__ == "__main__":
    main()
