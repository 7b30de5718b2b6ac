"""Six-row decoder ablation grid, one CSV per seed plus a seed-averaged table.

    python scripts/ablation_table.py --data runs/data --out runs/ablation --seeds 0
"""

from __future__ import annotations

import argparse
from dataclasses import replace
from pathlib import Path

import numpy as np

from cscl.analysis import write_csv
from cscl.cli import load_split
from cscl.config import RunConfig
from cscl.train import ABLATION_ROWS, REPORT_COLUMNS, ablate, ablation_label, write_ablation_csv


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--data", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--config")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base_cfg = RunConfig.load(args.config) if args.config else RunConfig()
    train_pairs, test_pairs = load_split(args.data, "train"), load_split(args.data, "test")
    per_seed = []
    for seed in args.seeds:
        results = ablate(replace(base_cfg, seed=seed), train_pairs, test_pairs, progress=True)
        write_ablation_csv(out / f"ablation_s{seed}.csv", results)
        per_seed.append(results)
    rows = []
    for i, flags in enumerate(ABLATION_ROWS):
        means = [float(np.mean([getattr(res[i][1], c) for res in per_seed])) for c in REPORT_COLUMNS]
        rows.append([int(f) for f in flags] + [ablation_label(flags)] + means)
    write_csv(out / "ablation_mean.csv", ["ci", "ct", "si", "st", "variant"] + REPORT_COLUMNS, rows)
    print((out / "ablation_mean.csv").read_text())


if __name__ == "__main__":
    main()
