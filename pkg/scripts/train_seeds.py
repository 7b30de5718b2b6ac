"""Train the full model and the baseline over several seeds on one dataset.

    python scripts/train_seeds.py --data runs/data --out runs/seeds --seeds 0 1 2
"""

from __future__ import annotations

import argparse
import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from cscl.cli import load_split
from cscl.config import RunConfig
from cscl.train import REPORT_COLUMNS, evaluate, train


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--data", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--config")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--variants", nargs="+", default=["full", "baseline"], choices=["full", "baseline"])
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base_cfg = RunConfig.load(args.config) if args.config else RunConfig()
    train_pairs, test_pairs = load_split(args.data, "train"), load_split(args.data, "test")
    summary: dict[str, list[dict]] = {}
    for variant in args.variants:
        for seed in args.seeds:
            cfg = replace(base_cfg, seed=seed)
            if variant == "baseline":
                cfg = cfg.baseline()
            t0 = time.perf_counter()
            ckpt = train(cfg, train_pairs, progress=True)
            minutes = (time.perf_counter() - t0) / 60
            ckpt.save(out / f"{variant}_s{seed}.json")
            report = evaluate(ckpt, test_pairs)
            report.write(out / f"{variant}_s{seed}_report.json")
            row = {"seed": seed, "minutes": round(minutes, 2), **{k: getattr(report, k) for k in REPORT_COLUMNS}}
            summary.setdefault(variant, []).append(row)
            print(variant, json.dumps(row), flush=True)
    for variant, rows in summary.items():
        means = {k: float(np.mean([r[k] for r in rows])) for k in REPORT_COLUMNS}
        print(f"{variant} mean:", json.dumps({k: round(v, 4) for k, v in means.items()}))
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")


if __name__ == "__main__":
    main()
