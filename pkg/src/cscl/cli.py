"""Command-line entry point: ``cscl <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import train as harness
from .autodiff import NumericError, grad_check
from .config import GenConfig, RunConfig, ValidationError
from .data import collate, generate_dataset, read_jsonl, write_dataset

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC = 0, 2, 3


def load_split(path: str | Path, split: str):
    """Read a JSONL file, or ``<split>.jsonl`` inside a dataset directory."""
    p = Path(path)
    if p.is_dir():
        p = p / f"{split}.jsonl"
    if not p.exists():
        raise ValidationError(f"dataset file {p} not found")
    pairs = read_jsonl(p)
    if not pairs:
        raise ValidationError(f"dataset file {p} is empty")
    return pairs


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    cfg.validate()
    return cfg


def cmd_gen_data(args) -> None:
    cfg = GenConfig.load(args.config) if args.config else GenConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    meta = write_dataset(cfg, args.out)
    print(json.dumps(meta["files"], indent=2, sort_keys=True))


def cmd_train(args) -> None:
    cfg = _run_config(args)
    pairs = load_split(args.data, "train")
    dump = Path(args.out).parent / "dumps"
    ckpt = harness.train(cfg, pairs, dump_dir=dump, progress=not args.quiet)
    ckpt.save(args.out)
    if args.log:
        header = list(ckpt.log[0].keys())
        harness.analysis.write_csv(args.log, header, [[row[k] for k in header] for row in ckpt.log])
    print(f"checkpoint {args.out} sha256 {ckpt.content_hash}")


def cmd_eval(args) -> None:
    ckpt = harness.Checkpoint.load(args.ckpt)
    pairs = load_split(args.data, "test")
    if harness.data_shape(pairs) != tuple(ckpt.shape):
        raise ValidationError("dataset shape does not match checkpoint")
    preds = harness.predict(ckpt.to_model(), pairs)
    report = preds.report(ckpt.config.tau)
    report.write(args.report)
    if args.predictions:
        Path(args.predictions).write_text(preds.jsonl(ckpt.config.tau))
    print(report.to_json(), end="")


def cmd_ablate(args) -> None:
    cfg = _run_config(args)
    train_pairs = load_split(args.data, "train")
    test_pairs = load_split(args.data, "test")
    results = harness.ablate(cfg, train_pairs, test_pairs, progress=not args.quiet)
    harness.write_ablation_csv(args.out, results)
    print(Path(args.out).read_text(), end="")


def cmd_sweep(args) -> None:
    ckpt = harness.Checkpoint.load(args.ckpt)
    pairs = load_split(args.data, "test")
    taus = np.round(np.arange(args.tau_min, args.tau_max + 1e-9, args.tau_step), 10)
    rows, summary = harness.sweep_threshold(ckpt, pairs, taus)
    harness.analysis.write_csv(args.out, ["tau", "precision", "recall", "f1"], rows)
    if args.summary:
        Path(args.summary).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))


def cmd_export(args) -> None:
    ckpt = harness.Checkpoint.load(args.ckpt)
    pairs = load_split(args.data, "test")[: args.n_samples]
    for p in harness.export_analysis(ckpt, pairs, args.out, args.n_matrices):
        print(p)


def tiny_problem(seed: int = 0):
    """The grad-check setting: 3x3 patches, 6 tokens, d=16, k=2, float64."""
    cfg = RunConfig.tiny()
    cfg.seed = seed
    gen = GenConfig(n_train=4, n_test=1, grid=3, text_len=6, min_text_len=4, d_raw=24,
                    genuine_fraction=0.25, seed=seed)
    pairs = generate_dataset(gen, "train")
    return cfg, pairs


def run_grad_check(cfg: RunConfig, pairs, n_coords: int = 200, seed: int = 0) -> float:
    from .model import CSCLModel

    model = CSCLModel(cfg, *harness.data_shape(pairs))
    batch = collate(pairs)
    return grad_check(lambda: model.loss(batch).total, model.params, n_coords=n_coords,
                      rng=np.random.default_rng(seed))


def cmd_grad_check(args) -> None:
    cfg, pairs = tiny_problem(args.seed or 0)
    if args.config:
        cfg = RunConfig.load(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        cfg.validate()
    if cfg.precision != "float64":
        raise ValidationError("grad-check needs precision float64")
    for flag in ("ci", "ct", "si", "st"):
        if getattr(args, f"no_{flag}"):
            setattr(cfg, flag, False)
    t0 = time.perf_counter()
    err = run_grad_check(cfg, pairs, args.n_coords, args.seed or 0)
    dt = time.perf_counter() - t0
    print(json.dumps({"max_rel_error": err, "coords": args.n_coords, "seconds": round(dt, 2)}))
    if not err < args.tol:
        raise NumericError(f"gradient check failed: {err:.3e} >= {args.tol:.0e}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cscl", description="Consistency-learning manipulation detector")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(fn=fn)
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        return p

    p = add("gen-data", cmd_gen_data, "write a synthetic dataset directory")
    p.add_argument("--config")
    p.add_argument("--out", required=True)

    p = add("train", cmd_train, "train a model and write a checkpoint")
    p.add_argument("--config")
    p.add_argument("--data", required=True, help="dataset directory or train JSONL")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="per-epoch loss CSV")
    p.add_argument("--quiet", action="store_true")

    p = add("eval", cmd_eval, "evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="dataset directory or test JSONL")
    p.add_argument("--report", required=True)
    p.add_argument("--predictions", help="optional per-sample JSONL")

    p = add("ablate", cmd_ablate, "train and evaluate the six decoder ablation rows")
    p.add_argument("--config")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="CSV table")
    p.add_argument("--quiet", action="store_true")

    p = add("sweep-threshold", cmd_sweep, "token grounding P/R/F1 over tau")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="CSV table")
    p.add_argument("--summary", help="JSON with the F1 stability band")
    p.add_argument("--tau-min", type=float, default=0.05)
    p.add_argument("--tau-max", type=float, default=0.95)
    p.add_argument("--tau-step", type=float, default=0.05)

    p = add("export-analysis", cmd_export, "consistency matrices and PCA projections as CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-samples", type=int, default=200)
    p.add_argument("--n-matrices", type=int, default=4)

    p = add("grad-check", cmd_grad_check, "finite-difference gradient check on the tiny config")
    p.add_argument("--config", help="float64 RunConfig; defaults to the tiny preset")
    p.add_argument("--n-coords", type=int, default=200)
    p.add_argument("--tol", type=float, default=1e-4)
    for flag in ("ci", "ct", "si", "st"):
        p.add_argument(f"--no-{flag}", action="store_true", help=f"disable the {flag.upper()} decoder")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except ValidationError as e:
        print(f"validation error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
