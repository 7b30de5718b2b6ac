"""Training loop, checkpoints, evaluation, ablation grid, threshold sweep, analysis export."""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analysis
from .autodiff import NumericError, backward
from .config import RunConfig, ValidationError
from .contextual import contextual_gt
from .data import MediaPair, collate
from .metrics import EvalReport, build_report, f1_from_counts
from .model import CSCLModel
from .optim import AdamW
from .semantic import threshold_filter

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
EVAL_BATCH = 64

# Table-2 rows: (C.I., C.T., S.I., S.T.)
ABLATION_ROWS = [
    (False, False, False, False),
    (True, True, False, False),
    (False, False, True, True),
    (True, False, True, False),
    (False, True, False, True),
    (True, True, True, True),
]


def data_shape(pairs: list[MediaPair]) -> tuple[int, int, int]:
    """(n_patches, text_len, d_raw) shared by every pair."""
    first = pairs[0]
    shape = (first.patch_features.shape[0], first.token_features.shape[0], first.patch_features.shape[1])
    for p in pairs:
        got = (p.patch_features.shape[0], p.token_features.shape[0], p.patch_features.shape[1])
        if got != shape:
            raise ValidationError(f"inconsistent sample shapes {got} vs {shape}")
    return shape


@dataclass
class Checkpoint:
    config: RunConfig
    shape: tuple[int, int, int]
    flat: np.ndarray
    epoch: int
    rng_state: dict
    optimizer_steps: int = 0
    log: list[dict] = field(default_factory=list)

    @property
    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.config.to_dict(), sort_keys=True).encode())
        h.update(json.dumps(list(self.shape)).encode())
        h.update(self.flat.tobytes())
        return h.hexdigest()

    def to_model(self) -> CSCLModel:
        model = CSCLModel(self.config, *self.shape)
        model.params.set_flat(self.flat)
        return model

    def to_json(self) -> str:
        obj = {
            "format": CHECKPOINT_FORMAT,
            "config": self.config.to_dict(),
            "shape": list(self.shape),
            "dtype": str(self.flat.dtype),
            "epoch": self.epoch,
            "optimizer": {"name": "adamw", "steps": self.optimizer_steps,
                          "betas": [self.config.beta1, self.config.beta2], "eps": self.config.adam_eps},
            "rng_state": self.rng_state,
            "log": self.log,
            "params": base64.b64encode(self.flat.astype(self.flat.dtype.newbyteorder("<")).tobytes()).decode(),
            "content_hash": self.content_hash,
        }
        return json.dumps(obj, sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        try:
            obj = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ValidationError(f"cannot read checkpoint {path}: {e}") from e
        if obj.get("format") != CHECKPOINT_FORMAT:
            raise ValidationError(f"unsupported checkpoint format {obj.get('format')}")
        dtype = np.dtype(obj["dtype"]).newbyteorder("<")
        flat = np.frombuffer(base64.b64decode(obj["params"]), dtype=dtype).astype(obj["dtype"])
        ckpt = cls(RunConfig.from_dict(obj["config"]), tuple(obj["shape"]), flat, obj["epoch"],
                   obj["rng_state"], obj["optimizer"]["steps"], obj.get("log", []))
        if ckpt.content_hash != obj["content_hash"]:
            raise ValidationError("checkpoint content hash mismatch")
        return ckpt


def _dump_batch(dump_dir: Path | None, epoch: int, step: int, idx: np.ndarray, values: dict) -> str:
    info = {"epoch": epoch, "step": step, "sample_indices": idx.tolist(), "losses": values}
    if dump_dir is not None:
        dump_dir.mkdir(parents=True, exist_ok=True)
        path = dump_dir / f"nonfinite_e{epoch}_s{step}.json"
        path.write_text(json.dumps(info, indent=2))
        return str(path)
    return json.dumps(info)


def train(cfg: RunConfig, pairs: list[MediaPair], dump_dir: str | Path | None = None,
          progress: bool = False) -> Checkpoint:
    """Train from scratch; batch order is a pure function of ``cfg.seed``."""
    cfg.validate()
    shape = data_shape(pairs)
    model = CSCLModel(cfg, *shape)
    opt = AdamW(model.params, cfg.lr, cfg.weight_decay, (cfg.beta1, cfg.beta2), cfg.adam_eps)
    rng = np.random.default_rng([cfg.seed, 1])
    n = len(pairs)
    history: list[dict] = []
    dump = Path(dump_dir) if dump_dir is not None else None
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        sums: dict[str, float] = {}
        n_batches = 0
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            batch = collate([pairs[i] for i in idx])
            losses = model.loss(batch)
            values = losses.values()
            if not all(np.isfinite(v) for v in values.values()):
                where = _dump_batch(dump, epoch, step, idx, values)
                raise NumericError(f"non-finite loss at epoch {epoch} step {step}; dump: {where}")
            backward(losses.total, model.params)
            opt.step()
            for k, v in values.items():
                sums[k] = sums.get(k, 0.0) + v
            n_batches += 1
        entry = {"epoch": epoch, **{k: v / n_batches for k, v in sums.items()}}
        history.append(entry)
        msg = f"epoch {epoch:3d}  total {entry['total']:.4f}  ({time.perf_counter() - t0:.1f}s)"
        if progress:
            print(msg, flush=True)
        log.info(msg)
    return Checkpoint(cfg, shape, model.params.flat().copy(), cfg.epochs, rng.bit_generator.state,
                      opt.t, history)


@dataclass
class Predictions:
    binary_prob: np.ndarray
    type_prob: np.ndarray
    boxes: np.ndarray
    token_scores: np.ndarray
    token_mask: np.ndarray
    is_fake: np.ndarray
    types: np.ndarray
    gt_boxes: np.ndarray
    has_box: np.ndarray
    token_labels: np.ndarray

    def token_flags(self, tau: float) -> np.ndarray:
        return threshold_filter(self.token_scores, self.token_mask, tau)

    def report(self, tau: float) -> EvalReport:
        return build_report(self.binary_prob, self.is_fake, self.type_prob, self.types, self.boxes,
                            self.gt_boxes, self.has_box, list(self.token_flags(tau)),
                            list(self.token_labels), list(self.token_mask), tau=0.5)

    def jsonl(self, tau: float) -> str:
        flags = self.token_flags(tau)
        lines = []
        for i in range(len(self.is_fake)):
            lines.append(json.dumps({
                "binary_prob": float(self.binary_prob[i]), "is_fake": int(self.is_fake[i]),
                "type_prob": self.type_prob[i].tolist(), "types": self.types[i].tolist(),
                "pred_box": self.boxes[i].tolist(),
                "gt_box": self.gt_boxes[i].tolist() if self.has_box[i] else None,
                "token_scores": self.token_scores[i].tolist(),
                "token_flags": flags[i].astype(int).tolist(),
                "token_labels": self.token_labels[i].tolist(),
                "token_mask": self.token_mask[i].astype(int).tolist(),
            }, sort_keys=True))
        return "\n".join(lines) + "\n"


def _sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    return 1.0 / (1.0 + np.exp(-z))


def predict(model: CSCLModel, pairs: list[MediaPair], batch_size: int = EVAL_BATCH) -> Predictions:
    parts: dict[str, list] = {k: [] for k in ("bp", "tp", "box", "ts")}
    for start in range(0, len(pairs), batch_size):
        batch = collate(pairs[start:start + batch_size])
        out = model.forward(batch)
        parts["bp"].append(_sigmoid(out.binary_logit.data))
        parts["tp"].append(_sigmoid(out.type_logits.data))
        parts["box"].append(np.asarray(out.bbox.data, dtype=np.float64))
        parts["ts"].append(out.token_scores())
    full = collate(pairs)
    return Predictions(
        binary_prob=np.concatenate(parts["bp"]), type_prob=np.concatenate(parts["tp"]),
        boxes=np.concatenate(parts["box"]), token_scores=np.concatenate(parts["ts"]),
        token_mask=full.token_mask, is_fake=full.is_fake, types=full.types,
        gt_boxes=full.boxes, has_box=full.has_box, token_labels=full.token_labels,
    )


def evaluate(ckpt: Checkpoint, pairs: list[MediaPair]) -> EvalReport:
    if data_shape(pairs) != tuple(ckpt.shape):
        raise ValidationError(f"dataset shape {data_shape(pairs)} does not match checkpoint {ckpt.shape}")
    return predict(ckpt.to_model(), pairs).report(ckpt.config.tau)


def ablation_label(flags: tuple[bool, bool, bool, bool]) -> str:
    names = [n for n, on in zip(("CI", "CT", "SI", "ST"), flags) if on]
    return "+".join(names) if names else "baseline"


def ablate(cfg: RunConfig, train_pairs: list[MediaPair], test_pairs: list[MediaPair],
           rows=ABLATION_ROWS, progress: bool = False) -> list[tuple[tuple[bool, ...], EvalReport]]:
    out = []
    for flags in rows:
        variant = cfg.with_ablation(*flags)
        if progress:
            print(f"== {ablation_label(flags)}", flush=True)
        ckpt = train(variant, train_pairs, progress=progress)
        out.append((flags, evaluate(ckpt, test_pairs)))
    return out


REPORT_COLUMNS = ["auc", "eer", "acc", "map", "cf1", "of1", "iou_m", "iou50", "iou75", "precision", "recall", "f1"]


def write_ablation_csv(path: str | Path, results) -> None:
    header = ["ci", "ct", "si", "st", "variant"] + REPORT_COLUMNS
    rows = [[int(f) for f in flags] + [ablation_label(flags)] + [getattr(r, c) for c in REPORT_COLUMNS]
            for flags, r in results]
    analysis.write_csv(path, header, rows)


def sweep_threshold(ckpt: Checkpoint, pairs: list[MediaPair], taus) -> tuple[list[tuple[float, float, float, float]], dict]:
    """(tau, P, R, F1) per threshold plus the F1 stability band over tau in [0.3, 0.7]."""
    preds = predict(ckpt.to_model(), pairs)
    labels = preds.token_labels.astype(bool)
    mask = preds.token_mask
    rows = []
    for tau in taus:
        if not 0.0 <= tau <= 1.0:
            raise ValidationError(f"tau {tau} outside [0, 1]")
        flags = preds.token_scores < tau
        tp = (flags & labels & mask).sum()
        fp = (flags & ~labels & mask).sum()
        fn = (~flags & labels & mask).sum()
        rows.append((float(tau), *f1_from_counts(tp, fp, fn)))
    band = [r[3] for r in rows if 0.3 - 1e-12 <= r[0] <= 0.7 + 1e-12]
    summary = {
        "f1_band_0.3_0.7": float(max(band) - min(band)) if band else None,
        "f1_min_0.3_0.7": float(min(band)) if band else None,
        "f1_max_0.3_0.7": float(max(band)) if band else None,
    }
    return rows, summary


def export_analysis(ckpt: Checkpoint, pairs: list[MediaPair], out_dir: str | Path, n_matrices: int = 4) -> list[Path]:
    """Contextual matrices as CSV grids and 2-D PCA of the consistency features."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = ckpt.to_model()
    batch = collate(pairs)
    fwd = model.forward(batch)
    written: list[Path] = []
    for i in range(min(n_matrices, len(pairs))):
        for name, ctx, labels, mask in (("image", fwd.ctx_img, batch.patch_labels, None),
                                        ("text", fwd.ctx_txt, batch.token_labels, batch.token_mask)):
            if ctx is None:
                continue
            mat = np.asarray(ctx.scores.data[i], dtype=np.float64)
            gt = contextual_gt(labels[i])
            if mask is not None:
                keep = mask[i]
                mat, gt = mat[np.ix_(keep, keep)], gt[np.ix_(keep, keep)]
            p = out / f"matrix_{name}_{i}.csv"
            analysis.write_matrix_csv(p, mat)
            written.append(p)
            p = out / f"matrix_{name}_{i}_gt.csv"
            analysis.write_matrix_csv(p, gt)
            written.append(p)
    populations = []
    if fwd.ctx_img is not None:
        populations.append(("contextual", "image", fwd.ctx_img.features, batch.patch_labels, None))
    if fwd.sem_img is not None:
        populations.append(("semantic", "image", fwd.sem_img.fine_features, batch.patch_labels, None))
    if fwd.ctx_txt is not None:
        populations.append(("contextual", "text", fwd.ctx_txt.features, batch.token_labels, batch.token_mask))
    if fwd.sem_txt is not None:
        populations.append(("semantic", "text", fwd.sem_txt.fine_features, batch.token_labels, batch.token_mask))
    for kind, modality, feats, labels, mask in populations:
        f = np.asarray(feats.data, dtype=np.float64)
        keep = np.ones(labels.shape, bool) if mask is None else mask
        sample_idx, item_idx = np.nonzero(keep)
        x = f[sample_idx, item_idx]
        proj, _, _ = analysis.pca_project(x, 2)
        tags = np.where(labels[sample_idx, item_idx] == 1, "forged", "genuine")
        p = out / f"pca_{kind}_{modality}.csv"
        analysis.write_csv(p, ["sample", "item", "pc1", "pc2", "tag"],
                           zip(sample_idx.tolist(), item_idx.tolist(), proj[:, 0], proj[:, 1], tags))
        written.append(p)
    return written
