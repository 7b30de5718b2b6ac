"""Detection, classification and grounding metrics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .heads import box_iou, cxcywh_to_xyxy


def auc(scores, labels) -> float:
    """ROC AUC as the Mann-Whitney statistic; tied pos/neg pairs count 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def _roc_points(scores: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(FPR, FNR) when predicting positive for score >= t, t sweeping distinct scores downward."""
    thresholds = np.unique(scores)[::-1]
    n_pos, n_neg = labels.sum(), (~labels).sum()
    pos_sorted = np.sort(scores[labels])
    neg_sorted = np.sort(scores[~labels])
    tp = n_pos - np.searchsorted(pos_sorted, thresholds, side="left")
    fp = n_neg - np.searchsorted(neg_sorted, thresholds, side="left")
    fpr = np.concatenate([[0.0], fp / n_neg])
    fnr = np.concatenate([[1.0], 1.0 - tp / n_pos])
    return fpr, fnr


def eer(scores, labels) -> float:
    """Equal error rate, linearly interpolated at the FPR = FNR crossing."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if labels.all() or not labels.any():
        raise ValueError("EER needs both classes")
    fpr, fnr = _roc_points(scores, labels)
    diff = fpr - fnr
    i = int(np.argmax(diff >= 0))
    if i == 0:
        return float(fpr[0])
    d0, d1 = diff[i - 1], diff[i]
    t = d0 / (d0 - d1) if d1 != d0 else 0.0
    return float(fpr[i - 1] + t * (fpr[i] - fpr[i - 1]))


def acc(scores, labels, tau: float = 0.5) -> float:
    """Accuracy of ``score >= tau`` against binary labels."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    return float(np.mean((scores >= tau) == labels))


def average_precision(scores, labels) -> float:
    """Precision averaged at each positive, scores descending, ties by index."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if not labels.any():
        return float("nan")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    cum = np.cumsum(hits)
    ranks = np.arange(1, len(hits) + 1)
    return float(np.mean(cum[hits] / ranks[hits]))


def f1_from_counts(tp: float, fp: float, fn: float) -> tuple[float, float, float]:
    """(precision, recall, F1); every 0/0 is taken as 0."""
    p = tp / (tp + fp) if tp + fp > 0 else 0.0
    r = tp / (tp + fn) if tp + fn > 0 else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return float(p), float(r), float(f)


def multilabel_suite(type_scores, type_gt, tau: float = 0.5) -> tuple[float, float, float]:
    """(mAP, CF1, OF1) over the class columns; classes without positives are left out of mAP."""
    s = np.asarray(type_scores, dtype=np.float64)
    y = np.asarray(type_gt).astype(bool)
    pred = s >= tau
    aps = [average_precision(s[:, c], y[:, c]) for c in range(s.shape[1])]
    aps = [a for a in aps if not np.isnan(a)]
    m_ap = float(np.mean(aps)) if aps else 0.0
    tp = (pred & y).sum(axis=0)
    fp = (pred & ~y).sum(axis=0)
    fn = (~pred & y).sum(axis=0)
    cf1 = float(np.mean([f1_from_counts(tp[c], fp[c], fn[c])[2] for c in range(s.shape[1])]))
    of1 = f1_from_counts(tp.sum(), fp.sum(), fn.sum())[2]
    return m_ap, cf1, of1


def iou_suite(pred_boxes, gt_boxes, box_format: str = "cxcywh") -> tuple[float, float, float]:
    """(mean IoU, fraction IoU >= 0.5, fraction IoU >= 0.75)."""
    p = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
    g = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if len(p) == 0:
        return 0.0, 0.0, 0.0
    if box_format == "cxcywh":
        p, g = cxcywh_to_xyxy(p), cxcywh_to_xyxy(g)
    ious = box_iou(p, g)
    return float(ious.mean()), float((ious >= 0.5).mean()), float((ious >= 0.75).mean())


def token_prf1(pred_flags, gt_labels, masks=None, average: str = "micro") -> tuple[float, float, float]:
    """Token grounding P/R/F1 over valid tokens, micro-pooled or averaged per sample."""
    preds = [np.asarray(p).astype(bool) for p in pred_flags]
    gts = [np.asarray(g).astype(bool) for g in gt_labels]
    ms = [np.ones(len(p), bool) for p in preds] if masks is None else [np.asarray(m, bool) for m in masks]
    counts = [((p & g & m).sum(), (p & ~g & m).sum(), (~p & g & m).sum()) for p, g, m in zip(preds, gts, ms)]
    if average == "micro":
        return f1_from_counts(*np.sum(counts, axis=0))
    if average == "macro":
        per = [f1_from_counts(*c) for c in counts if c[0] + c[2] > 0]
        if not per:
            return 0.0, 0.0, 0.0
        return tuple(float(v) for v in np.mean(per, axis=0))
    raise ValueError(f"unknown average {average!r}")


@dataclass
class EvalReport:
    auc: float
    eer: float
    acc: float
    map: float
    cf1: float
    of1: float
    iou_m: float
    iou50: float
    iou75: float
    precision: float
    recall: float
    f1: float
    counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())


REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "EvalReport",
    "type": "object",
    "required": ["auc", "eer", "acc", "map", "cf1", "of1", "iou_m", "iou50", "iou75",
                 "precision", "recall", "f1", "counts"],
    "properties": {
        **{k: {"type": "number", "minimum": 0, "maximum": 1}
           for k in ["auc", "eer", "acc", "map", "cf1", "of1", "iou_m", "iou50", "iou75",
                     "precision", "recall", "f1"]},
        "counts": {
            "type": "object",
            "additionalProperties": {"type": "integer", "minimum": 0},
        },
    },
    "additionalProperties": False,
}


def build_report(binary_prob, is_fake, type_prob, types, pred_boxes, gt_boxes, has_box,
                 token_flags, token_labels, token_masks, tau: float = 0.5,
                 token_average: str = "micro") -> EvalReport:
    """All metrics for one evaluation; grounding metrics on their manipulated subsets."""
    is_fake = np.asarray(is_fake).astype(bool)
    has_box = np.asarray(has_box, bool)
    both = is_fake.any() and not is_fake.all()
    m_ap, cf1, of1 = multilabel_suite(type_prob, types, tau)
    if has_box.any():
        iou_m, iou50, iou75 = iou_suite(np.asarray(pred_boxes)[has_box], np.asarray(gt_boxes)[has_box])
    else:
        iou_m = iou50 = iou75 = 0.0
    p, r, f = token_prf1(token_flags, token_labels, token_masks, token_average)
    return EvalReport(
        auc=auc(binary_prob, is_fake) if both else 0.5,
        eer=eer(binary_prob, is_fake) if both else 0.5,
        acc=acc(binary_prob, is_fake, tau),
        map=m_ap, cf1=cf1, of1=of1,
        iou_m=iou_m, iou50=iou50, iou75=iou75,
        precision=p, recall=r, f1=f,
        counts={
            "samples": int(len(is_fake)),
            "fake": int(is_fake.sum()),
            "face_boxes": int(has_box.sum()),
            "valid_tokens": int(sum(np.asarray(m, bool).sum() for m in token_masks)),
            "manipulated_tokens": int(sum((np.asarray(l).astype(bool) & np.asarray(m, bool)).sum()
                                          for l, m in zip(token_labels, token_masks))),
        },
    )


def report_from_jsonl(path: str | Path, tau: float = 0.5) -> EvalReport:
    """Score a predictions file: one JSON object per sample with prediction and GT fields."""
    rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    if not rows:
        raise ValueError(f"{path} holds no predictions")

    def col(name):
        return [r[name] for r in rows]

    has_box = np.array([r["gt_box"] is not None for r in rows])
    gt_boxes = np.array([r["gt_box"] if r["gt_box"] is not None else [0.0] * 4 for r in rows])
    return build_report(
        binary_prob=col("binary_prob"), is_fake=col("is_fake"),
        type_prob=np.array(col("type_prob")), types=np.array(col("types")),
        pred_boxes=np.array(col("pred_box")), gt_boxes=gt_boxes, has_box=has_box,
        token_flags=col("token_flags"), token_labels=col("token_labels"), token_masks=col("token_mask"),
        tau=tau,
    )
