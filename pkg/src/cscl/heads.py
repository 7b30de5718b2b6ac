"""Prediction heads, label derivation, box geometry and training losses."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import ParamStore, Tensor

PROB_CLAMP = 1e-7


class BinaryHead:
    def __init__(self, store: ParamStore, d: int, rng: np.random.Generator):
        self.mlp = nn.MLP(store, "head.bin", [2 * d, d, 1], rng)

    def __call__(self, v_cls: Tensor, t_cls: Tensor) -> Tensor:
        if v_cls.shape[-1] != t_cls.shape[-1]:
            raise ValueError("class embedding width mismatch")
        return self.mlp(ad.concat([v_cls, t_cls], axis=-1))[..., 0]


class ImageHead:
    """Face box (sigmoid cxcywh) and FS/FA logits from the image aggregate."""

    def __init__(self, store: ParamStore, d: int, rng: np.random.Generator):
        self.box = nn.MLP(store, "head.box", [d, d, 4], rng)
        self.types = nn.MLP(store, "head.imgtype", [d, d, 2], rng)

    def __call__(self, v_a: Tensor) -> tuple[Tensor, Tensor]:
        return ad.sigmoid(self.box(v_a)), self.types(v_a)


class TextHead:
    def __init__(self, store: ParamStore, d: int, rng: np.random.Generator):
        self.types = nn.MLP(store, "head.txttype", [d, d, 2], rng)

    def __call__(self, t_a: Tensor) -> Tensor:
        return self.types(t_a)


class TokenHead:
    """Per-token manipulation logit, used only when text grounding is not score-based."""

    def __init__(self, store: ParamStore, d: int, rng: np.random.Generator):
        self.mlp = nn.MLP(store, "head.token", [d, d, 1], rng)

    def __call__(self, tokens: Tensor) -> Tensor:
        return self.mlp(tokens)[..., 0]


# ---------------------------------------------------------------- geometry


def cxcywh_to_xyxy(box: np.ndarray) -> np.ndarray:
    box = np.asarray(box, dtype=np.float64)
    cx, cy, w, h = np.moveaxis(box, -1, 0)
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def xyxy_to_cxcywh(box: np.ndarray) -> np.ndarray:
    box = np.asarray(box, dtype=np.float64)
    x0, y0, x1, y1 = np.moveaxis(box, -1, 0)
    return np.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], axis=-1)


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU of corner-form boxes, elementwise over leading dims."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    lt = np.maximum(a[..., :2], b[..., :2])
    rb = np.minimum(a[..., 2:], b[..., 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def derive_patch_labels(box, g: int) -> np.ndarray:
    """Row-major g*g labels: 1 iff at least half a cell's area lies inside the cxcywh box."""
    if box is None:
        return np.zeros(g * g, dtype=np.int64)
    box = np.asarray(box, dtype=np.float64)
    if box[2] <= 0 or box[3] <= 0:
        raise ValueError("degenerate face box on a manipulated sample")
    x0, y0, x1, y1 = cxcywh_to_xyxy(box)
    edges = np.arange(g + 1) / g
    ox = np.clip(np.minimum(edges[1:], x1) - np.maximum(edges[:-1], x0), 0, None) * g
    oy = np.clip(np.minimum(edges[1:], y1) - np.maximum(edges[:-1], y0), 0, None) * g
    frac = oy[:, None] * ox[None, :]
    return (frac >= 0.5 - 1e-12).astype(np.int64).ravel()


def giou_terms(pred: Tensor, gt: np.ndarray) -> tuple[Tensor, Tensor]:
    """Differentiable (IoU, GIoU) between cxcywh prediction and target boxes."""
    gt = np.asarray(gt, dtype=pred.dtype)
    cx, cy, w, h = (pred[..., i] for i in range(4))
    px0, py0, px1, py1 = cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5
    g = cxcywh_to_xyxy(gt).astype(pred.dtype)
    gx0, gy0, gx1, gy1 = (Tensor(g[..., i]) for i in range(4))
    iw = ad.maximum(ad.minimum(px1, gx1) - ad.maximum(px0, gx0), 0.0)
    ih = ad.maximum(ad.minimum(py1, gy1) - ad.maximum(py0, gy0), 0.0)
    inter = iw * ih
    area_p = w * h
    area_g = Tensor((g[..., 2] - g[..., 0]) * (g[..., 3] - g[..., 1]))
    union = area_p + area_g - inter
    iou = inter / ad.maximum(union, 1e-12)
    ew = ad.maximum(px1, gx1) - ad.minimum(px0, gx0)
    eh = ad.maximum(py1, gy1) - ad.minimum(py0, gy0)
    enclose = ad.maximum(ew * eh, 1e-12)
    return iou, iou - (enclose - union) / enclose


# ---------------------------------------------------------------- losses


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise binary cross-entropy, ``softplus(z) - y z``."""
    y = np.asarray(targets, dtype=logits.dtype)
    return ad.softplus(logits) - logits * y


def consistency_loss(pred: Tensor, gt, mask=None, batch_dims: int = 0) -> Tensor:
    """Negated mean log-likelihood of binary targets over the valid entries.

    The first ``batch_dims`` axes index samples: the mean runs per sample
    over the remaining axes and is then averaged over samples.
    """
    gt = np.asarray(gt, dtype=pred.dtype)
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    mask = np.ones(pred.shape, bool) if mask is None else np.broadcast_to(np.asarray(mask, bool), pred.shape)
    p = ad.clip(pred, PROB_CLAMP, 1.0 - PROB_CLAMP)
    ll = ad.log(p) * gt + ad.log(1.0 - p) * (1.0 - gt)
    w = mask.astype(pred.dtype)
    inner = tuple(range(batch_dims, pred.ndim))
    counts = w.sum(axis=inner) if inner else w
    if np.any(counts == 0):
        raise ValueError("no valid entries for the consistency loss")
    per_sample = ad.tsum(ll * w, axis=inner) / counts if inner else ll * w
    return -ad.mean(per_sample)


@dataclass
class LossWeights:
    binary: float = 1.0
    type: float = 1.0
    bbox: float = 1.0
    c: float = 1.0
    s: float = 1.0
    token: float = 1.0


@dataclass
class LossBreakdown:
    l_binary: Tensor
    l_type: Tensor
    l_bbox: Tensor
    l_c: Tensor
    l_s: Tensor
    l_token: Tensor
    total: Tensor
    weights: LossWeights = field(default_factory=LossWeights)

    def values(self) -> dict[str, float]:
        return {name: float(getattr(self, name).data)
                for name in ("l_binary", "l_type", "l_bbox", "l_c", "l_s", "l_token", "total")}


def bbox_loss(pred_box: Tensor, gt_box: np.ndarray, has_box: np.ndarray) -> Tensor:
    """Mean over face-manipulated samples of L1 + (1 - GIoU); zero if none."""
    has_box = np.asarray(has_box, bool)
    if not has_box.any():
        return Tensor(np.zeros((), pred_box.dtype))
    idx = np.flatnonzero(has_box)
    p = pred_box[idx]
    g = np.asarray(gt_box, dtype=pred_box.dtype)[idx]
    l1 = ad.mean(ad.absolute(p - g), axis=-1)
    _, giou = giou_terms(p, g)
    return ad.mean(l1 + (1.0 - giou))


def subtask_losses(binary_logit: Tensor, type_logits: Tensor, pred_box: Tensor,
                   is_fake, types, gt_box, has_box,
                   l_c: Tensor | None = None, l_s: Tensor | None = None, l_token: Tensor | None = None,
                   weights: LossWeights | None = None) -> LossBreakdown:
    """Binary BCE, 4-way multi-label BCE, box L1+GIoU, plus passed-in consistency terms."""
    weights = weights or LossWeights()
    dtype = binary_logit.dtype
    zero = Tensor(np.zeros((), dtype))
    l_bin = ad.mean(bce_with_logits(binary_logit, is_fake))
    l_type = ad.mean(bce_with_logits(type_logits, types))
    l_box = bbox_loss(pred_box, gt_box, has_box)
    l_c = zero if l_c is None else l_c
    l_s = zero if l_s is None else l_s
    l_tok = zero if l_token is None else l_token
    total = (l_bin * weights.binary + l_type * weights.type + l_box * weights.bbox
             + l_c * weights.c + l_s * weights.s + l_tok * weights.token)
    return LossBreakdown(l_bin, l_type, l_box, l_c, l_s, l_tok, total, weights)
