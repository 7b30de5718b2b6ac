"""Synthetic image-text pairs with planted face/text manipulations.

Each patch or token is a raw feature vector mixing three latent parts:

* source style - shared by items from the same capture/writing source,
* topic - a per-pair latent shared between modalities (last dim is a
  sentiment sign),
* content - item-specific noise.

Face manipulations swap the style of a box of patches for an alternate
source distribution; text manipulations overwrite the topic (swap) or flip
the sentiment (attribute) of a subset of tokens. A fixed random rotation
hides the latent layout from the model.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TYPE_NAMES, GenConfig, ValidationError
from .heads import derive_patch_labels

STYLE_DIMS = 8
TOPIC_DIMS = 12
N_TOPICS = 32
SENTIMENT = 2.0
SPLITS = {"train": 0, "test": 1}


@dataclass
class MediaPair:
    patch_features: np.ndarray  # (g*g, d_raw)
    token_features: np.ndarray  # (m, d_raw), zero rows past the valid length
    token_mask: np.ndarray  # (m,) bool
    is_fake: int
    types: list[str]
    face_box: list[float] | None  # normalized cxcywh
    token_labels: np.ndarray  # (m,) int, 1 = manipulated
    patch_labels: np.ndarray  # (g*g,) int
    topic_id: int = 0

    def validate(self) -> None:
        g2 = self.patch_features.shape[0]
        g = math.isqrt(g2)
        if g * g != g2:
            raise ValidationError("patch count is not a square grid")
        if set(self.types) - set(TYPE_NAMES):
            raise ValidationError(f"unknown manipulation types {self.types}")
        if self.is_fake != int(bool(self.types)):
            raise ValidationError("is_fake must be 1 iff types is nonempty")
        has_face = "FS" in self.types or "FA" in self.types
        if has_face != (self.face_box is not None):
            raise ValidationError("face_box must be present iff FS or FA is present")
        has_text = "TS" in self.types or "TA" in self.types
        if self.token_labels.any() and not has_text:
            raise ValidationError("token labels set without a text manipulation")
        if has_text and not self.token_labels.any():
            raise ValidationError("text manipulation without manipulated tokens")
        if (self.token_labels.astype(bool) & ~self.token_mask).any():
            raise ValidationError("padding tokens cannot be manipulated")
        if self.token_mask.sum() < 2:
            raise ValidationError("need at least two valid tokens")
        if self.face_box is not None:
            box = np.asarray(self.face_box)
            if box.shape != (4,) or (box < 0).any() or (box > 1).any() or box[2] <= 0 or box[3] <= 0:
                raise ValidationError(f"bad face box {self.face_box}")
        if not np.array_equal(self.patch_labels, derive_patch_labels(self.face_box, g)):
            raise ValidationError("patch labels disagree with the face box")
        if not (np.isfinite(self.patch_features).all() and np.isfinite(self.token_features).all()):
            raise ValidationError("non-finite features")

    @property
    def type_vector(self) -> np.ndarray:
        return np.array([t in self.types for t in TYPE_NAMES], dtype=np.int64)

    def to_json(self) -> str:
        obj = {
            "patch_features": self.patch_features,
            "token_features": self.token_features,
            "token_mask": self.token_mask.astype(int).tolist(),
            "is_fake": int(self.is_fake),
            "types": list(self.types),
            "face_box": self.face_box,
            "token_labels": self.token_labels.astype(int).tolist(),
            "patch_labels": self.patch_labels.astype(int).tolist(),
            "topic_id": int(self.topic_id),
        }
        return _dumps(obj)

    @classmethod
    def from_json(cls, line: str) -> "MediaPair":
        try:
            raw = json.loads(line)
            pair = cls(
                patch_features=np.asarray(raw["patch_features"], dtype=np.float64),
                token_features=np.asarray(raw["token_features"], dtype=np.float64),
                token_mask=np.asarray(raw["token_mask"], dtype=bool),
                is_fake=int(raw["is_fake"]),
                types=list(raw["types"]),
                face_box=None if raw["face_box"] is None else [float(v) for v in raw["face_box"]],
                token_labels=np.asarray(raw["token_labels"], dtype=np.int64),
                patch_labels=np.asarray(raw["patch_labels"], dtype=np.int64),
                topic_id=int(raw.get("topic_id", 0)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ValidationError(f"malformed media pair: {e}") from e
        pair.validate()
        return pair


def _fmt(v: float) -> str:
    if not math.isfinite(v):
        raise ValidationError("cannot serialize non-finite float")
    return format(v, ".17g")


def _dumps(obj) -> str:
    """JSON with every float written at 17 significant digits."""
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, dict):
        return "{" + ",".join(f"{json.dumps(k)}:{_dumps(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(_dumps(v) for v in obj) + "]"
    if isinstance(obj, bool) or obj is None or isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt(float(obj))
    raise TypeError(f"cannot serialize {type(obj).__name__}")


# ---------------------------------------------------------------- generation


@dataclass
class _World:
    """Seed-level constants shared by every sample."""

    mixing: np.ndarray  # (d_raw, d_raw) orthogonal
    topics: np.ndarray  # (N_TOPICS, TOPIC_DIMS - 1)
    content_dims: int = field(default=0)


def _world(cfg: GenConfig) -> _World:
    rng = np.random.default_rng([cfg.seed, 7919])
    q, r = np.linalg.qr(rng.standard_normal((cfg.d_raw, cfg.d_raw)))
    q = q * np.sign(np.diag(r))
    topics = rng.standard_normal((N_TOPICS, TOPIC_DIMS - 1))
    return _World(q, topics, cfg.d_raw - STYLE_DIMS - TOPIC_DIMS)


def _topic(world: _World, topic_id: int, sentiment: float, rng: np.random.Generator) -> np.ndarray:
    base = world.topics[topic_id] + 0.3 * rng.standard_normal(TOPIC_DIMS - 1)
    return np.concatenate([base, [SENTIMENT * sentiment]])


def _sample_box(g: int, rng: np.random.Generator) -> np.ndarray:
    """cxcywh box covering 4-25% of the image, each side at least 1.5 cells."""
    min_side = 1.5 / g
    area = rng.uniform(0.04, 0.25)
    ratio = math.exp(rng.uniform(math.log(2 / 3), math.log(3 / 2)))
    w = min(max(math.sqrt(area * ratio), min_side), 1.0)
    h = min(max(math.sqrt(area / ratio), min_side), 1.0)
    cx = rng.uniform(w / 2, 1 - w / 2)
    cy = rng.uniform(h / 2, 1 - h / 2)
    return np.array([cx, cy, w, h])


def _pick_types(cfg: GenConfig, rng: np.random.Generator) -> list[str]:
    if rng.random() < cfg.genuine_fraction:
        return []
    w = np.asarray(cfg.type_weights, dtype=np.float64)
    if rng.random() < cfg.both_fraction and w[:2].sum() > 0 and w[2:].sum() > 0:
        img = TYPE_NAMES[rng.choice(2, p=w[:2] / w[:2].sum())]
        txt = TYPE_NAMES[2 + rng.choice(2, p=w[2:] / w[2:].sum())]
        return [img, txt]
    return [TYPE_NAMES[rng.choice(4, p=w / w.sum())]]


def _genuine(cfg: GenConfig, world: _World, rng: np.random.Generator) -> tuple[MediaPair, dict]:
    g2 = cfg.grid * cfg.grid
    m = cfg.text_len
    topic_id = int(rng.integers(N_TOPICS))
    sentiment = float(rng.choice([-1.0, 1.0]))
    topic = _topic(world, topic_id, sentiment, rng)
    img_style = rng.standard_normal(STYLE_DIMS)
    txt_style = rng.standard_normal(STYLE_DIMS)
    cd = world.content_dims

    def item(style, n):
        return np.concatenate([
            style + cfg.noise * rng.standard_normal((n, STYLE_DIMS)),
            topic + cfg.noise * rng.standard_normal((n, TOPIC_DIMS)),
            cfg.content_scale * rng.standard_normal((n, cd)),
        ], axis=1)

    patches = item(img_style, g2)
    n_valid = int(rng.integers(cfg.min_text_len, m + 1))
    tokens = np.zeros((m, cfg.d_raw))
    tokens[:n_valid] = item(txt_style, n_valid)
    mask = np.arange(m) < n_valid
    pair = MediaPair(
        patch_features=patches, token_features=tokens, token_mask=mask, is_fake=0, types=[],
        face_box=None, token_labels=np.zeros(m, np.int64), patch_labels=np.zeros(g2, np.int64),
        topic_id=topic_id,
    )
    latent = {"topic": topic, "img_style": img_style, "txt_style": txt_style, "sentiment": sentiment}
    return pair, latent


def _shifted_style(cfg: GenConfig, base: np.ndarray, n: int, rng: np.random.Generator,
                   magnitude: float) -> np.ndarray:
    u = rng.standard_normal(STYLE_DIMS)
    u /= np.linalg.norm(u)
    mean = base + magnitude * u
    return mean + cfg.source_scale * cfg.noise * rng.standard_normal((n, STYLE_DIMS))


def _fresh_topic(cfg: GenConfig, world: _World, topic: np.ndarray, topic_id: int,
                 rng: np.random.Generator) -> np.ndarray:
    other = int(rng.integers(N_TOPICS - 1))
    other += other >= topic_id
    fresh = _topic(world, other, 1.0, rng)[:-1]
    mix = cfg.topic_mismatch
    return math.sqrt(max(0.0, 1 - mix * mix)) * topic[:-1] + mix * fresh


def plant_image_manipulation(cfg: GenConfig, world: _World, pair: MediaPair, latent: dict, kind: str,
                             rng: np.random.Generator) -> MediaPair:
    """Overwrite a box of patches with alternate-source features (FS also swaps topic)."""
    if kind not in ("FS", "FA"):
        raise ValueError(f"not an image manipulation: {kind}")
    box = _sample_box(cfg.grid, rng)
    labels = derive_patch_labels(box, cfg.grid)
    idx = np.flatnonzero(labels)
    n = idx.size
    feats = pair.patch_features
    feats[idx, :STYLE_DIMS] = _shifted_style(cfg, latent["img_style"], n, rng, cfg.source_shift)
    topic = latent["topic"]
    if kind == "FS":
        new_topic = np.concatenate([_fresh_topic(cfg, world, topic, pair.topic_id, rng), topic[-1:]])
    else:
        new_topic = topic + 0.5 * cfg.topic_mismatch * rng.standard_normal(TOPIC_DIMS)
    feats[idx, STYLE_DIMS:STYLE_DIMS + TOPIC_DIMS] = new_topic + cfg.noise * rng.standard_normal((n, TOPIC_DIMS))
    pair.face_box = [float(v) for v in box]
    pair.patch_labels = labels
    return pair


def plant_text_manipulation(cfg: GenConfig, world: _World, pair: MediaPair, latent: dict, kind: str,
                            rng: np.random.Generator) -> MediaPair:
    """Rewrite a random subset of valid tokens: TS replaces topic, TA flips sentiment."""
    if kind not in ("TS", "TA"):
        raise ValueError(f"not a text manipulation: {kind}")
    n_valid = int(pair.token_mask.sum())
    lo, hi = (0.3, 0.6) if kind == "TS" else (0.1, 0.3)
    count = int(np.clip(round(rng.uniform(lo, hi) * n_valid), 1, n_valid - 1))
    idx = np.sort(rng.choice(n_valid, size=count, replace=False))
    feats = pair.token_features
    topic = latent["topic"]
    if kind == "TS":
        new_topic = np.concatenate([_fresh_topic(cfg, world, topic, pair.topic_id, rng), topic[-1:]])
    else:
        new_topic = topic.copy()
        new_topic[-1] = -new_topic[-1]
    feats[idx, :STYLE_DIMS] = _shifted_style(cfg, latent["txt_style"], count, rng, 0.5 * cfg.source_shift)
    feats[idx, STYLE_DIMS:STYLE_DIMS + TOPIC_DIMS] = new_topic + cfg.noise * rng.standard_normal((count, TOPIC_DIMS))
    labels = np.zeros_like(pair.token_labels)
    labels[idx] = 1
    pair.token_labels = labels
    return pair


def generate_pair(cfg: GenConfig, world: _World, split: str, index: int) -> MediaPair:
    rng = np.random.default_rng([cfg.seed, SPLITS[split], index])
    types = _pick_types(cfg, rng)
    pair, latent = _genuine(cfg, world, rng)
    for kind in types:
        if kind in ("FS", "FA"):
            plant_image_manipulation(cfg, world, pair, latent, kind, rng)
        else:
            plant_text_manipulation(cfg, world, pair, latent, kind, rng)
    pair.types = types
    pair.is_fake = int(bool(types))
    n_valid = int(pair.token_mask.sum())
    pair.patch_features = pair.patch_features @ world.mixing
    pair.token_features[:n_valid] = pair.token_features[:n_valid] @ world.mixing
    pair.validate()
    return pair


def generate_dataset(cfg: GenConfig, split: str = "train", start: int = 0, stop: int | None = None) -> list[MediaPair]:
    """Pairs ``start..stop`` of a split; each index is seeded independently, so shards compose."""
    cfg.validate()
    if split not in SPLITS:
        raise ValidationError(f"unknown split {split!r}")
    total = cfg.n_train if split == "train" else cfg.n_test
    stop = total if stop is None else min(stop, total)
    world = _world(cfg)
    return [generate_pair(cfg, world, split, i) for i in range(start, stop)]


def latent_topics(cfg: GenConfig) -> np.ndarray:
    """Topic prototypes (without sentiment) in latent coordinates, for diagnostics."""
    return _world(cfg).topics


def unmix(cfg: GenConfig, feats: np.ndarray) -> np.ndarray:
    """Undo the fixed rotation: raw features back to latent coordinates."""
    return np.asarray(feats) @ _world(cfg).mixing.T


# ---------------------------------------------------------------- files


def write_jsonl(pairs: list[MediaPair], path: str | Path) -> str:
    """Write pairs one per line; returns the sha256 of the file bytes."""
    text = "".join(p.to_json() + "\n" for p in pairs)
    data = text.encode()
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read_jsonl(path: str | Path) -> list[MediaPair]:
    pairs = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                pairs.append(MediaPair.from_json(line))
            except ValidationError as e:
                raise ValidationError(f"{path}:{n}: {e}") from e
    if not pairs:
        raise ValidationError(f"{path} holds no samples")
    return pairs


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_dataset(cfg: GenConfig, out_dir: str | Path) -> dict:
    """Generate both splits into ``out_dir`` with a ``meta.json`` companion."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"config": cfg.to_dict(), "files": {}}
    for split in SPLITS:
        pairs = generate_dataset(cfg, split)
        digest = write_jsonl(pairs, out / f"{split}.jsonl")
        meta["files"][split] = {"path": f"{split}.jsonl", "count": len(pairs), "sha256": digest}
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return meta


# ---------------------------------------------------------------- batching


@dataclass
class Batch:
    patches: np.ndarray  # (B, n, d_raw)
    tokens: np.ndarray  # (B, m, d_raw)
    token_mask: np.ndarray  # (B, m)
    is_fake: np.ndarray  # (B,)
    types: np.ndarray  # (B, 4)
    boxes: np.ndarray  # (B, 4), zeros where absent
    has_box: np.ndarray  # (B,)
    token_labels: np.ndarray  # (B, m)
    patch_labels: np.ndarray  # (B, n)

    def __len__(self) -> int:
        return self.patches.shape[0]


def collate(pairs: list[MediaPair]) -> Batch:
    return Batch(
        patches=np.stack([p.patch_features for p in pairs]),
        tokens=np.stack([p.token_features for p in pairs]),
        token_mask=np.stack([p.token_mask for p in pairs]),
        is_fake=np.array([p.is_fake for p in pairs], dtype=np.int64),
        types=np.stack([p.type_vector for p in pairs]),
        boxes=np.array([p.face_box if p.face_box is not None else [0.0] * 4 for p in pairs]),
        has_box=np.array([p.face_box is not None for p in pairs]),
        token_labels=np.stack([p.token_labels for p in pairs]),
        patch_labels=np.stack([p.patch_labels for p in pairs]),
    )
