"""Run and generator configuration.

Both configs are flat dataclasses loaded from JSON; unknown keys are
rejected so a typo never silently falls back to a default.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path


class ValidationError(ValueError):
    """Bad configuration or dataset content."""


def _from_dict(cls, raw: dict):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ValidationError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    obj = cls(**raw)
    obj.validate()
    return obj


@dataclass
class RunConfig:
    # model
    d: int = 64
    enc_depth: int = 1
    coattn_layers: int = 2
    proc_depth: int = 2
    mlp_ratio: int = 2
    k_image: int = 4
    k_text: int = 2
    tau: float = 0.5
    reliable_first: bool = True
    # ablation switches: contextual/semantic decoder on image/text
    ci: bool = True
    ct: bool = True
    si: bool = True
    st: bool = True
    # optimizer
    lr: float = 1e-3
    weight_decay: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    # loss weights
    w_binary: float = 1.0
    w_type: float = 1.0
    w_bbox: float = 1.0
    w_c: float = 1.0
    w_s: float = 1.0
    w_token: float = 1.0
    precision: str = "float32"
    train_data: str | None = None
    test_data: str | None = None

    def validate(self) -> None:
        positive = ["d", "enc_depth", "mlp_ratio", "k_image", "k_text", "epochs", "batch_size"]
        for name in positive:
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        for name in ["coattn_layers", "proc_depth", "weight_decay", "lr",
                     "w_binary", "w_type", "w_bbox", "w_c", "w_s", "w_token"]:
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        if self.d % 4:
            raise ValidationError("d must be divisible by 4 (2-D sin-cos positions)")
        if not 0.0 < self.tau < 1.0:
            raise ValidationError("tau must lie in (0, 1)")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValidationError("betas must lie in [0, 1)")
        if self.precision not in ("float32", "float64"):
            raise ValidationError("precision must be float32 or float64")

    @property
    def is_baseline(self) -> bool:
        return not (self.ci or self.ct or self.si or self.st)

    def with_ablation(self, ci: bool, ct: bool, si: bool, st: bool) -> "RunConfig":
        return replace(self, ci=ci, ct=ct, si=si, st=st)

    def baseline(self) -> "RunConfig":
        return self.with_ablation(False, False, False, False)

    @classmethod
    def paper_scale(cls) -> "RunConfig":
        """Published full-scale settings, kept for reference only."""
        return cls(d=768, enc_depth=12, coattn_layers=6, proc_depth=3, mlp_ratio=4,
                   k_image=16, k_text=8, lr=1e-5, weight_decay=0.02, epochs=50,
                   batch_size=32, precision="float32")

    @classmethod
    def tiny(cls) -> "RunConfig":
        """Gradient-check scale: d=16, k=2, single layers, 64-bit."""
        return cls(d=16, enc_depth=1, coattn_layers=1, proc_depth=1, mlp_ratio=2,
                   k_image=2, k_text=2, precision="float64", batch_size=2, epochs=1)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        return _from_dict(cls, raw)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ValidationError(f"config {path} is not valid JSON: {e}") from e
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return asdict(self)


TYPE_NAMES = ("FS", "FA", "TS", "TA")


@dataclass
class GenConfig:
    n_train: int = 2000
    n_test: int = 500
    grid: int = 8
    text_len: int = 16
    min_text_len: int = 8
    d_raw: int = 32
    genuine_fraction: float = 0.337
    # relative frequency of FS, FA, TS, TA among manipulated pairs
    type_weights: list[float] = field(default_factory=lambda: [0.25, 0.25, 0.25, 0.25])
    both_fraction: float = 0.25
    source_shift: float = 3.0
    source_scale: float = 1.5
    topic_mismatch: float = 1.0
    noise: float = 0.5
    # std of the item-specific content dims
    content_scale: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.n_train < 1 or self.n_test < 1:
            raise ValidationError("split counts must be > 0")
        if self.grid < 2:
            raise ValidationError("grid must be >= 2")
        if not 2 <= self.min_text_len <= self.text_len:
            raise ValidationError("need 2 <= min_text_len <= text_len")
        if self.d_raw < 20:
            raise ValidationError("d_raw must be >= 20 (8 style + 12 topic dims)")
        for name in ("source_scale", "noise", "content_scale"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        for name in ("genuine_fraction", "both_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must be a probability")
        w = self.type_weights
        if len(w) != 4 or any(x < 0 or x > 1 for x in w) or sum(w) <= 0:
            raise ValidationError("type_weights needs 4 probabilities with a positive sum")

    @classmethod
    def from_dict(cls, raw: dict) -> "GenConfig":
        return _from_dict(cls, raw)

    @classmethod
    def load(cls, path: str | Path) -> "GenConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ValidationError(f"config {path} is not valid JSON: {e}") from e
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return asdict(self)
