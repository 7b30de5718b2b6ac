"""Uni-modal encoders and the co-attention interaction stack."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import ParamStore, Tensor


@dataclass
class ModalityInput:
    """Raw item features ``(B, n, d_raw)`` plus a ``(B, n)`` validity mask."""

    features: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.features.ndim == 2:
            self.features = self.features[None]
            self.mask = self.mask[None]
        if self.mask.shape != self.features.shape[:2]:
            raise ValueError(f"mask shape {self.mask.shape} does not match features {self.features.shape}")
        if not self.mask.any(axis=1).all():
            raise ValueError("every sample needs at least one valid item")


@dataclass
class EncoderOutput:
    v_cls: Tensor  # (B, d)
    t_cls: Tensor  # (B, d)
    v_pat: Tensor  # (B, n, d)
    t_tok: Tensor  # (B, m, d)
    text_mask: np.ndarray  # (B, m)


class UniModalEncoder:
    """Linear projection, learned class token, sin-cos positions, self-attention blocks.

    Invalid items are zeroed before projection and masked as keys, so their
    raw content cannot reach any output row.
    """

    def __init__(self, store: ParamStore, name: str, d_raw: int, d: int, n_items: int,
                 depth: int, mlp_ratio: int, rng: np.random.Generator, grid: int | None = None):
        self.d_raw, self.n_items = d_raw, n_items
        self.proj = nn.Linear(store, f"{name}.proj", d_raw, d, rng)
        self.cls = store.add(f"{name}.cls", 0.02 * rng.standard_normal((1, 1, d)))
        if grid is None:
            pos = nn.sincos_positional(n_items + 1, d)
        else:
            # the class token sits outside the grid and gets no position
            pos = np.concatenate([np.zeros((1, d)), nn.grid_positions(n_items, d, grid)])
        self.pos = pos.astype(store.dtype)
        self.blocks = [nn.SelfBlock(store, f"{name}.block{i}", d, mlp_ratio, rng) for i in range(depth)]

    def __call__(self, inp: ModalityInput) -> tuple[Tensor, np.ndarray]:
        feats = inp.features
        if feats.shape[1:] != (self.n_items, self.d_raw):
            raise ValueError(f"expected items of shape ({self.n_items}, {self.d_raw}), got {feats.shape[1:]}")
        dtype = self.cls.dtype
        x = np.where(inp.mask[..., None], feats, 0).astype(dtype)
        b = x.shape[0]
        h = self.proj(ad.Tensor(x))
        cls = ad.broadcast_to(self.cls, (b, 1, h.shape[-1]))
        h = ad.concat([cls, h], axis=1) + self.pos
        mask = np.concatenate([np.ones((b, 1), bool), inp.mask], axis=1)
        km = nn.key_mask(mask)
        for blk in self.blocks:
            h = blk(h, km)
        return h, mask


class CoAttentionLayer:
    """Self-attention, then cross-attention to the other stream, then MLP, per stream."""

    def __init__(self, store: ParamStore, name: str, d: int, mlp_ratio: int, rng: np.random.Generator):
        self.img_self = nn.SelfSublayer(store, f"{name}.img.sa", d, rng)
        self.txt_self = nn.SelfSublayer(store, f"{name}.txt.sa", d, rng)
        self.img_cross = nn.CrossSublayer(store, f"{name}.img.ca", d, rng)
        self.txt_cross = nn.CrossSublayer(store, f"{name}.txt.ca", d, rng)
        self.img_ffn = nn.MLPSublayer(store, f"{name}.img.ff", d, mlp_ratio, rng)
        self.txt_ffn = nn.MLPSublayer(store, f"{name}.txt.ff", d, mlp_ratio, rng)

    def __call__(self, v: Tensor, t: Tensor, text_mask: np.ndarray) -> tuple[Tensor, Tensor]:
        km = nn.key_mask(text_mask)
        v = self.img_self(v)
        t = self.txt_self(t, km)
        v, t = self.img_cross(v, t, km), self.txt_cross(t, v)
        return self.img_ffn(v), self.txt_ffn(t)


def cross_modal_interact(layers: list[CoAttentionLayer], img: Tensor, txt: Tensor,
                         text_mask: np.ndarray) -> EncoderOutput:
    """Run the co-attention stack on class-prefixed streams and split them.

    ``text_mask`` covers the class row too, i.e. has shape ``(B, m + 1)``.
    """
    if img.shape[-1] != txt.shape[-1]:
        raise ValueError(f"width mismatch: image {img.shape[-1]} vs text {txt.shape[-1]}")
    for layer in layers:
        img, txt = layer(img, txt, text_mask)
    return EncoderOutput(
        v_cls=img[:, 0, :], t_cls=txt[:, 0, :],
        v_pat=img[:, 1:, :], t_tok=txt[:, 1:, :],
        text_mask=np.asarray(text_mask[:, 1:], dtype=bool),
    )


class MultimodalEncoder:
    def __init__(self, store: ParamStore, d_raw: int, d: int, n_patches: int, text_len: int,
                 enc_depth: int, coattn_layers: int, mlp_ratio: int, rng: np.random.Generator,
                 grid: int | None = None):
        self.image = UniModalEncoder(store, "enc.img", d_raw, d, n_patches, enc_depth, mlp_ratio, rng, grid)
        self.text = UniModalEncoder(store, "enc.txt", d_raw, d, text_len, enc_depth, mlp_ratio, rng)
        self.layers = [CoAttentionLayer(store, f"enc.co{i}", d, mlp_ratio, rng) for i in range(coattn_layers)]

    def encode_image(self, inp: ModalityInput) -> Tensor:
        return self.image(inp)[0]

    def encode_text(self, inp: ModalityInput) -> tuple[Tensor, np.ndarray]:
        return self.text(inp)

    def __call__(self, image: ModalityInput, text: ModalityInput) -> EncoderOutput:
        img = self.encode_image(image)
        txt, tmask = self.encode_text(text)
        return cross_modal_interact(self.layers, img, txt, tmask)

    @staticmethod
    def param_count(d_raw: int, d: int, enc_depth: int, coattn_layers: int, mlp_ratio: int) -> int:
        per_encoder = nn.mlp_params([d_raw, d]) + d + enc_depth * nn.self_block_params(d, mlp_ratio)
        per_layer = 2 * (nn.self_sublayer_params(d) + nn.cross_sublayer_params(d)
                         + nn.mlp_sublayer_params(d, mlp_ratio))
        return 2 * per_encoder + coattn_layers * per_layer
