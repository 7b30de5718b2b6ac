"""Neural primitives composed from :mod:`cscl.autodiff`.

Layers register their parameters into a shared :class:`ParamStore` under a
dotted name prefix at construction time and are plain callables afterwards.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor

COS_EPS = 1e-8


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def attention(query: Tensor, key: Tensor, value: Tensor, mask=None) -> Tensor:
    """Single-head scaled dot-product attention.

    ``mask`` holds booleans broadcastable to ``(..., q, n)``; a plain
    length-n vector masks keys for every query.
    """
    d = query.shape[-1]
    if d < 1:
        raise ValueError("attention width must be >= 1")
    scores = ad.matmul(query, ad.swapaxes(key, -1, -2)) * (1.0 / np.sqrt(d))
    return ad.matmul(ad.softmax(scores, mask), value)


def mlp_apply(x: Tensor, layers) -> Tensor:
    """Apply ``[(W, b), ...]`` with GELU between layers and a linear output."""
    for i, (w, b) in enumerate(layers):
        if x.shape[-1] != w.shape[0]:
            raise ValueError(f"shape error: input width {x.shape[-1]} vs layer {i} width {w.shape[0]}")
        x = ad.matmul(x, w) + b
        if i < len(layers) - 1:
            x = ad.gelu(x)
    return x


def sincos_positional(n: int, d: int) -> np.ndarray:
    if d % 2:
        raise ValueError(f"sin-cos embedding needs an even width, got {d}")
    pos = np.arange(n, dtype=np.float64)[:, None]
    freq = 10000.0 ** (np.arange(0, d, 2, dtype=np.float64) / d)
    out = np.zeros((n, d))
    out[:, 0::2] = np.sin(pos / freq)
    out[:, 1::2] = np.cos(pos / freq)
    return out


def sincos_positional_2d(g: int, d: int) -> np.ndarray:
    """Row-major g*g grid; the first half of the width encodes the row, the second the column."""
    if d % 4:
        raise ValueError(f"2-D sin-cos embedding needs a width divisible by 4, got {d}")
    half = sincos_positional(g, d // 2)
    rows = np.repeat(half, g, axis=0)
    cols = np.tile(half, (g, 1))
    return np.concatenate([rows, cols], axis=1)


def grid_positions(n: int, d: int, grid: int | None = None) -> np.ndarray:
    """1-D table for sequences, 2-D table when ``grid`` is given (requires n == grid**2)."""
    if grid is None:
        return sincos_positional(n, d)
    if grid * grid != n:
        raise ValueError(f"{n} items do not form a {grid}x{grid} grid")
    return sincos_positional_2d(grid, d)


def cosine_consistency(a, b, eps: float = COS_EPS) -> float:
    """(cos(a, b) + 1) / 2 for plain vectors, norms floored at ``eps``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    cos = a @ b / (max(np.linalg.norm(a), eps) * max(np.linalg.norm(b), eps))
    return float(np.clip((cos + 1.0) / 2.0, 0.0, 1.0))


def unit_rows(x: Tensor, eps: float = COS_EPS) -> Tensor:
    sq = ad.tsum(x * x, axis=-1, keepdims=True)
    return x / ad.sqrt(ad.maximum(sq, eps * eps))


def consistency_scores(a: Tensor, b: Tensor, eps: float = COS_EPS) -> Tensor:
    """Pairwise (cos + 1) / 2 between rows of ``a`` (..., n, d) and ``b`` (..., m, d)."""
    ua, ub = unit_rows(a, eps), unit_rows(b, eps)
    cos = ad.matmul(ua, ad.swapaxes(ub, -1, -2))
    return ad.clip((cos + 1.0) * 0.5, 0.0, 1.0)


class Linear:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int, rng: np.random.Generator):
        self.w = store.add(f"{name}.w", xavier(rng, d_in, d_out))
        self.b = store.add(f"{name}.b", np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.w) + self.b


class MLP:
    def __init__(self, store: ParamStore, name: str, widths: list[int], rng: np.random.Generator):
        if len(widths) < 2:
            raise ValueError("MLP needs at least input and output widths")
        self.layers = [Linear(store, f"{name}.{i}", widths[i], widths[i + 1], rng)
                       for i in range(len(widths) - 1)]

    @property
    def out_layer(self) -> Linear:
        return self.layers[-1]

    def __call__(self, x: Tensor) -> Tensor:
        return mlp_apply(x, [(l.w, l.b) for l in self.layers])


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, d: int):
        self.gamma = store.add(f"{name}.g", np.ones(d))
        self.beta = store.add(f"{name}.b", np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta)


class Attention:
    """Projected single-head attention; output projection ``o`` may be zeroed."""

    def __init__(self, store: ParamStore, name: str, d: int, rng: np.random.Generator):
        self.q = Linear(store, f"{name}.q", d, d, rng)
        self.k = Linear(store, f"{name}.k", d, d, rng)
        self.v = Linear(store, f"{name}.v", d, d, rng)
        self.o = Linear(store, f"{name}.o", d, d, rng)

    def __call__(self, xq: Tensor, xkv: Tensor, mask=None) -> Tensor:
        return self.o(attention(self.q(xq), self.k(xkv), self.v(xkv), mask))


class Pooling:
    """Learned-query attention read: ``softmax(qW_q (XW_k)^T / sqrt(d)) X``.

    Values are the raw rows, so the result is a convex combination of them.
    """

    def __init__(self, store: ParamStore, name: str, d: int, rng: np.random.Generator):
        self.query = store.add(f"{name}.query", 0.02 * rng.standard_normal((1, d)))
        self.wq = store.add(f"{name}.wq", xavier(rng, d, d))
        self.wk = store.add(f"{name}.wk", xavier(rng, d, d))

    def __call__(self, x: Tensor, key_mask=None) -> Tensor:
        q = ad.matmul(self.query, self.wq)
        k = ad.matmul(x, self.wk)
        mask = None if key_mask is None else np.asarray(key_mask, bool)[..., None, :]
        return attention(q, k, x, mask)


class SelfSublayer:
    """x + Attn(LN x -> LN x)."""

    def __init__(self, store: ParamStore, name: str, d: int, rng: np.random.Generator):
        self.ln = LayerNorm(store, f"{name}.ln", d)
        self.attn = Attention(store, f"{name}.attn", d, rng)

    def __call__(self, x: Tensor, mask=None) -> Tensor:
        h = self.ln(x)
        return x + self.attn(h, h, mask)


class CrossSublayer:
    """x + Attn(LN_q x -> LN_kv ctx)."""

    def __init__(self, store: ParamStore, name: str, d: int, rng: np.random.Generator):
        self.ln_q = LayerNorm(store, f"{name}.lnq", d)
        self.ln_kv = LayerNorm(store, f"{name}.lnkv", d)
        self.attn = Attention(store, f"{name}.attn", d, rng)

    def __call__(self, x: Tensor, ctx: Tensor, mask=None) -> Tensor:
        return x + self.attn(self.ln_q(x), self.ln_kv(ctx), mask)


class MLPSublayer:
    def __init__(self, store: ParamStore, name: str, d: int, mlp_ratio: int, rng: np.random.Generator):
        self.ln = LayerNorm(store, f"{name}.ln", d)
        self.mlp = MLP(store, f"{name}.mlp", [d, mlp_ratio * d, d], rng)

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.mlp(self.ln(x))


class SelfBlock:
    """Pre-norm transformer block."""

    def __init__(self, store: ParamStore, name: str, d: int, mlp_ratio: int, rng: np.random.Generator):
        self.attn = SelfSublayer(store, f"{name}.sa", d, rng)
        self.ffn = MLPSublayer(store, f"{name}.ff", d, mlp_ratio, rng)

    def zero_outputs(self) -> None:
        zero_linear(self.attn.attn.o)
        zero_linear(self.ffn.mlp.out_layer)

    def __call__(self, x: Tensor, mask=None) -> Tensor:
        return self.ffn(self.attn(x, mask))


def zero_linear(layer: Linear) -> None:
    layer.w.data[...] = 0
    layer.b.data[...] = 0


def key_mask(mask) -> np.ndarray | None:
    """Lift a (..., n) validity mask to broadcast over queries: (..., 1, n)."""
    if mask is None:
        return None
    return np.asarray(mask, dtype=bool)[..., None, :]


def attention_params(d: int) -> int:
    return 4 * (d * d + d)


def self_sublayer_params(d: int) -> int:
    return 2 * d + attention_params(d)


def mlp_sublayer_params(d: int, mlp_ratio: int) -> int:
    return 2 * d + mlp_params([d, mlp_ratio * d, d])


def self_block_params(d: int, mlp_ratio: int) -> int:
    return self_sublayer_params(d) + mlp_sublayer_params(d, mlp_ratio)


def cross_sublayer_params(d: int) -> int:
    return 2 * (2 * d) + attention_params(d)


def mlp_params(widths: list[int]) -> int:
    return sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))
