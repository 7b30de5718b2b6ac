"""Intra-modality consistency: processor, pairwise matrix, reliable/suspicious reasoning."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .autodiff import ParamStore, Tensor


@dataclass
class SelectionResult:
    reliable_idx: np.ndarray
    suspicious_idx: np.ndarray


@dataclass
class ContextualOutput:
    processed: Tensor  # (B, n, d)
    features: Tensor  # phi(processed), (B, n, d)
    scores: Tensor  # (B, n, n)
    refined: Tensor  # (B, n, d)
    reliable: np.ndarray  # (B, n, n) bool selection masks
    suspicious: np.ndarray


def contextual_gt(labels) -> np.ndarray:
    """1 where both items share a manipulation flag, else 0."""
    labels = np.asarray(labels)
    return (labels[..., :, None] == labels[..., None, :]).astype(np.int64)


def pair_mask(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    return mask[..., :, None] & mask[..., None, :]


def rank_select(scores: np.ndarray, valid: np.ndarray, k: np.ndarray | int, largest: bool) -> np.ndarray:
    """Boolean mask of the ``k`` highest (or lowest) valid entries along the last axis.

    Ties go to the lower index. ``k`` broadcasts against ``scores.shape[:-1]``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    key = np.where(valid, -scores if largest else scores, np.inf)
    order = np.argsort(key, axis=-1, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.broadcast_to(np.arange(scores.shape[-1]), order.shape), axis=-1)
    return ranks < np.asarray(k)[..., None]


def select_reliable_suspicious(M, anchor: int, k: int, mask=None) -> SelectionResult:
    """Reliable = k most consistent items of row ``anchor``; suspicious = k least.

    The anchor itself and invalid items are never selected; k is clamped to
    the number of remaining candidates.
    """
    M = np.asarray(M, dtype=np.float64)
    n = M.shape[-1]
    if k < 1:
        raise ValueError("k must be >= 1")
    valid = np.ones(n, bool) if mask is None else np.asarray(mask, bool).copy()
    valid[anchor] = False
    if valid.sum() < 1:
        raise ValueError("nothing to select")
    k_eff = min(k, int(valid.sum()))
    row = M[anchor]
    rel = np.flatnonzero(rank_select(row, valid, k_eff, largest=True))
    sus = np.flatnonzero(rank_select(row, valid, k_eff, largest=False))
    order_r = np.lexsort((rel, -row[rel]))
    order_s = np.lexsort((sus, row[sus]))
    return SelectionResult(rel[order_r], sus[order_s])


def selection_masks(M: np.ndarray, mask: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Batched per-anchor selection over ``(B, n, n)`` scores.

    Returns ``(reliable, suspicious)`` boolean masks of shape ``(B, n, n)``;
    row ``i`` marks the keys anchor ``i`` may attend. Invalid anchors get a
    self-only row so downstream attention stays well-defined.
    """
    M = np.asarray(M)
    mask = np.asarray(mask, dtype=bool)
    n = M.shape[-1]
    eye = np.eye(n, dtype=bool)
    n_valid = mask.sum(axis=-1)
    if (n_valid < 2).any():
        raise ValueError("nothing to select")
    cand = mask[..., None, :] & ~eye
    k_eff = np.minimum(k, n_valid - 1)[..., None]
    rel = rank_select(M, cand, k_eff, largest=True)
    sus = rank_select(M, cand, k_eff, largest=False)
    invalid_anchor = ~mask[..., :, None] & eye
    rel = np.where(mask[..., :, None], rel, invalid_anchor)
    sus = np.where(mask[..., :, None], sus, invalid_anchor)
    return rel, sus


class ConsistencyProcessor:
    """Learned sin-cos positions (sin-cos -> MLP) plus self-attention blocks."""

    def __init__(self, store: ParamStore, name: str, d: int, n: int, depth: int, mlp_ratio: int,
                 rng: np.random.Generator, grid: int | None = None):
        self.sincos = nn.grid_positions(n, d, grid).astype(store.dtype)
        self.pos_mlp = nn.MLP(store, f"{name}.pos", [d, d, d], rng)
        self.blocks = [nn.SelfBlock(store, f"{name}.block{i}", d, mlp_ratio, rng) for i in range(depth)]

    def positions(self) -> Tensor:
        return self.pos_mlp(Tensor(self.sincos))

    def __call__(self, emb: Tensor, mask: np.ndarray | None = None) -> Tensor:
        x = emb + self.positions()
        km = nn.key_mask(mask)
        for blk in self.blocks:
            x = blk(x, km)
        return x


class ForgeryAwareReasoning:
    """Two attention-plus-residual blocks over reliable and suspicious key sets.

    Keys and values always come from the unrefined context rows; the query
    is refined sequentially (reliable block first unless flipped).
    """

    def __init__(self, store: ParamStore, name: str, d: int, rng: np.random.Generator,
                 reliable_first: bool = True):
        self.reliable = nn.CrossSublayer(store, f"{name}.rel", d, rng)
        self.suspicious = nn.CrossSublayer(store, f"{name}.sus", d, rng)
        self.reliable_first = reliable_first

    def zero_outputs(self) -> None:
        nn.zero_linear(self.reliable.attn.o)
        nn.zero_linear(self.suspicious.attn.o)

    def __call__(self, x: Tensor, ctx: Tensor, rel_mask: np.ndarray, sus_mask: np.ndarray) -> Tensor:
        steps = [(self.reliable, rel_mask), (self.suspicious, sus_mask)]
        if not self.reliable_first:
            steps.reverse()
        for block, m in steps:
            x = block(x, ctx, m)
        return x


def build_contextual_matrix(phi: nn.MLP, seq: Tensor) -> tuple[Tensor, Tensor]:
    """Map rows through ``phi`` once and score every pair; returns (features, scores)."""
    feats = phi(seq)
    return feats, nn.consistency_scores(feats, feats)


class ContextualDecoder:
    def __init__(self, store: ParamStore, name: str, d: int, n: int, depth: int, mlp_ratio: int,
                 k: int, rng: np.random.Generator, reliable_first: bool = True, grid: int | None = None):
        self.k = k
        self.processor = ConsistencyProcessor(store, f"{name}.proc", d, n, depth, mlp_ratio, rng, grid)
        self.phi = nn.MLP(store, f"{name}.phi", [d, d, d], rng)
        self.reasoning = ForgeryAwareReasoning(store, f"{name}.far", d, rng, reliable_first)

    def __call__(self, emb: Tensor, mask: np.ndarray) -> ContextualOutput:
        processed = self.processor(emb, mask)
        feats, scores = build_contextual_matrix(self.phi, processed)
        rel, sus = selection_masks(scores.data, mask, self.k)
        refined = self.reasoning(processed, processed, rel, sus)
        return ContextualOutput(processed, feats, scores, refined, rel, sus)

    @staticmethod
    def param_count(d: int, depth: int, mlp_ratio: int) -> int:
        return (nn.mlp_params([d, d, d]) + depth * nn.self_block_params(d, mlp_ratio)
                + nn.mlp_params([d, d, d]) + 2 * nn.cross_sublayer_params(d))
