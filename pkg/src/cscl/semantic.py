"""Cross-modal consistency: global embeddings, per-item scores, aggregation, threshold filter."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .autodiff import ParamStore, Tensor
from .contextual import ForgeryAwareReasoning, rank_select


@dataclass
class SemanticOutput:
    fine_features: Tensor  # phi(fine), (B, n, d)
    global_features: Tensor  # phi(global of the other modality), (B, 1, d)
    scores: Tensor  # (B, n)
    aggregated: Tensor  # (B, d)
    reliable: np.ndarray  # (B, 1, n)
    suspicious: np.ndarray


def semantic_gt(labels) -> np.ndarray:
    """1 for genuine items, 0 for manipulated ones."""
    return 1 - np.asarray(labels, dtype=np.int64)


def threshold_filter(scores, mask, tau: float) -> np.ndarray:
    """Flag an item as manipulated iff its score is strictly below ``tau``."""
    scores = np.asarray(scores)
    mask = np.ones(scores.shape, bool) if mask is None else np.asarray(mask, bool)
    return (scores < tau) & mask


def aggregate_global(pool: nn.Pooling, mapper: nn.MLP | None, tokens: Tensor, mask=None) -> Tensor:
    """Learned-query attention read followed by an MLP, ``(B, n, d) -> (B, 1, d)``."""
    pooled = pool(tokens, mask)
    return pooled if mapper is None else mapper(pooled)


def build_semantic_vector(phi: nn.MLP, fine: Tensor, global_other: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Score every fine row against the other modality's global embedding.

    Returns ``(phi(fine), phi(global), scores)`` with scores of shape ``(B, n)``.
    """
    f = phi(fine)
    g = phi(global_other)
    s = nn.consistency_scores(f, g)
    return f, g, s[..., 0]


def aggregate_masks(scores: np.ndarray, mask: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Global top-/bottom-k by semantic score, as ``(B, 1, n)`` key masks."""
    mask = np.asarray(mask, dtype=bool)
    n_valid = mask.sum(axis=-1)
    if (n_valid < 1).any():
        raise ValueError("nothing to aggregate")
    k_eff = np.minimum(k, n_valid)
    rel = rank_select(scores, mask, k_eff, largest=True)
    sus = rank_select(scores, mask, k_eff, largest=False)
    return rel[..., None, :], sus[..., None, :]


def forgery_aware_aggregate(reasoning: ForgeryAwareReasoning, pooled: Tensor, fine: Tensor,
                            scores: np.ndarray, mask: np.ndarray, k: int) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Refine the pooled ``(B, 1, d)`` query against the k most and least consistent rows."""
    rel, sus = aggregate_masks(scores, mask, k)
    return reasoning(pooled, fine, rel, sus), rel, sus


class SemanticBranch:
    """Scores one modality's fine rows against the other's global embedding.

    Owns the mapper turning the other modality's pooled read into its
    global embedding, the shared scoring MLP, and the aggregating blocks.
    """

    def __init__(self, store: ParamStore, name: str, d: int, k: int, rng: np.random.Generator,
                 reliable_first: bool = True):
        self.k = k
        self.global_mlp = nn.MLP(store, f"{name}.global", [d, d, d], rng)
        self.phi = nn.MLP(store, f"{name}.phi", [d, d, d], rng)
        self.reasoning = ForgeryAwareReasoning(store, f"{name}.faa", d, rng, reliable_first)

    def __call__(self, fine: Tensor, mask: np.ndarray, pooled_self: Tensor, pooled_other: Tensor) -> SemanticOutput:
        g = self.global_mlp(pooled_other)
        f_feat, g_feat, scores = build_semantic_vector(self.phi, fine, g)
        agg, rel, sus = forgery_aware_aggregate(self.reasoning, pooled_self, fine, scores.data, mask, self.k)
        return SemanticOutput(f_feat, g_feat, scores, agg[:, 0, :], rel, sus)

    @staticmethod
    def param_count(d: int) -> int:
        return 2 * nn.mlp_params([d, d, d]) + 2 * nn.cross_sublayer_params(d)
