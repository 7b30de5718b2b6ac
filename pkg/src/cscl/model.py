"""Full detector: encoder -> contextual decoders -> semantic decoders -> heads.

Each of the four decoders (contextual/semantic x image/text) can be
switched off. A disabled decoder registers no parameters and contributes
no loss term; with all four off the model is the plain baseline: attention
pooling over encoder outputs and a per-token grounding head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import ParamStore, Tensor
from .config import RunConfig
from .contextual import ContextualDecoder, ContextualOutput, contextual_gt, pair_mask
from .data import Batch
from .encoder import EncoderOutput, ModalityInput, MultimodalEncoder
from .heads import (BinaryHead, ImageHead, LossBreakdown, LossWeights, TextHead, TokenHead,
                    bce_with_logits, consistency_loss, subtask_losses)
from .semantic import SemanticBranch, SemanticOutput, semantic_gt


@dataclass
class Forward:
    enc: EncoderOutput
    ctx_img: ContextualOutput | None
    ctx_txt: ContextualOutput | None
    sem_img: SemanticOutput | None
    sem_txt: SemanticOutput | None
    v_fine: Tensor  # image rows entering the semantic stage
    t_fine: Tensor
    v_a: Tensor  # (B, d)
    t_a: Tensor
    binary_logit: Tensor  # (B,)
    bbox: Tensor  # (B, 4) cxcywh in [0, 1]
    type_logits: Tensor  # (B, 4) ordered FS, FA, TS, TA
    token_logit: Tensor | None  # (B, m), only without the text semantic decoder

    def token_scores(self) -> np.ndarray:
        """Per-token genuineness in [0, 1]; low means manipulated."""
        if self.sem_txt is not None:
            return np.asarray(self.sem_txt.scores.data, dtype=np.float64)
        p = 1.0 / (1.0 + np.exp(-np.asarray(self.token_logit.data, dtype=np.float64)))
        return 1.0 - p


class CSCLModel:
    def __init__(self, cfg: RunConfig, n_patches: int, text_len: int, d_raw: int):
        self.cfg = cfg
        self.n_patches, self.text_len, self.d_raw = n_patches, text_len, d_raw
        self.params = ParamStore(np.float64 if cfg.precision == "float64" else np.float32)
        rng = np.random.default_rng(cfg.seed)
        p, d = self.params, cfg.d
        grid = math.isqrt(n_patches)
        if grid * grid != n_patches:
            raise ValueError(f"{n_patches} patches do not form a square grid")
        self.encoder = MultimodalEncoder(p, d_raw, d, n_patches, text_len, cfg.enc_depth,
                                         cfg.coattn_layers, cfg.mlp_ratio, rng, grid)
        self.ctx_img = (ContextualDecoder(p, "ctx.img", d, n_patches, cfg.proc_depth, cfg.mlp_ratio,
                                          cfg.k_image, rng, cfg.reliable_first, grid) if cfg.ci else None)
        self.ctx_txt = (ContextualDecoder(p, "ctx.txt", d, text_len, cfg.proc_depth, cfg.mlp_ratio,
                                          cfg.k_text, rng, cfg.reliable_first) if cfg.ct else None)
        self.pool_img = nn.Pooling(p, "pool.img", d, rng)
        self.pool_txt = nn.Pooling(p, "pool.txt", d, rng)
        self.sem_img = SemanticBranch(p, "sem.img", d, cfg.k_image, rng, cfg.reliable_first) if cfg.si else None
        self.sem_txt = SemanticBranch(p, "sem.txt", d, cfg.k_text, rng, cfg.reliable_first) if cfg.st else None
        self.binary_head = BinaryHead(p, d, rng)
        self.image_head = ImageHead(p, d, rng)
        self.text_head = TextHead(p, d, rng)
        self.token_head = None if cfg.st else TokenHead(p, d, rng)
        self.weights = LossWeights(cfg.w_binary, cfg.w_type, cfg.w_bbox, cfg.w_c, cfg.w_s, cfg.w_token)

    @property
    def grid(self) -> int:
        return int(round(np.sqrt(self.n_patches)))

    def forward(self, batch: Batch) -> Forward:
        b = len(batch)
        img_in = ModalityInput(batch.patches, np.ones((b, self.n_patches), bool))
        txt_in = ModalityInput(batch.tokens, batch.token_mask)
        enc = self.encoder(img_in, txt_in)
        tmask = enc.text_mask
        pmask = np.ones((b, self.n_patches), bool)

        ctx_img = self.ctx_img(enc.v_pat, pmask) if self.ctx_img else None
        ctx_txt = self.ctx_txt(enc.t_tok, tmask) if self.ctx_txt else None
        v_fine = ctx_img.refined if ctx_img else enc.v_pat
        t_fine = ctx_txt.refined if ctx_txt else enc.t_tok

        pooled_v = self.pool_img(v_fine)
        pooled_t = self.pool_txt(t_fine, tmask)
        sem_img = self.sem_img(v_fine, pmask, pooled_v, pooled_t) if self.sem_img else None
        sem_txt = self.sem_txt(t_fine, tmask, pooled_t, pooled_v) if self.sem_txt else None
        v_a = sem_img.aggregated if sem_img else pooled_v[:, 0, :]
        t_a = sem_txt.aggregated if sem_txt else pooled_t[:, 0, :]

        logit = self.binary_head(enc.v_cls, enc.t_cls)
        bbox, img_types = self.image_head(v_a)
        txt_types = self.text_head(t_a)
        types = ad.concat([img_types, txt_types], axis=-1)
        token_logit = self.token_head(t_fine) if self.token_head else None
        return Forward(enc, ctx_img, ctx_txt, sem_img, sem_txt, v_fine, t_fine, v_a, t_a,
                       logit, bbox, types, token_logit)

    def loss(self, batch: Batch, out: Forward | None = None) -> LossBreakdown:
        out = out or self.forward(batch)
        tmask = batch.token_mask
        dtype = self.params.dtype
        c_terms, s_terms = [], []
        if out.ctx_img is not None:
            c_terms.append(consistency_loss(out.ctx_img.scores, contextual_gt(batch.patch_labels), batch_dims=1))
        if out.ctx_txt is not None:
            c_terms.append(consistency_loss(out.ctx_txt.scores, contextual_gt(batch.token_labels),
                                            pair_mask(tmask), batch_dims=1))
        if out.sem_img is not None:
            s_terms.append(consistency_loss(out.sem_img.scores, semantic_gt(batch.patch_labels), batch_dims=1))
        if out.sem_txt is not None:
            s_terms.append(consistency_loss(out.sem_txt.scores, semantic_gt(batch.token_labels),
                                            tmask, batch_dims=1))
        l_c = _sum(c_terms, dtype)
        l_s = _sum(s_terms, dtype)
        l_tok = None
        if out.token_logit is not None:
            w = tmask.astype(dtype)
            per = ad.tsum(bce_with_logits(out.token_logit, batch.token_labels) * w, axis=-1) / w.sum(axis=-1)
            l_tok = ad.mean(per)
        return subtask_losses(out.binary_logit, out.type_logits, out.bbox, batch.is_fake, batch.types,
                              batch.boxes, batch.has_box, l_c, l_s, l_tok, self.weights)

    def param_count(self) -> int:
        """Closed-form parameter count for the configured variant."""
        cfg, d = self.cfg, self.cfg.d
        total = MultimodalEncoder.param_count(self.d_raw, d, cfg.enc_depth, cfg.coattn_layers, cfg.mlp_ratio)
        total += (cfg.ci + cfg.ct) * ContextualDecoder.param_count(d, cfg.proc_depth, cfg.mlp_ratio)
        total += 2 * (d + 2 * d * d)  # pooling queries and projections
        total += (cfg.si + cfg.st) * SemanticBranch.param_count(d)
        total += nn.mlp_params([2 * d, d, 1]) + nn.mlp_params([d, d, 4]) + 2 * nn.mlp_params([d, d, 2])
        if not cfg.st:
            total += nn.mlp_params([d, d, 1])
        return total


def _sum(terms: list[Tensor], dtype) -> Tensor | None:
    if not terms:
        return None
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total
