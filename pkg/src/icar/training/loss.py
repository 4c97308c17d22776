"""Contrastive losses: symmetric InfoNCE and the dual-path combination.

Every image in a batch contributes two vision embeddings — one from its
early exit, one from the full stack — and both are pulled toward the same
text embedding. The text encoder runs once per batch; its output feeds
both loss terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from icar.errors import ContractError
from icar.numerics import Tensor, ops

#: stats of the most recent similarity matrix, for divergence diagnostics
_LAST_SIM_STATS: dict = {}


@dataclass(frozen=True)
class LossPair:
    loss_early: float
    loss_full: float
    loss_total: float


@dataclass(frozen=True)
class DualPathConfig:
    alpha: float = 0.5
    temperature: float = 0.07
    batch_size: int = 32
    epochs: int = 10
    lr_backbone: float = 1e-4
    lr_heads: float = 1e-3
    weight_decay: float = 0.01
    seed: int = 0
    exit_rule: str = "routed"  # routed: per-sample; fixed: every sample early
    exit_layer: int = 4  # the 8-of-24 analog at depth 12
    threshold: float = 0.5
    lr_schedule: str = "constant"  # constant, or cosine decay with warmup

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractError(f"alpha must lie in [0,1], got {self.alpha}")
        if self.temperature <= 0.0:
            raise ContractError(
                f"temperature must be > 0, got {self.temperature}"
            )
        if not 0.0 <= self.lr_backbone <= self.lr_heads:
            raise ContractError(
                f"need lr_heads >= lr_backbone >= 0, got "
                f"{self.lr_heads} / {self.lr_backbone}"
            )
        if self.exit_rule not in ("routed", "fixed"):
            raise ContractError(
                f"exit_rule must be 'routed' or 'fixed', got {self.exit_rule!r}"
            )
        if self.lr_schedule not in ("constant", "cosine"):
            raise ContractError(
                f"lr_schedule must be 'constant' or 'cosine', got "
                f"{self.lr_schedule!r}"
            )
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ContractError(f"epochs must be >= 0, got {self.epochs}")


def last_similarity_stats() -> dict:
    return dict(_LAST_SIM_STATS)


def clip_contrastive_loss(img_embs: Tensor, txt_embs: Tensor,
                          temperature: float = 0.07) -> Tensor:
    """Symmetric InfoNCE over the B x B cosine matrix, diagonal positive.

    Mean of the image->text and text->image cross-entropies. B=1 gives
    exactly 0 (a softmax over one logit).
    """
    if temperature <= 0.0:
        raise ContractError(f"temperature must be > 0, got {temperature}")
    if img_embs.shape != txt_embs.shape or img_embs.ndim != 2:
        raise ContractError(
            f"need matched (B,e) batches, got {img_embs.shape} and "
            f"{txt_embs.shape}"
        )
    for name, embs in (("image", img_embs), ("text", txt_embs)):
        norms = np.linalg.norm(embs.data, axis=1)
        worst = np.abs(norms - 1.0).max()
        if worst > 1e-6:
            raise ContractError(
                f"{name} embeddings must be unit-norm, worst deviation {worst:.3g}"
            )
    b = img_embs.shape[0]
    sims = ops.matmul(img_embs, ops.transpose(txt_embs, (1, 0)))
    _LAST_SIM_STATS.update(
        batch=b, min=float(sims.data.min()), max=float(sims.data.max()),
        mean=float(sims.data.mean()),
        diag_mean=float(np.diagonal(sims.data).mean()))
    logits = ops.scale(sims, 1.0 / temperature)
    diag = np.arange(b, dtype=np.int64)
    i2t = ops.neg(ops.mean_all(ops.pick(ops.log_softmax(logits), diag)))
    t2i = ops.neg(ops.mean_all(
        ops.pick(ops.log_softmax(ops.transpose(logits, (1, 0))), diag)))
    return ops.scale(ops.add(i2t, t2i), 0.5)


def select_exits(complexity_model, images: np.ndarray,
                 config: DualPathConfig, depth: int) -> np.ndarray:
    """Per-sample early-exit layers for a batch, outside any tape.

    routed: simple images (score < threshold) use config.exit_layer, the
    rest the full depth. fixed: everyone uses config.exit_layer.
    """
    if config.exit_rule == "fixed":
        return np.full(len(images), config.exit_layer, dtype=np.int64)
    if complexity_model is None:
        raise ContractError("routed exit rule needs a complexity model")
    from icar.complexity.model import classify_scores

    scores = classify_scores(complexity_model, images)
    return np.where(scores < config.threshold, config.exit_layer,
                    depth).astype(np.int64)


def dual_path_loss(vit, text_encoder, complexity_model, batch,
                   config: DualPathConfig = DualPathConfig()):
    """Both-path loss for a batch of samples.

    Returns ``(pair, total, exits)``: the scalar LossPair, the loss_total
    Tensor (differentiable if called under a Tape), and the per-sample
    early-exit layers actually used.
    """
    images = np.stack([s.image for s in batch])
    tokens = [s.tokens for s in batch]
    exits = select_exits(complexity_model, images, config, vit.config.depth)
    txt = text_encoder.encode(tokens)
    early = vit.encode_mixed(images, exits)
    full = vit.encode(images, vit.config.depth)
    loss_early = clip_contrastive_loss(early, txt, config.temperature)
    loss_full = clip_contrastive_loss(full, txt, config.temperature)
    total = ops.add(ops.scale(loss_early, config.alpha),
                    ops.scale(loss_full, 1.0 - config.alpha))
    pair = LossPair(loss_early=loss_early.item(), loss_full=loss_full.item(),
                    loss_total=total.item())
    return pair, total, exits
