"""Training loop for complexity models (MSE or cross-entropy)."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from icar.complexity import metrics
from icar.complexity.model import ComplexityModel
from icar.errors import ContractError, NonFiniteError, TrainingDivergedError
from icar.numerics import AdamW, Tape, Tensor, backward, ops


@dataclass(frozen=True)
class ComplexityTrainConfig:
    epochs: int = 12
    batch_size: int = 32
    lr: float = 3e-3
    weight_decay: float = 0.01
    seed: int = 0
    augment_flips: bool = True
    augment_crops: bool = False
    augment_jitter: bool = False
    early_stop_patience: int = 3


def _augment(images: np.ndarray, cfg: ComplexityTrainConfig,
             rng: np.random.Generator) -> np.ndarray:
    out = images.copy()
    if cfg.augment_flips:
        flip = rng.uniform(size=len(out)) < 0.5
        out[flip] = out[flip][:, :, :, ::-1]
    if cfg.augment_crops:
        pad = np.pad(out, ((0, 0), (0, 0), (2, 2), (2, 2)), mode="edge")
        for i in range(len(out)):
            dy, dx = rng.integers(0, 5, size=2)
            out[i] = pad[i, :, dy:dy + out.shape[2], dx:dx + out.shape[3]]
    if cfg.augment_jitter:
        gains = rng.uniform(0.9, 1.1, size=(len(out), 3, 1, 1))
        out = np.clip(out * gains, 0.0, 1.0)
    return out


def _loss(model: ComplexityModel, images: np.ndarray, scores: np.ndarray,
          labels: np.ndarray) -> Tensor:
    out = model.forward(images)
    if model.head == "regression":
        pred = ops.sigmoid(ops.reshape(out, (len(images),)))
        err = ops.sub(pred, Tensor(scores))
        return ops.mean_all(ops.mul(err, err))
    logp = ops.log_softmax(out)
    return ops.neg(ops.mean_all(ops.pick(logp, labels.astype(np.int64))))


def _val_metric(model: ComplexityModel, images, scores, labels) -> float:
    """F1 at threshold 0.5 for binary heads, PCC for regression heads."""
    from icar.complexity.model import classify_scores, predict_score

    if model.head == "binary":
        return metrics.eval_binary(classify_scores(model, images), labels)["f1"]
    return metrics.eval_regression(predict_score(model, images), scores)["pcc"]


def train_complexity(model: ComplexityModel, train_samples, val_samples,
                     config: ComplexityTrainConfig = ComplexityTrainConfig()):
    """Fit the model; returns (model, history) with the best-val parameters.

    History has one row per epoch: epoch index, mean train loss, and the
    validation metric (F1 for binary, PCC for regression). Early-stops when
    the val metric has not improved for ``early_stop_patience`` epochs.
    """
    if config.epochs < 0:
        raise ContractError(f"epochs must be >= 0, got {config.epochs}")
    if (config.epochs > 0) and (not train_samples or not val_samples):
        raise ContractError("training needs nonempty train and val splits")

    history: list[dict] = []
    if config.epochs == 0:
        return model, history

    tr_images = np.stack([s.image for s in train_samples])
    tr_scores = np.array([s.score for s in train_samples])
    tr_labels = np.array([s.label for s in train_samples])
    va_images = np.stack([s.image for s in val_samples])
    va_scores = np.array([s.score for s in val_samples])
    va_labels = np.array([s.label for s in val_samples])

    opt = AdamW([{"params": model.parameters(), "lr": config.lr}],
                weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    best_metric, best_params, since_best = -np.inf, None, 0

    for epoch in range(config.epochs):
        order = rng.permutation(len(tr_images))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = _augment(tr_images[idx], config, rng)
            try:
                with Tape() as tape:
                    loss = _loss(model, batch, tr_scores[idx], tr_labels[idx])
                    if not np.isfinite(loss.item()):
                        raise NonFiniteError(f"loss is {loss.item()}")
                    for p in model.parameters():
                        p.zero_grad()
                    backward(loss, tape)
                opt.step()
            except NonFiniteError as exc:
                raise TrainingDivergedError(
                    f"training diverged at epoch {epoch}: {exc}",
                    diagnostics={
                        "epoch": epoch,
                        "step": start // config.batch_size,
                        "last_losses": losses[-3:],
                    },
                ) from exc
            losses.append(loss.item())

        val = _val_metric(model, va_images, va_scores, va_labels)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                        "val_metric": val})
        if val > best_metric:
            best_metric, since_best = val, 0
            best_params = {k: t.data.copy() for k, t in model.params.items()}
        else:
            since_best += 1
            if since_best >= config.early_stop_patience:
                break

    if best_params is not None:
        for name, data in best_params.items():
            model.params[name] = Tensor(data, requires_grad=True)
    return model, history
