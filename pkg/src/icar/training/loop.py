"""Dual-path training loop and the combined model checkpoint."""

from __future__ import annotations

import csv
import math

import numpy as np

from icar import checkpoint
from icar.encoders.text import TextEncoder, TextEncoderConfig
from icar.encoders.vit import MiniViT, VisionEncoderConfig, _restore_params
from icar.errors import ContractError, NonFiniteError, TrainingDivergedError
from icar.numerics import Tape, backward
from icar.numerics.optim import AdamW
from icar.retrieval import build_index, recall_at_k, search_topk
from icar.training.loss import (DualPathConfig, LossPair, dual_path_loss,
                                last_similarity_stats)

EVAL_CHUNK = 128

HISTORY_COLUMNS = ("epoch", "loss_early", "loss_full", "loss_total",
                   "val_r1_early", "val_r1_full")


def make_optimizer(vit: MiniViT, text_encoder: TextEncoder,
                   config: DualPathConfig) -> AdamW:
    """AdamW with the two projection heads on their own learning rate."""
    groups = [
        {"params": vit.backbone_parameters() + text_encoder.backbone_parameters(),
         "lr": config.lr_backbone},
        {"params": vit.head_parameters() + text_encoder.head_parameters(),
         "lr": config.lr_heads},
    ]
    return AdamW(groups, weight_decay=config.weight_decay)


def lr_scale(step: int, total_steps: int, schedule: str = "cosine") -> float:
    """Multiplier on every group's base rate at a given 0-indexed step.

    cosine: linear warmup over the first tenth of the run, then cosine decay
    from the full rate to zero at the final step. constant: always 1.
    """
    if schedule == "constant":
        return 1.0
    if not 0 <= step < total_steps:
        raise ContractError(
            f"step must lie in [0, {total_steps}), got {step}"
        )
    warmup = max(1, total_steps // 10)
    if step < warmup:
        return (step + 1) / warmup
    span = max(total_steps - warmup, 1)
    return 0.5 * (1.0 + math.cos(math.pi * (step - warmup) / span))


def train_step(vit, text_encoder, complexity_model, batch,
               config: DualPathConfig, optimizer: AdamW) -> LossPair:
    """One optimization step on a batch; exits are chosen before taping.

    The complexity model only routes — it is never updated and its forward
    runs outside the tape. A non-finite loss or gradient aborts with the
    last similarity-matrix statistics attached.
    """
    optimizer.zero_grad()
    try:
        with Tape() as tape:
            pair, total, _ = dual_path_loss(vit, text_encoder,
                                            complexity_model, batch, config)
        if not np.isfinite(total.data):
            raise NonFiniteError(f"loss_total = {total.data}")
        backward(total, tape)
    except NonFiniteError as exc:
        raise TrainingDivergedError(
            f"non-finite value during train step: {exc}",
            diagnostics={"cause": str(exc),
                         "similarity": last_similarity_stats(),
                         "batch_size": len(batch)}) from exc
    optimizer.step()
    return pair


def _encode_images(vit, samples, exit_layer: int) -> np.ndarray:
    chunks = []
    for lo in range(0, len(samples), EVAL_CHUNK):
        images = np.stack([s.image for s in samples[lo:lo + EVAL_CHUNK]])
        chunks.append(vit.encode(images, exit_layer).data)
    return np.concatenate(chunks, axis=0)


def _encode_texts(text_encoder, samples) -> np.ndarray:
    chunks = []
    for lo in range(0, len(samples), EVAL_CHUNK):
        tokens = [s.tokens for s in samples[lo:lo + EVAL_CHUNK]]
        chunks.append(text_encoder.encode(tokens).data)
    return np.concatenate(chunks, axis=0)


def evaluate_r1(vit, text_encoder, samples, exit_layer: int) -> float:
    """Text-to-image Recall@1 with images encoded at the given exit."""
    if not samples:
        raise ContractError("evaluate_r1 needs at least one sample")
    ids = np.array([s.instance_id for s in samples], dtype=np.int64)
    index = build_index(_encode_images(vit, samples, exit_layer), ids)
    txt = _encode_texts(text_encoder, samples)
    results = [search_topk(index, txt[i], 1, query_id=int(ids[i]))
               for i in range(len(samples))]
    truth = {int(i): int(i) for i in ids}
    return recall_at_k(results, truth, 1) / 100.0


def train_loop(dataset, config: DualPathConfig = DualPathConfig(),
               vit: MiniViT = None, text_encoder: TextEncoder = None,
               complexity_model=None, on_epoch=None):
    """Train both encoders with the dual-path objective.

    ``dataset`` is a list of samples carrying split tags; train and val
    must both be non-empty. Returns ``(vit, text_encoder, history)`` where
    history holds one row per epoch (HISTORY_COLUMNS); ``on_epoch``, if
    given, is called with each finished row. The parameters kept at the
    end are those of the epoch with the best summed validation R@1;
    epochs=0 returns the models untouched with an empty history.
    """
    train = [s for s in dataset if s.split == "train"]
    val = [s for s in dataset if s.split == "val"]
    if not train or not val:
        raise ContractError(
            f"need non-empty train and val splits, got {len(train)}/{len(val)}"
        )
    if vit is None:
        size = train[0].image.shape[-1]
        vit = MiniViT(VisionEncoderConfig(image_size=size), seed=config.seed)
    if text_encoder is None:
        text_encoder = TextEncoder(seed=config.seed + 1)
    if config.exit_layer not in vit.config.exit_layers:
        raise ContractError(
            f"exit_layer {config.exit_layer} is not one of the model exits "
            f"{vit.config.exit_layers}"
        )
    if config.epochs == 0:
        return vit, text_encoder, []

    optimizer = make_optimizer(vit, text_encoder, config)
    base_lrs = [group["lr"] for group in optimizer.param_groups]
    steps_per_epoch = -(-len(train) // config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    step = 0
    history = []
    best_score = -1.0
    best_params = None
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(
            len(train))
        sums = np.zeros(3)
        n_batches = 0
        for lo in range(0, len(train), config.batch_size):
            batch = [train[i] for i in order[lo:lo + config.batch_size]]
            scale = lr_scale(step, total_steps, config.lr_schedule)
            for group, base in zip(optimizer.param_groups, base_lrs):
                group["lr"] = base * scale
            step += 1
            try:
                pair = train_step(vit, text_encoder, complexity_model, batch,
                                  config, optimizer)
            except TrainingDivergedError as exc:
                exc.diagnostics.update(epoch=epoch, step=n_batches)
                raise
            sums += (pair.loss_early, pair.loss_full, pair.loss_total)
            n_batches += 1
        r1_early = evaluate_r1(vit, text_encoder, val, config.exit_layer)
        r1_full = evaluate_r1(vit, text_encoder, val, vit.config.depth)
        history.append({
            "epoch": epoch,
            "loss_early": sums[0] / n_batches,
            "loss_full": sums[1] / n_batches,
            "loss_total": sums[2] / n_batches,
            "val_r1_early": r1_early,
            "val_r1_full": r1_full,
        })
        if on_epoch is not None:
            on_epoch(history[-1])
        if r1_early + r1_full > best_score:
            best_score = r1_early + r1_full
            best_params = ({k: t.data.copy() for k, t in vit.params.items()},
                           {k: t.data.copy()
                            for k, t in text_encoder.params.items()})
    for model, saved in zip((vit, text_encoder), best_params):
        for name, data in saved.items():
            model.params[name].data = data
    return vit, text_encoder, history


def write_history_csv(path, history, comment: str = None) -> None:
    """Training history as CSV, optionally preceded by a # comment line."""
    with open(path, "w", newline="") as fh:
        if comment is not None:
            fh.write(f"# {comment}\n")
        writer = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
        writer.writeheader()
        writer.writerows(history)


def save_icar(path, vit: MiniViT, text_encoder: TextEncoder) -> None:
    """Both encoders in one checkpoint, tensor names prefixed by tower."""
    c, t = vit.config, text_encoder.config
    meta = {
        "vit": {"image_size": c.image_size, "patch_size": c.patch_size,
                "depth": c.depth, "width": c.width, "heads": c.heads,
                "embed_dim": c.embed_dim, "exit_layers": list(c.exit_layers)},
        "text": {"vocab_size": t.vocab_size, "max_len": t.max_len,
                 "depth": t.depth, "width": t.width, "heads": t.heads,
                 "embed_dim": t.embed_dim},
    }
    tensors = {f"vit.{k}": v.data for k, v in vit.params.items()}
    tensors.update({f"text.{k}": v.data
                    for k, v in text_encoder.params.items()})
    checkpoint.save_checkpoint(path, "icar", meta, tensors)


def load_icar(path):
    """Inverse of save_icar; returns ``(vit, text_encoder)``."""
    meta, tensors = checkpoint.load_checkpoint(path, expected_kind="icar")
    vit_meta = dict(meta["vit"])
    vit_meta["exit_layers"] = tuple(vit_meta["exit_layers"])
    vit = MiniViT(VisionEncoderConfig(**vit_meta))
    text_encoder = TextEncoder(TextEncoderConfig(**meta["text"]))
    _restore_params(
        vit, {k[4:]: v for k, v in tensors.items() if k.startswith("vit.")},
        path)
    _restore_params(
        text_encoder,
        {k[5:]: v for k, v in tensors.items() if k.startswith("text.")}, path)
    return vit, text_encoder
