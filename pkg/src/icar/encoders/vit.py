"""Miniature vision transformer with early-exit points.

A single stack of pre-norm blocks; exiting at layer k means running the
first k blocks, applying the one shared final layer norm, pooling the
class token, and projecting through the one shared head. Every exit lands
in the same embedding space.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from icar import checkpoint
from icar.encoders import blocks
from icar.errors import ContractError
from icar.numerics import Tensor, ops


@dataclass(frozen=True)
class VisionEncoderConfig:
    image_size: int = 32
    patch_size: int = 4
    depth: int = 12
    width: int = 64
    heads: int = 4
    embed_dim: int = 32
    # desk-scale analog of exiting a 24-layer stack at 8/12/16/20/24
    exit_layers: tuple = (4, 6, 8, 10, 12)

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ContractError(
                f"patch_size {self.patch_size} does not divide image_size "
                f"{self.image_size}"
            )
        if self.width % self.heads:
            raise ContractError(
                f"heads {self.heads} does not divide width {self.width}"
            )
        exits = tuple(self.exit_layers)
        if list(exits) != sorted(set(exits)):
            raise ContractError(f"exit_layers must be ascending, got {exits}")
        if any(not 1 <= k <= self.depth for k in exits):
            raise ContractError(
                f"exit_layers {exits} outside [1, {self.depth}]"
            )
        if self.depth not in exits:
            raise ContractError(
                f"exit_layers {exits} must contain the final layer {self.depth}"
            )
        object.__setattr__(self, "exit_layers", exits)

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2


class MiniViT:
    """Vision encoder; ``attention_calls`` counts block applications."""

    def __init__(self, config: VisionEncoderConfig = VisionEncoderConfig(),
                 seed: int = 0):
        self.config = config
        self.attention_calls = 0
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        c = config
        patch_dim = 3 * c.patch_size ** 2
        self.params["patch.w"] = Tensor(
            rng.normal(0.0, patch_dim ** -0.5, (patch_dim, c.width)),
            requires_grad=True)
        self.params["patch.b"] = Tensor(np.zeros(c.width), requires_grad=True)
        self.params["cls"] = Tensor(rng.normal(0.0, 0.02, (1, c.width)),
                                    requires_grad=True)
        self.params["pos"] = Tensor(
            rng.normal(0.0, 0.02, (c.n_patches + 1, c.width)),
            requires_grad=True)
        for i in range(c.depth):
            blocks.init_block_params(self.params, f"blk{i}", rng, c.width,
                                     c.depth)
        self.params["final.gain"] = Tensor(np.ones(c.width), requires_grad=True)
        self.params["final.bias"] = Tensor(np.zeros(c.width), requires_grad=True)
        self.params["proj.w"] = Tensor(
            rng.normal(0.0, c.width ** -0.5, (c.width, c.embed_dim)),
            requires_grad=True)

    def parameters(self) -> list:
        return list(self.params.values())

    def head_parameters(self) -> list:
        return [self.params["proj.w"]]

    def backbone_parameters(self) -> list:
        return [t for name, t in self.params.items() if name != "proj.w"]

    # -- forward pieces -------------------------------------------------------

    def _patchify(self, images: np.ndarray) -> np.ndarray:
        c = self.config
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4 or images.shape[1:] != (3, c.image_size, c.image_size):
            raise ContractError(
                f"expected (B,3,{c.image_size},{c.image_size}) images, "
                f"got {images.shape}"
            )
        b = images.shape[0]
        g = c.image_size // c.patch_size
        # (B,3,S,S) -> (B, g*g, P*P*3), channels fastest within a pixel
        x = images.reshape(b, 3, g, c.patch_size, g, c.patch_size)
        x = x.transpose(0, 2, 4, 3, 5, 1)
        # center [0,1] pixels: without this the mean-brightness direction
        # dominates every patch embedding and untrained class tokens all
        # pool to nearly the same vector
        return x.reshape(b, g * g, c.patch_size ** 2 * 3) - 0.5

    def _embed(self, images: np.ndarray) -> Tensor:
        c = self.config
        patches = Tensor(self._patchify(images))
        tok = ops.add(ops.matmul(patches, self.params["patch.w"]),
                      self.params["patch.b"])
        b = tok.shape[0]
        cls = ops.take_rows(self.params["cls"], np.zeros((b, 1), dtype=np.int64))
        x = ops.concat([cls, tok], axis=1)
        return ops.add(x, self.params["pos"])

    def _pool_cls(self, hidden: Tensor, rows: np.ndarray) -> Tensor:
        """Gather the class-token vector of the given batch rows."""
        b, t, d = hidden.shape
        flat = ops.reshape(hidden, (b * t, d))
        return ops.take_rows(flat, np.asarray(rows, dtype=np.int64) * t)

    def _finish(self, pooled: Tensor) -> Tensor:
        normed = ops.layer_norm(pooled, self.params["final.gain"],
                                self.params["final.bias"])
        return ops.l2_normalize(ops.matmul(normed, self.params["proj.w"]))

    # -- encoding -------------------------------------------------------------

    def encode(self, images: np.ndarray, exit_layer: int) -> Tensor:
        """Encode a batch through the first ``exit_layer`` blocks."""
        c = self.config
        if exit_layer not in c.exit_layers:
            raise ContractError(
                f"exit layer {exit_layer} not in exit_layers {c.exit_layers}"
            )
        x = self._embed(images)
        for i in range(exit_layer):
            x = blocks.block_forward(self.params, f"blk{i}", x, c.heads)
            self.attention_calls += 1
        pooled = self._pool_cls(x, np.arange(x.shape[0]))
        return self._finish(pooled)

    def encode_mixed(self, images: np.ndarray, exit_per_sample) -> Tensor:
        """One forward pass with a per-sample exit layer.

        Runs the stack once to the deepest requested layer, taps each
        sample's class token at its own exit, and finishes all of them
        through the shared norm/projection. Row order matches the input.
        """
        c = self.config
        exits = np.asarray(exit_per_sample, dtype=np.int64)
        if exits.shape != (len(images),):
            raise ContractError(
                f"need one exit per sample: {exits.shape} vs {len(images)} images"
            )
        bad = set(exits.tolist()) - set(c.exit_layers)
        if bad:
            raise ContractError(
                f"exit layers {sorted(bad)} not in exit_layers {c.exit_layers}"
            )
        x = self._embed(images)
        taps, tap_order = [], []
        for i in range(int(exits.max())):
            x = blocks.block_forward(self.params, f"blk{i}", x, c.heads)
            self.attention_calls += 1
            rows = np.flatnonzero(exits == i + 1)
            if rows.size:
                taps.append(self._pool_cls(x, rows))
                tap_order.extend(rows.tolist())
        pooled = taps[0] if len(taps) == 1 else ops.concat(taps, axis=0)
        inverse = np.argsort(np.asarray(tap_order))
        return self._finish(ops.take_rows(pooled, inverse))

    # -- persistence ----------------------------------------------------------

    def save(self, path) -> None:
        c = self.config
        meta = {"image_size": c.image_size, "patch_size": c.patch_size,
                "depth": c.depth, "width": c.width, "heads": c.heads,
                "embed_dim": c.embed_dim, "exit_layers": list(c.exit_layers)}
        checkpoint.save_checkpoint(path, "vit", meta,
                                   {k: t.data for k, t in self.params.items()})

    @classmethod
    def load(cls, path) -> "MiniViT":
        meta, tensors = checkpoint.load_checkpoint(path, expected_kind="vit")
        meta["exit_layers"] = tuple(meta["exit_layers"])
        model = cls(VisionEncoderConfig(**meta))
        _restore_params(model, tensors, path)
        return model


def _restore_params(model, tensors: dict, path) -> None:
    if set(tensors) != set(model.params):
        raise ContractError(
            f"checkpoint {path} tensors do not match model parameters"
        )
    for name, arr in tensors.items():
        if arr.shape != model.params[name].shape:
            raise ContractError(
                f"checkpoint tensor {name!r} has shape {arr.shape}, model "
                f"expects {model.params[name].shape}"
            )
        model.params[name] = Tensor(arr, requires_grad=True)


def encode_image_at_exit(model: MiniViT, image: np.ndarray,
                         exit_layer: int) -> np.ndarray:
    """Unit-norm embedding of one (3,S,S) image exited at layer k."""
    return model.encode(np.asarray(image)[None], exit_layer).data[0].copy()


def encode_image_full(model: MiniViT, image: np.ndarray) -> np.ndarray:
    """Full-depth embedding: exit at the last layer."""
    return encode_image_at_exit(model, image, model.config.depth)
