"""The trainable complexity model: small CNN trunk plus one of two heads.

Trunk: three stages of (3x3 conv, channel layer norm, GELU, 2x2 average
pool) at widths 16/32/64, then global average pooling. Heads: a single
linear layer squashed by sigmoid for continuous scores, or a two-layer MLP
emitting 2 logits (index 1 = complex) for classification.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from icar import checkpoint
from icar.errors import ContractError
from icar.numerics import Tensor, ops

WIDTHS = (16, 32, 64)
HIDDEN = 32
HEADS = ("regression", "binary")


@dataclass(frozen=True)
class RoutingDecision:
    sample_id: int
    is_simple: bool
    score: float
    threshold: float


class ComplexityModel:
    """CNN trunk + head, parameters stored as named fp64 tensors."""

    def __init__(self, head: str = "binary", image_size: int = 32, seed: int = 0):
        if head not in HEADS:
            raise ContractError(f"head must be one of {HEADS}, got {head!r}")
        if image_size % 8:
            raise ContractError(
                f"image_size must be divisible by 8 (three 2x2 pools), "
                f"got {image_size}"
            )
        self.head = head
        self.image_size = image_size
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)

        cin = 3
        for i, cout in enumerate(WIDTHS):
            self._add(f"conv{i}.w", rng.normal(0.0, np.sqrt(2.0 / (9 * cin)),
                                               (3, 3, cin, cout)))
            self._add(f"norm{i}.gain", np.ones(cout))
            self._add(f"norm{i}.bias", np.zeros(cout))
            cin = cout
        d = WIDTHS[-1]
        if head == "regression":
            # zero-initialized final layer: sigmoid(0) = 0.5 before training
            self._add("head.w", np.zeros((d, 1)))
            self._add("head.b", np.zeros(1))
        else:
            self._add("head.w1", rng.normal(0.0, np.sqrt(2.0 / d), (d, HIDDEN)))
            self._add("head.b1", np.zeros(HIDDEN))
            self._add("head.w2", np.zeros((HIDDEN, 2)))
            self._add("head.b2", np.zeros(2))

    def _add(self, name: str, data: np.ndarray) -> None:
        self.params[name] = Tensor(data, requires_grad=True)

    def parameters(self) -> list:
        return list(self.params.values())

    def trunk(self, images: np.ndarray) -> Tensor:
        """(B,3,S,S) pixel array -> (B, 64) pooled representation."""
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4 or images.shape[1] != 3:
            raise ContractError(f"expected (B,3,S,S) images, got {images.shape}")
        x = Tensor(images.transpose(0, 2, 3, 1))  # NHWC
        p = self.params
        for i in range(len(WIDTHS)):
            x = ops.conv2d_3x3(x, p[f"conv{i}.w"])
            x = ops.layer_norm(x, p[f"norm{i}.gain"], p[f"norm{i}.bias"])
            x = ops.gelu(x)
            x = ops.avg_pool2d(x)
        return ops.mean_axes(x, (1, 2))

    def forward(self, images: np.ndarray) -> Tensor:
        """Head outputs: (B,1) pre-sigmoid for regression, (B,2) logits for binary."""
        h = self.trunk(images)
        p = self.params
        if self.head == "regression":
            return ops.add(ops.matmul(h, p["head.w"]), p["head.b"])
        h = ops.gelu(ops.add(ops.matmul(h, p["head.w1"]), p["head.b1"]))
        return ops.add(ops.matmul(h, p["head.w2"]), p["head.b2"])

    # -- persistence ---------------------------------------------------------

    def save(self, path) -> None:
        meta = {"head": self.head, "image_size": self.image_size}
        checkpoint.save_checkpoint(
            path, "complexity", meta,
            {name: t.data for name, t in self.params.items()})

    @classmethod
    def load(cls, path) -> "ComplexityModel":
        meta, tensors = checkpoint.load_checkpoint(path, expected_kind="complexity")
        model = cls(head=meta["head"], image_size=meta["image_size"])
        if set(tensors) != set(model.params):
            raise ContractError(
                f"checkpoint tensors {sorted(tensors)} do not match model "
                f"parameters {sorted(model.params)}"
            )
        for name, arr in tensors.items():
            if arr.shape != model.params[name].shape:
                raise ContractError(
                    f"checkpoint tensor {name!r} has shape {arr.shape}, "
                    f"model expects {model.params[name].shape}"
                )
            model.params[name] = Tensor(arr, requires_grad=True)
        return model


def predict_score(model: ComplexityModel, image: np.ndarray):
    """Continuous complexity score(s) in [0,1] via the sigmoid squash."""
    if model.head != "regression":
        raise ContractError(
            f"predict_score needs a regression head, model has {model.head!r}"
        )
    single = np.asarray(image).ndim == 3
    batch = np.asarray(image)[None] if single else np.asarray(image)
    out = ops.sigmoid(model.forward(batch)).data[:, 0]
    return float(out[0]) if single else out


def classify(model: ComplexityModel, image: np.ndarray, threshold: float = 0.5,
             sample_id: int = 0) -> RoutingDecision:
    """Route one image: score = softmax probability of class complex.

    A score exactly at the threshold counts as complex — ties fall back to
    full processing rather than risking quality.
    """
    if model.head != "binary":
        raise ContractError(
            f"classify needs a binary head, model has {model.head!r}"
        )
    logits = model.forward(np.asarray(image)[None])
    score = float(ops.softmax(logits).data[0, 1])
    return RoutingDecision(sample_id=sample_id, is_simple=score < threshold,
                           score=score, threshold=threshold)


def classify_scores(model: ComplexityModel, images: np.ndarray) -> np.ndarray:
    """Batched probability-of-complex for (B,3,S,S) pixel arrays."""
    if model.head != "binary":
        raise ContractError(
            f"classify_scores needs a binary head, model has {model.head!r}"
        )
    return ops.softmax(model.forward(images)).data[:, 1].copy()
