"""Miniature text encoder projecting captions into the shared space."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from icar import checkpoint
from icar.encoders import blocks
from icar.errors import ContractError
from icar.numerics import Tensor, ops
from icar.synthdata import scenes

PAD_ID = scenes.VOCAB.index(scenes.PAD)
EOS_ID = scenes.VOCAB.index(scenes.EOS)


@dataclass(frozen=True)
class TextEncoderConfig:
    vocab_size: int = len(scenes.VOCAB)
    max_len: int = 32
    depth: int = 4
    width: int = 64
    heads: int = 4
    embed_dim: int = 32

    def __post_init__(self):
        if self.width % self.heads:
            raise ContractError(
                f"heads {self.heads} does not divide width {self.width}"
            )
        if self.max_len < 2:
            raise ContractError(f"max_len must be >= 2, got {self.max_len}")


def pad_tokens(tokens, config: TextEncoderConfig):
    """Fixed-length id row plus the end-of-sequence pool position.

    Everything after the first <eos> is dropped (one is appended if
    missing); sequences longer than max_len are truncated to max_len - 1
    tokens plus <eos>; the rest is <pad>.
    """
    ids = [int(t) for t in tokens]
    for t in ids:
        if not 0 <= t < config.vocab_size:
            raise ContractError(
                f"token id {t} outside vocabulary of size {config.vocab_size}"
            )
    if EOS_ID in ids:
        ids = ids[:ids.index(EOS_ID) + 1]
    else:
        ids.append(EOS_ID)
    if len(ids) > config.max_len:
        ids = ids[:config.max_len - 1] + [EOS_ID]
    eos_pos = len(ids) - 1
    ids += [PAD_ID] * (config.max_len - len(ids))
    return np.array(ids, dtype=np.int64), eos_pos


class TextEncoder:
    """Token embeddings, L_t pre-norm blocks, <eos>-token pooling.

    ``forward_calls`` counts encode() invocations, so training code can
    prove it encodes each caption once per step.
    """

    def __init__(self, config: TextEncoderConfig = TextEncoderConfig(),
                 seed: int = 1):
        self.config = config
        self.forward_calls = 0
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        c = config
        self.params["embed"] = Tensor(
            rng.normal(0.0, 0.02, (c.vocab_size, c.width)), requires_grad=True)
        self.params["pos"] = Tensor(
            rng.normal(0.0, 0.02, (c.max_len, c.width)), requires_grad=True)
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

    def encode(self, token_rows) -> Tensor:
        """Encode a batch of token sequences to unit vectors (B, e)."""
        c = self.config
        padded, eos_positions = [], []
        for row in token_rows:
            ids, eos_pos = pad_tokens(row, c)
            padded.append(ids)
            eos_positions.append(eos_pos)
        ids = np.stack(padded)
        b, t = ids.shape
        x = ops.take_rows(self.params["embed"], ids)
        x = ops.add(x, self.params["pos"])
        for i in range(c.depth):
            x = blocks.block_forward(self.params, f"blk{i}", x, c.heads)
        flat = ops.reshape(x, (b * t, c.width))
        pooled = ops.take_rows(
            flat, np.arange(b, dtype=np.int64) * t + np.array(eos_positions))
        normed = ops.layer_norm(pooled, self.params["final.gain"],
                                self.params["final.bias"])
        out = ops.l2_normalize(ops.matmul(normed, self.params["proj.w"]))
        self.forward_calls += 1
        return out

    def save(self, path) -> None:
        c = self.config
        meta = {"vocab_size": c.vocab_size, "max_len": c.max_len,
                "depth": c.depth, "width": c.width, "heads": c.heads,
                "embed_dim": c.embed_dim}
        checkpoint.save_checkpoint(path, "text", meta,
                                   {k: t.data for k, t in self.params.items()})

    @classmethod
    def load(cls, path) -> "TextEncoder":
        from icar.encoders.vit import _restore_params

        meta, tensors = checkpoint.load_checkpoint(path, expected_kind="text")
        model = cls(TextEncoderConfig(**meta))
        _restore_params(model, tensors, path)
        return model


def encode_text(model: TextEncoder, tokens) -> np.ndarray:
    """Unit-norm embedding of one token sequence."""
    return model.encode([tokens]).data[0].copy()
