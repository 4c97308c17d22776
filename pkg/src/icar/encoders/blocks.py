"""Pre-norm transformer blocks shared by the vision and text encoders."""

from __future__ import annotations

import numpy as np

from icar.numerics import Tensor, ops


def init_block_params(params: dict, prefix: str, rng: np.random.Generator,
                      width: int, depth: int) -> None:
    """Create one block's parameter tensors under ``prefix``.

    Output projections are scaled down by sqrt(2*depth) so residual
    variance stays bounded when training from scratch.
    """
    d = width
    res = 1.0 / np.sqrt(2.0 * depth)

    def w(name, shape, std):
        params[f"{prefix}.{name}"] = Tensor(rng.normal(0.0, std, shape),
                                            requires_grad=True)

    def zeros(name, shape):
        params[f"{prefix}.{name}"] = Tensor(np.zeros(shape), requires_grad=True)

    def ones(name, shape):
        params[f"{prefix}.{name}"] = Tensor(np.ones(shape), requires_grad=True)

    ones("ln1.gain", (d,)); zeros("ln1.bias", (d,))
    w("attn.wq", (d, d), d ** -0.5); zeros("attn.bq", (d,))
    w("attn.wk", (d, d), d ** -0.5); zeros("attn.bk", (d,))
    w("attn.wv", (d, d), d ** -0.5); zeros("attn.bv", (d,))
    w("attn.wo", (d, d), d ** -0.5 * res); zeros("attn.bo", (d,))
    ones("ln2.gain", (d,)); zeros("ln2.bias", (d,))
    w("mlp.w1", (d, 4 * d), d ** -0.5); zeros("mlp.b1", (4 * d,))
    w("mlp.w2", (4 * d, d), (4 * d) ** -0.5 * res); zeros("mlp.b2", (d,))


def _linear(params: dict, prefix: str, name: str, x: Tensor) -> Tensor:
    w = params[f"{prefix}.{name}"]
    b = params[f"{prefix}.{name.replace('w', 'b', 1)}"]
    return ops.add(ops.matmul(x, w), b)


def attention(params: dict, prefix: str, x: Tensor, heads: int) -> Tensor:
    """Multi-head self-attention on (B, T, d) input, no masking."""
    b, t, d = x.shape
    dh = d // heads

    def heads_view(z):
        return ops.transpose(ops.reshape(z, (b, t, heads, dh)), (0, 2, 1, 3))

    q = heads_view(_linear(params, prefix, "attn.wq", x))
    k = heads_view(_linear(params, prefix, "attn.wk", x))
    v = heads_view(_linear(params, prefix, "attn.wv", x))
    mixed = ops.scaled_dot_attention(q, k, v)  # (B, heads, T, dh)
    merged = ops.reshape(ops.transpose(mixed, (0, 2, 1, 3)), (b, t, d))
    return _linear(params, prefix, "attn.wo", merged)


def block_forward(params: dict, prefix: str, x: Tensor, heads: int) -> Tensor:
    """x + attn(ln1(x)), then + mlp(ln2(x))."""
    normed = ops.layer_norm(x, params[f"{prefix}.ln1.gain"],
                            params[f"{prefix}.ln1.bias"])
    x = ops.add(x, attention(params, prefix, normed, heads))
    normed = ops.layer_norm(x, params[f"{prefix}.ln2.gain"],
                            params[f"{prefix}.ln2.bias"])
    hidden = ops.gelu(_linear(params, prefix, "mlp.w1", normed))
    return ops.add(x, _linear(params, prefix, "mlp.w2", hidden))
