"""Differentiable operations over :class:`~icar.numerics.tensor.Tensor`.

Each op computes a float64 result and, when a tape is active and the
output requires grad, records a pull-back closure. Broadcasting is
deliberately restricted: elementwise ops demand identical shapes, and
``add`` additionally accepts a trailing-shape bias (anything else is a
loud :class:`DimensionError`).
"""

from __future__ import annotations

import math

import numpy as np

from icar.errors import ContractError, DimensionError, NonFiniteError
from icar.numerics.tensor import Tensor, active_tape

_GELU_C = math.sqrt(2.0 / math.pi)

#: Which GELU is implemented. The tanh approximation is used everywhere;
#: recorded here once so the choice is auditable.
GELU_FORM = "tanh-approximation"


def _result(data: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(
            f"operation produced non-finite values (output shape {data.shape})"
        )
    out.data = data
    out.grad = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape.record(out, inputs, backward_fn)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supported shapes: ``(m,k) @ (k,n)``, batched ``(...,m,k) @ (...,k,n)``
    with identical leading dims, and the weight pattern ``(...,m,k) @ (k,n)``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    ash, bsh = a.shape, b.shape
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs 2D+ operands, got {ash} @ {bsh}")
    if ash[-1] != bsh[-2]:
        raise DimensionError(f"matmul inner dims disagree: {ash} @ {bsh}")
    weight_case = b.ndim == 2 and a.ndim > 2
    if not weight_case and ash[:-2] != bsh[:-2]:
        raise DimensionError(f"matmul leading dims disagree: {ash} @ {bsh}")

    data = np.matmul(a.data, b.data)

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            if weight_case:
                k, n = bsh
                a2 = a.data.reshape(-1, k)
                g2 = g.reshape(-1, n)
                b.accumulate_grad(a2.T @ g2)
            else:
                b.accumulate_grad(np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _result(data, (a, b), backward_fn)


# ---------------------------------------------------------------------------
# elementwise and affine
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a trailing-shape bias on either side."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < b.ndim:
        return add(b, a)
    if a.shape != b.shape and (
        b.ndim == 0 or a.shape[a.ndim - b.ndim:] != b.shape
    ):
        raise DimensionError(f"add: {a.shape} + {b.shape}")
    lead = tuple(range(a.ndim - b.ndim))

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g.sum(axis=lead) if lead else g)

    return _result(a.data + b.data, (a, b), backward_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"sub: {a.shape} - {b.shape}")

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(-g)

    return _result(a.data - b.data, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: {a.shape} * {b.shape}")

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g * b.data)
        if b.requires_grad:
            b.accumulate_grad(g * a.data)

    return _result(a.data * b.data, (a, b), backward_fn)


def scale(a: Tensor, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g * s)

    return _result(a.data * s, (a,), backward_fn)


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g * data * (1.0 - data))

    return _result(data, (a,), backward_fn)


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation (see ``GELU_FORM``)."""
    a = _as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
            local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner
            a.accumulate_grad(g * local)

    return _result(data, (a,), backward_fn)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(np.broadcast_to(g, a.shape).copy())

    return _result(a.data.sum(), (a,), backward_fn)


def mean_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    n = a.size

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(np.broadcast_to(g / n, a.shape).copy())

    return _result(a.data.mean(), (a,), backward_fn)


def mean_axes(a: Tensor, axes: tuple) -> Tensor:
    """Mean over the given axes (no keepdims); used for pooling."""
    a = _as_tensor(a)
    axes = tuple(ax % a.ndim for ax in axes)
    count = 1
    for ax in axes:
        count *= a.shape[ax]

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            ge = np.expand_dims(g, axes)
            a.accumulate_grad(np.broadcast_to(ge / count, a.shape).copy())

    return _result(a.data.mean(axis=axes), (a,), backward_fn)


# ---------------------------------------------------------------------------
# normalizations and softmax
# ---------------------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along ``axis`` (max-subtracted)."""
    a = _as_tensor(a)
    if a.shape[axis] < 1:
        raise DimensionError(f"softmax along empty axis of shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            dot = (g * data).sum(axis=axis, keepdims=True)
            a.accumulate_grad(data * (g - dot))

    return _result(data, (a,), backward_fn)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            p = np.exp(data)
            a.accumulate_grad(g - p * g.sum(axis=axis, keepdims=True))

    return _result(data, (a,), backward_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if d < 1:
        raise DimensionError(f"layer_norm on empty last axis: {x.shape}")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} != ({d},)"
        )
    if eps <= 0:
        raise ContractError(f"layer_norm eps must be positive, got {eps}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gain.data + bias.data
    lead = tuple(range(x.ndim - 1))

    def backward_fn(g: np.ndarray) -> None:
        if gain.requires_grad:
            gain.accumulate_grad((g * xhat).sum(axis=lead) if lead else g * xhat)
        if bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=lead) if lead else g)
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad(inv * (dxhat - m1 - xhat * m2))

    return _result(data, (x, gain, bias), backward_fn)


def l2_normalize(a: Tensor, axis: int = -1) -> Tensor:
    """Scale so the given axis has unit Euclidean norm."""
    a = _as_tensor(a)
    norm = np.sqrt((a.data**2).sum(axis=axis, keepdims=True))
    if np.any(norm < 1e-30):
        raise NonFiniteError("l2_normalize of a zero vector")
    data = a.data / norm

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            dot = (g * data).sum(axis=axis, keepdims=True)
            a.accumulate_grad((g - data * dot) / norm)

    return _result(data, (a,), backward_fn)


# ---------------------------------------------------------------------------
# shape manipulation and indexing
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape: tuple) -> Tensor:
    a = _as_tensor(a)

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.shape))

    return _result(a.data.reshape(shape), (a,), backward_fn)


def transpose(a: Tensor, axes: tuple) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(ax % a.ndim for ax in axes)
    inv = tuple(np.argsort(axes))

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(np.transpose(g, inv))

    return _result(np.transpose(a.data, axes).copy(), (a,), backward_fn)


def take_rows(a: Tensor, idx) -> Tensor:
    """Gather along axis 0 with an integer index array of any shape.

    ``take_rows(table, ids)`` is also the embedding lookup.
    """
    a = _as_tensor(a)
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ContractError("take_rows index must be integer")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise DimensionError(
            f"take_rows index out of range for axis of length {a.shape[0]}"
        )

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            da = np.zeros_like(a.data)
            np.add.at(da, idx, g)
            a.accumulate_grad(da)

    return _result(a.data[idx], (a,), backward_fn)


def pick(a: Tensor, cols) -> Tensor:
    """Select one column per row of a 2D tensor: ``out[i] = a[i, cols[i]]``."""
    a = _as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"pick expects a 2D tensor, got {a.shape}")
    cols = np.asarray(cols)
    rows = np.arange(a.shape[0])
    if cols.shape != rows.shape:
        raise DimensionError(f"pick needs one column per row, got {cols.shape}")

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            da = np.zeros_like(a.data)
            np.add.at(da, (rows, cols), g)
            a.accumulate_grad(da)

    return _result(a.data[rows, cols], (a,), backward_fn)


def concat(tensors: list, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat of an empty list")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g: np.ndarray) -> None:
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(sl)])

    return _result(data, tuple(tensors), backward_fn)


# ---------------------------------------------------------------------------
# attention and convolution
# ---------------------------------------------------------------------------

def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q·kᵀ/√d)·v over the last two axes; no mask.

    Accepts any matching leading dims, e.g. ``(h,t,d)`` or ``(B,h,t,d)``.
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    if not (q.shape == k.shape == v.shape):
        raise DimensionError(
            f"attention shapes disagree: q={q.shape} k={k.shape} v={v.shape}"
        )
    d = q.shape[-1]
    kt = transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
    scores = scale(matmul(q, kt), 1.0 / math.sqrt(d))
    attn = softmax(scores, axis=-1)
    return matmul(attn, v)


def conv2d_3x3(x: Tensor, w: Tensor) -> Tensor:
    """3x3 same-padding convolution in NHWC layout.

    ``x`` is ``(B,H,W,Cin)``, ``w`` is ``(3,3,Cin,Cout)``; output keeps the
    spatial dims. Implemented as im2col + matmul.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[:2] != (3, 3):
        raise DimensionError(f"conv2d_3x3: x={x.shape} w={w.shape}")
    b, h, wd, cin = x.shape
    if w.shape[2] != cin:
        raise DimensionError(
            f"conv2d_3x3 channel mismatch: x has {cin}, w expects {w.shape[2]}"
        )
    cout = w.shape[3]
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    # (B,H,W,Cin,3,3) -> (B,H,W,3,3,Cin) to match w's (kh,kw,cin) order
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(
        b * h * wd, 9 * cin
    )
    wmat = w.data.reshape(9 * cin, cout)
    data = (cols @ wmat).reshape(b, h, wd, cout)

    def backward_fn(g: np.ndarray) -> None:
        g2 = g.reshape(b * h * wd, cout)
        if w.requires_grad:
            w.accumulate_grad((cols.T @ g2).reshape(w.shape))
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(b, h, wd, 3, 3, cin)
            dxp = np.zeros_like(xp)
            for di in range(3):
                for dj in range(3):
                    dxp[:, di:di + h, dj:dj + wd, :] += dcols[:, :, :, di, dj, :]
            x.accumulate_grad(dxp[:, 1:-1, 1:-1, :])

    return _result(data, (x, w), backward_fn)


def avg_pool2d(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2, NHWC layout."""
    x = _as_tensor(x)
    b, h, w, c = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avg_pool2d needs even spatial dims, got {x.shape}")
    data = x.data.reshape(b, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))

    def backward_fn(g: np.ndarray) -> None:
        if x.requires_grad:
            ge = g[:, :, None, :, None, :] / 4.0
            x.accumulate_grad(
                np.broadcast_to(ge, (b, h // 2, 2, w // 2, 2, c)).reshape(x.shape).copy()
            )

    return _result(data, (x,), backward_fn)
