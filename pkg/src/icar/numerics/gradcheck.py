"""Central finite-difference checking of tape gradients.

This is the independent oracle for every differentiable operation in the
package: the numeric estimate never touches the tape machinery beyond
calling the function under test.
"""

from __future__ import annotations

import numpy as np

from icar.errors import ContractError
from icar.numerics.tensor import Tape, Tensor, backward


def finite_diff_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between tape gradient and central differences.

    ``f`` maps a Tensor to a scalar Tensor and must be deterministic.
    Returns ``max_i |num_i - tape_i| / (|tape_i| + 1e-8)``.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ContractError(f"eps must lie in [1e-7, 1e-3], got {eps}")

    x.zero_grad()
    x.requires_grad = True
    with Tape() as tape:
        loss = f(x)
    backward(loss, tape)
    if x.grad is None:
        raise ContractError("function under test never touched its input")
    tape_grad = x.grad.copy()

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = f(x).item()
        flat[i] = orig - eps
        f_minus = f(x).item()
        flat[i] = orig
        numeric[i] = (f_plus - f_minus) / (2.0 * eps)

    diff = np.abs(numeric - tape_grad.reshape(-1))
    denom = np.abs(tape_grad.reshape(-1)) + 1e-8
    return float((diff / denom).max())
