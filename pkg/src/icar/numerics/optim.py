"""Adam with decoupled weight decay, over plain parameter lists."""

from __future__ import annotations

import numpy as np

from icar.numerics.tensor import Tensor


class AdamW:
    """Decoupled-weight-decay adaptive-moment optimizer.

    ``param_groups`` is a list of ``{"params": [Tensor, ...], "lr": float}``
    dicts so projection heads and the backbone can run at different rates.
    Parameters whose grad is ``None`` after backward are skipped entirely.
    """

    def __init__(self, param_groups, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        if isinstance(param_groups, dict):
            param_groups = [param_groups]
        self.param_groups = [
            {"params": list(g["params"]), "lr": float(g["lr"])}
            for g in param_groups
        ]
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {}
        self._v = {}

    def zero_grad(self) -> None:
        for group in self.param_groups:
            for p in group["params"]:
                p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for group in self.param_groups:
            lr = group["lr"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                key = id(p)
                if key not in self._m:
                    self._m[key] = np.zeros_like(p.data)
                    self._v[key] = np.zeros_like(p.data)
                m, v = self._m[key], self._v[key]
                m *= b1
                m += (1.0 - b1) * p.grad
                v *= b2
                v += (1.0 - b2) * p.grad**2
                if lr == 0.0:
                    continue  # moments advance, parameters stay bitwise put
                p.data *= 1.0 - lr * self.weight_decay
                p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
