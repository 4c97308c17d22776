"""Dense fp64 tensors and the replayable gradient tape.

Everything is float64: the point of this package is verifiability against
finite differences, not speed. A ``Tape`` records each differentiable
operation as it runs; ``backward`` replays the records in strict reverse
order. Tapes are rebuilt per forward pass, there is no persistent graph.
"""

from __future__ import annotations

import numpy as np

from icar.errors import ContractError, NonFiniteError


class Tensor:
    """A dense float64 array with an optional gradient buffer.

    ``grad`` is populated lazily by ``backward`` and accumulates across
    calls until cleared. Values are checked finite on construction, so a
    NaN/Inf surfaces at the operation that produced it.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(
                f"tensor of shape {arr.shape} contains non-finite values"
            )
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(())[()])

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Light operator sugar; the full op set lives in icar.numerics.ops.
    def __matmul__(self, other):
        from icar.numerics import ops

        return ops.matmul(self, other)

    def __add__(self, other):
        from icar.numerics import ops

        return ops.add(self, other)

    def __sub__(self, other):
        from icar.numerics import ops

        return ops.sub(self, other)

    def __mul__(self, other):
        from icar.numerics import ops

        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.scale(self, float(other))

    def __rmul__(self, other):
        from icar.numerics import ops

        return ops.scale(self, float(other))

    def __neg__(self):
        from icar.numerics import ops

        return ops.neg(self)


class _TapeEntry:
    """One recorded operation: its output and a pull-back rule."""

    __slots__ = ("out", "backward_fn")

    def __init__(self, out: Tensor, backward_fn):
        self.out = out
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations for one forward pass.

    Used as a context manager; operations executed inside the block that
    produce a grad-requiring output append an entry. ``backward`` replays
    entries newest-first.
    """

    def __init__(self):
        self._entries: list[_TapeEntry] = []
        self._leaves: list[Tensor] = []
        self._produced: set[int] = set()
        self._leaf_ids: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape stack corrupted"

    def record(self, out: Tensor, inputs: tuple, backward_fn) -> None:
        self._entries.append(_TapeEntry(out, backward_fn))
        for t in inputs:
            tid = id(t)
            if t.requires_grad and tid not in self._produced and tid not in self._leaf_ids:
                self._leaves.append(t)
                self._leaf_ids.add(tid)
        self._produced.add(id(out))

    def __len__(self) -> int:
        return len(self._entries)


_TAPE_STACK: list[Tape] = []


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate gradients of every grad-requiring leaf reachable from loss.

    Interior-node gradients are reset before the replay so that repeated
    calls accumulate exactly one extra copy into the leaves.
    """
    if loss.shape != ():
        raise ContractError(
            f"backward expects a scalar loss, got shape {loss.shape}"
        )
    interior = {id(e.out) for e in tape._entries}
    for entry in tape._entries:
        entry.out.grad = None
    loss.grad = np.ones((), dtype=np.float64)
    for entry in reversed(tape._entries):
        if entry.out.grad is None:
            continue
        entry.backward_fn(entry.out.grad)
    # Leaves on the tape that the loss never reached still get a grad, so
    # the populated-after-backward contract holds for every recorded leaf.
    for leaf in tape._leaves:
        if leaf.grad is None and id(leaf) not in interior:
            leaf.grad = np.zeros_like(leaf.data)
