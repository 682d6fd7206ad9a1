"""Dense float tensors plus a reverse-mode differentiation tape.

A :class:`Tensor` wraps a contiguous row-major numpy array (float32 for
training, float64 for verification).  Operations defined in
:mod:`aggpose.ops` record nodes on the active :class:`Tape`; replaying the
tape in reverse accumulates gradients into every leaf that asked for them.

One tape belongs to one thread of control.  Tensors are treated as
immutable once created; only the trainer rewrites parameter ``data``
between steps.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import EngineError

FLOAT_DTYPES = (np.float32, np.float64)

_ACTIVE_TAPE: Optional["Tape"] = None


def active_tape() -> Optional["Tape"]:
    return _ACTIVE_TAPE


class Tensor:
    """n-dimensional float array, optionally participating in a tape."""

    __slots__ = ("data", "requires_grad", "grad", "trainable")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        # ascontiguousarray would promote 0-d scalars to 1-d
        self.data = arr if arr.ndim == 0 else np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        # trainable is only consulted by the optimizer; frozen parameters
        # still receive gradients.
        self.trainable = True

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise EngineError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise EngineError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # Arithmetic sugar; the real work lives in aggpose.ops.
    def __add__(self, other):
        from . import ops

        return ops.add(self, _wrap(other, self.dtype))

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, _wrap(other, self.dtype))

    def __mul__(self, other):
        from . import ops

        if isinstance(other, (int, float)):
            return ops.scale(self, float(other))
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def reshape(self, shape) -> "Tensor":
        from . import ops

        return ops.reshape(self, shape)

    def transpose(self, axes) -> "Tensor":
        from . import ops

        return ops.transpose(self, axes)


def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def zeros(shape, dtype=np.float64, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float64, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


class TapeNode:
    """One recorded operation: output plus a rule mapping its gradient to
    input gradients."""

    __slots__ = ("output", "backward")

    def __init__(self, output: Tensor, backward: Callable[[np.ndarray], Sequence[tuple]]):
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of operations for one forward pass.

    ``backward`` replays the record once, in reverse; a second call without
    a fresh forward raises.
    """

    def __init__(self):
        self._nodes: list[TapeNode] = []
        self._consumed = False

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, output: Tensor, backward: Callable) -> None:
        if self._consumed:
            raise EngineError("tape already replayed; run a fresh forward before recording")
        self._nodes.append(TapeNode(output, backward))

    def backward(self, loss: Tensor) -> None:
        if self._consumed:
            raise EngineError("backward called twice on one tape; re-run the forward pass")
        if loss.shape != ():
            raise EngineError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self._nodes:
            raise EngineError("backward on an empty tape")
        self._consumed = True
        loss.grad = np.ones((), dtype=loss.data.dtype)
        for node in reversed(self._nodes):
            g = node.output.grad
            if g is None:
                continue
            for tensor, piece in node.backward(g):
                tensor.accumulate_grad(piece)

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise EngineError("a tape is already active; one tape per thread of control")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None


class no_grad:
    """Temporarily suspend recording (finite differences, inference)."""

    def __enter__(self):
        global _ACTIVE_TAPE
        self._stash = _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._stash
