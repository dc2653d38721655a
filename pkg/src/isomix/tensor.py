"""Dense tensors with a reverse-mode differentiation tape.

A :class:`Tensor` wraps a numpy array. While a :class:`Tape` is active,
every primitive applied to tensors records a backward closure on it;
``tape.backward(loss)`` replays those closures in reverse application
order (which is reverse topological order, since eager execution appends
each node after its inputs) and accumulates gradients into ``.grad``.

Outside a tape, tensors are plain values: no graph is kept and they are
safe to share between threads.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "active_tape",
    "set_default_dtype",
    "default_dtype",
    "set_debug_checks",
    "debug_checks",
    "ShapeError",
    "GradientError",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GradientError(RuntimeError):
    """Raised on tape misuse (double backward, non-scalar loss, ...)."""


_state = threading.local()

_default_dtype = np.float64
_debug_checks = False


def set_default_dtype(dtype) -> None:
    """Set the dtype used for tensors created from python data.

    Tests and oracles run in float64; training runs may select float32.
    """
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _default_dtype = dtype.type


def default_dtype():
    return _default_dtype


def set_debug_checks(flag: bool) -> None:
    """When enabled, every primitive asserts its output is finite."""
    global _debug_checks
    _debug_checks = bool(flag)


def debug_checks() -> bool:
    return _debug_checks


def active_tape() -> Optional["Tape"]:
    return getattr(_state, "tape", None)


class Tensor:
    """A dense n-dimensional array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            # copy: the incoming array may alias another node's buffer
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # -- arithmetic sugar (implemented in ops.py, bound at import) -----
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops

        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops

        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops

        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops

        return ops.div(other, self)

    def __neg__(self):
        from . import ops

        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of primitive applications for one backward pass.

    Nodes are appended in execution order, so iterating the record in
    reverse visits consumers before producers. Gradient accumulation is
    additive and happens in that fixed order: runs are reproducible for
    a fixed seed and thread count.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._spent = False

    # -- context management --------------------------------------------
    def __enter__(self) -> "Tape":
        if active_tape() is not None:
            raise GradientError("nested tapes are not supported")
        _state.tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _state.tape = None

    # -- recording -------------------------------------------------------
    def record(self, out: Tensor, backward: Callable[[np.ndarray], None]) -> None:
        self._nodes.append((out, backward))

    def __len__(self) -> int:
        return len(self._nodes)

    # -- replay ----------------------------------------------------------
    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/dx into ``x.grad`` for every tensor on the tape.

        ``loss`` must be a scalar produced under this tape. May be called
        once; the record is released afterwards.
        """
        if self._spent:
            raise GradientError("tape already consumed by a backward pass")
        if loss.data.size != 1:
            raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._spent = True
        loss.accumulate_grad(np.ones_like(loss.data))
        for out, backward in reversed(self._nodes):
            if out.grad is None:
                continue  # not on a path to the loss
            backward(out.grad)
        self._nodes = []


def record_op(
    out_data: np.ndarray,
    parents: Sequence[Tensor],
    backward: Callable[[Tensor, np.ndarray], None],
) -> Tensor:
    """Wrap an op result, recording it on the active tape if needed.

    ``backward`` receives (output tensor, output gradient) and must
    accumulate into the parents' ``.grad`` via ``accumulate_grad``.
    """
    if _debug_checks and not np.all(np.isfinite(out_data)):
        raise FloatingPointError("non-finite values produced by a primitive")
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, lambda g, _out=out: backward(_out, g))
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (the adjoint of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(p.data)) for p in params)
