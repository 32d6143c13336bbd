"""Dense tensors, trainable parameters and the gradient tape.

Operations in :mod:`lczlab.ops` record themselves on the innermost active
:class:`Tape` whenever one of their inputs requires a gradient.  Outside a
tape nothing is recorded, which is how inference runs.

    with Tape() as tape:
        loss = some_graph(x)
    tape.backward(loss)
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteError, StateError

DEFAULT_DTYPE = np.float32

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """N-dimensional float array that may take part in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        arr = np.ascontiguousarray(data, dtype=dtype)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # small arithmetic surface; everything heavier lives in ops
    def __add__(self, other):
        from . import ops

        return ops.add(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        from . import ops

        if isinstance(other, (int, float)):
            return ops.scale(self, float(other))
        return ops.mul(self, _as_tensor(other, self.dtype))

    __radd__ = __add__
    __rmul__ = __mul__


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


class Parameter(Tensor):
    """Trainable tensor carrying its own Adam moment buffers."""

    __slots__ = ("adam_m", "adam_v", "step_count")

    def __init__(self, data, dtype=None, name: str | None = None):
        super().__init__(data, requires_grad=True, dtype=dtype, name=name)
        self.grad = None
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter(name={self.name!r}, shape={self.shape})"


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tape:
    """Ordered record of differentiable operations.

    Each record is ``(output, inputs, backward_fn)``; ``backward_fn`` maps the
    output gradient to one gradient (or None) per input.
    """

    def __init__(self, check_finite: bool = True):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], BackwardFn]] = []
        self.check_finite = check_finite

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> None:
        self.records.append((out, tuple(inputs), backward_fn))

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        """Replay the tape in reverse, accumulating into ``.grad`` of every input."""
        if not loss.requires_grad:
            raise StateError("loss does not depend on any tensor that requires a gradient")
        if grad is None:
            if loss.data.size != 1:
                raise StateError(f"backward needs an explicit seed gradient for non-scalar shape {loss.shape}")
            grad = np.ones_like(loss.data)
        loss.grad = np.asarray(grad, dtype=loss.dtype).reshape(loss.shape).copy()
        # intermediates get fresh buffers so a tape can be replayed only once per graph
        for out, _, _ in self.records:
            if out is not loss and not isinstance(out, Parameter):
                out.grad = None
        for out, inputs, fn in reversed(self.records):
            g = out.grad
            if g is None:
                continue
            in_grads = fn(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if self.check_finite and not np.all(np.isfinite(gi)):
                    raise NonFiniteError(f"non-finite gradient flowing into tensor of shape {t.shape}")
                if t.grad is None:
                    t.grad = np.array(gi, dtype=t.dtype, copy=True).reshape(t.shape)
                else:
                    t.grad += gi.reshape(t.shape)
        self.records.clear()
