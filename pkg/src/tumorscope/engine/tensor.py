"""Dense tensors with a reverse-mode gradient record."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


class NonFiniteError(FloatingPointError):
    """An engine operation produced NaN or Inf."""


class GraphError(RuntimeError):
    """Raised when backward is asked to run on an inconsistent record."""


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily switch the precision used for new tensors (float64 for gradient checks)."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def enable_grad() -> Iterator[None]:
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = True
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """N-dimensional float array that optionally records how it was produced.

    ``grad`` is populated by :func:`backward` for every tensor in the record that
    requires a gradient, intermediates included (Grad-CAM reads them).
    """

    __slots__ = ("data", "requires_grad", "grad", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._op: Operation | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def op(self) -> "Operation | None":
        return self._op

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    # arithmetic sugar; the kernels live in engine.ops
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.add(self, ops.neg(ops.as_tensor(other, like=self)))

    def __neg__(self):
        from . import ops

        return ops.neg(self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops

        return ops.getitem(self, index)

    def sum(self):
        from . import ops

        return ops.sum(self)

    def mean(self):
        from . import ops

        return ops.mean(self)

    def reshape(self, *shape):
        from . import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


@dataclass(eq=False)
class Operation:
    """One executed op: its kind, inputs, output and the closure that maps the
    output gradient to input gradients (closing over saved intermediates)."""

    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor | None
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    saved: dict = field(default_factory=dict)


def check_finite(arr: np.ndarray, kind: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{kind} produced non-finite values")
    return arr


def make_result(data: np.ndarray, kind: str, inputs: Sequence[Tensor],
                backward_fn, saved: dict | None = None) -> Tensor:
    """Wrap a forward result, attaching a record entry when any input needs grad."""
    check_finite(data, kind)
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._op = Operation(kind, tuple(inputs), out, backward_fn, saved or {})
    return out


@dataclass
class ComputationRecord:
    """Operations reachable from ``output``, in topological (execution) order."""

    output: Tensor
    operations: list[Operation]

    def __len__(self) -> int:
        return len(self.operations)


def trace(output: Tensor) -> ComputationRecord:
    """Collect the record that produced ``output``. Iterative, so deep graphs are fine."""
    order: list[Operation] = []
    seen: set[int] = set()
    if output._op is None:
        return ComputationRecord(output, order)
    stack: list[tuple[Operation, bool]] = [(output._op, False)]
    while stack:
        op, expanded = stack.pop()
        if expanded:
            order.append(op)
            continue
        if id(op) in seen:
            continue
        seen.add(id(op))
        stack.append((op, True))
        for t in reversed(op.inputs):
            if t._op is not None and id(t._op) not in seen:
                stack.append((t._op, False))
    return ComputationRecord(output, order)


def backward(loss: Tensor, record: ComputationRecord | None = None) -> ComputationRecord:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every grad-requiring tensor in the record.

    Gradients are summed into existing ``grad`` arrays, so a tensor consumed by
    several ops (or several backward calls) receives every contribution.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if record is None:
        record = trace(loss)
    elif record.output is not loss:
        raise GraphError("computation record does not terminate in the given loss")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor that requires grad")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for op in reversed(record.operations):
        g_out = grads.pop(id(op.output), None)
        if g_out is None:
            continue
        _accumulate(op.output, g_out)
        in_grads = op.backward_fn(g_out)
        for t, g in zip(op.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            if t._op is None:
                _accumulate(t, g)
            elif id(t) in grads:
                grads[id(t)] = grads[id(t)] + g
            else:
                grads[id(t)] = g
    return record


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
    check_finite(g, "backward")
    t.grad = g.copy() if t.grad is None else t.grad + g
