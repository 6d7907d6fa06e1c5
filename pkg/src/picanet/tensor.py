"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable operation appends one record to the active
:class:`Tape`.  A record keeps references to its input and output tensors
and a closure that maps output gradients to input gradients.  Calling
:func:`backward` walks the records in reverse order, so gradient
accumulation is sequential and deterministic.

Operations executed while no tape is active are not recorded; this is the
inference path.
"""

from __future__ import annotations

import contextlib
import hashlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import NumericalError

_FLOAT_TYPES = (np.float32, np.float64)

_state = threading.local()
_corrupted_ops: dict[str, float] = {}
_detect_anomaly = False
_branch_log: list | None = None


class Tensor:
    """N-dimensional float array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _FLOAT_TYPES:
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def astype(self, dtype) -> "Tensor":
        from . import functional as F

        return F.cast(self, dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # arithmetic sugar; the rules live in functional
    def __add__(self, other):
        from . import functional as F

        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F

        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F

        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F

        return F.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import functional as F

        return F.div(self, other)

    def __rtruediv__(self, other):
        from . import functional as F

        return F.div(other, self)

    def __neg__(self):
        from . import functional as F

        return F.neg(self)

    def __matmul__(self, other):
        from . import functional as F

        return F.matmul(self, other)

    def __getitem__(self, index):
        from . import functional as F

        return F.getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        from . import functional as F

        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import functional as F

        return F.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import functional as F

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *axes):
        from . import functional as F

        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return F.transpose(self, axes or None)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


@dataclass
class Record:
    name: str
    inputs: tuple[Tensor, ...]
    outputs: tuple[Tensor, ...]
    backward: Callable[[list], Sequence]


class Tape:
    """Ordered log of executed operations for one backward pass.

    Use as a context manager; operations run inside the ``with`` block are
    recorded.  A tape belongs to the thread that entered it.
    """

    def __init__(self) -> None:
        self.records: list[Record] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def reset(self) -> None:
        self.records.clear()


def _stack() -> list[Tape]:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def current_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording (used by finite differences and inference)."""
    stack = _stack()
    saved = list(stack)
    stack.clear()
    try:
        yield
    finally:
        stack.extend(saved)


@contextlib.contextmanager
def detect_anomaly() -> Iterator[None]:
    """Raise NumericalError naming the first op whose output is not finite."""
    global _detect_anomaly
    prev = _detect_anomaly
    _detect_anomaly = True
    try:
        yield
    finally:
        _detect_anomaly = prev


@contextlib.contextmanager
def branch_trace() -> Iterator[list]:
    """Collect a digest of every branch decision (ReLU masks, pool argmaxes, clamps).

    Two evaluations with equal traces lie on the same smooth piece of the
    function, which is what a central difference needs.
    """
    global _branch_log
    prev = _branch_log
    _branch_log = []
    try:
        yield _branch_log
    finally:
        _branch_log = prev


def note_branch(decision: np.ndarray) -> None:
    if _branch_log is not None:
        _branch_log.append(hashlib.blake2b(np.ascontiguousarray(decision).tobytes(),
                                           digest_size=16).digest())


@contextlib.contextmanager
def corrupt_backward(op_name: str, factor: float = 1.5) -> Iterator[None]:
    """Test hook: scale every input gradient produced by ``op_name``."""
    _corrupted_ops[op_name] = factor
    try:
        yield
    finally:
        _corrupted_ops.pop(op_name, None)


def record(name: str, inputs: Sequence[Tensor], outputs: Sequence[np.ndarray],
           backward: Callable[[list], Sequence]) -> list[Tensor]:
    """Wrap raw output arrays as tensors and log the op on the active tape.

    ``backward`` receives one gradient per output (``None`` when an output
    did not influence the loss) and returns one gradient per input
    (``None`` for inputs that need none).
    """
    if _detect_anomaly:
        for arr in outputs:
            if not np.all(np.isfinite(arr)):
                raise NumericalError(f"non-finite values produced by op '{name}'")
    tape = current_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    outs = [Tensor(arr, requires_grad=track, dtype=arr.dtype) for arr in outputs]
    if track:
        if name in _corrupted_ops:
            backward = _corrupt(backward, _corrupted_ops[name])
        tape.records.append(Record(name, tuple(inputs), tuple(outs), backward))
    return outs


def record1(name: str, inputs: Sequence[Tensor], output: np.ndarray,
            backward: Callable[[np.ndarray], Sequence]) -> Tensor:
    """Single-output form of :func:`record`."""
    return record(name, inputs, [output], lambda gs: backward(gs[0]))[0]


def _corrupt(fn, factor):
    def wrapped(gs):
        return [None if g is None else g * factor for g in fn(gs)]

    return wrapped


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` buffers.  The tape is reset
    afterwards.
    """
    if loss.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else current_tape()
    if tape is None:
        raise ValueError("backward() called without a tape")
    grads: dict[int, list] = {id(loss): [loss, np.ones_like(loss.data)]}
    for rec in reversed(tape.records):
        gouts = []
        live = False
        for out in rec.outputs:
            entry = grads.pop(id(out), None)
            gouts.append(None if entry is None else entry[1])
            live = live or entry is not None
        if not live:
            continue
        gins = rec.backward(gouts)
        for t, g in zip(rec.inputs, gins):
            if g is None or not t.requires_grad:
                continue
            entry = grads.get(id(t))
            if entry is None:
                grads[id(t)] = [t, g]
            else:
                entry[1] = entry[1] + g
    for t, g in grads.values():
        if not t.requires_grad:
            continue
        g = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g
    tape.reset()
