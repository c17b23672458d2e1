"""Tensors and the reverse-mode tape that records operations on them.

Operations record onto whichever :class:`Tape` is active in the current
thread (``with Tape() as tape: ...``). Outside a tape nothing is recorded,
which is how inference and evaluation passes stay cheap.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float32

_ids = itertools.count()
_local = threading.local()


class TapeError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    """A tensor holds NaN or Inf values."""


class Tensor:
    """Dense float32 array with an optional gradient slot.

    Equality is identity, so tensors can key dictionaries (gradients are
    returned that way).
    """

    __slots__ = ("data", "requires_grad", "grad", "id", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=default_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def check_finite(self, what: str = "tensor") -> "Tensor":
        if not np.isfinite(self.data).all():
            raise NonFiniteError(f"{what} contains non-finite values (shape {self.shape})")
        return self

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}{flag})"

    # Operator sugar; implementations live in ``ops``.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return ops.mul(self, 1.0 / float(other))

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def sum(self, axis=None):
        from . import ops
        return ops.sum(self, axis)

    def mean(self, axis=None):
        from . import ops
        return ops.mean(self, axis)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def default_dtype():
    return getattr(_local, "dtype", DTYPE)


@contextmanager
def precision(dtype):
    """Run tensors created in this thread at ``dtype`` (float64 is meant for
    numerical checks only)."""
    prev = default_dtype()
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = prev


def _not_scalar(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


VJP = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tape:
    """Ordered record of differentiable operations.

    Each record is ``(output, inputs, vjp)`` where ``vjp`` maps the output
    gradient to one gradient per input (``None`` where the input does not
    need one). Records are appended in execution order, which is already a
    topological order.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], VJP]] = []
        self.leaves: dict[int, Tensor] = {}
        self.grads: dict[int, np.ndarray] = {}
        self._produced: set[int] = set()
        self._consumed = False

    def __enter__(self) -> "Tape":
        stack = _stack()
        stack.append(self)
        return self

    def __exit__(self, *exc):
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: Sequence[Tensor], vjp: VJP) -> None:
        if self._consumed:
            raise TapeError("tape already differentiated; call reset() before recording again")
        for t in inputs:
            if t.requires_grad and t.id not in self._produced and t.id not in self.leaves:
                self.leaves[t.id] = t
        out.requires_grad = True
        self._produced.add(out.id)
        self.records.append((out, tuple(inputs), vjp))

    def reset(self) -> None:
        self.records.clear()
        self.leaves.clear()
        self.grads.clear()
        self._produced.clear()
        self._consumed = False

    def backward(self, root: Tensor) -> dict[Tensor, np.ndarray]:
        """Propagate d(root)/d(leaf) for every requires_grad leaf.

        Returns a dict keyed by leaf tensor and also stores each gradient on
        ``leaf.grad``. Disconnected leaves receive zero buffers.
        """
        if self._consumed:
            raise TapeError("backward already ran on this tape; call reset() first")
        if root.data.size != 1:
            raise ValueError(f"backward root must be scalar, got shape {root.shape}")
        root.check_finite("backward root")
        if root.id not in self._produced and root.id not in self.leaves:
            raise TapeError("root tensor was not recorded on this tape")
        self._consumed = True

        grads = self.grads
        grads[root.id] = np.ones_like(root.data)
        for out, inputs, vjp in reversed(self.records):
            g = grads.pop(out.id, None)
            if g is None:
                continue
            for inp, gi in zip(inputs, vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                prev = grads.get(inp.id)
                grads[inp.id] = gi if prev is None else prev + gi

        result = {}
        for leaf_id, leaf in self.leaves.items():
            g = grads.get(leaf_id)
            if g is None:
                g = np.zeros_like(leaf.data)
            g = np.ascontiguousarray(g, dtype=leaf.data.dtype).reshape(leaf.shape)
            leaf.grad = g
            result[leaf] = g
        # keep only leaf buffers; intermediates are released
        self.grads = {t.id: g for t, g in result.items()}
        self.records = []
        return result


def _stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def record(out: Tensor, inputs: Sequence[Tensor], vjp: VJP) -> Tensor:
    """Record ``out`` on the active tape when any input needs a gradient."""
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, inputs, vjp)
    return out


def grad(root: Tensor, tape: Tape) -> dict[Tensor, np.ndarray]:
    return tape.backward(root)
