"""NCHW tensors and the tape that records operations for reverse-mode AD.

Every differentiable op goes through :func:`record`, which appends an entry
to the active :class:`Tape` whenever at least one input is tracked.
:func:`backward` then walks that tape in reverse and accumulates gradients
into the leaves.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .exceptions import NonFiniteError, ShapeError

_SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class _State(threading.local):
    def __init__(self):
        self.grad_enabled = True
        self.debug = False
        self.tape = Tape()


class Tensor:
    """Dense 4-D float array, optionally tracked for gradients.

    Leaves are tensors created directly by the user (parameters, inputs);
    non-leaves are produced by ops and point back to their tape entry.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _SUPPORTED_DTYPES:
            arr = arr.astype(np.float32)
        if arr.ndim != 4:
            raise ShapeError(f"Tensor must be 4-D (n, c, h, w), got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[_Op] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        from .ops import elementwise_add

        return elementwise_add(self, other)

    def __mul__(self, other):
        from .ops import elementwise_mul

        return elementwise_mul(self, other)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


@dataclass(eq=False)
class _Op:
    name: str
    inputs: tuple
    output: "Tensor"
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    tape: "Tape"


class Tape:
    """Ordered record of the ops executed since the last backward pass."""

    def __init__(self):
        self.ops: list[_Op] = []
        self.consumed = False

    def __len__(self):
        return len(self.ops)

    def append(self, op: _Op):
        if self.consumed:
            raise RuntimeError("cannot record onto a tape that was already consumed")
        self.ops.append(op)

    def backward(self, loss: Tensor):
        if self.consumed:
            raise RuntimeError(
                "backward called twice on the same tape; re-run the forward pass first"
            )
        if not self.ops:
            raise RuntimeError("backward on an empty tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for op in reversed(self.ops):
            g_out = grads.pop(id(op.output), None)
            if g_out is None:
                continue
            g_ins = op.backward(g_out)
            for inp, g in zip(op.inputs, g_ins):
                if g is None or not inp.requires_grad:
                    continue
                if g.shape != inp.shape:
                    raise ShapeError(
                        f"{op.name} backward produced grad {g.shape} for input {inp.shape}"
                    )
                if inp._node is None:
                    inp.grad = g.copy() if inp.grad is None else inp.grad + g
                else:
                    key = id(inp)
                    grads[key] = g if key not in grads else grads[key] + g
        self.consumed = True
        self.ops = []
        if _state.tape is self:
            _state.tape = Tape()


_state = _State()


def current_tape() -> Tape:
    return _state.tape


def is_grad_enabled() -> bool:
    return _state.grad_enabled


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them (inference, evaluation, optimizer steps)."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def debug_mode(enabled: bool = True):
    """Check every op output for NaN/inf while active."""
    prev = _state.debug
    _state.debug = enabled
    try:
        yield
    finally:
        _state.debug = prev


def record(name: str, out: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    """Wrap ``out`` in a Tensor and put it on the tape if any input is tracked."""
    if _state.debug and not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{name} produced non-finite values")
    result = Tensor(out)
    if _state.grad_enabled and any(t.requires_grad for t in inputs):
        for t in inputs:
            if t._node is not None and t._node.tape.consumed:
                raise RuntimeError(
                    f"{name}: input was produced on a consumed tape; recompute it"
                )
        result.requires_grad = True
        op = _Op(name, tuple(inputs), result, backward, _state.tape)
        result._node = op
        _state.tape.append(op)
    return result


def backward(loss: Tensor):
    """Populate ``.grad`` on every tracked leaf that ``loss`` depends on."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
            return
        raise RuntimeError("loss does not depend on any tensor that requires grad")
    loss._node.tape.backward(loss)


def check_same_dtype(name: str, *tensors: Tensor):
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise TypeError(f"{name}: mixed dtypes {sorted(str(d) for d in dtypes)}")
