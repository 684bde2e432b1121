"""Tensor container and the per-thread tape that records differentiable ops."""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when an op receives inputs with non-conforming extents."""

    def __init__(self, op: str, msg: str):
        super().__init__(f"{op}: {msg}")
        self.op = op


class Tensor:
    """Dense array with an optional gradient slot.

    ``data`` is float32 unless a float64 array is passed explicitly (used by
    the finite-difference harness). ``grad`` exists iff ``requires_grad``.
    """

    __slots__ = ("data", "_requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data)
        if arr.dtype != np.float64:
            arr = arr.astype(DTYPE, copy=False)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.name = name
        self._requires_grad = False
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def requires_grad(self) -> bool:
        return self._requires_grad

    @requires_grad.setter
    def requires_grad(self, flag: bool):
        self._requires_grad = bool(flag)
        if self._requires_grad:
            if self.grad is None:
                self.grad = np.zeros_like(self.data)
        else:
            self.grad = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def zero_grad(self):
        if self._requires_grad:
            self.grad = np.zeros_like(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        tag = ", requires_grad" if self._requires_grad else ""
        return f"Tensor(shape={self.shape}{tag}{', ' + self.name if self.name else ''})"

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, _wrap(other))

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, _wrap(other))

    def __mul__(self, other):
        from . import ops
        if isinstance(other, (int, float)):
            return ops.scale(self, float(other))
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, idx):
        from . import ops
        return ops.getitem(self, idx)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of executed ops; backward replays it in reverse."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.enabled = True

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward: Callable):
        self.nodes.append(_Node(op, tuple(inputs), output, backward))

    def clear(self):
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)


_local = threading.local()


def get_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


@contextmanager
def no_grad():
    tape = get_tape()
    prev = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = prev


def make_output(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` and record it when grad is enabled and any input tracks grad.

    ``backward(g)`` returns one gradient (or None) per input.
    """
    tape = get_tape()
    track = tape.enabled and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=False)
    if track:
        out._requires_grad = True
        tape.record(op, inputs, out, backward)
    return out


def backward(loss: Tensor):
    """Populate grads of every requires-grad tensor reachable from ``loss``.

    Grads are assigned, not accumulated: each call overwrites the grad of
    the tensors it reaches. The tape is cleared afterwards.
    """
    tape = get_tape()
    try:
        if loss.data.size != 1:
            raise ShapeError("backward", f"loss must be scalar, got shape {loss.shape}")
        if not loss.requires_grad:
            raise ValueError("backward: loss does not depend on any requires_grad tensor")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        owners: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(tape.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            node.output.grad = g
            owners.pop(id(node.output), None)
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    owners[key] = t
        for key, g in grads.items():
            t = owners[key]
            t.grad = g.astype(t.data.dtype, copy=False).reshape(t.shape)
    finally:
        tape.clear()
