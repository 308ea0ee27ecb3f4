"""Tape-based reverse-mode differentiation over numpy arrays.

Usage::

    with Tape() as tape:
        x = Tensor(values, requires_grad=True)
        loss = ops.sum(ops.mul(x, x))
    tape.backward(loss)
    x.grad  # 2 * values

Operations in :mod:`rainforge.ops` record a node on the innermost active tape
whenever one of their inputs requires a gradient.  Tapes are thread-local; a
tape and its tensors belong to a single worker.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError

_state = threading.local()


def default_dtype():
    return getattr(_state, "dtype", np.float32)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with.

    The library runs in float32; gradient checks switch to float64 so finite
    differences are not swamped by rounding.
    """
    prev = default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


def _tape_stack():
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense array plus an optional gradient buffer of the same shape."""

    __slots__ = ("data", "requires_grad", "grad", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype or default_dtype())
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self):
        return self.data

    def zero_grad(self):
        if self.requires_grad:
            self.grad[...] = 0

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


# (gradient of the output) -> one gradient (or None) per input
BackwardRule = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class Node:
    inputs: tuple
    output: Tensor
    rule: BackwardRule
    name: str = ""


@dataclass
class Tape:
    nodes: list = field(default_factory=list)
    leaf_ids: set = field(default_factory=set)

    def __post_init__(self):
        self._produced = set()
        self._leaves = {}

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def record(self, inputs, output, rule, name=""):
        for t in inputs:
            if t.requires_grad and id(t) not in self._produced and id(t) not in self.leaf_ids:
                self.leaf_ids.add(id(t))
                self._leaves[id(t)] = t
        self.nodes.append(Node(tuple(inputs), output, rule, name))
        self._produced.add(id(output))

    @property
    def leaves(self):
        return list(self._leaves.values())

    def backward(self, loss):
        backward(self, loss)


def backward(tape: Tape, loss: Tensor):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on ``tape``
    that requires a gradient and from which ``loss`` is reachable."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if id(loss) not in tape._produced and id(loss) not in tape.leaf_ids:
        if loss.requires_grad:
            loss.grad += 1
            return
        raise ContractError("loss was not recorded on this tape")

    grads = {id(loss): np.ones_like(loss.data)}
    owners = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        if node.output.requires_grad:
            node.output.grad += g
        in_grads = node.rule(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.asarray(gi, dtype=t.dtype).reshape(t.shape)
                owners[key] = t
    # whatever is left belongs to leaves
    for key, g in grads.items():
        owners[key].grad += g.reshape(owners[key].shape)
