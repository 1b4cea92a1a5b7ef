"""Tape-based reverse-mode differentiation.

Operations append a :class:`Node` to an explicit :class:`Tape`; ``Tape.backward``
walks the nodes in reverse append order.  Parameter gradients are collected on
the tape and committed into ``Parameter.grad`` under a lock, so several tapes
may run on separate threads while accumulation stays serialized.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ..errors import IncompleteTape


class Variable:
    """A dense array flowing through the graph, with a slot for its gradient."""

    __slots__ = ("value", "grad", "requires_grad", "__weakref__")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value)
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Variable(shape={self.value.shape}, requires_grad={self.requires_grad})"


class Parameter(Variable):
    """A named learnable array with a persistent gradient accumulator."""

    __slots__ = ("name",)

    def __init__(self, name: str, value):
        super().__init__(np.array(value, dtype=np.float64), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


@dataclass(eq=False)
class Node:
    inputs: Sequence[Variable]
    output: Variable
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str = ""


class Tape:
    """Append-only record of a forward pass.

    A tape is consumed by its first ``backward`` call.  The class keeps a count
    of tapes that are alive (created and not yet consumed or closed) and the
    peak of that count, which the trainer's memory contract is asserted against.
    """

    _lock = threading.Lock()
    _commit_lock = threading.Lock()
    live = 0
    peak = 0

    def __init__(self):
        self.nodes: list[Node] = []
        self.recording = True
        self.param_grads: dict[Parameter, np.ndarray] = {}
        self._closed = False
        with Tape._lock:
            Tape.live += 1
            Tape.peak = max(Tape.peak, Tape.live)

    @classmethod
    def reset_counters(cls):
        with cls._lock:
            cls.peak = cls.live

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __del__(self):
        # an abandoned tape must not keep counting as live
        self.close()

    def close(self):
        if not getattr(self, "_closed", True):
            self._closed = True
            self.recording = False
            self.nodes = []
            with Tape._lock:
                Tape.live -= 1

    def record(self, inputs, output: Variable, backward, op: str = "") -> None:
        if self._closed:
            raise IncompleteTape("tape is closed")
        if self.recording and any(v.requires_grad for v in inputs):
            output.requires_grad = True
            self.nodes.append(Node(list(inputs), output, backward, op))

    def backward(self, output: Variable, seed=None, commit: bool = True) -> None:
        """Propagate ``seed`` (d loss / d output) back to every recorded input."""
        if self._closed:
            raise IncompleteTape("tape already consumed")
        if not any(n.output is output for n in self.nodes):
            raise IncompleteTape("seed value was not produced on this tape")
        seed = np.ones_like(output.value) if seed is None else np.asarray(seed, dtype=output.value.dtype)
        if seed.shape != output.value.shape:
            raise ValueError(f"seed shape {seed.shape} != output shape {output.value.shape}")

        grads: dict[int, np.ndarray] = {id(output): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if isinstance(inp, Parameter):
                    acc = self.param_grads.get(inp)
                    self.param_grads[inp] = gi.copy() if acc is None else acc + gi
                    continue
                acc = grads.get(id(inp))
                grads[id(inp)] = gi if acc is None else acc + gi
        # leaves that were requested as inputs (not produced by any node)
        produced = {id(n.output) for n in self.nodes}
        for node in self.nodes:
            for inp in node.inputs:
                if id(inp) in grads and id(inp) not in produced and not isinstance(inp, Parameter):
                    g = grads.pop(id(inp))
                    inp.grad = g.copy() if inp.grad is None else inp.grad + g
        self.close()
        if commit:
            self.commit()

    def commit(self) -> None:
        """Add the collected parameter gradients into ``Parameter.grad``."""
        with Tape._commit_lock:
            for p, g in self.param_grads.items():
                p.grad += g
        self.param_grads = {}
