"""Tensors and the gradient tape.

A :class:`Tape` records every primitive applied while it is active. Reverse
mode differentiation replays the recorded nodes backwards; since nodes are
appended in execution order, the reversed list is a valid reverse topological
order and each node is visited once.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class Tensor:
    """An immutable n-d array that may take part in differentiation."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    kind: str
    inputs: tuple
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence]
    saved: dict = field(default_factory=dict)


_ACTIVE: list["Tape"] = []


def active_tape() -> "Tape | None":
    return _ACTIVE[-1] if _ACTIVE else None


def record(kind: str, inputs: Iterable[Tensor], output_data: np.ndarray, vjp, **saved) -> Tensor:
    """Wrap ``output_data`` in a Tensor and log it on the active tape if needed."""
    inputs = tuple(inputs)
    needs_grad = any(t.requires_grad for t in inputs)
    out = Tensor(output_data, requires_grad=needs_grad)
    tape = active_tape()
    if tape is not None and needs_grad:
        tape.nodes.append(Node(kind, inputs, out, vjp, saved))
    return out


class NonFiniteGradientError(FloatingPointError):
    pass


class Tape:
    """Records primitives executed inside ``with Tape() as tape:``."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def _propagate(self, output: Tensor, seed, relu_rule: str) -> dict:
        if seed is None:
            if output.data.size != 1:
                raise ValueError("a seed gradient is required for non-scalar outputs")
            seed = np.ones_like(output.data)
        seed = np.asarray(seed, dtype=output.data.dtype)
        if seed.shape != output.shape:
            raise ValueError(f"seed shape {seed.shape} != output shape {output.shape}")
        grads = {id(output): seed}
        for node in reversed(self.nodes):
            g = grads.get(id(node.output))
            if g is None:
                continue
            if node.kind == "relu" and relu_rule == "guided":
                # guided backprop: drop negative upstream signal as well
                in_grads = (g * node.saved["mask"] * (g > 0),)
            else:
                in_grads = node.vjp(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return grads

    def gradient(self, output: Tensor, wrt: Sequence[Tensor], seed=None, relu_rule: str = "standard") -> list:
        """Gradients of ``output`` (contracted with ``seed``) for each tensor in ``wrt``.

        Tensors the output does not depend on get a zero array. ``relu_rule``
        is ``"standard"`` or ``"guided"``.
        """
        if relu_rule not in ("standard", "guided"):
            raise ValueError(f"unknown relu rule {relu_rule!r}")
        grads = self._propagate(output, seed, relu_rule)
        result = []
        for t in wrt:
            g = grads.get(id(t))
            if g is None:
                g = np.zeros_like(t.data)
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(f"non-finite gradient for {t!r}")
            result.append(g)
        return result

    def leaves(self) -> list[Tensor]:
        """Tensors that require grad but were not produced on this tape."""
        produced = {id(n.output) for n in self.nodes}
        seen, out = set(), []
        for n in self.nodes:
            for t in n.inputs:
                if t.requires_grad and id(t) not in produced and id(t) not in seen:
                    seen.add(id(t))
                    out.append(t)
        return out


def backward(tape: Tape, output: Tensor, seed=None) -> dict:
    """Gradients for every leaf tensor (parameters and input) on ``tape``."""
    leaves = tape.leaves()
    return dict(zip(leaves, tape.gradient(output, leaves, seed=seed)))
