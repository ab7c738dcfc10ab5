"""
Reverse-mode differentiation over a small, fixed set of array primitives.

A Tape is a Wengert list: every primitive application appends a node holding
its value, and backward() walks the list in reverse once, pushing adjoints to
the parents through each primitive's vector-Jacobian product. Arrays are
(D, n) or batched (batch, D, n); matrix axes are always the last two.
"""
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.exceptions import UnsupportedPrimitiveError
from models.base_model import relu, softmax_columns

Grads = Tuple[Optional[np.ndarray], ...]


@dataclass(eq=False)
class Node:
    index: int
    op: str
    value: np.ndarray
    parents: Tuple["Node", ...] = ()
    attrs: Dict[str, Any] = field(default_factory=dict)
    requires_grad: bool = False
    name: Optional[str] = None


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sums grad down to shape, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --- Primitive forwards ---

def _matmul(a, b, transpose_a=False, transpose_b=False):
    return (_swap(a) if transpose_a else a) @ (_swap(b) if transpose_b else b)


def _add_bias(a, bias):
    return a + bias[:, None]


def _mse(pred, target):
    return np.asarray(np.mean((pred - target) ** 2))


def _log_softmax_columns(x):
    shifted = x - np.max(x, axis=-2, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-2, keepdims=True))


def _cross_entropy(logits, labels):
    log_p = _log_softmax_columns(logits)
    return np.asarray(-np.mean(log_p[labels, np.arange(logits.shape[-1])]))


# --- Vector-Jacobian products: (grad_out, inputs, output, attrs, needs) -> grads ---

def _matmul_vjp(g, inputs, out, attrs, needs) -> Grads:
    a, b = inputs
    ta, tb = attrs.get("transpose_a", False), attrs.get("transpose_b", False)
    a_eff = _swap(a) if ta else a
    b_eff = _swap(b) if tb else b
    grad_a = grad_b = None
    if needs[0]:
        ga = g @ _swap(b_eff)
        grad_a = _unbroadcast(_swap(ga) if ta else ga, a.shape)
    if needs[1]:
        gb = _swap(a_eff) @ g
        grad_b = _unbroadcast(_swap(gb) if tb else gb, b.shape)
    return grad_a, grad_b


def _add_vjp(g, inputs, out, attrs, needs) -> Grads:
    return tuple(_unbroadcast(g, x.shape) if need else None for x, need in zip(inputs, needs))


def _add_bias_vjp(g, inputs, out, attrs, needs) -> Grads:
    a, bias = inputs
    grad_bias = _unbroadcast(g, (bias.shape[0], 1))[:, 0] if needs[1] else None
    return (g if needs[0] else None), grad_bias


def _relu_vjp(g, inputs, out, attrs, needs) -> Grads:
    return (g * (inputs[0] > 0),)


def _softmax_vjp(g, inputs, out, attrs, needs) -> Grads:
    return (out * (g - np.sum(g * out, axis=-2, keepdims=True)),)


def _mse_vjp(g, inputs, out, attrs, needs) -> Grads:
    pred, = inputs
    return (g * 2.0 * (pred - attrs["target"]) / pred.size,)


def _cross_entropy_vjp(g, inputs, out, attrs, needs) -> Grads:
    logits, = inputs
    labels = attrs["labels"]
    n = logits.shape[-1]
    grad = np.exp(_log_softmax_columns(logits))
    grad[labels, np.arange(n)] -= 1.0
    return (g * grad / n,)


PRIMITIVES: Dict[str, Tuple[Callable, Callable]] = {
    "matmul": (lambda ins, at: _matmul(*ins, **at), _matmul_vjp),
    "add": (lambda ins, at: ins[0] + ins[1], _add_vjp),
    "add_bias": (lambda ins, at: _add_bias(*ins), _add_bias_vjp),
    "relu": (lambda ins, at: relu(ins[0]), _relu_vjp),
    "softmax_columns": (lambda ins, at: softmax_columns(ins[0]), _softmax_vjp),
    "mse": (lambda ins, at: _mse(ins[0], at["target"]), _mse_vjp),
    "cross_entropy": (lambda ins, at: _cross_entropy(ins[0], at["labels"]), _cross_entropy_vjp),
}


class Tape:
    """Append-only record of primitive applications."""

    def __init__(self):
        self.nodes: List[Node] = []

    def _append(self, op: str, value: np.ndarray, parents: Sequence[Node] = (),
                attrs: Optional[Dict[str, Any]] = None, requires_grad: bool = False,
                name: Optional[str] = None) -> Node:
        node = Node(index=len(self.nodes), op=op, value=value, parents=tuple(parents),
                    attrs=attrs or {}, requires_grad=requires_grad, name=name)
        self.nodes.append(node)
        return node

    def variable(self, value: np.ndarray, name: Optional[str] = None) -> Node:
        return self._append("variable", np.asarray(value, dtype=np.float64), requires_grad=True, name=name)

    def constant(self, value: np.ndarray, name: Optional[str] = None) -> Node:
        return self._append("constant", np.asarray(value, dtype=np.float64), name=name)

    def apply(self, op: str, *inputs: Node, **attrs) -> Node:
        if op not in PRIMITIVES:
            raise UnsupportedPrimitiveError(f"Primitive '{op}' is not supported; available: {sorted(PRIMITIVES)}")
        forward, _ = PRIMITIVES[op]
        value = forward([n.value for n in inputs], attrs)
        return self._append(op, value, inputs, attrs, requires_grad=any(n.requires_grad for n in inputs))

    # --- Convenience wrappers ---
    def matmul(self, a: Node, b: Node, transpose_a: bool = False, transpose_b: bool = False) -> Node:
        return self.apply("matmul", a, b, transpose_a=transpose_a, transpose_b=transpose_b)

    def add(self, a: Node, b: Node) -> Node:
        return self.apply("add", a, b)

    def add_bias(self, a: Node, bias: Node) -> Node:
        return self.apply("add_bias", a, bias)

    def relu(self, a: Node) -> Node:
        return self.apply("relu", a)

    def softmax_columns(self, a: Node) -> Node:
        return self.apply("softmax_columns", a)

    def mse(self, pred: Node, target: np.ndarray) -> Node:
        return self.apply("mse", pred, target=np.asarray(target, dtype=np.float64))

    def cross_entropy(self, logits: Node, labels: np.ndarray) -> Node:
        return self.apply("cross_entropy", logits, labels=np.asarray(labels, dtype=np.int64))

    def backward(self, loss: Node) -> Dict[int, np.ndarray]:
        """Adjoints of every gradient-carrying node reachable from loss."""
        adjoints: Dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
        for node in reversed(self.nodes[:loss.index + 1]):
            g = adjoints.get(node.index)
            if g is None or not node.parents:
                continue
            needs = tuple(p.requires_grad for p in node.parents)
            if not any(needs):
                continue
            _, vjp = PRIMITIVES[node.op]
            grads = vjp(g, [p.value for p in node.parents], node.value, node.attrs, needs)
            for parent, grad, need in zip(node.parents, grads, needs):
                if not need or grad is None:
                    continue
                if parent.index in adjoints:
                    adjoints[parent.index] = adjoints[parent.index] + grad
                else:
                    adjoints[parent.index] = grad
        return adjoints


def grad(build: Callable[[Tape, Dict[str, Node]], Node],
         params: Dict[str, np.ndarray]) -> Tuple[float, Dict[str, np.ndarray]]:
    """Evaluates build on a fresh tape; returns the loss and its gradient per parameter."""
    tape = Tape()
    nodes = {name: tape.variable(value, name=name) for name, value in params.items()}
    loss = build(tape, nodes)
    adjoints = tape.backward(loss)
    return float(loss.value), {name: adjoints.get(node.index, np.zeros_like(node.value))
                               for name, node in nodes.items()}
