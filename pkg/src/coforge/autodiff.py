"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Each operation builds a node holding its parents and a closure that maps the
output gradient to parent gradients; ``backward`` walks the graph once in
reverse topological order.  Broadcasting is limited to bias-add (matrix + row
vector) and multiplication by a scalar-shaped tensor, which keeps every
jacobian easy to audit.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    """Dense array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fns", "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fns: tuple = ()
        self._backward_done = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], grad_fns: tuple) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = parents
        out._grad_fns = grad_fns
    return out


def _shape_error(op: str, a: Tensor, b: Tensor) -> ValueError:
    return ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a, b)
    return _node(
        a.data @ b.data,
        (a, b),
        (lambda g: g @ b.data.T, lambda g: a.data.T @ g),
    )


def add(a, b) -> Tensor:
    """Elementwise add; also accepts matrix + row vector as a bias add."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        return _node(a.data + b.data, (a, b), (lambda g: g, lambda g: g))
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        return _node(a.data + b.data, (a, b), (lambda g: g, lambda g: g.sum(axis=0)))
    raise _shape_error("add", a, b)


def mul(a, b) -> Tensor:
    """Elementwise multiply; one operand may be scalar-shaped."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        return _node(a.data * b.data, (a, b), (lambda g: g * b.data, lambda g: g * a.data))
    if a.size == 1:
        return _node(
            a.data * b.data,
            (a, b),
            (lambda g: np.sum(g * b.data).reshape(a.shape), lambda g: g * a.data),
        )
    if b.size == 1:
        return _node(
            a.data * b.data,
            (a, b),
            (lambda g: g * b.data, lambda g: np.sum(g * a.data).reshape(b.shape)),
        )
    raise _shape_error("mul", a, b)


def scale(a, factor: float) -> Tensor:
    """Multiply by a python constant (no gradient for the constant)."""
    a = _as_tensor(a)
    return _node(a.data * factor, (a,), (lambda g: g * factor,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0.0
    return _node(np.where(mask, a.data, 0.0), (a,), (lambda g: g * mask,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _node(np.log(a.data), (a,), (lambda g: g / a.data,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), (lambda g: g * out,))


def softmax(a) -> Tensor:
    """Softmax along the last axis (any rank)."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    return _node(
        y, (a,), (lambda g: (g - np.sum(g * y, axis=-1, keepdims=True)) * y,)
    )


def mean(a) -> Tensor:
    a = _as_tensor(a)
    n = a.size
    return _node(
        np.asarray(a.data.mean()), (a,), (lambda g: np.full(a.shape, float(g) / n),)
    )


def sum_(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        return _node(np.asarray(a.data.sum()), (a,), (lambda g: np.full(a.shape, float(g)),))
    return _node(
        a.data.sum(axis=axis),
        (a,),
        (lambda g: np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),),
    )


def take(a, index) -> Tensor:
    """Select one element (by flat or tuple index) as a scalar tensor."""
    a = _as_tensor(a)

    def grad_fn(g):
        out = np.zeros(a.shape)
        out[index] = float(g)
        return out

    return _node(np.asarray(a.data[index]), (a,), (grad_fn,))


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ValueError(
            f"cross_entropy: logits {logits.shape} incompatible with labels {labels.shape}"
        )
    n = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    loss = -log_probs[np.arange(n), labels].mean()
    probs = np.exp(log_probs)

    def grad_fn(g):
        grad = probs.copy()
        grad[np.arange(n), labels] -= 1.0
        return grad * (float(g) / n)

    return _node(np.asarray(loss), (logits,), (grad_fn,))


def ste_quantize(w, quantizer) -> Tensor:
    """Straight-through estimator: forward applies ``quantizer`` to the raw
    array, backward passes the gradient through unchanged."""
    w = _as_tensor(w)
    out = np.asarray(quantizer(w.data), dtype=np.float64)
    if out.shape != w.shape:
        raise ValueError(f"ste_quantize: quantizer changed shape {w.shape} -> {out.shape}")
    return _node(out, (w,), (lambda g: g,))


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar loss into every requires_grad tensor
    reachable from it.  A second backward on the same graph is rejected."""
    if loss.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is detached from any differentiable input")
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        if node._parents and node._backward_done:
            raise RuntimeError("backward was already run on this graph; re-run the forward pass")
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._parents:
            node._backward_done = True
        if node.grad is None:
            continue
        for parent, grad_fn in zip(node._parents, node._grad_fns):
            if not parent.requires_grad:
                continue
            contribution = grad_fn(node.grad)
            if parent.grad is None:
                parent.grad = np.array(contribution, dtype=np.float64)
            else:
                parent.grad = parent.grad + contribution
