"""Reverse-mode automatic differentiation over float64 numpy arrays.

A forward pass records a tape implicitly: each produced Tensor keeps its
parents and a closure that maps the incoming gradient to parent gradients.
backward() replays that tape once, in reverse topological order. The update
rules (SGD, Adam) used by every training loop live here too; optimizer state
is owned by the caller and threaded through explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested operation."""


class DivergenceError(RuntimeError):
    """A training loop produced a non-finite loss."""


class Tensor:
    """Node in a define-by-run graph.

    data is float64 and treated as immutable once wrapped. grad is the only
    field mutated after construction; backward() accumulates into it
    additively, so repeated calls without zeroing sum their contributions.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # Convenience operators; the module-level functions are the primary API.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return _reduce(self, np.sum)

    def mean(self) -> "Tensor":
        return _reduce(self, np.mean)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
    return out


def tape(root: Tensor) -> list[Tensor]:
    """Recorded operations reachable from root, inputs before dependents."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d loss / d t into t.grad for every requires_grad t in the graph."""
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    order = tape(loss)
    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        grad = flowing.pop(id(node), None)
        if grad is None:
            continue
        if node.requires_grad:
            node.grad = grad.copy() if node.grad is None else node.grad + grad
        if node._grad_fn is None:
            continue
        for parent, pgrad in zip(node._parents, node._grad_fn(grad)):
            if pgrad is None or not parent.requires_grad:
                continue
            held = flowing.get(id(parent))
            flowing[id(parent)] = pgrad if held is None else held + pgrad


def zero_grad(tensors: Iterable[Tensor] | Mapping[str, Tensor]) -> None:
    values = tensors.values() if isinstance(tensors, Mapping) else tensors
    for t in values:
        t.grad = None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(data, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(data, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(data, (a, b), grad_fn)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    data = a.data @ b.data

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _node(data, (a, b), grad_fn)


def linear(x, w, b) -> Tensor:
    """Affine map x @ w + b; b broadcasts over the batch axis."""
    return add(matmul(x, w), b)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0.0
    return _node(a.data * mask, (a,), lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    t = np.tanh(a.data)
    return _node(t, (a,), lambda g: (g * (1.0 - t * t),))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    data = a.data.reshape(shape)
    return _node(data, (a,), lambda g: (g.reshape(a.shape),))


def flatten(a) -> Tensor:
    """Collapse all axes after the first: (N, ...) -> (N, features)."""
    a = _as_tensor(a)
    if a.ndim < 2:
        raise ShapeError(f"flatten expects a batch dimension, got shape {a.shape}")
    return reshape(a, (a.shape[0], -1))


def _reduce(a: Tensor, op) -> Tensor:
    data = np.asarray(op(a.data))
    scale = 1.0 if op is np.sum else 1.0 / a.data.size

    def grad_fn(g):
        return (np.full(a.shape, float(g) * scale),)

    return _node(data, (a,), grad_fn)


def softmax(v) -> Tensor:
    """Softmax of a 1-d vector, stabilized by max subtraction."""
    v = _as_tensor(v)
    if v.ndim != 1:
        raise ShapeError(f"softmax expects a 1-d vector, got shape {v.shape}")
    if v.data.size == 0:
        raise ValueError("softmax of an empty vector is undefined")
    z = v.data - v.data.max()
    e = np.exp(z)
    s = e / e.sum()

    def grad_fn(g):
        return (s * (g - np.dot(g, s)),)

    return _node(s, (v,), grad_fn)


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-softmax over a batch.

    logits: (B, C); labels: integer array of length B with values in [0, C).
    """
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (batch, classes) logits, got {logits.shape}")
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ShapeError(
            f"cross_entropy got {labels.shape} labels for {logits.shape[0]} logit rows"
        )
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        bad = labels[(labels < 0) | (labels >= c)][0]
        raise IndexError(f"label {bad} out of range for {c} classes")
    labels = labels.astype(np.int64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    nll = np.log(ez.sum(axis=1)) - z[rows, labels]
    data = np.asarray(nll.mean())

    def grad_fn(g):
        gl = probs.copy()
        gl[rows, labels] -= 1.0
        return (gl * (float(g) / n),)

    return _node(data, (logits,), grad_fn)


def conv2d(x, w, stride: int = 1) -> Tensor:
    """Valid 2-d convolution.

    x: (N, C, H, W); w: (F, C, kh, kw); no padding, so the kernel must fit
    inside the input. Output is (N, F, H', W') with H' = (H - kh)//stride + 1.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if cw != c:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape}")
    if kh > h or kw > wd:
        raise ShapeError(f"conv2d kernel {w.shape} larger than input {x.shape}")
    if stride < 1:
        raise ValueError(f"conv2d stride must be >= 1, got {stride}")
    ho = (h - kh) // stride + 1
    wo = (wd - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for ki in range(kh):
        for kj in range(kw):
            xs = x.data[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride]
            out += np.einsum("nchw,fc->nfhw", xs, w.data[:, :, ki, kj])

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        gw = np.zeros_like(w.data)
        for ki in range(kh):
            for kj in range(kw):
                xs = x.data[
                    :, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride
                ]
                gx[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += (
                    np.einsum("nfhw,fc->nchw", g, w.data[:, :, ki, kj])
                )
                gw[:, :, ki, kj] = np.einsum("nfhw,nchw->fc", g, xs)
        return gx, gw

    return _node(out, (x, w), grad_fn)


def grads_of(params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients by name; parameters absent from the last graph yield zeros."""
    return {
        name: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for name, t in params.items()
    }


def sgd_step(
    params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], lr: float
) -> dict[str, Tensor]:
    """One gradient-descent step; returns fresh leaf tensors."""
    if lr <= 0:
        raise ValueError(f"sgd_step needs lr > 0, got {lr}")
    return {
        name: Tensor(t.data - lr * grads[name], requires_grad=True)
        for name, t in params.items()
    }


@dataclass
class AdamState:
    """First/second moment estimates plus the shared step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, Tensor], AdamState]:
    """One Adam step with bias correction; state is updated in place and returned."""
    if lr <= 0:
        raise ValueError(f"adam_step needs lr > 0, got {lr}")
    state.t += 1
    t = state.t
    out: dict[str, Tensor] = {}
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m[...] = beta1 * m + (1.0 - beta1) * g
        v[...] = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        out[name] = Tensor(p.data - lr * m_hat / (np.sqrt(v_hat) + eps), requires_grad=True)
    return out, state
