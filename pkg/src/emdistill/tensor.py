"""Minimal dense float64 tensor library with reverse-mode autodiff.

Just enough ops for a small transformer encoder and the distillation
losses: matmul (2-d and batched 3-d), add/sub/scale, elementwise mul,
transpose, reshape, row softmax / log-softmax with temperature, layer
norm, GELU, embedding lookup, sum/mean reductions and MSE.
"""

from __future__ import annotations

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class ParameterError(ValueError):
    """A scalar hyperparameter (e.g. temperature) is out of range."""


class UsageError(RuntimeError):
    """An op was called in a way its contract forbids."""


def _arr(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """A dense n-d array node in a computation graph.

    Tensors are immutable after creation except for the grad buffer,
    which backward() fills. The graph is freed after backward(); run a
    fresh forward pass for every optimization step.
    """

    def __init__(self, data, requires_grad=False, _children=(), _backward=None):
        self.data = _arr(data)
        self.requires_grad = bool(requires_grad) or any(
            c.requires_grad for c in _children
        )
        self.grad = None
        self._children = tuple(_children)
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def _accumulate(self, g: np.ndarray):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self):
        backward(self)


class Parameter:
    """Named trainable tensor; participates in optimizer steps."""

    def __init__(self, data, name: str):
        self.tensor = Tensor(data, requires_grad=True)
        self.name = name

    @property
    def data(self):
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad

    def zero_grad(self):
        self.tensor.zero_grad()

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


def backward(loss: Tensor):
    """Accumulate gradients of a scalar loss into every reachable leaf.

    Repeated backward calls (over fresh graphs) add into existing grad
    buffers. The graph behind `loss` is freed afterwards.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")

    topo: list[Tensor] = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for child in node._children:
            if id(child) not in visited:
                stack.append((child, False))

    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None and node.requires_grad:
            node._backward(node.grad)
        if node._children:
            # free intermediate buffers; leaves keep their grads
            node.grad = None
        node._backward = None
        node._children = ()


def _need(out_children):
    return any(c.requires_grad for c in out_children)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape}")
    out = Tensor(a.data + b.data, _children=(a, b))

    def _bw(g):
        a._accumulate(g if a.shape == out.shape else g.sum().reshape(a.shape))
        b._accumulate(g if b.shape == out.shape else g.sum().reshape(b.shape))

    out._backward = _bw if out.requires_grad else None
    return out


def add_rowvec(a: Tensor, b: Tensor) -> Tensor:
    """Add a length-n vector to every last-axis row of a."""
    if a.shape[-1] != b.shape[-1] or b.ndim != 1:
        raise DimensionError(f"add_rowvec: shapes {a.shape} and {b.shape}")
    out = Tensor(a.data + b.data, _children=(a, b))

    def _bw(g):
        a._accumulate(g)
        b._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))

    out._backward = _bw if out.requires_grad else None
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape}")
    out = Tensor(a.data - b.data, _children=(a, b))

    def _bw(g):
        a._accumulate(g if a.shape == out.shape else g.sum().reshape(a.shape))
        b._accumulate(-g if b.shape == out.shape else -g.sum().reshape(b.shape))

    out._backward = _bw if out.requires_grad else None
    return out


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * c, _children=(a,))
    out._backward = (lambda g: a._accumulate(g * c)) if out.requires_grad else None
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; shapes must match exactly or one side scalar."""
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape}")
    out = Tensor(a.data * b.data, _children=(a, b))

    def _bw(g):
        ga = g * b.data
        gb = g * a.data
        a._accumulate(ga if a.shape == out.shape else ga.sum().reshape(a.shape))
        b._accumulate(gb if b.shape == out.shape else gb.sum().reshape(b.shape))

    out._backward = _bw if out.requires_grad else None
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. 2-d x 2-d, or 3-d x 3-d with equal batch dims."""
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul: shapes {a.shape} and {b.shape}")
    elif a.ndim == 3 and b.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise DimensionError(f"matmul: shapes {a.shape} and {b.shape}")
    else:
        raise DimensionError(f"matmul: unsupported ranks {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data, _children=(a, b))

    def _bw(g):
        a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

    out._backward = _bw if out.requires_grad else None
    return out


def transpose(a: Tensor, axes=None) -> Tensor:
    out = Tensor(np.transpose(a.data, axes), _children=(a,))
    inv = None if axes is None else np.argsort(axes)

    def _bw(g):
        a._accumulate(np.transpose(g, inv))

    out._backward = _bw if out.requires_grad else None
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), _children=(a,))

    def _bw(g):
        a._accumulate(g.reshape(a.shape))

    out._backward = _bw if out.requires_grad else None
    return out


def _check_temperature(t):
    t = float(t)
    if not t > 0:
        raise ParameterError(f"temperature must be positive, got {t}")
    return t


def softmax_row(x: Tensor, t: float = 1.0) -> Tensor:
    """Softmax over the last axis of x / t."""
    t = _check_temperature(t)
    z = x.data / t
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y, _children=(x,))

    def _bw(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        x._accumulate(y * (g - dot) / t)

    out._backward = _bw if out.requires_grad else None
    return out


def log_softmax_row(x: Tensor, t: float = 1.0) -> Tensor:
    """Log-softmax over the last axis of x / t, computed with a max shift."""
    t = _check_temperature(t)
    z = x.data / t
    m = z.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
    out = Tensor(z - lse, _children=(x,))
    soft = np.exp(z - lse)

    def _bw(g):
        x._accumulate((g - soft * g.sum(axis=-1, keepdims=True)) / t)

    out._backward = _bw if out.requires_grad else None
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis to mean 0 / var 1, then rescale by gamma, beta."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError(
            f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gamma.data + beta.data, _children=(x, gamma, beta))

    def _bw(g):
        n = x.shape[-1]
        dxhat = g * gamma.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        x._accumulate(dx)
        gamma._accumulate((g * xhat).reshape(-1, n).sum(axis=0))
        beta._accumulate(g.reshape(-1, n).sum(axis=0))

    out._backward = _bw if out.requires_grad else None
    return out


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU activation (tanh approximation)."""
    u = _GELU_C * (x.data + 0.044715 * x.data**3)
    th = np.tanh(u)
    out = Tensor(0.5 * x.data * (1.0 + th), _children=(x,))

    def _bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x.data**2)
        dy = 0.5 * (1.0 + th) + 0.5 * x.data * (1.0 - th**2) * du
        x._accumulate(g * dy)

    out._backward = _bw if out.requires_grad else None
    return out


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of a (vocab, dim) table by integer id."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise DimensionError(f"embedding_lookup: ids must be 1-d, got {ids.shape}")
    if ids.min(initial=0) < 0 or (ids.size and ids.max() >= table.shape[0]):
        raise DimensionError(
            f"embedding_lookup: id out of range for table of {table.shape[0]} rows"
        )
    out = Tensor(table.data[ids], _children=(table,))

    def _bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        table._accumulate(gt)

    out._backward = _bw if out.requires_grad else None
    return out


def tsum(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum(), _children=(a,))

    def _bw(g):
        a._accumulate(np.full_like(a.data, float(g)))

    out._backward = _bw if out.requires_grad else None
    return out


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor(a.data.mean(), _children=(a,))

    def _bw(g):
        a._accumulate(np.full_like(a.data, float(g) / n))

    out._backward = _bw if out.requires_grad else None
    return out


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean over all elements of squared differences."""
    if a.shape != b.shape:
        raise DimensionError(f"mse: shapes {a.shape} and {b.shape}")
    d = a.data - b.data
    n = d.size
    out = Tensor(np.float64((d * d).mean()), _children=(a, b))

    def _bw(g):
        ga = (2.0 / n) * d * float(g)
        a._accumulate(ga)
        b._accumulate(-ga)

    out._backward = _bw if out.requires_grad else None
    return out
