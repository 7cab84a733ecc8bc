"""Dense-tensor reverse-mode autodiff covering the ops the CNN and the scanner need.

Graphs are built dynamically: every operation records its inputs and a
backward closure on the output tensor, and ``Tensor.backward()`` walks the
recorded tape in reverse topological order. Float32 is the default precision;
pass ``dtype=np.float64`` at the leaves for verification runs (gradient
checking). Mixing precisions inside one graph is an error.

Backward closures never mutate gradient buffers in place (accumulation
rebinds), so shared upstream arrays are safe.
"""

from __future__ import annotations

import itertools
import json

import numpy as np

from . import kernels
from .errors import NonFiniteError, ShapeError

EPS_NORM = 1e-12  # smoothing constant inside the last-axis L2 norm

_FINITE_CHECKS = True
_node_ids = itertools.count()


def finite_checks(enabled):
    """Toggle per-op NaN/Inf validation; returns the previous setting."""
    global _FINITE_CHECKS
    prev = _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)
    return prev


class Tensor:
    """N-dimensional float array node in a dynamic autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "op", "node_id", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self.node_id = next(_node_ids)
        self.name = name
        self._parents = ()
        self._backward = None
        if _FINITE_CHECKS and not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"non-finite values in leaf tensor {self._label()}")

    def _label(self):
        return f"{self.op}#{self.node_id}" + (f"({self.name})" if self.name else "")

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor({self._label()}, shape={self.shape}, dtype={self.data.dtype})"

    # -- graph construction ------------------------------------------------

    @classmethod
    def _result(cls, data, op, parents, backward):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out.op = op
        out.node_id = next(_node_ids)
        out.name = None
        out._parents = tuple(parents)
        out._backward = backward if out.requires_grad else None
        if _FINITE_CHECKS and not np.all(np.isfinite(data)):
            raise NonFiniteError(f"non-finite values produced by node {out._label()}")
        return out

    def _lift(self, other):
        if isinstance(other, Tensor):
            if other.data.dtype != self.data.dtype:
                raise ShapeError(
                    f"dtype mismatch between {self._label()} ({self.data.dtype}) "
                    f"and {other._label()} ({other.data.dtype})"
                )
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, self._lift(other))

    def __radd__(self, other):
        return add(self._lift(other), self)

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        return mul(self, self._lift(other))

    def __rmul__(self, other):
        return mul(self._lift(other), self)

    def __neg__(self):
        return mul(self, self._lift(-1.0))

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, shape):
        return reshape(self, shape)

    # -- backward ----------------------------------------------------------

    def backward(self):
        """Populate ``.grad`` on every reachable tensor with requires_grad."""
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.shape} at {self._label()}")
        if not self.requires_grad:
            raise ShapeError(f"loss node {self._label()} does not depend on any trainable tensor")
        order = _toposort(self)
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node.requires_grad and node._backward is not None:
                node._backward(node.grad)


def _toposort(root):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order  # parents before consumers


def _acc(t, g):
    # Rebinding (never in-place) keeps aliased buffers safe to share.
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _coerce_pair(a, b, op):
    if not isinstance(a, Tensor):
        a = b._lift(a)
    if not isinstance(b, Tensor):
        b = a._lift(b)
    if a.data.dtype != b.data.dtype:
        raise ShapeError(
            f"{op}: dtype mismatch between {a._label()} ({a.data.dtype}) and {b._label()} ({b.data.dtype})"
        )
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(
            f"{op}: cannot broadcast {a.shape} ({a._label()}) with {b.shape} ({b._label()})"
        ) from None
    return a, b


# -- elementwise -----------------------------------------------------------


def add(a, b):
    a, b = _coerce_pair(a, b, "add")
    out = Tensor._result(a.data + b.data, "add", (a, b), None)

    def bwd(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g, b.shape))

    out._backward = bwd if out.requires_grad else None
    return out


def sub(a, b):
    a, b = _coerce_pair(a, b, "sub")
    out = Tensor._result(a.data - b.data, "sub", (a, b), None)

    def bwd(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(-g, b.shape))

    out._backward = bwd if out.requires_grad else None
    return out


def mul(a, b):
    a, b = _coerce_pair(a, b, "mul")
    out = Tensor._result(a.data * b.data, "mul", (a, b), None)

    def bwd(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g * a.data, b.shape))

    out._backward = bwd if out.requires_grad else None
    return out


def relu(x):
    out = Tensor._result(np.maximum(x.data, 0), "relu", (x,), None)

    def bwd(g):
        _acc(x, g * (x.data > 0))

    out._backward = bwd if out.requires_grad else None
    return out


def tanh(x):
    t = np.tanh(x.data)
    out = Tensor._result(t, "tanh", (x,), None)

    def bwd(g):
        _acc(x, g * (1.0 - t * t))

    out._backward = bwd if out.requires_grad else None
    return out


# -- structural ------------------------------------------------------------


def reshape(x, shape):
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape} at {x._label()}") from None
    out = Tensor._result(np.ascontiguousarray(data), "reshape", (x,), None)

    def bwd(g):
        _acc(x, np.ascontiguousarray(g.reshape(x.shape)))

    out._backward = bwd if out.requires_grad else None
    return out


def embed(x, full_shape, offsets):
    """Place ``x`` as a block inside a zero tensor of ``full_shape``.

    The gradient of the block is the matching slice of the output gradient;
    used to position a patch inside a full image canvas.
    """
    if len(offsets) != x.data.ndim or len(full_shape) != x.data.ndim:
        raise ShapeError(f"embed: rank mismatch at {x._label()}")
    slices = tuple(slice(o, o + n) for o, n in zip(offsets, x.shape))
    for sl, full in zip(slices, full_shape):
        if sl.start < 0 or sl.stop > full:
            raise ShapeError(f"embed: block {x.shape} at {tuple(offsets)} exceeds {tuple(full_shape)}")
    data = np.zeros(full_shape, dtype=x.data.dtype)
    data[slices] = x.data
    out = Tensor._result(data, "embed", (x,), None)

    def bwd(g):
        _acc(x, g[slices].copy())

    out._backward = bwd if out.requires_grad else None
    return out


# -- neural-network ops ----------------------------------------------------


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape} ({a._label()}, {b._label()})")
    out = Tensor._result(a.data @ b.data, "matmul", (a, b), None)

    def bwd(g):
        if a.requires_grad:
            _acc(a, g @ b.data.T)
        if b.requires_grad:
            _acc(b, a.data.T @ g)

    out._backward = bwd if out.requires_grad else None
    return out


def conv2d(x, w):
    """Stride-1, valid-padding convolution; x (N,C,H,W), w (Cout,Cin,kh,kw)."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and kernel at {x._label()}, {w._label()}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: channel mismatch {x.shape} vs {w.shape} at {x._label()}")
    if w.shape[2] > x.shape[2] or w.shape[3] > x.shape[3]:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than input {x.shape} at {x._label()}")
    if x.data.dtype != w.data.dtype:
        raise ShapeError(f"conv2d: dtype mismatch at {x._label()} vs {w._label()}")
    out = Tensor._result(kernels.conv2d_forward(x.data, w.data), "conv2d", (x, w), None)

    def bwd(g):
        if x.requires_grad:
            _acc(x, kernels.conv2d_input_grad(g, w.data, x.data.shape))
        if w.requires_grad:
            _acc(w, kernels.conv2d_weight_grad(g, x.data, w.data.shape))

    out._backward = bwd if out.requires_grad else None
    return out


def maxpool2x2(x):
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped."""
    if x.data.ndim != 4 or x.shape[2] < 2 or x.shape[3] < 2:
        raise ShapeError(f"maxpool2x2: need 4-d input with H,W >= 2, got {x.shape} at {x._label()}")
    pooled, switches = kernels.maxpool2x2_forward(x.data)
    out = Tensor._result(pooled, "maxpool2x2", (x,), None)

    def bwd(g):
        _acc(x, kernels.maxpool2x2_backward(g, switches, x.data.shape))

    out._backward = bwd if out.requires_grad else None
    return out


def softmax(x):
    """Row-wise softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor._result(p, "softmax", (x,), None)

    def bwd(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        _acc(x, p * (g - dot))

    out._backward = bwd if out.requires_grad else None
    return out


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of softmax(logits) against integer labels.

    Fused for numerical stability; gradient is (softmax - onehot) / N.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be 2-d, got {logits.shape}")
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= c:
        raise ShapeError(f"softmax_cross_entropy: labels out of range [0, {c})")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    loss = np.asarray(-logp[np.arange(n), labels].mean(), dtype=logits.data.dtype)
    out = Tensor._result(loss, "softmax_xent", (logits,), None)

    def bwd(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        _acc(logits, p * (g / n))

    out._backward = bwd if out.requires_grad else None
    return out


def l2norm_last(x, eps=EPS_NORM):
    """Smoothed Euclidean norm over the last axis: sqrt(sum(x^2) + eps).

    The eps floor keeps the gradient defined (and zero) when the argument
    vanishes, e.g. for identical prediction pairs.
    """
    sq = (x.data * x.data).sum(axis=-1)
    norm = np.sqrt(sq + eps)
    out = Tensor._result(norm, "l2norm_last", (x,), None)

    def bwd(g):
        _acc(x, (g / norm)[..., None] * x.data)

    out._backward = bwd if out.requires_grad else None
    return out


# -- reductions ------------------------------------------------------------


def tsum(x):
    out = Tensor._result(np.asarray(x.data.sum(), dtype=x.data.dtype), "sum", (x,), None)

    def bwd(g):
        _acc(x, np.full(x.shape, g.reshape(()).item(), dtype=x.data.dtype))

    out._backward = bwd if out.requires_grad else None
    return out


def tmean(x):
    out = Tensor._result(np.asarray(x.data.mean(), dtype=x.data.dtype), "mean", (x,), None)

    def bwd(g):
        _acc(x, np.full(x.shape, g.reshape(()).item() / x.data.size, dtype=x.data.dtype))

    out._backward = bwd if out.requires_grad else None
    return out


def abs_sum(x):
    out = Tensor._result(np.asarray(np.abs(x.data).sum(), dtype=x.data.dtype), "abs_sum", (x,), None)

    def bwd(g):
        _acc(x, g.reshape(()).item() * np.sign(x.data))

    out._backward = bwd if out.requires_grad else None
    return out


# -- debugging -------------------------------------------------------------


def graph_json(root):
    """Dump the graph reachable from ``root`` as JSON (topological node list)."""
    nodes = []
    for node in _toposort(root):
        nodes.append(
            {
                "id": node.node_id,
                "op": node.op,
                "name": node.name,
                "shape": list(node.shape),
                "dtype": str(node.data.dtype),
                "requires_grad": node.requires_grad,
                "inputs": [p.node_id for p in node._parents],
            }
        )
    return json.dumps({"nodes": nodes}, indent=2)
