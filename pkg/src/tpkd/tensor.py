"""A small reverse-mode autodiff engine over numpy arrays.

Only the operations the classifiers and distillation losses need are
provided. Gradients accumulate into ``Tensor.grad`` of leaves; interior
nodes are released after :meth:`Tensor.backward`.
"""
from __future__ import annotations

import contextlib
import functools
import itertools

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        arr = data if type(data) is np.ndarray else np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    # -- autodiff ------------------------------------------------------
    def backward(self, grad=None):
        if not self.requires_grad:
            raise RuntimeError("backward() called on a tensor that is not part of a "
                               "differentiable graph (detached or built under no_grad)")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("backward() without an explicit gradient needs a scalar")
            grad = np.ones_like(self.data)
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        for node in topo:
            if node._parents:
                node._parents = ()
                node._backward = None
                node.grad = None

    def _accum(self, g):
        if not self.requires_grad:
            return
        g = np.asarray(g, dtype=self.data.dtype)
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __rtruediv__(self, other):
        return mul(_as_tensor(other, self), reciprocal(self))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------
def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)

    def bw(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: a._accum(-g))


def reciprocal(a: Tensor) -> Tensor:
    r = 1.0 / a.data
    return _node(r, (a,), lambda g: a._accum(-g * r * r))


def power(a: Tensor, p: float) -> Tensor:
    out = a.data ** p
    return _node(out, (a,), lambda g: a._accum(g * p * a.data ** (p - 1)))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: a._accum(g * out))


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: a._accum(g / a.data))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: a._accum(g * 0.5 / out))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: a._accum(g * mask))


# -- reductions and shape ---------------------------------------------------
def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.shape))

    return _node(out, (a,), bw)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: a._accum(g.reshape(a.shape)))


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _node(out, (a,), lambda g: a._accum(np.transpose(g, inv)))


def matmul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _node(a.data @ b.data, (a, b), bw)


# -- probability --------------------------------------------------------------
def log_softmax(a: Tensor, axis=-1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def bw(g):
        a._accum(g - probs * g.sum(axis=axis, keepdims=True))

    return _node(out, (a,), bw)


def softmax(a: Tensor, axis=-1) -> Tensor:
    return exp(log_softmax(a, axis))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(labels)), labels] = 1.0
    return -(log_softmax(logits) * onehot).sum() * (1.0 / len(labels))


# -- layers -------------------------------------------------------------------
def _pad(X, pads):
    if not any(pads):
        return X
    shape = X.shape[:2] + tuple(n + 2 * p for n, p in zip(X.shape[2:], pads))
    xp = np.zeros(shape, dtype=X.dtype)
    xp[(slice(None), slice(None)) + tuple(slice(p, p + n) for n, p in
                                          zip(X.shape[2:], pads))] = X
    return xp


@functools.lru_cache(maxsize=256)
def _windows(ks, stride, outs):
    return [(slice(None), slice(None)) + tuple(slice(o, o + s * n, s) for o, s, n in
                                               zip(off, stride, outs))
            for off in itertools.product(*(range(k) for k in ks))]


def conv(x: Tensor, w: Tensor, b: Tensor | None, stride, padding) -> Tensor:
    """N-d cross-correlation: ``x [B,C,*S]`` with ``w [O,C,*K]`` (im2col + GEMM)."""
    X, W = x.data, w.data
    B, C = X.shape[:2]
    O, Cw = W.shape[:2]
    if Cw != C:
        raise ValueError(f"conv expects {Cw} input channels, got {C}")
    ks, sp = W.shape[2:], X.shape[2:]
    xp = _pad(X, padding)
    outs = tuple((n + 2 * p - k) // s + 1 for n, p, k, s in zip(sp, padding, ks, stride))
    xt = xp.swapaxes(0, 1)  # C,B,*S
    windows = _windows(ks, stride, outs)
    cols = np.empty((C, len(windows), B) + outs, dtype=X.dtype)
    for i, win in enumerate(windows):
        cols[:, i] = xt[win]
    colm = cols.reshape(C * len(windows), -1)
    wm = W.reshape(O, -1)
    out = (wm @ colm).reshape((O, B) + outs).swapaxes(0, 1)
    if b is not None:
        out = out + b.data.reshape((1, O) + (1,) * len(outs))
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gm = g.swapaxes(0, 1).reshape(O, -1)
        if w.requires_grad:
            w._accum((gm @ colm.T).reshape(W.shape))
        if b is not None and b.requires_grad:
            b._accum(g.sum(axis=(0,) + tuple(range(2, g.ndim))))
        if x.requires_grad:
            dcols = (wm.T @ gm).reshape((C, len(windows), B) + outs)
            dxt = np.zeros((C, B) + xp.shape[2:], dtype=X.dtype)
            for i, win in enumerate(windows):
                dxt[win] += dcols[:, i]
            dx = dxt.swapaxes(0, 1)
            if any(padding):
                dx = dx[(slice(None), slice(None)) + tuple(
                    slice(p, p + n) for n, p in zip(sp, padding))]
            x._accum(dx)

    return _node(np.ascontiguousarray(out), parents, bw)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=(1, 1),
           padding=(0, 0)) -> Tensor:
    return conv(x, w, b, tuple(stride), tuple(padding))


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0) -> Tensor:
    return conv(x, w, b, (stride,), (padding,))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum=0.1, eps=1e-5) -> Tensor:
    """Per-channel (axis 1) normalization; updates running stats in training mode."""
    X = x.data
    axes = (0,) + tuple(range(2, X.ndim))
    bshape = (1, X.shape[1]) + (1,) * (X.ndim - 2)
    if training:
        n = X.size // X.shape[1]
        mu = X.mean(axis=axes)
        var = X.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(X.dtype, copy=False)
    scale = gamma.data * inv_std
    out = X * scale.reshape(bshape) + (beta.data - mu * scale).reshape(bshape)

    def bw(g):
        istd = inv_std.reshape(bshape)
        xhat = (X - mu.reshape(bshape)) * istd
        if gamma.requires_grad:
            gamma._accum((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accum(g.sum(axis=axes))
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(bshape)
            if training:
                m = X.size // X.shape[1]
                s1 = dxhat.sum(axis=axes, keepdims=True)
                s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
                dx = (istd / m) * (m * dxhat - s1 - xhat * s2)
            else:
                dx = dxhat * istd
            x._accum(dx)

    return _node(out.astype(X.dtype, copy=False), (x, gamma, beta), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """Average over every axis after the channel axis."""
    return mean(x, axis=tuple(range(2, x.ndim)))
