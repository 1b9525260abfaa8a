"""Dense FP64 tensors with reverse-mode automatic differentiation.

Broadcasting is restricted to leading batch dimensions: the smaller operand's
shape must be a suffix of the larger one. Everything else is a shape error.
"""
from contextlib import contextmanager

import numpy as np

from . import kernels

LN_EPS = 1e-12

_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


@contextmanager
def no_grad():
    """Run the enclosed code without recording a graph."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(node) into ``.grad`` of every node that requires grad."""
        if not self.requires_grad:
            return
        if grad is None:
            grad = np.ones_like(self.data)
        pending = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(Graph.from_root(self).nodes):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    __add__ = lambda self, other: add(self, other)  # noqa: E731
    __radd__ = lambda self, other: add(other, self)  # noqa: E731
    __sub__ = lambda self, other: sub(self, other)  # noqa: E731
    __rsub__ = lambda self, other: sub(other, self)  # noqa: E731
    __mul__ = lambda self, other: mul(self, other)  # noqa: E731
    __rmul__ = lambda self, other: mul(other, self)  # noqa: E731
    __matmul__ = lambda self, other: matmul(self, other)  # noqa: E731
    __neg__ = lambda self: mul(self, -1.0)  # noqa: E731

    def __truediv__(self, c):
        return mul(self, 1.0 / c)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)


class Graph:
    """Topologically ordered record of the ops that produced a root tensor."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root):
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data):
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _make(data, parents, backward, op):
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward, op)
    return Tensor(data, op=op)


def _check_lead_broadcast(op, sa, sb):
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if tuple(long_[len(long_) - len(short):]) != tuple(short):
        raise ShapeError(f"{op}: shapes {tuple(sa)} and {tuple(sb)} only broadcast over leading dims")


def _unbroadcast(g, shape):
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        _check_lead_broadcast("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        _check_lead_broadcast("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b):
    """Elementwise product; a python scalar on either side scales."""
    if np.isscalar(b):
        a, c = as_tensor(a), float(b)
        return _make(a.data * c, (a,), lambda g: (g * c,), "scale")
    if np.isscalar(a):
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        _check_lead_broadcast("mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def matmul(a, b):
    """Batched product [..., M, K] x [..., K, P]; leading dims broadcast as suffixes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        _check_lead_broadcast("matmul", a.shape[:-2], b.shape[:-2])
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), backward, "matmul")


def concat_len(a, b):
    """Concatenate along the length axis (-2): a fills [0, m), b fills [m, m+L)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim or a.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"concat_len: shapes {a.shape} and {b.shape} differ outside the length axis")
    m = a.shape[-2]
    return _make(np.concatenate([a.data, b.data], axis=-2), (a, b),
                 lambda g: (g[..., :m, :], g[..., m:, :]), "concat_len")


def stop_gradient(x):
    """Same values, no path back to ``x``."""
    x = as_tensor(x)
    return Tensor(x.data, op="stop_gradient")


def slice_len(x, start, stop):
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        out[..., start:stop, :] = g
        return (out,)

    return _make(x.data[..., start:stop, :], (x,), backward, "slice_len")


def reshape(x, shape):
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes):
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def tsum(x):
    shape = x.shape
    return _make(x.data.sum(), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(x):
    shape, n = x.shape, x.data.size
    return _make(x.data.mean(), (x,), lambda g: (np.full(shape, g / n),), "mean")


def softmax_lastdim(x, mask=None):
    """Softmax over the last axis.

    ``mask`` (bool [B, q, k]) applies to x of shape [B, H, q, k]; masked entries
    get weight exactly 0 and a fully masked row is all zeros.
    """
    y = kernels.softmax(x.data, mask)
    return _make(y, (x,), lambda g: (kernels.softmax_bwd(y, g),), "softmax")


def layer_norm(x, gain, bias, eps=LN_EPS):
    y, xhat, rstd = kernels.layer_norm_fwd(x.data, gain.data, bias.data, eps)

    def backward(g):
        gx, gg, gb = kernels.layer_norm_bwd(g, xhat, rstd, gain.data)
        return gx, gg, gb

    return _make(y, (x, gain, bias), backward, "layer_norm")


def gelu(x):
    xd = x.data
    return _make(kernels.gelu_fwd(xd), (x,), lambda g: (kernels.gelu_bwd(xd, g),), "gelu")


def embedding_lookup(table, ids):
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        bad = ids[(ids < 0) | (ids >= vocab)][0]
        raise IndexError(f"token id {bad} outside vocabulary of size {vocab}")
    shape = table.shape

    def backward(g):
        out = np.zeros(shape)
        kernels.scatter_add_rows(out, ids.ravel(), g.reshape(-1, shape[-1]))
        return (out,)

    return _make(table.data[ids], (table,), backward, "embedding")


def cross_entropy(logits, targets, ignore_index=0, reduction="mean"):
    """Softmax cross-entropy over the last axis, skipping ``ignore_index`` targets.

    With no scored positions the result is a constant 0.
    """
    targets = np.asarray(targets, dtype=np.int64)
    vocab = logits.shape[-1]
    z = logits.data.reshape(-1, vocab)
    t = targets.ravel()
    keep = t != ignore_index
    count = int(keep.sum())
    if count == 0:
        return Tensor(0.0, op="cross_entropy")
    if t[keep].max() >= vocab or t[keep].min() < 0:
        raise IndexError(f"target id outside vocabulary of size {vocab}")
    zmax = z.max(axis=-1, keepdims=True)
    e = np.exp(z - zmax)
    s = e.sum(axis=-1, keepdims=True)
    rows = np.nonzero(keep)[0]
    nll = (np.log(s[rows, 0]) + zmax[rows, 0]) - z[rows, t[rows]]
    scale = 1.0 / count if reduction == "mean" else 1.0
    total = nll.sum() * scale
    shape = logits.shape

    def backward(g):
        p = e / s
        p[~keep] = 0.0
        p[rows, t[rows]] -= 1.0
        return ((p * (g * scale)).reshape(shape),)

    return _make(total, (logits,), backward, "cross_entropy")


def dropout_mask(shape, rate, rng):
    """Pregenerated inverted-dropout mask: 0 or 1/(1-rate)."""
    if rate <= 0.0:
        return None
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def dropout(x, mask):
    if mask is None:
        return x
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def rel_shift(raw, shift, klen):
    """Gather relative-distance scores into query/key layout.

    ``out[..., i, j] = raw[..., i, i - j + shift]``.
    """
    width = raw.shape[-1]
    out = kernels.rel_gather(raw.data, shift, klen)
    return _make(out, (raw,), lambda g: (kernels.rel_scatter(g, shift, width),), "rel_shift")
