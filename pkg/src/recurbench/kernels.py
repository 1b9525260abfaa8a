"""Kernel dispatch: compiled extension when importable, numpy fallback otherwise.

Set ``RECURBENCH_KERNELS=python`` to force the fallback. Both backends take the
same arguments; the wrappers below only canonicalize shapes and memory layout.
"""
import os

import numpy as np

from . import _kernels_py

_impl = _kernels_py
BACKEND = "python"
if os.environ.get("RECURBENCH_KERNELS", "").lower() != "python":
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"


def use_backend(name):
    """Switch the active backend in-process ("cython" or "python")."""
    global _impl, BACKEND
    if name == "python":
        _impl, BACKEND = _kernels_py, "python"
    elif name == "cython":
        from . import _kernels as _compiled

        _impl, BACKEND = _compiled, "cython"
    else:
        raise ValueError(f"unknown kernel backend {name!r}")


def compiled_available():
    try:
        from . import _kernels  # noqa: F401
    except ImportError:
        return False
    return True


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def rel_gather(raw, shift, klen):
    lead = raw.shape[:-2]
    q, width = raw.shape[-2:]
    out = _impl.rel_gather(_c(raw).reshape(-1, q, width), shift, klen)
    return out.reshape(lead + (q, klen))


def rel_scatter(g, shift, width):
    lead = g.shape[:-2]
    q, klen = g.shape[-2:]
    out = _impl.rel_scatter(_c(g).reshape(-1, q, klen), shift, width)
    return out.reshape(lead + (q, width))


def softmax(x, mask=None):
    """Softmax over the last axis. With a mask, x must be [B, H, q, k] and mask [B, q, k]."""
    if mask is None:
        shape = x.shape
        out = _impl.softmax(_c(x).reshape(1, 1, -1, shape[-1]), None)
        return out.reshape(shape)
    mask = np.ascontiguousarray(mask, dtype=np.uint8)
    return _impl.softmax(_c(x), mask)


def softmax_bwd(y, gy):
    shape = y.shape
    k = shape[-1]
    return _impl.softmax_bwd(_c(y).reshape(-1, k), _c(gy).reshape(-1, k)).reshape(shape)


def layer_norm_fwd(x, gain, bias, eps):
    shape = x.shape
    d = shape[-1]
    y, xhat, rstd = _impl.layer_norm_fwd(_c(x).reshape(-1, d), _c(gain), _c(bias), float(eps))
    return y.reshape(shape), xhat, rstd


def layer_norm_bwd(gy, xhat, rstd, gain):
    shape = gy.shape
    gx, ggain, gbias = _impl.layer_norm_bwd(_c(gy).reshape(-1, shape[-1]), xhat, rstd, _c(gain))
    return gx.reshape(shape), ggain, gbias


def gelu_fwd(x):
    return _impl.gelu_fwd(_c(x).ravel()).reshape(x.shape)


def gelu_bwd(x, gy):
    return _impl.gelu_bwd(_c(x).ravel(), _c(gy).ravel()).reshape(x.shape)


def scatter_add_rows(out, ids, g):
    """out[ids[r]] += g[r] for each row r; ``out`` is updated in place."""
    d = out.shape[-1]
    _impl.scatter_add_rows(out, np.ascontiguousarray(ids, dtype=np.int64).ravel(), _c(g).reshape(-1, d))


def reach_bfs(indptr, indices, n_nodes, sources):
    return _impl.reach_bfs(
        np.ascontiguousarray(indptr, dtype=np.int64),
        np.ascontiguousarray(indices, dtype=np.int64),
        int(n_nodes),
        np.ascontiguousarray(sources, dtype=np.int64),
    ).astype(bool)
