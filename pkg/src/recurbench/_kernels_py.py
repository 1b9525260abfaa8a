"""Pure numpy implementations of the hot kernels.

Every function here has a twin in ``_kernels.pyx`` with the same signature
and canonical (already reshaped, C-contiguous) argument shapes.
"""
from collections import deque

import numpy as np

GELU_C = 0.7978845608028654  # sqrt(2/pi)
GELU_A = 0.044715

_index_cache = {}


def _rel_index(q, klen, shift):
    key = (q, klen, shift)
    idx = _index_cache.get(key)
    if idx is None:
        i = np.arange(q)[:, None]
        j = np.arange(klen)[None, :]
        idx = np.ascontiguousarray(i - j + shift)
        _index_cache[key] = idx
    return idx


def rel_gather(raw, shift, klen):
    """out[n, i, j] = raw[n, i, i - j + shift]."""
    n, q, _ = raw.shape
    idx = np.broadcast_to(_rel_index(q, klen, shift), (n, q, klen))
    return np.take_along_axis(raw, idx, axis=-1)


def rel_scatter(g, shift, width):
    """Adjoint of :func:`rel_gather`. Each row maps injectively, so no accumulation."""
    n, q, klen = g.shape
    out = np.zeros((n, q, width))
    idx = np.broadcast_to(_rel_index(q, klen, shift), (n, q, klen))
    np.put_along_axis(out, idx, g, axis=-1)
    return out


def softmax(x, mask):
    """Row softmax over the last axis of x[B, H, q, k]; mask[B, q, k] (uint8) or None.

    Rows with no admissible key come out as all zeros.
    """
    if mask is None:
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)
    keep = mask[:, None, :, :].astype(bool)
    z = np.where(keep, x, -np.inf)
    zmax = z.max(axis=-1, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.exp(z - zmax)
    s = e.sum(axis=-1, keepdims=True)
    return np.divide(e, s, out=np.zeros_like(e), where=s > 0)


def softmax_bwd(y, gy):
    return y * (gy - (gy * y).sum(axis=-1, keepdims=True))


def layer_norm_fwd(x, gain, bias, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd[:, 0]


def layer_norm_bwd(gy, xhat, rstd, gain):
    d = xhat.shape[-1]
    gxhat = gy * gain
    a = gxhat.sum(axis=-1, keepdims=True)
    b = (gxhat * xhat).sum(axis=-1, keepdims=True)
    gx = (rstd[:, None] / d) * (d * gxhat - a - xhat * b)
    return gx, (gy * xhat).sum(axis=0), gy.sum(axis=0)


def gelu_fwd(x):
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + GELU_A * x ** 3)))


def gelu_bwd(x, gy):
    t = np.tanh(GELU_C * (x + GELU_A * x ** 3))
    dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
    return gy * (0.5 * (1.0 + t) + 0.5 * x * dt)


def scatter_add_rows(out, ids, g):
    np.add.at(out, ids, g)


def reach_bfs(indptr, indices, n_nodes, sources):
    seen = np.zeros(n_nodes, dtype=np.uint8)
    queue = deque()
    for s in sources:
        if not seen[s]:
            seen[s] = 1
            queue.append(int(s))
    while queue:
        u = queue.popleft()
        for k in range(indptr[u], indptr[u + 1]):
            w = indices[k]
            if not seen[w]:
                seen[w] = 1
                queue.append(int(w))
    return seen
