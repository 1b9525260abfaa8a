# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the kernels in ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, tanh, INFINITY

cnp.import_array()

cdef double GELU_C = 0.7978845608028654
cdef double GELU_A = 0.044715


def rel_gather(double[:, :, ::1] raw, Py_ssize_t shift, Py_ssize_t klen):
    cdef Py_ssize_t n = raw.shape[0], q = raw.shape[1]
    out = np.empty((n, q, klen))
    cdef double[:, :, ::1] o = out
    cdef Py_ssize_t a, i, j
    for a in range(n):
        for i in range(q):
            for j in range(klen):
                o[a, i, j] = raw[a, i, i - j + shift]
    return out


def rel_scatter(double[:, :, ::1] g, Py_ssize_t shift, Py_ssize_t width):
    cdef Py_ssize_t n = g.shape[0], q = g.shape[1], klen = g.shape[2]
    out = np.zeros((n, q, width))
    cdef double[:, :, ::1] o = out
    cdef Py_ssize_t a, i, j
    for a in range(n):
        for i in range(q):
            for j in range(klen):
                o[a, i, i - j + shift] = g[a, i, j]
    return out


def softmax(double[:, :, :, ::1] x, mask):
    cdef Py_ssize_t B = x.shape[0], H = x.shape[1], q = x.shape[2], k = x.shape[3]
    out = np.zeros((B, H, q, k))
    cdef double[:, :, :, ::1] y = out
    cdef const cnp.uint8_t[:, :, ::1] mk
    cdef bint masked = mask is not None
    if masked:
        mk = mask
    cdef Py_ssize_t b, h, i, j
    cdef double mx, s, e
    for b in range(B):
        for h in range(H):
            for i in range(q):
                mx = -INFINITY
                for j in range(k):
                    if (not masked or mk[b, i, j]) and x[b, h, i, j] > mx:
                        mx = x[b, h, i, j]
                if mx == -INFINITY:
                    continue
                s = 0.0
                for j in range(k):
                    if not masked or mk[b, i, j]:
                        e = exp(x[b, h, i, j] - mx)
                        y[b, h, i, j] = e
                        s += e
                for j in range(k):
                    y[b, h, i, j] /= s
    return out


def softmax_bwd(double[:, ::1] y, double[:, ::1] gy):
    cdef Py_ssize_t n = y.shape[0], k = y.shape[1], r, j
    out = np.empty((n, k))
    cdef double[:, ::1] gx = out
    cdef double dot
    for r in range(n):
        dot = 0.0
        for j in range(k):
            dot += gy[r, j] * y[r, j]
        for j in range(k):
            gx[r, j] = y[r, j] * (gy[r, j] - dot)
    return out


def layer_norm_fwd(double[:, ::1] x, double[::1] gain, double[::1] bias, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], r, j
    y_arr = np.empty((n, d))
    xh_arr = np.empty((n, d))
    rs_arr = np.empty(n)
    cdef double[:, ::1] y = y_arr
    cdef double[:, ::1] xh = xh_arr
    cdef double[::1] rs = rs_arr
    cdef double mu, var, c, rstd
    for r in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[r, j]
        mu /= d
        var = 0.0
        for j in range(d):
            c = x[r, j] - mu
            var += c * c
        var /= d
        rstd = 1.0 / sqrt(var + eps)
        rs[r] = rstd
        for j in range(d):
            c = (x[r, j] - mu) * rstd
            xh[r, j] = c
            y[r, j] = c * gain[j] + bias[j]
    return y_arr, xh_arr, rs_arr


def layer_norm_bwd(double[:, ::1] gy, double[:, ::1] xh, double[::1] rs, double[::1] gain):
    cdef Py_ssize_t n = gy.shape[0], d = gy.shape[1], r, j
    gx_arr = np.empty((n, d))
    gg_arr = np.zeros(d)
    gb_arr = np.zeros(d)
    cdef double[:, ::1] gx = gx_arr
    cdef double[::1] gg = gg_arr
    cdef double[::1] gb = gb_arr
    cdef double a, b, t
    for r in range(n):
        a = 0.0
        b = 0.0
        for j in range(d):
            t = gy[r, j] * gain[j]
            a += t
            b += t * xh[r, j]
            gg[j] += gy[r, j] * xh[r, j]
            gb[j] += gy[r, j]
        for j in range(d):
            gx[r, j] = (rs[r] / d) * (d * gy[r, j] * gain[j] - a - xh[r, j] * b)
    return gx_arr, gg_arr, gb_arr


def gelu_fwd(double[::1] x):
    cdef Py_ssize_t n = x.shape[0], i
    out = np.empty(n)
    cdef double[::1] y = out
    cdef double v
    for i in range(n):
        v = x[i]
        y[i] = 0.5 * v * (1.0 + tanh(GELU_C * (v + GELU_A * v * v * v)))
    return out


def gelu_bwd(double[::1] x, double[::1] gy):
    cdef Py_ssize_t n = x.shape[0], i
    out = np.empty(n)
    cdef double[::1] gx = out
    cdef double v, t, dt
    for i in range(n):
        v = x[i]
        t = tanh(GELU_C * (v + GELU_A * v * v * v))
        dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v)
        gx[i] = gy[i] * (0.5 * (1.0 + t) + 0.5 * v * dt)
    return out


def scatter_add_rows(double[:, ::1] out, const cnp.int64_t[::1] ids, double[:, ::1] g):
    cdef Py_ssize_t n = g.shape[0], d = g.shape[1], r, j, row
    for r in range(n):
        row = ids[r]
        for j in range(d):
            out[row, j] += g[r, j]


def reach_bfs(const cnp.int64_t[::1] indptr, const cnp.int64_t[::1] indices,
              Py_ssize_t n_nodes, const cnp.int64_t[::1] sources):
    seen_arr = np.zeros(n_nodes, dtype=np.uint8)
    queue_arr = np.empty(n_nodes, dtype=np.int64)
    cdef cnp.uint8_t[::1] seen = seen_arr
    cdef cnp.int64_t[::1] queue = queue_arr
    cdef Py_ssize_t head = 0, tail = 0, i, u, w, k
    for i in range(sources.shape[0]):
        u = sources[i]
        if not seen[u]:
            seen[u] = 1
            queue[tail] = u
            tail += 1
    while head < tail:
        u = queue[head]
        head += 1
        for k in range(indptr[u], indptr[u + 1]):
            w = indices[k]
            if not seen[w]:
                seen[w] = 1
                queue[tail] = w
                tail += 1
    return seen_arr
