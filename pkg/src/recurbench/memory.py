"""Segment-level memory caches and analytical context-length calculators.

Three extended-context schemes are supported:

``none``        each segment sees only itself.
``shift_down``  layer n attends over cached layer n-1 states of earlier segments
                (layer 0 is the token-embedding output).
``same_layer``  layer n attends over cached layer n states of earlier segments.
"""
from dataclasses import dataclass
import math

import numpy as np

from . import kernels
from .tensor import Tensor, concat_len, stop_gradient

SCHEMES = ("none", "shift_down", "same_layer")
PHASES = ("skim", "retro")
ORACLE_MAX_NODES = 100_000


class BankError(RuntimeError):
    """Misuse of a MemoryBank (double update, bad layer, ...)."""


def check_scheme(scheme):
    if scheme not in SCHEMES:
        raise ValueError(f"unknown recurrence scheme {scheme!r}; expected one of {SCHEMES}")
    return scheme


class MemoryBank:
    """Per-layer caches of gradient-free hidden states for one batch of lanes.

    Buffers are plain arrays [B, M, d] with a validity mask [B, M]. Invalid
    slots are kept at the front so the valid ones stay adjacent to the next
    segment and relative distances are unaffected. Updates are staged and
    applied by :meth:`commit` so every layer of a segment reads the previous
    segment's cache.
    """

    def __init__(self, scheme, n_layers, mem_len, batch, d_model, keep_retro_cache=False):
        self.scheme = check_scheme(scheme)
        if mem_len < 0 or n_layers < 1:
            raise ValueError("need mem_len >= 0 and n_layers >= 1")
        self.n_layers = n_layers
        self.mem_len = 0 if scheme == "none" else mem_len
        self.batch = batch
        self.d_model = d_model
        self.phase = "skim"
        self.segment = 0
        self.buffers = [np.zeros((batch, 0, d_model)) for _ in range(n_layers + 1)]
        self.valid = [np.zeros((batch, 0), dtype=bool) for _ in range(n_layers + 1)]
        self.retro_cache = {} if keep_retro_cache else None
        self.use_retro_cache = False
        self._pending = {}

    def source_layer(self, n):
        """Which cached layer feeds the memory of layer n (None for ``none``)."""
        if not 1 <= n <= self.n_layers:
            raise BankError(f"layer {n} outside 1..{self.n_layers}")
        if self.scheme == "none":
            return None
        return n - 1 if self.scheme == "shift_down" else n

    def _stored(self, layer):
        if self.scheme == "none":
            return False
        if self.scheme == "shift_down":
            return layer < self.n_layers
        return layer >= 1

    def memory(self, n):
        """(stop-gradient Tensor [B, M, d] or None, valid [B, M]) feeding layer n."""
        src = self.source_layer(n)
        parts, valid = [], []
        if self.use_retro_cache and self.phase == "retro" and self.retro_cache:
            for idx in sorted(self.retro_cache):
                h, ok = self.retro_cache[idx]
                parts.append(h)
                valid.append(ok)
        if src is not None and self.buffers[src].shape[1]:
            parts.append(self.buffers[src])
            valid.append(self.valid[src])
        if not parts:
            return None, np.zeros((self.batch, 0), dtype=bool)
        data = parts[0] if len(parts) == 1 else np.concatenate(parts, axis=1)
        ok = valid[0] if len(valid) == 1 else np.concatenate(valid, axis=1)
        return stop_gradient(Tensor(data)), ok

    def extend_context(self, n, h_prev):
        """Extended context [SG(memory) ∘ h_prev] for layer n."""
        mem, _ = self.memory(n)
        if mem is None:
            return h_prev
        return concat_len(mem, h_prev)

    def update(self, n, h_new, real_mask=None):
        """Stage layer n's output for the current segment (applied on commit)."""
        if not 0 <= n <= self.n_layers:
            raise BankError(f"layer {n} outside 0..{self.n_layers}")
        if n in self._pending:
            raise BankError(f"layer {n} already updated for segment {self.segment}")
        data = h_new.data if isinstance(h_new, Tensor) else np.asarray(h_new, dtype=np.float64)
        self._pending[n] = (data.copy() if self._stored(n) else None, real_mask)

    def commit(self):
        """Apply staged updates and advance to the next segment."""
        for n, (data, real) in self._pending.items():
            if data is None:
                continue
            self.buffers[n], self.valid[n] = self._append(self.buffers[n], self.valid[n], data, real)
        self._pending.clear()
        self.segment += 1

    def _append(self, buf, ok, new, real):
        m = self.mem_len
        B, L, d = new.shape
        if real is None:
            real = np.ones((B, L), dtype=bool)
        if ok.all() and real.all():
            merged = np.concatenate([buf, new], axis=1)
            keep = merged[:, max(0, merged.shape[1] - m):]
            return keep, np.ones(keep.shape[:2], dtype=bool)
        rows = []
        for b in range(B):
            row = np.concatenate([buf[b][ok[b]], new[b][real[b]]], axis=0)
            rows.append(row[max(0, row.shape[0] - m):])
        width = max(r.shape[0] for r in rows)
        out = np.zeros((B, width, d))
        valid = np.zeros((B, width), dtype=bool)
        for b, row in enumerate(rows):
            if row.shape[0]:
                out[b, width - row.shape[0]:] = row
                valid[b, width - row.shape[0]:] = True
        return out, valid

    def reset_lanes(self, lanes):
        """Forget everything cached for the lanes flagged in ``lanes`` (bool [B])."""
        lanes = np.asarray(lanes, dtype=bool)
        if not lanes.any():
            return
        for n in range(self.n_layers + 1):
            self.valid[n] = self.valid[n].copy()
            self.valid[n][lanes] = False
            self.buffers[n] = self.buffers[n].copy()
            self.buffers[n][lanes] = 0.0
            # drop leading columns that are invalid in every lane
            live = self.valid[n].any(axis=0)
            first = int(np.argmax(live)) if live.any() else live.shape[0]
            self.buffers[n] = self.buffers[n][:, first:]
            self.valid[n] = self.valid[n][:, first:]
        if self.retro_cache is not None:
            self.retro_cache.clear()

    def set_phase(self, phase):
        if phase not in PHASES:
            raise ValueError(f"unknown phase {phase!r}")
        self.phase = phase

    def record_top(self, seg_index, h_top, real_mask, n_segments):
        """Keep skim-phase top-layer states at the stride-N retro indices (1-based)."""
        if self.retro_cache is None or self.phase != "skim":
            return
        if seg_index in retro_index_set(n_segments, self.n_layers):
            data = h_top.data if isinstance(h_top, Tensor) else h_top
            ok = np.ones(data.shape[:2], dtype=bool) if real_mask is None else np.asarray(real_mask, bool)
            self.retro_cache[seg_index] = (data.copy(), ok)

    def reduced_retro_context(self):
        """Concatenated explicit retro cache [B, sum L, d] in segment order."""
        if not self.retro_cache:
            return np.zeros((self.batch, 0, self.d_model))
        return np.concatenate([self.retro_cache[k][0] for k in sorted(self.retro_cache)], axis=1)

    def snapshot(self):
        """Arrays needed to restore this bank exactly."""
        out = {}
        for n in range(self.n_layers + 1):
            out[f"buf{n}"] = self.buffers[n]
            out[f"valid{n}"] = self.valid[n]
        return out

    def restore(self, arrays):
        for n in range(self.n_layers + 1):
            self.buffers[n] = np.array(arrays[f"buf{n}"], dtype=np.float64)
            self.valid[n] = np.array(arrays[f"valid{n}"], dtype=bool)


def retro_index_set(n_segments, n_layers):
    """1-based segment indices whose top-layer skim states form the reduced cache."""
    if n_segments < 1 or n_layers < 1:
        raise ValueError("need n_segments >= 1 and n_layers >= 1")
    idx = set(range(n_layers, n_segments + 1, n_layers))
    idx.add(n_segments)
    return sorted(idx)


@dataclass(frozen=True)
class SchemeSpec:
    scheme: str
    n_layers: int
    seg_len: int
    mem_len: int
    n_segments: int

    def __post_init__(self):
        check_scheme(self.scheme)
        if self.n_layers < 1 or self.seg_len < 1 or self.n_segments < 1 or self.mem_len < 0:
            raise ValueError(f"invalid scheme spec {self}")


def max_dependency(spec, layer=0):
    """Span in tokens from the newest token back to the oldest one it can depend on.

    Measured at the top-layer output of the last position of segment T, counting
    reachable states of ``layer`` (0 = tokens). The span is inclusive and
    clipped to the document length T*L.
    """
    N, L, m, T = spec.n_layers, spec.seg_len, spec.mem_len, spec.n_segments
    if not 0 <= layer < N:
        raise ValueError(f"layer must be in [0, {N})")
    if spec.scheme == "none" or m == 0:
        return L
    if spec.scheme == "same_layer":
        return T * L
    hops = N - 1 - layer
    return min(T * L, L + m + hops * math.ceil(m / L) * L)


def _node(tau, n, p, L, N):
    return (tau * (N + 1) + n) * L + p


def reachability_oracle(spec, layer=0, causal=True):
    """Effective context span by breadth-first search over the unrolled network.

    Nodes are (segment, layer, position); every state links to the states its
    attention reads. Independent of :func:`max_dependency`.
    """
    N, L, m, T = spec.n_layers, spec.seg_len, spec.mem_len, spec.n_segments
    n_nodes = T * (N + 1) * L
    if n_nodes > ORACLE_MAX_NODES:
        raise OverflowError(f"oracle graph would have {n_nodes} nodes (limit {ORACLE_MAX_NODES})")
    if not 0 <= layer < N:
        raise ValueError(f"layer must be in [0, {N})")
    mem = 0 if spec.scheme == "none" else m
    adjacency = [[] for _ in range(n_nodes)]
    for tau in range(T):
        start = tau * L
        slots = range(max(0, start - mem), start)
        for n in range(1, N + 1):
            src = n - 1 if spec.scheme == "shift_down" else n
            mem_nodes = [_node(a // L, src, a % L, L, N) for a in slots]
            for p in range(L):
                reads = range(p + 1) if causal else range(L)
                adjacency[_node(tau, n, p, L, N)] = [_node(tau, n - 1, q, L, N) for q in reads] + mem_nodes
    indptr = np.zeros(n_nodes + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([len(a) for a in adjacency])
    indices = np.fromiter((v for a in adjacency for v in a), dtype=np.int64, count=int(indptr[-1]))
    seen = kernels.reach_bfs(indptr, indices, n_nodes, [_node(T - 1, N, L - 1, L, N)])
    oldest = min(tau * L + p for tau in range(T) for p in range(L) if seen[_node(tau, layer, p, L, N)])
    return T * L - oldest


def attention_calcs(doc_len, mem_len, window):
    """Token-to-token score count for two recurrent passes over a document."""
    if window <= 0:
        raise ValueError("window must be positive")
    return 2 * math.ceil(doc_len / window) * window * (window + mem_len)


def local_attention_calcs(doc_len, window):
    """Token-to-token score count for single-pass local windowed attention."""
    if window <= 0:
        raise ValueError("window must be positive")
    return doc_len * window
