"""Multi-head attention over [memory, current segment] with relative positions.

Scores follow the Transformer-XL decomposition: a content term (q + u)·k and a
position term (q + v)·(W_r R[dist]), where dist = m + i - j is the distance
from query i to extended-context key j. Queries come from the current segment
only; keys and values come from the extended context.
"""
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add,
    concat_len,
    dropout,
    dropout_mask,
    gelu,
    layer_norm,
    matmul,
    mul,
    parameter,
    rel_shift,
    reshape,
    softmax_lastdim,
    transpose,
)


@dataclass
class AttentionParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    w_r: Tensor
    u: Tensor  # content bias, [n_heads, d_head]
    v: Tensor  # position bias, [n_heads, d_head]
    n_heads: int

    @property
    def d_model(self):
        return self.w_q.shape[0]

    @property
    def d_head(self):
        return self.d_model // self.n_heads

    @classmethod
    def init(cls, d_model, n_heads, rng, std=None):
        if d_model % n_heads:
            raise ValueError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        std = std if std is not None else d_model ** -0.5
        dh = d_model // n_heads

        def w():
            return parameter(rng.normal(0.0, std, (d_model, d_model)))

        return cls(w(), w(), w(), w(), w(),
                   parameter(np.zeros((n_heads, dh))), parameter(np.zeros((n_heads, dh))), n_heads)

    def tensors(self):
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v, "w_o": self.w_o,
                "w_r": self.w_r, "u": self.u, "v": self.v}


@dataclass
class BlockParams:
    attn: AttentionParams
    ln1_g: Tensor
    ln1_b: Tensor
    w_ff1: Tensor
    b_ff1: Tensor
    w_ff2: Tensor
    b_ff2: Tensor
    ln2_g: Tensor
    ln2_b: Tensor

    @classmethod
    def init(cls, d_model, n_heads, d_ff, rng):
        return cls(
            AttentionParams.init(d_model, n_heads, rng),
            parameter(np.ones(d_model)), parameter(np.zeros(d_model)),
            parameter(rng.normal(0.0, d_model ** -0.5, (d_model, d_ff))), parameter(np.zeros(d_ff)),
            parameter(rng.normal(0.0, d_ff ** -0.5, (d_ff, d_model))), parameter(np.zeros(d_model)),
            parameter(np.ones(d_model)), parameter(np.zeros(d_model)),
        )

    def tensors(self):
        out = {f"attn.{k}": t for k, t in self.attn.tensors().items()}
        out.update(ln1_g=self.ln1_g, ln1_b=self.ln1_b, w_ff1=self.w_ff1, b_ff1=self.b_ff1,
                   w_ff2=self.w_ff2, b_ff2=self.b_ff2, ln2_g=self.ln2_g, ln2_b=self.ln2_b)
        return out


@lru_cache(maxsize=64)
def relative_table(q_len, mem_len, d_model):
    """Sinusoidal encodings for distances -(q_len-1) .. mem_len+q_len-1.

    Row r encodes distance r - (q_len - 1). Returns (table, shift) where
    ``shift`` maps (i, j) to row i - j + shift.
    """
    if d_model % 2:
        raise ValueError("relative encoding needs an even d_model")
    dist = np.arange(-(q_len - 1), mem_len + q_len, dtype=np.float64)
    inv_freq = 1.0 / (10000.0 ** (np.arange(0, d_model, 2) / d_model))
    ang = dist[:, None] * inv_freq[None, :]
    table = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    table.setflags(write=False)
    return table, mem_len + q_len - 1


def attention_mask(batch, q_len, mem_len, causal, key_valid=None):
    """bool [B, q, m+q]: True where query i may attend to extended key j."""
    klen = mem_len + q_len
    if causal:
        i = np.arange(q_len)[:, None]
        j = np.arange(klen)[None, :]
        base = j <= mem_len + i
    else:
        base = np.ones((q_len, klen), dtype=bool)
    mask = np.broadcast_to(base, (batch, q_len, klen))
    if key_valid is not None:
        mask = mask & np.asarray(key_valid, dtype=bool)[:, None, :]
    return np.ascontiguousarray(mask)


def attend(h_cur, mem, params, causal, key_valid=None, rng=None, dropout_rate=0.0,
           return_weights=False):
    """Relative multi-head attention of the current segment over [mem, h_cur].

    ``mem`` may be None or length 0. ``key_valid`` (bool [B, m+L]) hides padded
    or cleared positions.
    """
    B, L, d = h_cur.shape
    if d != params.d_model:
        raise ShapeError(f"attend: hidden size {d} does not match parameters {params.d_model}")
    m = 0 if mem is None else mem.shape[1]
    if m and mem.shape[-1] != d:
        raise ShapeError(f"attend: memory shape {mem.shape} does not match segment shape {h_cur.shape}")
    H, dh = params.n_heads, params.d_head
    klen = m + L
    hx = concat_len(mem, h_cur) if m else h_cur

    q = reshape(matmul(h_cur, params.w_q), (B, L, H, dh))
    k = transpose(reshape(matmul(hx, params.w_k), (B, klen, H, dh)), (0, 2, 3, 1))
    v = transpose(reshape(matmul(hx, params.w_v), (B, klen, H, dh)), (0, 2, 1, 3))

    table, shift = relative_table(L, m, d)
    r = transpose(reshape(matmul(Tensor(table), params.w_r), (table.shape[0], H, dh)), (1, 2, 0))

    q_u = transpose(add(q, params.u), (0, 2, 1, 3))
    q_v = transpose(add(q, params.v), (0, 2, 1, 3))
    content = matmul(q_u, k)
    position = rel_shift(matmul(q_v, r), shift, klen)
    scores = mul(add(content, position), 1.0 / np.sqrt(dh))

    mask = attention_mask(B, L, m, causal, key_valid)
    probs = softmax_lastdim(scores, mask)
    if rng is not None and dropout_rate > 0:
        probs = dropout(probs, dropout_mask(probs.shape, dropout_rate, rng))
    ctx = reshape(transpose(matmul(probs, v), (0, 2, 1, 3)), (B, L, d))
    out = matmul(ctx, params.w_o)
    if return_weights:
        return out, probs.data
    return out


def block_forward(h_prev, mem, params, causal, key_valid=None, rng=None, dropout_rate=0.0):
    """Post-LN transformer block: attend, add, norm, gelu feed-forward, add, norm."""
    a = attend(h_prev, mem, params.attn, causal, key_valid, rng, dropout_rate)
    if rng is not None and dropout_rate > 0:
        a = dropout(a, dropout_mask(a.shape, dropout_rate, rng))
    x = layer_norm(add(h_prev, a), params.ln1_g, params.ln1_b)
    f = add(matmul(gelu(add(matmul(x, params.w_ff1), params.b_ff1)), params.w_ff2), params.b_ff2)
    if rng is not None and dropout_rate > 0:
        f = dropout(f, dropout_mask(f.shape, dropout_rate, rng))
    return layer_norm(add(x, f), params.ln2_g, params.ln2_b)
