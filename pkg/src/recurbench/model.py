"""Recurrence-aware transformer with LM/MLM and segment-reorder heads."""
from contextlib import nullcontext
from dataclasses import asdict, dataclass, fields
import json

import numpy as np

from .attention import BlockParams, block_forward
from .data import PAD, k_classes
from .memory import PHASES, SCHEMES, MemoryBank
from .tensor import (
    Tensor,
    add,
    cross_entropy,
    dropout,
    dropout_mask,
    embedding_lookup,
    gelu,
    matmul,
    mul,
    no_grad,
    parameter,
    reshape,
    slice_len,
)

CHECKPOINT_FORMAT = "recurbench-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    n_layers: int = 2
    d_model: int = 32
    n_heads: int = 4
    d_ff: int = 64
    vocab_size: int = 64
    seg_len: int = 8
    mem_len: int = 8
    scheme: str = "same_layer"
    mode: str = "ar"  # ar: causal next-token; mlm: bidirectional + reorder head
    max_chunks: int = 3
    dropout: float = 0.1
    loss_phases: str = "retro"  # retro | both, for two-phase feeding
    explicit_retro_cache: bool = False
    mlm_weight: float = 1.0
    reorder_weight: float = 1.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.mode not in ("ar", "mlm"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.loss_phases not in ("retro", "both"):
            raise ValueError(f"unknown loss_phases {self.loss_phases!r}")
        if self.d_model % self.n_heads or self.d_model % 2:
            raise ValueError("d_model must be even and divisible by n_heads")
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "seg_len", "max_chunks"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.mem_len < 0:
            raise ValueError("mem_len must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def causal(self):
        return self.mode == "ar"

    @property
    def k_classes(self):
        return k_classes(self.max_chunks)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ModelOutput:
    logits: Tensor  # [B, L, V]
    reorder_logits: Tensor  # [B, K] or None
    hidden: list  # per-layer states, index 0 = embeddings


class Model:
    def __init__(self, cfg, rng=None, seed=0):
        self.cfg = cfg
        rng = rng if rng is not None else np.random.default_rng(seed)
        d, V = cfg.d_model, cfg.vocab_size
        self.embed = parameter(rng.normal(0.0, 1.0, (V, d)))
        self.blocks = [BlockParams.init(d, cfg.n_heads, cfg.d_ff, rng) for _ in range(cfg.n_layers)]
        self.lm_w = parameter(rng.normal(0.0, d ** -0.5, (d, V)))
        self.lm_b = parameter(np.zeros(V))
        self.cls_w1 = parameter(rng.normal(0.0, d ** -0.5, (d, d)))
        self.cls_b1 = parameter(np.zeros(d))
        self.cls_w2 = parameter(rng.normal(0.0, d ** -0.5, (d, cfg.k_classes)))
        self.cls_b2 = parameter(np.zeros(cfg.k_classes))

    def named_parameters(self):
        out = {"embed": self.embed}
        for n, blk in enumerate(self.blocks, start=1):
            out.update({f"block{n}.{k}": t for k, t in blk.tensors().items()})
        out.update(lm_w=self.lm_w, lm_b=self.lm_b)
        if self.cfg.mode == "mlm":
            out.update(cls_w1=self.cls_w1, cls_b1=self.cls_b1, cls_w2=self.cls_w2, cls_b2=self.cls_b2)
        return out

    def zero_grad(self):
        for t in self.named_parameters().values():
            t.grad = None

    def num_parameters(self):
        return sum(t.data.size for t in self.named_parameters().values())

    def new_bank(self, batch, mem_len=None, scheme=None):
        cfg = self.cfg
        return MemoryBank(scheme or cfg.scheme, cfg.n_layers, cfg.mem_len if mem_len is None else mem_len,
                          batch, cfg.d_model, keep_retro_cache=cfg.explicit_retro_cache)

    def forward_segment(self, tokens, bank, real=None, rng=None, final=False):
        """Run one segment through embed, N x (memory, block, cache) and the heads.

        ``real`` marks non-pad tokens; ``rng`` enables dropout (training).
        Only the final segment of a document may be shorter than seg_len; it is
        right-padded and the padding is kept out of attention and memory.
        """
        cfg = self.cfg
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2:
            raise ValueError("tokens must be [B, L]")
        B, L = tokens.shape
        if L > cfg.seg_len or (L < cfg.seg_len and not final):
            raise ValueError(f"segment length {L} differs from configured seg_len {cfg.seg_len}")
        if real is None:
            real = tokens != PAD
        real = np.asarray(real, dtype=bool)
        if L < cfg.seg_len:
            pad = cfg.seg_len - L
            tokens = np.pad(tokens, ((0, 0), (0, pad)), constant_values=PAD)
            real = np.pad(real, ((0, 0), (0, pad)), constant_values=False)
        rate = cfg.dropout if rng is not None else 0.0
        h = embedding_lookup(self.embed, tokens)
        if rate > 0:
            h = dropout(h, dropout_mask(h.shape, rate, rng))
        hidden = [h]
        bank.update(0, h, real)
        for n, blk in enumerate(self.blocks, start=1):
            mem, mem_ok = bank.memory(n)
            key_valid = None
            if not (real.all() and mem_ok.all()):
                key_valid = np.concatenate([mem_ok, real], axis=1)
            h = block_forward(h, mem, blk, cfg.causal, key_valid, rng, rate)
            hidden.append(h)
            bank.update(n, h, real)
        bank.commit()
        logits = add(matmul(h, self.lm_w), self.lm_b)
        reorder = None
        if cfg.mode == "mlm":
            cls = reshape(slice_len(h, 0, 1), (B, cfg.d_model))
            z = gelu(add(matmul(cls, self.cls_w1), self.cls_b1))
            reorder = add(matmul(z, self.cls_w2), self.cls_b2)
        return ModelOutput(logits, reorder, hidden)

    def segment_loss(self, out, targets, reorder_labels=None, final_lanes=None):
        """Training loss for one segment.

        AR mode: next-token cross-entropy. MLM mode: cross-entropy over masked
        positions plus, on lanes at their final segment, reorder cross-entropy.
        """
        cfg = self.cfg
        token_loss = cross_entropy(out.logits, targets, ignore_index=PAD)
        if cfg.mode == "ar" or reorder_labels is None or out.reorder_logits is None:
            return token_loss
        labels = np.asarray(reorder_labels, dtype=np.int64)
        if (labels >= cfg.k_classes).any():
            raise ValueError(f"reorder label {labels.max()} >= K={cfg.k_classes}")
        if final_lanes is None:
            final_lanes = np.zeros(labels.shape, dtype=bool)
        chosen = np.where(np.asarray(final_lanes, dtype=bool), labels, -1)
        reorder_loss = cross_entropy(out.reorder_logits, chosen, ignore_index=-1)
        return add(mul(token_loss, cfg.mlm_weight), mul(reorder_loss, cfg.reorder_weight))

    def forward_document(self, batch, retrospective=False, rng=None, bank=None, grad_skim=None):
        """Feed a :class:`DocBatch` segment by segment.

        With ``retrospective`` the document is fed twice: a skim pass that only
        fills the memory, then a retro pass that continues from the same bank.
        Returns (retro or single-pass outputs, skim outputs).
        """
        if batch.T == 0:
            raise ValueError("empty document")
        B = batch.tokens.shape[1]
        bank = bank if bank is not None else self.new_bank(B)
        skim = []
        if retrospective:
            if grad_skim is None:
                grad_skim = self.cfg.loss_phases == "both"
            bank.set_phase("skim")
            with nullcontext() if grad_skim else no_grad():
                skim = self._run(batch, bank, rng, record_top=True)
            bank.set_phase("retro")
            bank.use_retro_cache = self.cfg.explicit_retro_cache
        outs = self._run(batch, bank, rng)
        return outs, skim

    def _run(self, batch, bank, rng, record_top=False):
        outs = []
        for tau in range(batch.T):
            real = batch.real[tau]
            out = self.forward_segment(batch.tokens[tau], bank, real, rng, final=True)
            if record_top:
                bank.record_top(tau + 1, out.hidden[-1], real, int(batch.T))
            outs.append(out)
        return outs

    def document_loss(self, batch, outs, skim=()):
        """Mean over segments (and phases when losses attach to both) of segment losses."""
        terms = []
        for phase_outs in ([skim] if skim and self.cfg.loss_phases == "both" else []) + [outs]:
            for tau, out in enumerate(phase_outs):
                terms.append(self.segment_loss(out, batch.targets[tau], batch.reorder_labels,
                                               batch.final_lanes(tau)))
        total = terms[0]
        for t in terms[1:]:
            total = add(total, t)
        return mul(total, 1.0 / len(terms))

    # --- checkpoints ---------------------------------------------------------

    def state_arrays(self):
        return {f"param/{k}": t.data for k, t in self.named_parameters().items()}

    def load_state_arrays(self, arrays):
        for k, t in self.named_parameters().items():
            arr = arrays[f"param/{k}"]
            if arr.shape != t.shape:
                raise ValueError(f"checkpoint parameter {k} has shape {arr.shape}, expected {t.shape}")
            t.data = np.array(arr, dtype=np.float64)


def save_checkpoint(path, model, extra_arrays=None, meta=None):
    """Write parameters (+ optional extra arrays) and JSON metadata to an .npz container."""
    header = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "config": model.cfg.to_dict()}
    header.update(meta or {})
    arrays = dict(model.state_arrays())
    arrays.update(extra_arrays or {})
    arrays["__meta__"] = np.frombuffer(json.dumps(header).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Return (model, meta dict, all arrays)."""
    with np.load(path, allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(arrays.pop("__meta__").tobytes().decode("utf-8"))
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a recurbench checkpoint")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
    model = Model(ModelConfig.from_dict(meta["config"]))
    model.load_state_arrays(arrays)
    return model, meta, arrays


__all__ = ["ModelConfig", "ModelOutput", "Model", "save_checkpoint", "load_checkpoint", "PHASES"]
