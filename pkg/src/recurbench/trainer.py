"""Adam with warmup/linear-decay, gradient clipping, deterministic training loop."""
from dataclasses import asdict, dataclass, field, fields
import json
import math
import os

import numpy as np

from .data import (
    PAD,
    DocumentStream,
    batch_streams,
    corrupt_mlm,
    make_reorder_example,
    segment_document,
    stack_documents,
)
from .model import Model, ModelConfig, load_checkpoint, save_checkpoint


@dataclass
class ScheduleSpec:
    peak_lr: float = 1e-4
    warmup_steps: int = 4000
    total_steps: int = 400_000


def lr_at(step, spec):
    """Linear warmup 0 -> peak over ``warmup_steps``, then linear decay to 0 at ``total_steps``."""
    if step > spec.total_steps or step < 0:
        return 0.0
    if spec.warmup_steps > 0 and step <= spec.warmup_steps:
        return spec.peak_lr * step / spec.warmup_steps
    span = spec.total_steps - spec.warmup_steps
    if span <= 0:
        return spec.peak_lr
    return spec.peak_lr * (spec.total_steps - step) / span


@dataclass
class TrainConfig:
    seed: int = 0
    steps: int = 100
    batch_size: int = 8
    peak_lr: float = 1e-3
    warmup_steps: int = 0
    total_steps: int = 0  # 0: same as steps
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-6
    weight_decay: float = 0.01
    clip_norm: float = 0.25
    feed: str = "auto"  # stream | document | auto (stream for ar, document for mlm)
    retrospective: bool = False
    mask_prob: float = 0.15
    bert_split: bool = False
    log_every: int = 10
    eval_every: int = 0
    checkpoint_every: int = 0

    def schedule(self):
        return ScheduleSpec(self.peak_lr, self.warmup_steps, self.total_steps or self.steps)

    def feed_mode(self, mode):
        if self.feed == "auto":
            return "stream" if mode == "ar" else "document"
        if self.feed not in ("stream", "document"):
            raise ValueError(f"unknown feed {self.feed!r}")
        return self.feed


@dataclass
class TrainState:
    step: int
    params: dict  # name -> Tensor (shared with the model)
    m: dict
    v: dict
    schedule: ScheduleSpec
    clip_norm: float
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-6
    weight_decay: float = 0.01
    last_grad_norm: float = field(default=0.0, repr=False)

    @classmethod
    def create(cls, params, schedule, clip_norm=0.25, betas=(0.9, 0.999), eps=1e-6, weight_decay=0.01):
        zeros = {k: np.zeros_like(t.data) for k, t in params.items()}
        return cls(0, params, zeros, {k: z.copy() for k, z in zeros.items()}, schedule, clip_norm,
                   tuple(betas), eps, weight_decay)


def clip_by_global_norm(grads, clip_norm):
    """Scale grads so their joint L2 norm is at most ``clip_norm``; returns (grads, norm)."""
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if clip_norm and clip_norm > 0 and norm > clip_norm:
        scale = clip_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


def adam_step(state, grads):
    """One bias-corrected Adam update with decoupled weight decay on matrices.

    Gradients are clipped by global norm first. Missing grads count as zero.
    """
    full = {}
    for k, t in state.params.items():
        g = grads.get(k)
        g = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=np.float64)
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {k!r} at step {state.step + 1}")
        full[k] = g
    full, norm = clip_by_global_norm(full, state.clip_norm)
    state.last_grad_norm = norm
    state.step += 1
    t_ = state.step
    lr = lr_at(t_, state.schedule)
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** t_
    c2 = 1.0 - b2 ** t_
    for k, p in state.params.items():
        g = full[k]
        m = state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        v = state.v[k] = b2 * state.v[k] + (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay and p.data.ndim >= 2:
            p.data = p.data - lr * state.weight_decay * p.data
        p.data = p.data - lr * update
    return state


# --- data feeding ----------------------------------------------------------

def _epoch_order(n_docs, seed, epoch):
    return np.random.default_rng([seed, epoch, 1]).permutation(n_docs)


class StreamFeeder:
    """Endless per-epoch shuffled stream of StepBatches for AR training."""

    def __init__(self, streams, batch_size, seed):
        if len(streams) < batch_size:
            raise ValueError(f"corpus has {len(streams)} documents, fewer than batch_size={batch_size}")
        self.streams, self.B, self.seed = streams, batch_size, seed

    def steps(self, start_step=0):
        epoch, taken = 0, 0
        while True:
            order = _epoch_order(len(self.streams), self.seed, epoch)
            for sb in batch_streams([self.streams[i] for i in order], self.B):
                if not sb.real.any(axis=1).all():
                    break  # drop the ragged tail of an epoch
                if taken >= start_step:
                    yield sb
                taken += 1
            epoch += 1


class DocumentFeeder:
    """Endless per-epoch shuffled batches of whole documents.

    In MLM mode every document is reordered and masked with a generator
    derived from (seed, epoch, document index).
    """

    def __init__(self, docs, cfg, tcfg):
        if len(docs) < tcfg.batch_size:
            raise ValueError(f"corpus has {len(docs)} documents, fewer than batch_size={tcfg.batch_size}")
        self.docs, self.cfg, self.tcfg = docs, cfg, tcfg

    def make_batch(self, idx, epoch):
        cfg, tcfg = self.cfg, self.tcfg
        if cfg.mode == "ar":
            return stack_documents([_as_stream(self.docs[i], cfg.seg_len, False, i) for i in idx])
        streams, targets, labels = [], [], []
        for i in idx:
            rng = np.random.default_rng([tcfg.seed, epoch, int(i), 2])
            ex = make_reorder_example(_ids(self.docs[i]), cfg.max_chunks, rng, cfg.seg_len, True, int(i))
            s = ex.stream
            corrupted = [corrupt_mlm(seg, tcfg.mask_prob, rng, tcfg.bert_split, cfg.vocab_size)
                         for seg in s.segments]
            streams.append(DocumentStream(s.doc_id, np.stack([c.inputs for c in corrupted]),
                                          s.n_real, True))
            targets.append(np.stack([c.targets for c in corrupted]))
            labels.append(ex.label)
        T = max(s.T for s in streams)
        padded = [np.concatenate([t, np.full((T - t.shape[0], cfg.seg_len), PAD)]) for t in targets]
        return stack_documents(streams, padded, labels)

    def steps(self, start_step=0):
        B = self.tcfg.batch_size
        per_epoch = len(self.docs) // B
        step = start_step
        while True:
            epoch, k = divmod(step, per_epoch)
            order = _epoch_order(len(self.docs), self.tcfg.seed, epoch)
            yield self.make_batch(order[k * B:(k + 1) * B], epoch)
            step += 1


def _ids(doc):
    return doc.payload() if isinstance(doc, DocumentStream) else np.asarray(doc, dtype=np.int64)


def _as_stream(doc, seg_len, prepend_cls, doc_id):
    if isinstance(doc, DocumentStream):
        return doc
    return segment_document(doc, seg_len, prepend_cls, doc_id)


# --- training loop -----------------------------------------------------------

class Trainer:
    """Single-writer optimisation loop; every random draw derives from ``tcfg.seed``."""

    def __init__(self, cfg, tcfg, docs, model=None):
        self.cfg, self.tcfg = cfg, tcfg
        self.model = model if model is not None else Model(cfg, np.random.default_rng([tcfg.seed, 0]))
        self.state = TrainState.create(self.model.named_parameters(), tcfg.schedule(), tcfg.clip_norm,
                                       (tcfg.beta1, tcfg.beta2), tcfg.adam_eps, tcfg.weight_decay)
        self.feed = tcfg.feed_mode(cfg.mode)
        if self.feed == "stream":
            if cfg.mode != "ar":
                raise ValueError("stream feeding is only defined for ar mode")
            streams = [_as_stream(d, cfg.seg_len, False, i) for i, d in enumerate(docs)]
            self.feeder = StreamFeeder(streams, tcfg.batch_size, tcfg.seed)
        else:
            self.feeder = DocumentFeeder(docs, cfg, tcfg)
        self.bank = self.model.new_bank(tcfg.batch_size)
        self.history = []

    def train_step(self, batch):
        model, tcfg = self.model, self.tcfg
        rng = np.random.default_rng([tcfg.seed, self.state.step, 3])
        model.zero_grad()
        if self.feed == "stream":
            self.bank.reset_lanes(batch.reset)
            out = model.forward_segment(batch.tokens, self.bank, batch.real, rng, final=True)
            loss = model.segment_loss(out, batch.targets)
        else:
            outs, skim = model.forward_document(batch, tcfg.retrospective, rng)
            loss = model.document_loss(batch, outs, skim)
        loss.backward()
        grads = {k: t.grad for k, t in self.state.params.items()}
        lr = lr_at(self.state.step + 1, self.state.schedule)
        adam_step(self.state, grads)
        rec = {"step": self.state.step, "lr": lr, "loss": float(loss.data)}
        if self.cfg.mode == "ar":
            rec["ppl"] = float(np.exp(min(loss.data, 50.0)))
        elif self.feed == "document" and batch.reorder_labels is not None:
            last = [outs[int(t) - 1].reorder_logits.data[b] for b, t in enumerate(batch.n_segments)]
            pred = np.argmax(np.stack(last), axis=-1)
            rec["reorder_acc"] = float((pred == batch.reorder_labels).mean())
        return rec

    def run(self, steps=None, out_dir=None, eval_fn=None):
        """Train until ``steps`` (absolute step count); write log and checkpoints to ``out_dir``."""
        steps = self.tcfg.steps if steps is None else steps
        log_fh = None
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            log_fh = open(os.path.join(out_dir, "metrics.jsonl"), "a", encoding="utf-8")
        try:
            it = self.feeder.steps(self.state.step)
            while self.state.step < steps:
                rec = self.train_step(next(it))
                self.history.append(rec)
                te = self.tcfg.eval_every
                if eval_fn is not None and te and self.state.step % te == 0:
                    rec.update(eval_fn(self.model))
                every = max(1, self.tcfg.log_every)
                if log_fh is not None and (self.state.step % every == 0 or self.state.step == steps):
                    log_fh.write(json.dumps(rec) + "\n")
                ce = self.tcfg.checkpoint_every
                if out_dir is not None and ce and self.state.step % ce == 0:
                    self.save(os.path.join(out_dir, f"checkpoint_{self.state.step}.npz"))
            if out_dir is not None:
                self.save(os.path.join(out_dir, "checkpoint.npz"))
        finally:
            if log_fh is not None:
                log_fh.close()
        return self.history

    def save(self, path, vocab=None):
        extra = {}
        for k in self.state.params:
            extra[f"adam_m/{k}"] = self.state.m[k]
            extra[f"adam_v/{k}"] = self.state.v[k]
        for k, arr in self.bank.snapshot().items():
            extra[f"bank/{k}"] = arr
        meta = {"step": self.state.step, "train": asdict(self.tcfg)}
        if vocab is not None:
            meta["vocab"] = vocab.to_dict()
            meta["vocab_hash"] = vocab.digest()
        save_checkpoint(path, self.model, extra, meta)

    @classmethod
    def resume(cls, path, docs):
        model, meta, arrays = load_checkpoint(path)
        tcfg = train_config_from_dict(meta["train"])
        tr = cls(model.cfg, tcfg, docs, model=model)
        tr.state.step = int(meta["step"])
        for k in tr.state.params:
            tr.state.m[k] = np.array(arrays[f"adam_m/{k}"])
            tr.state.v[k] = np.array(arrays[f"adam_v/{k}"])
        tr.bank.restore({k[5:]: v for k, v in arrays.items() if k.startswith("bank/")})
        return tr


def train_config_from_dict(d):
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown train config keys: {sorted(unknown)}")
    return TrainConfig(**d)


def train(cfg, tcfg, docs, out_dir=None, eval_fn=None):
    """Build a model, train it for ``tcfg.steps`` and return the Trainer."""
    tr = Trainer(cfg, tcfg, docs)
    tr.run(out_dir=out_dir, eval_fn=eval_fn)
    return tr


# --- flat key=value config files --------------------------------------------

def _coerce(kind, raw, key):
    if kind is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    raw = raw.strip()
    try:
        if kind is int:
            value = float(raw)
            if not value.is_integer():
                raise ValueError(raw)
            return int(value)
        return kind(raw)
    except ValueError as exc:
        raise ValueError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from exc


def config_fields():
    """Mapping key -> (owner class, python type) for every config-file key."""
    out = {}
    for owner in (ModelConfig, TrainConfig):
        for f in fields(owner):
            kind = f.type if isinstance(f.type, type) else {"int": int, "float": float, "str": str,
                                                             "bool": bool}[f.type]
            out[f.name] = (owner, kind)
    return out


def parse_config_text(text, overrides=None):
    """Parse ``key = value`` lines (``#`` comments) into (ModelConfig, TrainConfig)."""
    spec = config_fields()
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in spec:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _coerce(spec[key][1], raw, key)
    values.update(overrides or {})
    model_kw = {k: v for k, v in values.items() if spec[k][0] is ModelConfig}
    train_kw = {k: v for k, v in values.items() if spec[k][0] is TrainConfig}
    return ModelConfig(**model_kw), TrainConfig(**train_kw)


def load_config(path, overrides=None):
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read(), overrides)


def format_config(cfg, tcfg):
    lines = [f"{k} = {v}" for k, v in asdict(cfg).items()]
    lines += [f"{k} = {v}" for k, v in asdict(tcfg).items()]
    return "\n".join(lines) + "\n"


__all__ = ["ScheduleSpec", "lr_at", "TrainConfig", "TrainState", "adam_step", "clip_by_global_norm",
           "Trainer", "train", "parse_config_text", "load_config", "format_config"]
