"""Perplexity, long-range recall and influence probes, analytical reports, CSV/JSON output."""
import csv
from dataclasses import dataclass, replace
import json
import math
import os

import numpy as np

from .data import PAD, DocumentStream, batch_streams, segment_document, stack_documents
from .memory import (
    SCHEMES,
    SchemeSpec,
    attention_calcs,
    local_attention_calcs,
    max_dependency,
    reachability_oracle,
)
from .model import Model, ModelConfig, load_checkpoint
from .tensor import cross_entropy, no_grad
from .trainer import TrainState, adam_step, ScheduleSpec

REPORT_COLUMNS = ("scheme", "N", "L", "m", "T_or_d", "metric", "value")


# --- perplexity --------------------------------------------------------------

def _resolve_model(model):
    if isinstance(model, (str, os.PathLike)):
        model, _, _ = load_checkpoint(model)
    return model


def eval_ppl(model, docs, eval_L=None, eval_m=None, batch_size=8, scheme=None):
    """Per-token perplexity exp(mean NLL) over all non-pad targets.

    ``model`` is a :class:`Model` or a checkpoint path; ``docs`` are token-id
    arrays or :class:`DocumentStream` objects. Documents are streamed lane by
    lane with the memory carried across segments (and cleared between
    documents). ``eval_L`` / ``eval_m`` override the training lengths.
    """
    model = _resolve_model(model)
    cfg = model.cfg
    if not cfg.causal:
        raise ValueError("perplexity needs an ar-mode model")
    L = cfg.seg_len if eval_L is None else int(eval_L)
    m = cfg.mem_len if eval_m is None else int(eval_m)
    if L < 1 or m < 0:
        raise ValueError("eval_L must be >= 1 and eval_m >= 0")
    ids = [d.payload() if isinstance(d, DocumentStream) else np.asarray(d, dtype=np.int64) for d in docs]
    if not ids:
        raise ValueError("empty evaluation corpus")
    hi = max(int(a.max()) for a in ids if a.size)
    if hi >= cfg.vocab_size or min(int(a.min()) for a in ids if a.size) < 0:
        raise ValueError(f"corpus token id {hi} does not fit the model vocabulary of {cfg.vocab_size}")
    view = Model.__new__(Model)
    view.__dict__.update(model.__dict__)
    view.cfg = replace(cfg, seg_len=L, mem_len=m, scheme=scheme or cfg.scheme)
    streams = [segment_document(a, L, False, i) for i, a in enumerate(ids) if a.size]
    B = max(1, min(batch_size, len(streams)))
    bank = view.new_bank(B)
    total, count = 0.0, 0
    with no_grad():
        for sb in batch_streams(streams, B):
            bank.reset_lanes(sb.reset)
            out = view.forward_segment(sb.tokens, bank, sb.real, final=True)
            n = int((sb.targets != PAD).sum())
            if n:
                total += float(cross_entropy(out.logits, sb.targets, PAD, reduction="sum").data)
                count += n
    if count == 0:
        raise ValueError("corpus has no scored tokens")
    return math.exp(total / count)


# --- long-range recall probe -------------------------------------------------

@dataclass(frozen=True)
class ProbeSpec:
    """A KEY/VALUE pair in segment 1 and a KEY query ``distance`` segments later.

    Token layout after the 4 reserved ids: ``n_keys`` keys, ``n_values``
    values, ``n_fillers`` filler tokens. Documents have ``n_segments``
    segments (default distance + 1). Every segment ends with the query so the
    training signal is dense; accuracy is read at segment 1 + distance.
    """

    distance: int
    n_values: int = 16
    n_keys: int = 4
    n_fillers: int = 16
    seg_len: int = 8
    trials: int = 400
    n_segments: int = None

    def __post_init__(self):
        if self.distance < 0:
            raise ValueError("distance must be >= 0")
        if self.n_segments is None:
            object.__setattr__(self, "n_segments", self.distance + 1)
        if self.distance > self.n_segments - 1:
            raise ValueError(f"distance {self.distance} exceeds T-1 = {self.n_segments - 1}")
        if self.seg_len < 3:
            raise ValueError("seg_len must be >= 3 to hold key, value and query")
        if min(self.n_values, self.n_keys, self.n_fillers, self.trials) < 1:
            raise ValueError("alphabet sizes and trials must be positive")

    @property
    def vocab_size(self):
        return 4 + self.n_keys + self.n_values + self.n_fillers

    @property
    def chance(self):
        return 1.0 / self.n_values

    def solvable(self, spec):
        """Whether the value lies inside the scheme's receptive field."""
        return self.distance * self.seg_len + self.seg_len <= max_dependency(spec)


def recall_documents(spec, n_docs, rng):
    """DocBatch of ``n_docs`` probe documents plus the value each must recall."""
    L, T = spec.seg_len, spec.n_segments
    key0, val0, fill0 = 4, 4 + spec.n_keys, 4 + spec.n_keys + spec.n_values
    keys = rng.integers(key0, key0 + spec.n_keys, n_docs)
    values = rng.integers(val0, val0 + spec.n_values, n_docs)
    tokens = rng.integers(fill0, fill0 + spec.n_fillers, (n_docs, T, L))
    tokens[:, 0, 0] = keys
    tokens[:, 0, 1] = values
    tokens[:, :, L - 1] = keys[:, None]
    targets = np.full(tokens.shape, PAD, dtype=np.int64)
    targets[:, :, L - 1] = values[:, None]
    streams = [DocumentStream(i, tokens[i], np.full(T, L)) for i in range(n_docs)]
    return stack_documents(streams, targets), values


def probe_config(scheme, spec, n_layers=2, d_model=32, n_heads=4, d_ff=64, mem_len=None):
    return ModelConfig(n_layers=n_layers, d_model=d_model, n_heads=n_heads, d_ff=d_ff,
                       vocab_size=spec.vocab_size, seg_len=spec.seg_len,
                       mem_len=spec.seg_len if mem_len is None else mem_len,
                       scheme=scheme, mode="ar", dropout=0.0)


def train_recall(cfg, spec, seed=0, steps=2000, batch_size=16, peak_lr=3e-3, warmup_steps=100):
    """Train a fresh model on freshly drawn probe documents (no reuse)."""
    model = Model(cfg, np.random.default_rng([seed, 0]))
    state = TrainState.create(model.named_parameters(), ScheduleSpec(peak_lr, warmup_steps, steps),
                              clip_norm=1.0)
    for step in range(steps):
        batch, _ = recall_documents(spec, batch_size, np.random.default_rng([seed, step, 4]))
        model.zero_grad()
        outs, _ = model.forward_document(batch)
        model.document_loss(batch, outs).backward()
        adam_step(state, {k: t.grad for k, t in state.params.items()})
    return model


def recall_accuracy(model, spec, seed=0, batch_size=100):
    """Fraction of held-out documents whose query at segment 1 + distance predicts the value."""
    rng = np.random.default_rng([seed, 5])
    hits, done = 0, 0
    with no_grad():
        while done < spec.trials:
            n = min(batch_size, spec.trials - done)
            batch, values = recall_documents(spec, n, rng)
            outs, _ = model.forward_document(batch)
            pred = np.argmax(outs[spec.distance].logits.data[:, spec.seg_len - 1], axis=-1)
            hits += int((pred == values).sum())
            done += n
    return hits / spec.trials


def recall_probe(schemes, spec, seeds=(0, 1, 2), steps=2000, n_layers=2, d_model=32, **train_kw):
    """Train each scheme identically per seed; rows of per-seed and mean accuracy."""
    rows = []
    for scheme in schemes:
        cfg = probe_config(scheme, spec, n_layers=n_layers, d_model=d_model, d_ff=2 * d_model)
        accs = []
        for seed in seeds:
            model = train_recall(cfg, spec, seed, steps, **train_kw)
            accs.append(recall_accuracy(model, spec, seed))
            rows.append(dict(scheme=scheme, N=n_layers, L=spec.seg_len, m=cfg.mem_len,
                             T_or_d=spec.distance, metric=f"recall_acc_seed{seed}", value=accs[-1]))
        rows.append(dict(scheme=scheme, N=n_layers, L=spec.seg_len, m=cfg.mem_len,
                         T_or_d=spec.distance, metric="recall_acc", value=float(np.mean(accs))))
    return rows


# --- influence probe ---------------------------------------------------------

def influence_probe(model, doc, source, target_segment, retrospective=True, replacement=None):
    """L2 change of the target segment's top-layer output when one source token is replaced.

    ``source`` is (segment, position), 0-based; ``target_segment`` is 0-based.
    With ``retrospective`` the retro-phase output is measured.
    """
    model = _resolve_model(model)
    cfg = model.cfg
    stream = doc if isinstance(doc, DocumentStream) else segment_document(doc, cfg.seg_len, False)
    seg, pos = source
    if not (0 <= seg < stream.T and 0 <= pos < stream.n_real[seg]):
        raise ValueError(f"source position {source} outside the document")
    if not 0 <= target_segment < stream.T:
        raise ValueError(f"target segment {target_segment} outside 0..{stream.T - 1}")
    altered = stream.segments.copy()
    old = int(altered[seg, pos])
    if replacement is None:
        replacement = 4 + (old - 4 + 1) % max(1, cfg.vocab_size - 4)
    if replacement == old or not 0 <= replacement < cfg.vocab_size:
        raise ValueError("replacement token must differ from the original and fit the vocabulary")
    altered[seg, pos] = replacement

    def top(segments):
        s = DocumentStream(stream.doc_id, segments, stream.n_real, stream.prepend_cls)
        batch = stack_documents([s], targets=[np.zeros_like(segments)])
        with no_grad():
            outs, _ = model.forward_document(batch, retrospective=retrospective)
        return outs[target_segment].hidden[-1].data

    return float(np.linalg.norm(top(altered) - top(stream.segments)))


# --- analytical reports --------------------------------------------------------

def context_report(schemes=SCHEMES, layers=(1, 2, 3), seg_len=8, mems=None, segments=(1, 2, 4, 8),
                   with_oracle=True):
    """Rows of closed-form (and, when small enough, BFS oracle) context spans."""
    mems = (0, seg_len // 2, seg_len) if mems is None else mems
    rows = []
    for scheme in schemes:
        for N in layers:
            for m in mems:
                for T in segments:
                    spec = SchemeSpec(scheme, N, seg_len, m, T)
                    base = dict(scheme=scheme, N=N, L=seg_len, m=m, T_or_d=T)
                    rows.append(dict(base, metric="max_dependency", value=max_dependency(spec)))
                    if with_oracle:
                        try:
                            rows.append(dict(base, metric="oracle", value=reachability_oracle(spec)))
                        except OverflowError:
                            pass
    return rows


def complexity_report(doc_lens=(2048,), mem_len=128, window=512):
    rows = []
    for n in doc_lens:
        base = dict(scheme="same_layer", N=0, L=window, m=mem_len, T_or_d=n)
        rows.append(dict(base, metric="attention_calcs", value=attention_calcs(n, mem_len, window)))
        rows.append(dict(base, scheme="local", m=0, metric="attention_calcs",
                         value=local_attention_calcs(n, window)))
    return rows


# --- CSV / JSON emission ---------------------------------------------------------

def _fmt(value):
    if isinstance(value, (bool, np.bool_)):
        return int(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if not math.isfinite(value):
            raise ValueError(f"report value {value} is not finite")
        return float(f"{value:.6g}")
    return value


def normalize_rows(rows):
    out = []
    for r in rows:
        missing = set(REPORT_COLUMNS) - set(r)
        if missing:
            raise ValueError(f"report row lacks {sorted(missing)}")
        out.append({c: _fmt(r[c]) for c in REPORT_COLUMNS})
    return out


def report(rows, out_dir, name="report"):
    """Write ``name``.csv and ``name``.json (same rows); returns the normalized rows."""
    rows = normalize_rows(rows)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, f"{name}.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    with open(os.path.join(out_dir, f"{name}.json"), "w", encoding="utf-8") as fh:
        json.dump({"columns": list(REPORT_COLUMNS), "rows": rows}, fh, indent=1)
    return rows


def read_report(path):
    """Rows back from a report .json file."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if tuple(data["columns"]) != REPORT_COLUMNS:
        raise ValueError(f"unexpected report columns {data['columns']}")
    return data["rows"]
