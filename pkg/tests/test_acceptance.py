"""Acceptance suite: one check per headline criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines inline, or
``python tests/test_acceptance.py`` for the summary alone.
"""
import itertools
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import chisquare

from recurbench import kernels
from recurbench.data import (
    DocumentStream,
    build_vocab,
    decode_label,
    encode_label,
    k_classes,
    make_reorder_example,
    stack_documents,
)
from recurbench.evalbench import ProbeSpec, eval_ppl, influence_probe, recall_probe
from recurbench.gradcheck import check_gradients
from recurbench.memory import (
    SchemeSpec,
    attention_calcs,
    local_attention_calcs,
    max_dependency,
    reachability_oracle,
    retro_index_set,
)
from recurbench.model import Model, ModelConfig
from recurbench.synthetic import topic_corpus
from recurbench.trainer import TrainConfig, Trainer

sys.path.insert(0, str(Path(__file__).parent))
from helpers import ReplayBank  # noqa: E402
from test_tensor import _grad_cases  # noqa: E402

SCHEMES = ("none", "shift_down", "same_layer")


def tiny(**kw):
    base = dict(n_layers=2, d_model=8, n_heads=2, d_ff=16, vocab_size=11, seg_len=4, mem_len=4,
                scheme="same_layer", dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


def random_batch(rng, T, L, V, B=2, targets=None, labels=None):
    streams = [DocumentStream(b, rng.integers(4, V, (T, L)), np.full(T, L)) for b in range(B)]
    return stack_documents(streams, targets, labels)


# --- criteria: each returns (passed, detail) ------------------------------------------

def gradient_suite():
    backends = ["python"] + (["cython"] if kernels.compiled_available() else [])
    worst_op, active = 0.0, kernels.BACKEND
    try:
        for backend in backends:
            kernels.use_backend(backend)
            for fn, tensors in _grad_cases(np.random.default_rng(42)).values():
                worst_op = max(worst_op, *check_gradients(fn, tensors).values())
    finally:
        kernels.use_backend(active)
    worst_model = 0.0
    for mode, retro in (("ar", False), ("ar", True), ("mlm", True)):
        rng = np.random.default_rng(7)
        cfg = tiny(mode=mode, dropout=0.1, loss_phases="both" if retro else "retro")
        model = Model(cfg, seed=5)
        for t in model.named_parameters().values():
            if t.ndim == 1 or t.shape[0] == cfg.n_heads:
                t.data = t.data + rng.normal(0, 0.1, t.shape)
        targets = rng.integers(4, 11, (2, 2, 4)) * (rng.random((2, 2, 4)) < 0.5)
        batch = random_batch(rng, 2, 4, 11, targets=targets if mode == "mlm" else None,
                             labels=[3, 8] if mode == "mlm" else None)
        bank = ReplayBank(cfg.scheme, cfg.n_layers, cfg.mem_len, 2, cfg.d_model)

        def loss():
            bank.calls = 0
            outs, skim = model.forward_document(batch, retrospective=retro, rng=np.random.default_rng(11),
                                                bank=bank)
            bank.replay = True
            return model.document_loss(batch, outs, skim)

        worst_model = max(worst_model, *check_gradients(loss, model.named_parameters(), max_entries=12).values())
    ok = worst_op < 1e-4 and worst_model < 1e-3
    return ok, f"ops max rel err {worst_op:.2e} (<1e-4, backends {backends}); model {worst_model:.2e} (<1e-3)"


def memory_isolation():
    """Cached memories carry no gradient: hidden states of earlier segments get none, and parameter
    gradients equal those obtained with the memories replaced by plain constants."""
    for scheme, retro in itertools.product(SCHEMES, (False, True)):
        cfg = tiny(scheme=scheme, n_layers=3)
        model = Model(cfg, seed=2)
        batch = random_batch(np.random.default_rng(1), 3, 4, 11)
        bank = ReplayBank(cfg.scheme, cfg.n_layers, cfg.mem_len, 2, cfg.d_model)
        grads = []
        for replay in (False, True):
            bank.calls, bank.replay = 0, replay
            outs, skim = model.forward_document(batch, retrospective=retro, bank=bank)
            model.zero_grad()
            model.segment_loss(outs[-1], batch.targets[-1]).backward()
            for out in list(outs[:-1]) + list(skim):
                if any(h.grad is not None for h in out.hidden):
                    return False, f"{scheme} retro={retro}: gradient reached an earlier segment"
            grads.append({k: None if t.grad is None else t.grad.copy()
                          for k, t in model.named_parameters().items()})
        for k in grads[0]:
            a, b = grads[0][k], grads[1][k]
            if (a is None) != (b is None) or (a is not None and not np.array_equal(a, b)):
                return False, f"{scheme} retro={retro}: gradient of {k} depends on memory path"
    return True, "6 scheme/phase cases: no gradient into earlier segments, grads identical with frozen memory"


def scheme_degeneracy():
    rng = np.random.default_rng(0)
    for trial in range(20):
        N, L = int(rng.integers(1, 4)), int(rng.integers(2, 6))
        mode = "ar" if trial % 2 == 0 else "mlm"
        outs = []
        for scheme in SCHEMES:
            model = Model(tiny(n_layers=N, seg_len=L, mem_len=0, scheme=scheme, mode=mode), seed=trial)
            batch = random_batch(np.random.default_rng(trial), 3, L, 11)
            res, _ = model.forward_document(batch, retrospective=trial % 3 == 0)
            outs.append([o.logits.data for o in res])
        for other in outs[1:]:
            if not all(np.array_equal(a, b) for a, b in zip(outs[0], other)):
                return False, f"config {trial} (N={N}, L={L}, {mode}) differs across schemes"
    return True, "20 random configs bit-identical across schemes at m=0"


def context_oracle():
    L, checked = 8, 0
    for scheme, N, T, m in itertools.product(SCHEMES, range(1, 5), range(1, 9), (0, L // 2, L)):
        spec = SchemeSpec(scheme, N, L, m, T)
        for layer in range(N):
            if max_dependency(spec, layer) != reachability_oracle(spec, layer):
                return False, f"mismatch at {spec}, layer {layer}"
            checked += 1
    return True, f"{checked} (scheme, N, T, m, layer) cells match the reachability oracle"


def retro_index_rule():
    for T, N in itertools.product(range(1, 51), range(1, 9)):
        expected = sorted({tau for tau in range(1, T + 1) if tau % N == 0} | {T})
        if retro_index_set(T, N) != expected:
            return False, f"T={T}, N={N}: {retro_index_set(T, N)} != {expected}"
    return True, "400 (T, N) pairs match enumeration of every N-th segment plus the last"


def reorder_combinatorics():
    if k_classes(3) != 9:
        return False, f"K(3) = {k_classes(3)}"
    for M in range(1, 6):
        seen = set()
        for k in range(1, M + 1):
            for perm in itertools.permutations(range(k)):
                label = encode_label(k, perm)
                if decode_label(label, M) != (k, perm):
                    return False, f"M={M}: decode(encode({k}, {perm})) failed"
                seen.add(label)
        if seen != set(range(k_classes(M))) or k_classes(M) != sum(math.factorial(i) for i in range(1, M + 1)):
            return False, f"M={M}: labels not a bijection onto 0..K-1"
    rng = np.random.default_rng(2024)
    M, draws = 3, 100_000
    counts = np.zeros(k_classes(M))
    ids = np.arange(4, 16)
    for _ in range(draws):
        counts[make_reorder_example(ids, M, rng).label] += 1
    expected = np.array([1 / (M * math.factorial(decode_label(c, M)[0])) for c in range(k_classes(M))])
    _, p = chisquare(counts, expected * draws)
    return p > 0.01, f"K(3)=9, bijective for M<=5, chi-square p={p:.3f} over 1e5 draws (>0.01)"


def complexity():
    a, b = attention_calcs(2048, 128, 512), local_attention_calcs(2048, 512)
    return a == 2_621_440 and b == 1_048_576, f"recurrent {a:,} (2,621,440), local {b:,} (1,048,576)"


def bidirectional_influence():
    worst_pos, worst_zero = np.inf, 0.0
    for seed in range(5):
        cfg = ModelConfig(n_layers=2, d_model=16, n_heads=2, d_ff=32, vocab_size=30, seg_len=4, mem_len=4,
                          scheme="same_layer", dropout=0.0)
        model = Model(cfg, seed=seed)
        doc = np.random.default_rng(seed).integers(4, 30, 16)
        for pos in range(4):
            worst_pos = min(worst_pos, influence_probe(model, doc, (3, pos), 0, retrospective=True))
            worst_zero = max(worst_zero, influence_probe(model, doc, (3, pos), 0, retrospective=False))
    ok = worst_pos > 0 and worst_zero == 0.0
    return ok, f"two-phase min influence S_T->S_1 {worst_pos:.3e} (>0); single-pass max {worst_zero} (==0)"


# Topic-identity corpus: each document draws from its own word subset, so context carried across
# segments sharpens the prediction. Sizes chosen to fit the 30 min budget on one CPU core.
PPL_SETUP = dict(alphabet=24, topic_size=6, doc_len=64, train_docs=12000, test_docs=200, seg_len=4,
                 steps=24000, d_model=32, seeds=(0, 1, 2))


def ppl_ordering(setup=PPL_SETUP):
    rng = np.random.default_rng(123)
    train = topic_corpus(setup["train_docs"], setup["doc_len"], rng, setup["alphabet"], setup["topic_size"])
    test = topic_corpus(setup["test_docs"], setup["doc_len"], rng, setup["alphabet"], setup["topic_size"])
    vocab = build_vocab(train)
    train_ids = [vocab.tokenize(x) for x in train]
    test_ids = [vocab.tokenize(x) for x in test]
    d, L = setup["d_model"], setup["seg_len"]
    stats = {}
    for scheme in SCHEMES:
        ppls = []
        for seed in setup["seeds"]:
            cfg = ModelConfig(n_layers=2, d_model=d, n_heads=4, d_ff=2 * d, vocab_size=len(vocab), seg_len=L,
                              mem_len=L, scheme=scheme, dropout=0.0)
            tcfg = TrainConfig(seed=seed, steps=setup["steps"], batch_size=8, peak_lr=3e-3, warmup_steps=200,
                               clip_norm=1.0)
            tr = Trainer(cfg, tcfg, train_ids)
            tr.run()
            ppls.append(eval_ppl(tr.model, test_ids))
        stats[scheme] = (float(np.mean(ppls)), float(np.std(ppls, ddof=1)))
    (m_sl, s_sl), (m_sd, s_sd), (m_no, s_no) = stats["same_layer"], stats["shift_down"], stats["none"]
    gap_hi, gap_lo = m_no - m_sd, m_sd - m_sl
    ok = gap_lo > 2 * max(s_sl, s_sd) and gap_hi > 2 * max(s_sd, s_no)
    detail = ", ".join(f"{k} {m:.3f}+-{s:.3f}" for k, (m, s) in stats.items())
    return ok, (f"{detail}; gaps none-shift_down {gap_hi:.3f} (>{2 * max(s_sd, s_no):.3f}), "
                f"shift_down-same_layer {gap_lo:.3f} (>{2 * max(s_sl, s_sd):.3f})")


def recall_separation():
    spec = ProbeSpec(distance=4)
    rows = recall_probe(["shift_down", "same_layer"], spec, seeds=(0, 1, 2), steps=2000)
    acc = {r["scheme"]: r["value"] for r in rows if r["metric"] == "recall_acc"}
    ok = acc["same_layer"] >= 0.90 and acc["shift_down"] <= spec.chance + 0.05
    return ok, (f"d=4: same_layer {acc['same_layer']:.3f} (>=0.90), shift_down {acc['shift_down']:.3f} "
                f"(<={spec.chance + 0.05:.4f})")


def determinism(tmp_dir):
    tmp_dir = Path(tmp_dir)
    rng = np.random.default_rng(0)
    docs = [rng.integers(4, 20, 30) for _ in range(10)]
    cfg = ModelConfig(n_layers=2, d_model=16, n_heads=2, d_ff=32, vocab_size=20, seg_len=4, mem_len=4,
                      scheme="same_layer")
    tcfg = TrainConfig(seed=1, steps=40, batch_size=2, log_every=1, warmup_steps=5)
    for name in ("a", "b"):
        Trainer(cfg, tcfg, docs).run(out_dir=tmp_dir / name)
    if (tmp_dir / "a" / "metrics.jsonl").read_bytes() != (tmp_dir / "b" / "metrics.jsonl").read_bytes():
        return False, "reruns wrote different metrics"
    for mode, retro in (("ar", False), ("mlm", True)):
        c = ModelConfig(**{**cfg.to_dict(), "mode": mode})
        t = TrainConfig(seed=3, steps=40, batch_size=2, warmup_steps=5, retrospective=retro)
        full = Trainer(c, t, docs)
        full.run()
        half = Trainer(c, t, docs)
        half.run(20)
        half.save(tmp_dir / f"{mode}.npz")
        resumed = Trainer.resume(tmp_dir / f"{mode}.npz", docs)
        resumed.run(40)
        same = all(np.array_equal(p.data, resumed.model.named_parameters()[k].data)
                   for k, p in full.model.named_parameters().items())
        if not same or [r["loss"] for r in full.history[20:]] != [r["loss"] for r in resumed.history]:
            return False, f"{mode}: resume at 20 differs from uninterrupted 40 steps"
    return True, "metrics.jsonl bit-identical across reruns; resume at step 20 == uninterrupted (ar, mlm+retro)"


CRITERIA = [
    ("gradient suite", gradient_suite, 120),
    ("memory isolation", memory_isolation, 60),
    ("scheme degeneracy at m=0", scheme_degeneracy, 60),
    ("context-length oracle", context_oracle, 120),
    ("retro index rule", retro_index_rule, 1),
    ("reorder combinatorics", reorder_combinatorics, 60),
    ("complexity accounting", complexity, 1),
    ("bidirectional influence", bidirectional_influence, 120),
    ("perplexity ordering", ppl_ordering, 1800),
    ("recall probe separation", recall_separation, 900),
    ("determinism and resume", determinism, 300),
]


def run_criterion(name, fn, budget, *args):
    start = time.perf_counter()
    ok, detail = fn(*args)
    elapsed = time.perf_counter() - start
    ok = ok and elapsed < budget
    line = f"{'PASS' if ok else 'FAIL'} {name}: {detail} [{elapsed:.1f}s / {budget}s]"
    return ok, line


@pytest.mark.parametrize("name,fn,budget", CRITERIA, ids=[c[0].replace(" ", "_") for c in CRITERIA])
def test_criterion(name, fn, budget, tmp_path, capsys):
    args = (tmp_path,) if fn is determinism else ()
    ok, line = run_criterion(name, fn, budget, *args)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


if __name__ == "__main__":
    import tempfile

    failures = 0
    for name, fn, budget in CRITERIA:
        with tempfile.TemporaryDirectory() as tmp:
            ok, line = run_criterion(name, fn, budget, *((tmp,) if fn is determinism else ()))
        print(line, flush=True)
        failures += not ok
    sys.exit(1 if failures else 0)
