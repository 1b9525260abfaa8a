"""Time the compiled kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeats N]
"""
import argparse
import time

import numpy as np

from recurbench import kernels
from recurbench.data import DocumentStream, stack_documents
from recurbench.model import Model, ModelConfig


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def cases(rng):
    B, H, Lq, klen, d = 8, 4, 64, 128, 64
    raw = rng.normal(size=(B, H, Lq, Lq + klen))
    scores = rng.normal(size=(B, H, Lq, klen))
    mask = np.broadcast_to(np.tril(np.ones((Lq, klen), bool), k=klen - Lq), (B, Lq, klen))
    x = rng.normal(size=(B, Lq, d))
    gain, bias = np.ones(d), np.zeros(d)
    cfg = ModelConfig(n_layers=2, d_model=64, n_heads=4, d_ff=128, vocab_size=200, seg_len=32, mem_len=32,
                      dropout=0.0)
    model = Model(cfg, seed=0)
    streams = [DocumentStream(b, rng.integers(4, 200, (4, 32)), np.full(4, 32)) for b in range(8)]
    batch = stack_documents(streams)

    def train_step():
        outs, _ = model.forward_document(batch)
        model.zero_grad()
        model.document_loss(batch, outs).backward()

    return {
        "rel_gather": lambda: kernels.rel_gather(raw, klen - 1, klen),
        "softmax": lambda: kernels.softmax(scores, mask),
        "layer_norm": lambda: kernels.layer_norm_fwd(x, gain, bias, 1e-12),
        "gelu": lambda: kernels.gelu_fwd(x),
        "model fwd+bwd (4 segments)": train_step,
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    backends = ["python"] + (["cython"] if kernels.compiled_available() else [])
    if len(backends) == 1:
        print("compiled kernels not available; timing the numpy fallback only")
    active = kernels.BACKEND
    results = {}
    try:
        for backend in backends:
            kernels.use_backend(backend)
            for name, fn in cases(np.random.default_rng(0)).items():
                fn()  # warm up
                results.setdefault(name, {})[backend] = best_of(fn, args.repeats)
    finally:
        kernels.use_backend(active)
    print(f"{'kernel':<28}" + "".join(f"{b:>12}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for name, t in results.items():
        row = f"{name:<28}" + "".join(f"{t[b] * 1e3:>10.2f}ms" for b in backends)
        if len(backends) > 1:
            row += f"{t['python'] / t['cython']:>11.2f}x"
        print(row)


if __name__ == "__main__":
    main()
