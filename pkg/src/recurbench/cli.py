"""Command-line entry point: ``recurbench <command> [options]``.

Exit status is 0 on success, 2 on invalid input and 1 on runtime failure.
"""
import argparse
import os
import sys

import numpy as np

from . import evalbench
from .data import Vocab, build_vocab, read_corpus, write_corpus
from .memory import SCHEMES, attention_calcs, local_attention_calcs
from .model import load_checkpoint
from .synthetic import pattern_corpus, topic_corpus
from .trainer import Trainer, config_fields, load_config, parse_config_text


def _int_list(text):
    return [int(x) for x in text.split(",") if x.strip()]


def _str_list(text):
    return [x.strip() for x in text.split(",") if x.strip()]


def _bool(text):
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _add_config_flags(p):
    for key, (_, kind) in config_fields().items():
        if key == "seed":
            continue
        p.add_argument("--" + key.replace("_", "-"), dest="cfg_" + key,
                       type=_bool if kind is bool else kind, default=None, metavar=kind.__name__.upper())


def build_parser():
    ap = argparse.ArgumentParser(prog="recurbench", description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out-dir", default="runs")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a text corpus")
    p.add_argument("--corpus", nargs="+", required=True, help="text files, blank line between documents")
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--tokenizer", choices=("word", "byte"), default="word")
    p.add_argument("--max-vocab", type=int, default=None)
    p.add_argument("--resume", help="checkpoint to continue from")
    _add_config_flags(p)

    p = sub.add_parser("eval-ppl", help="perplexity of a checkpoint on a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", nargs="+", required=True)
    p.add_argument("--eval-L", type=int, default=None)
    p.add_argument("--eval-m", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=8)

    p = sub.add_parser("probe-recall", help="train and score the long-range recall probe")
    p.add_argument("--schemes", type=_str_list, default=list(SCHEMES))
    p.add_argument("--distances", type=_int_list, default=[0, 1, 2, 4])
    p.add_argument("--seeds", type=_int_list, default=None, help="default: --seed, --seed+1, --seed+2")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--n-layers", type=int, default=2)
    p.add_argument("--d-model", type=int, default=32)
    p.add_argument("--seg-len", type=int, default=8)
    p.add_argument("--n-values", type=int, default=16)
    p.add_argument("--trials", type=int, default=400)

    p = sub.add_parser("probe-influence", help="token-substitution influence on a target segment")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", nargs="+", required=True)
    p.add_argument("--doc-index", type=int, default=0)
    p.add_argument("--source", type=int, nargs=2, metavar=("SEGMENT", "POS"), required=True)
    p.add_argument("--target-segment", type=int, required=True)
    p.add_argument("--single-pass", action="store_true", help="disable the two-phase feed")

    p = sub.add_parser("context-report", help="effective context spans per scheme")
    p.add_argument("--schemes", type=_str_list, default=list(SCHEMES))
    p.add_argument("--layers", type=_int_list, default=[1, 2, 3, 4])
    p.add_argument("--seg-len", type=int, default=8)
    p.add_argument("--mems", type=_int_list, default=None)
    p.add_argument("--segments", type=_int_list, default=[1, 2, 4, 8])
    p.add_argument("--no-oracle", action="store_true")

    p = sub.add_parser("complexity", help="token-to-token attention counts")
    p.add_argument("--doc-lens", type=_int_list, default=[2048])
    p.add_argument("--mem-len", type=int, default=128)
    p.add_argument("--window", type=int, default=512)

    p = sub.add_parser("make-data", help="write a synthetic corpus")
    p.add_argument("--kind", choices=("pattern", "topic"), default="topic")
    p.add_argument("--n-docs", type=int, default=100)
    p.add_argument("--doc-len", type=int, default=64)
    p.add_argument("--name", default="corpus.txt")
    return ap


def _vocab_from(meta):
    if "vocab" not in meta:
        raise ValueError("checkpoint carries no vocabulary")
    return Vocab.from_dict(meta["vocab"])


def cmd_train(args):
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    overrides["seed"] = args.seed
    docs = read_corpus(args.corpus)
    os.makedirs(args.out_dir, exist_ok=True)
    if args.resume:
        _, meta, _ = load_checkpoint(args.resume)
        vocab = _vocab_from(meta)
        tr = Trainer.resume(args.resume, [vocab.tokenize(d) for d in docs])
        steps = overrides.get("steps", tr.tcfg.steps)
    else:
        if args.config:
            cfg, tcfg = load_config(args.config, overrides)
        else:
            cfg, tcfg = parse_config_text("", overrides)
        vocab = build_vocab(docs, args.max_vocab, args.tokenizer)
        if "vocab_size" not in overrides:
            cfg.vocab_size = len(vocab)
            cfg.validate()
        elif cfg.vocab_size < len(vocab):
            raise ValueError(f"vocab_size {cfg.vocab_size} is smaller than the vocabulary ({len(vocab)})")
        tr = Trainer(cfg, tcfg, [vocab.tokenize(d) for d in docs])
        steps = tcfg.steps
    tr.run(steps, out_dir=args.out_dir)
    tr.save(os.path.join(args.out_dir, "checkpoint.npz"), vocab)
    last = tr.history[-1] if tr.history else {}
    print(f"step {tr.state.step} loss {last.get('loss', float('nan')):.6g} -> {args.out_dir}")


def cmd_eval_ppl(args):
    model, meta, _ = load_checkpoint(args.checkpoint)
    vocab = _vocab_from(meta)
    if meta.get("vocab_hash") is not None and meta["vocab_hash"] != vocab.digest():
        raise ValueError("vocabulary hash mismatch")
    ids = [vocab.tokenize(d) for d in read_corpus(args.corpus)]
    ppl = evalbench.eval_ppl(model, ids, args.eval_L, args.eval_m, args.batch_size)
    cfg = model.cfg
    row = dict(scheme=cfg.scheme, N=cfg.n_layers, L=args.eval_L or cfg.seg_len,
               m=cfg.mem_len if args.eval_m is None else args.eval_m, T_or_d=len(ids), metric="ppl", value=ppl)
    evalbench.report([row], args.out_dir, "eval_ppl")
    print(f"ppl {ppl:.6g}")


def cmd_probe_recall(args):
    seeds = args.seeds or [args.seed, args.seed + 1, args.seed + 2]
    for s in args.schemes:
        if s not in SCHEMES:
            raise ValueError(f"unknown scheme {s!r}")
    rows = []
    for d in args.distances:
        spec = evalbench.ProbeSpec(d, n_values=args.n_values, seg_len=args.seg_len, trials=args.trials)
        rows += evalbench.recall_probe(args.schemes, spec, seeds, args.steps, args.n_layers, args.d_model)
    rows = evalbench.report(rows, args.out_dir, "recall_probe")
    for r in rows:
        if r["metric"] == "recall_acc":
            print(f"{r['scheme']:>10} d={r['T_or_d']} acc={r['value']:.4f}")


def cmd_probe_influence(args):
    model, meta, _ = load_checkpoint(args.checkpoint)
    vocab = _vocab_from(meta)
    docs = read_corpus(args.corpus)
    if not 0 <= args.doc_index < len(docs):
        raise ValueError(f"doc index {args.doc_index} outside 0..{len(docs) - 1}")
    ids = vocab.tokenize(docs[args.doc_index])
    value = evalbench.influence_probe(model, ids, tuple(args.source), args.target_segment,
                                      retrospective=not args.single_pass)
    cfg = model.cfg
    row = dict(scheme=cfg.scheme, N=cfg.n_layers, L=cfg.seg_len, m=cfg.mem_len, T_or_d=args.target_segment,
               metric="influence_single_pass" if args.single_pass else "influence_two_phase", value=value)
    evalbench.report([row], args.out_dir, "influence")
    print(f"influence {value:.6g}")


def cmd_context_report(args):
    rows = evalbench.context_report(args.schemes, args.layers, args.seg_len, args.mems, args.segments,
                                    with_oracle=not args.no_oracle)
    evalbench.report(rows, args.out_dir, "context_report")
    print(f"{len(rows)} rows -> {args.out_dir}")


def cmd_complexity(args):
    rows = evalbench.complexity_report(args.doc_lens, args.mem_len, args.window)
    evalbench.report(rows, args.out_dir, "complexity")
    for n in args.doc_lens:
        print(f"doc_len={n} recurrent={attention_calcs(n, args.mem_len, args.window)} "
              f"local={local_attention_calcs(n, args.window)}")


def cmd_make_data(args):
    if args.n_docs < 1 or args.doc_len < 1:
        raise ValueError("n-docs and doc-len must be positive")
    if args.kind == "pattern":
        docs = pattern_corpus(args.n_docs, args.doc_len)
    else:
        docs = topic_corpus(args.n_docs, args.doc_len, np.random.default_rng(args.seed))
    os.makedirs(args.out_dir, exist_ok=True)
    path = os.path.join(args.out_dir, args.name)
    write_corpus(path, docs)
    print(path)


COMMANDS = {
    "train": cmd_train,
    "eval-ppl": cmd_eval_ppl,
    "probe-recall": cmd_probe_recall,
    "probe-influence": cmd_probe_influence,
    "context-report": cmd_context_report,
    "complexity": cmd_complexity,
    "make-data": cmd_make_data,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, RuntimeError, FloatingPointError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
