import json
import subprocess
import sys

import numpy as np
import pytest

from recurbench.cli import main
from recurbench.evalbench import read_report


@pytest.fixture
def corpus(tmp_path):
    out = tmp_path / "data"
    assert main(["--seed", "3", "--out-dir", str(out), "make-data", "--kind", "pattern",
                 "--n-docs", "40", "--doc-len", "24"]) == 0
    return out / "corpus.txt"


TRAIN_FLAGS = ["--n-layers", "1", "--d-model", "8", "--n-heads", "2", "--d-ff", "16", "--seg-len", "4",
               "--mem-len", "4", "--steps", "6", "--batch-size", "4", "--warmup-steps", "2", "--log-every", "1"]


@pytest.fixture
def checkpoint(tmp_path, corpus):
    out = tmp_path / "run"
    assert main(["--out-dir", str(out), "train", "--corpus", str(corpus)] + TRAIN_FLAGS) == 0
    return out / "checkpoint.npz"


def test_make_data_writes_documents(tmp_path):
    assert main(["--out-dir", str(tmp_path), "make-data", "--n-docs", "5", "--doc-len", "7"]) == 0
    docs = (tmp_path / "corpus.txt").read_text().strip().split("\n\n")
    assert len(docs) == 5 and all(len(d.split()) == 7 for d in docs)
    assert main(["--out-dir", str(tmp_path), "make-data", "--n-docs", "0"]) == 2


def test_train_writes_metrics_and_checkpoint(tmp_path, checkpoint):
    lines = (checkpoint.parent / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 6 and "loss" in json.loads(lines[0])
    assert checkpoint.exists()


def test_train_resume_continues_from_checkpoint(tmp_path, corpus, checkpoint):
    out = tmp_path / "resumed"
    assert main(["--out-dir", str(out), "train", "--corpus", str(corpus), "--resume", str(checkpoint),
                 "--steps", "9"]) == 0
    assert len((out / "metrics.jsonl").read_text().splitlines()) == 3


def test_eval_ppl_reports_finite_value(tmp_path, corpus, checkpoint, capsys):
    out = tmp_path / "eval"
    assert main(["--out-dir", str(out), "eval-ppl", "--checkpoint", str(checkpoint), "--corpus", str(corpus),
                 "--eval-m", "0"]) == 0
    assert capsys.readouterr().out.startswith("ppl ")
    row = read_report(out / "eval_ppl.json")[0]
    assert row["metric"] == "ppl" and row["m"] == 0 and np.isfinite(row["value"])


def test_probe_influence_command(tmp_path, corpus, checkpoint):
    out = tmp_path / "infl"
    base = ["--out-dir", str(out), "probe-influence", "--checkpoint", str(checkpoint), "--corpus", str(corpus)]
    assert main(base + ["--source", "2", "0", "--target-segment", "0", "--single-pass"]) == 0
    assert read_report(out / "influence.json")[0]["value"] == 0.0
    assert main(base + ["--source", "9", "0", "--target-segment", "0"]) == 2
    assert main(base + ["--doc-index", "99", "--source", "0", "0", "--target-segment", "0"]) == 2


def test_probe_recall_command(tmp_path):
    assert main(["--out-dir", str(tmp_path), "probe-recall", "--schemes", "none", "--distances", "0",
                 "--seeds", "0", "--steps", "3", "--trials", "10", "--d-model", "8"]) == 0
    rows = read_report(tmp_path / "recall_probe.json")
    assert {r["metric"] for r in rows} == {"recall_acc", "recall_acc_seed0"}
    assert main(["--out-dir", str(tmp_path), "probe-recall", "--schemes", "bogus", "--distances", "0"]) == 2
    assert main(["--out-dir", str(tmp_path), "probe-recall", "--distances", "-1"]) == 2


def test_context_and_complexity_commands(tmp_path, capsys):
    assert main(["--out-dir", str(tmp_path), "context-report", "--layers", "1,2", "--segments", "1,3"]) == 0
    rows = read_report(tmp_path / "context_report.json")
    assert rows and {"scheme", "value"} <= set(rows[0])
    assert main(["--out-dir", str(tmp_path), "complexity"]) == 0
    assert "recurrent=2621440 local=1048576" in capsys.readouterr().out


def test_invalid_inputs_exit_with_status_2(tmp_path, corpus, checkpoint):
    bad_vocab = tmp_path / "bad.txt"
    bad_vocab.write_text("x")
    assert main(["--out-dir", str(tmp_path), "train", "--corpus", str(corpus), "--vocab-size", "3"]
                + TRAIN_FLAGS) == 2
    assert main(["--out-dir", str(tmp_path), "train", "--corpus", str(corpus), "--config", str(bad_vocab)]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == 2


def test_missing_files_exit_with_status_1(tmp_path):
    assert main(["--out-dir", str(tmp_path), "eval-ppl", "--checkpoint", str(tmp_path / "none.npz"),
                 "--corpus", str(tmp_path / "none.txt")]) == 1
    blocker = tmp_path / "blocker"
    blocker.write_text("")
    assert main(["--out-dir", str(blocker / "x"), "complexity"]) == 1


def test_console_entry_point_runs(tmp_path):
    res = subprocess.run([sys.executable, "-m", "recurbench.cli", "--out-dir", str(tmp_path), "complexity",
                          "--doc-lens", "8", "--mem-len", "2", "--window", "4"], capture_output=True, text=True)
    assert res.returncode == 0 and "doc_len=8" in res.stdout
