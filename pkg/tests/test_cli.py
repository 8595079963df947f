import csv
import json

import pytest

from inftrace.checkpoint import save_checkpoint
from inftrace.cli import main
from inftrace.data import load_corpus
from inftrace.model import Checkpoint, config_for, init_params


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(d), "--seed", "2", "--n-train", "200", "--n-dev", "30",
                 "--n-test", "6"]) == 0
    assert main(["train", "--corpus", str(d / "train.jsonl"), "--checkpoint", str(d / "m.ckpt")]) == 0
    return d


def paths(d):
    return ["--corpus", str(d / "train.jsonl"), "--test", str(d / "test.jsonl"), "--checkpoint", str(d / "m.ckpt")]


def read_csv(p):
    with open(p, newline="") as fh:
        return list(csv.DictReader(fh))


def test_synth_writes_all_files(work):
    for name in ("train.jsonl", "dev.jsonl", "test.jsonl", "lexicon.tsv"):
        assert (work / name).stat().st_size > 0
    assert len(load_corpus(work / "train.jsonl")) == 200


def test_train_prints_accuracy_and_is_repeatable(work, tmp_path, capsys):
    out = tmp_path / "again.ckpt"
    assert main(["train", "--corpus", str(work / "train.jsonl"), "--test", str(work / "test.jsonl"),
                 "--checkpoint", str(out)]) == 0
    line = capsys.readouterr().out
    fields = dict(kv.split("=") for kv in line.split())
    assert float(fields["train_accuracy"]) >= 0.95
    assert out.read_bytes() == (work / "m.ckpt").read_bytes()


def test_missing_inputs_exit_2(work, tmp_path, capsys):
    assert main(["train", "--corpus", str(tmp_path / "nope.jsonl"), "--checkpoint", str(tmp_path / "x")]) == 2
    assert "not found" in capsys.readouterr().err
    assert main(["saliency", "--corpus", str(work / "train.jsonl"), "--test", str(work / "test.jsonl")]) == 2
    assert main(["report", str(tmp_path / "none.csv")]) == 2


def test_bad_arguments_exit_2(work):
    assert main(["saliency", *paths(work), "--label", "blue"]) == 2
    assert main(["saliency", *paths(work), "--id", "99"]) == 2
    bad = work / "bad.jsonl"
    bad.write_text("{oops\n")
    assert main(["saliency", "--corpus", str(bad), "--test", str(work / "test.jsonl"),
                 "--checkpoint", str(work / "m.ckpt")]) == 2
    with pytest.raises(SystemExit):
        main(["train", "--epochs", "-3"])


def test_untrained_checkpoint_exit_2(work, tmp_path, capsys):
    train_set = load_corpus(work / "train.jsonl")
    cfg = config_for(train_set)
    p = tmp_path / "raw.ckpt"
    save_checkpoint(p, Checkpoint(cfg, init_params(cfg), train_set.fingerprint()))
    args = ["--corpus", str(work / "train.jsonl"), "--test", str(work / "test.jsonl"), "--checkpoint", str(p)]
    assert main(["trace", *args]) == 2
    assert "not been trained" in capsys.readouterr().err


def test_saliency_output(work, tmp_path):
    out = tmp_path / "s.jsonl"
    assert main(["saliency", *paths(work), "--id", "0,1", "--out", str(out)]) == 0
    rows = [json.loads(line) for line in out.read_text().splitlines()]
    test = load_corpus(work / "test.jsonl", vocab=load_corpus(work / "train.jsonl").vocab)
    assert len(rows) == len(test[0].tokens) + len(test[1].tokens)
    assert {r["test_id"] for r in rows} == {0, 1}
    assert sorted(r["rank"] for r in rows if r["test_id"] == 0) == list(range(1, len(test[0].tokens) + 1))


def test_trace_output(work, tmp_path):
    out = tmp_path / "t.jsonl"
    assert main(["trace", *paths(work), "--id", "2", "--top-k", "2", "--top-m", "3", "--out", str(out)]) == 0
    (rec,) = [json.loads(line) for line in out.read_text().splitlines()]
    assert rec["test_id"] == 2 and len(rec["salient"]) == 2
    vals = [float(r["influence"]) for r in rec["salient"][0]["training"]]
    assert len(vals) == 3 and vals == sorted(vals, reverse=True)


def test_attack_sweep_rows_and_baseline(work, tmp_path, capsys):
    out = tmp_path / "atk"
    argv = ["attack", *paths(work), "--lexicon", str(work / "lexicon.tsv"), "--out", str(out),
            "--attack-mode", "down", "--per-test", "0,1,2", "--seed", "0,1", "--restarts", "2"]
    assert main(argv) == 0
    rows = read_csv(out / "sweep-down.csv")
    assert [(r["k"], r["seed"]) for r in rows] == [(k, s) for k in "012" for s in "01"]
    assert (out / "records-down-k0-s0.jsonl").read_text() == ""
    assert len((out / "records-down-k2-s1.jsonl").read_text().splitlines()) == 2 * 6
    capsys.readouterr()
    assert main(["train", *paths(work)[:4], "--checkpoint", str(tmp_path / "b.ckpt")]) == 0
    baseline = float(dict(kv.split("=") for kv in capsys.readouterr().out.split())["test_accuracy"])
    assert round(float(rows[0]["accuracy"]), 4) == baseline

    assert main(["report", str(out / "sweep-down.csv"), "--out", str(tmp_path / "r.txt")]) == 0
    table = (tmp_path / "r.txt").read_text().splitlines()
    means = [float(line.split()[3]) for line in table[1:]]
    assert len(means) == 3 and all(b <= a for a, b in zip(means, means[1:]))

    par = tmp_path / "par"
    assert main([*argv[:-8], "--out", str(par), "--attack-mode", "down", "--per-test", "0,1,2",
                 "--seed", "0,1", "--restarts", "2", "--jobs", "2"]) == 0
    for f in out.iterdir():
        assert (par / f.name).read_bytes() == f.read_bytes()


def test_fix_sweep(work, tmp_path):
    out = tmp_path / "fix"
    assert main(["fix", *paths(work), "--dev", str(work / "dev.jsonl"), "--lexicon", str(work / "lexicon.tsv"),
                 "--out", str(out), "--per-test", "2"]) == 0
    (row,) = read_csv(out / "sweep-fix.csv")
    assert set(row) == {"mode", "k", "seed", "accuracy", "dev_accuracy"}


def test_report_rejects_bad_csv(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("mode,k\ndown,1\n")
    assert main(["report", str(p)]) == 2


def test_verify_names_singular_failure(work, tmp_path, capsys):
    argv = ["verify", "--corpus", str(work / "train.jsonl"), "--test", str(work / "test.jsonl"),
            "--mode", "convex", "--quick", "--l2", "0", "--damping", "0"]
    assert main(argv) == 1
    captured = capsys.readouterr()
    assert "FAIL  exact ihvp" in captured.out
    assert "exact ihvp" in captured.err


def test_verify_empty_corpus_exit_2(tmp_path):
    empty = tmp_path / "e.jsonl"
    empty.write_text("")
    assert main(["verify", "--corpus", str(empty), "--test", str(empty)]) == 2
