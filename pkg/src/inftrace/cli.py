"""Command-line entry point.

Subcommands: synth, train, saliency, trace, attack, fix, report, verify.
Human-readable summaries go to stdout; machine-readable files are written
atomically.  Exit codes: 0 success, 1 failure (including failed verify
checks), 2 missing or unusable inputs.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .attack import (AttackConfig, craft_attack, evaluate_retrain, fix_predictions, format_record,
                     sweep_csv)
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (CorpusFormatError, Dataset, LexiconFormatError, atomic_write, load_corpus,
                   load_lexicon, save_corpus, save_lexicon, synth_corpus)
from .ihvp import IhvpConfig
from .influence import Influence, saliency_target
from .model import ModelConfig, accuracy, predict, train
from .saliency import token_saliency
from .verify import run_suite

log = logging.getLogger("inftrace")


class InputError(Exception):
    """Missing or unusable input: exit code 2."""


# --------------------------------------------------------------------------
# flag helpers


def _int_list(text):
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 0:
        raise argparse.ArgumentTypeError("expected non-negative integers")
    return vals


def _positive(kind):
    def parse(text):
        v = kind(text)
        if v <= 0:
            raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
        return v
    return parse


def _non_negative(kind):
    def parse(text):
        v = kind(text)
        if v < 0:
            raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
        return v
    return parse


def _model_flags(p, mode="mlp"):
    g = p.add_argument_group("model")
    g.add_argument("--mode", choices=("mlp", "convex"), default=mode)
    g.add_argument("--d", type=_positive(int), default=None, help="embedding width")
    g.add_argument("--hidden", type=_positive(int), default=8)
    g.add_argument("--epochs", type=_non_negative(int), default=300)
    g.add_argument("--lr", type=_positive(float), default=4.0)
    g.add_argument("--l2", type=_non_negative(float), default=None)


def _ihvp_flags(p, depth=2000):
    g = p.add_argument_group("inverse Hessian")
    g.add_argument("--ihvp-method", choices=("exact", "stochastic"), default="exact")
    g.add_argument("--damping", type=_non_negative(float), default=1e-3)
    g.add_argument("--scale", type=_positive(float), default=None)
    g.add_argument("--depth", type=_non_negative(int), default=depth)
    g.add_argument("--repeats", type=_positive(int), default=8)


def _model_config(args, dataset: Dataset, seed: int) -> ModelConfig:
    d = args.d if args.d is not None else (10 if args.mode == "convex" else 8)
    return ModelConfig(vocab_size=len(dataset.vocab), d=d, hidden=args.hidden, seed=seed,
                       lr=args.lr, epochs=args.epochs, l2=args.l2, mode=args.mode,
                       num_classes=max(2, int(dataset.labels.max()) + 1))


def _ihvp_config(args, seed: int) -> IhvpConfig:
    return IhvpConfig(method=args.ihvp_method, damping=args.damping, scale=args.scale,
                      depth=max(args.depth, 1) if args.ihvp_method == "stochastic" else args.depth,
                      repeats=args.repeats, seed=seed)


def _need(path, what):
    if path is None:
        raise InputError(f"--{what} is required")
    if not Path(path).is_file():
        raise InputError(f"{what} file not found: {path}")
    return path


def _load_train(args) -> Dataset:
    train_set = load_corpus(_need(args.corpus, "corpus"))
    if len(train_set) == 0:
        raise InputError(f"corpus is empty: {args.corpus}")
    return train_set


def _load_split(path, what, train_set: Dataset, required=True) -> Dataset | None:
    if path is None and not required:
        return None
    ds = load_corpus(_need(path, what), vocab=train_set.vocab, split=what)
    if len(ds) == 0:
        raise InputError(f"{what} set is empty: {path}")
    return ds


def _load_ckpt(args, train_set):
    path = _need(args.checkpoint, "checkpoint")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        ckpt = load_checkpoint(path, train_set)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    if not np.isfinite(ckpt.grad_norm):
        raise InputError(f"checkpoint {path} has not been trained")
    if ckpt.config.vocab_size != len(train_set.vocab):
        raise InputError("checkpoint vocabulary size does not match the corpus")
    return ckpt


def _label_for(spec: str, z, theta) -> int:
    if spec == "gold":
        return z.label
    if spec == "predicted":
        return int(predict([z], theta)[0])
    return int(spec)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _dump(record) -> str:
    return json.dumps(record, separators=(",", ":"), ensure_ascii=False)


def _emit(lines, out):
    text = "".join(line + "\n" for line in lines)
    if out:
        atomic_write(out, text)
    else:
        sys.stdout.write(text)


def _select(test_set, ids):
    if ids is None:
        return list(enumerate(test_set))
    for i in ids:
        if i >= len(test_set):
            raise InputError(f"test id {i} out of range (test set has {len(test_set)} examples)")
    return [(i, test_set[i]) for i in ids]


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    train_set, dev, test, lexicon = synth_corpus(args.seed, args.n_train, args.n_dev, args.n_test, args.noise)
    out = Path(args.out)
    for name, ds in (("train", train_set), ("dev", dev), ("test", test)):
        save_corpus(ds, out / f"{name}.jsonl")
    save_lexicon(lexicon, out / "lexicon.tsv")
    print(f"wrote {len(train_set)}/{len(dev)}/{len(test)} examples and {len(lexicon.entries)} "
          f"lexicon entries to {out}")
    return 0


def cmd_train(args):
    train_set = _load_train(args)
    test = _load_split(args.test, "test", train_set, required=False)
    if args.checkpoint is None:
        raise InputError("--checkpoint (output path) is required")
    cfg = _model_config(args, train_set, args.seed)
    ckpt = train(train_set, cfg)
    save_checkpoint(args.checkpoint, ckpt)
    line = (f"loss={ckpt.loss_history[-1]:.6g} grad_inf={ckpt.grad_norm:.3g} "
            f"train_accuracy={accuracy(train_set, ckpt.theta):.4f}")
    if test is not None:
        line += f" test_accuracy={accuracy(test, ckpt.theta):.4f}"
    print(line)
    return 0


def cmd_saliency(args):
    train_set = _load_train(args)
    test = _load_split(args.test, "test", train_set)
    ckpt = _load_ckpt(args, train_set)
    lines = []
    for tid, z in _select(test, args.id):
        label = _label_for(args.label, z, ckpt.theta)
        rep = token_saliency(z, label, ckpt.theta)
        for pos in range(len(z.tokens)):
            lines.append(_dump({"test_id": tid, "label": label, "position": pos,
                                "token": train_set.vocab.word(z.tokens[pos]),
                                "score": _fmt(rep.scores[pos]), "rank": int(rep.ranks[pos])}))
    _emit(lines, args.out)
    return 0


def cmd_trace(args):
    train_set = _load_train(args)
    test = _load_split(args.test, "test", train_set)
    ckpt = _load_ckpt(args, train_set)
    inf = Influence.from_checkpoint(ckpt, train_set, _ihvp_config(args, args.seed))
    vocab = train_set.vocab
    m = min(args.top_m, len(train_set))
    lines = []
    for tid, z in _select(test, args.id):
        label = _label_for(args.label, z, ckpt.theta)
        rep = token_saliency(z, label, ckpt.theta)
        salient = []
        for rank, pos in enumerate(rep.order[: args.top_k], 1):
            target = saliency_target(z, pos, label, ckpt.theta, tid)
            rows = []
            for sc in inf.rank(target, m):
                x = train_set[sc.train_id]
                prof = inf.token_profile(x, target)
                top = int(np.argmax(prof))
                rows.append({"train_id": sc.train_id, "influence": _fmt(sc.value),
                             "text": vocab.decode(x.tokens), "label": x.label,
                             "top_token": {"position": top, "token": vocab.word(x.tokens[top]),
                                           "influence": _fmt(prof[top])}})
            salient.append({"rank": rank, "position": pos, "token": vocab.word(z.tokens[pos]),
                            "score": _fmt(rep.scores[pos]), "training": rows})
        lines.append(_dump({"test_id": tid, "label": label, "text": vocab.decode(z.tokens),
                            "salient": salient}))
    _emit(lines, args.out)
    return 0


# sweep cells run either in-process (sharing one Influence) or in workers

_STATE: dict = {}


def _init_state(train_set, test, dev, ckpt, lexicon, ihvp_cfg):
    _STATE.update(train=train_set, test=test, dev=dev, ckpt=ckpt, lexicon=lexicon,
                  inf=Influence.from_checkpoint(ckpt, train_set, ihvp_cfg))


def _run_cell(cell):
    mode, k, seed, restarts = cell
    s = _STATE
    cfg = AttackConfig(mode=mode, per_test=k, restarts=restarts, seed=seed)
    if mode == "fix":
        corpus, records = fix_predictions(s["train"], s["dev"], cfg, s["ckpt"], s["lexicon"], influence=s["inf"])
    else:
        corpus, records = craft_attack(s["train"], s["test"], cfg, s["ckpt"], s["lexicon"], influence=s["inf"])
    retrain_cfg = replace(s["ckpt"].config, seed=seed)
    report = evaluate_retrain(corpus, s["test"], retrain_cfg, s["ckpt"])
    row = {"mode": mode, "k": k, "seed": seed, "accuracy": report.accuracy}
    if mode == "fix":
        row["dev_accuracy"] = accuracy(s["dev"], report.checkpoint.theta)
    return row, [format_record(r, s["train"].vocab) for r in records], len(corpus)


def _sweep(args, mode, ks):
    dev = None
    train_set = _load_train(args)
    test = _load_split(args.test, "test", train_set)
    if mode == "fix":
        dev = _load_split(args.dev, "dev", train_set)
    ckpt = _load_ckpt(args, train_set)
    lexicon = load_lexicon(_need(args.lexicon, "lexicon")).resolve(train_set.vocab, antonyms=mode == "fix")
    ihvp_cfg = _ihvp_config(args, 0)
    cells = [(mode, k, seed, args.restarts) for k in ks for seed in args.seed]
    state = (train_set, test, dev, ckpt, lexicon, ihvp_cfg)
    if args.jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(args.jobs, initializer=_init_state, initargs=state) as pool:
            results = list(pool.map(_run_cell, cells))
    else:
        _init_state(*state)
        results = [_run_cell(c) for c in cells]
    out = Path(args.out)
    rows = []
    for (row, records, size), (_, k, seed, _) in zip(results, cells):
        atomic_write(out / f"records-{mode}-k{k}-s{seed}.jsonl",
                     "".join(_dump({**r, "value": _fmt(r["value"])}) + "\n" for r in records))
        rows.append(row)
        extra = f" dev_accuracy={row['dev_accuracy']:.4f}" if "dev_accuracy" in row else ""
        print(f"mode={mode} k={k} seed={seed} records={len(records)} train_size={size} "
              f"accuracy={row['accuracy']:.4f}{extra}")
    text = sweep_csv(rows) if mode != "fix" else _fix_csv(rows)
    atomic_write(out / f"sweep-{mode}.csv", text)
    return 0


def _fix_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("mode", "k", "seed", "accuracy", "dev_accuracy"))
    for r in rows:
        w.writerow([r["mode"], r["k"], r["seed"], repr(float(r["accuracy"])), repr(float(r["dev_accuracy"]))])
    return buf.getvalue()


def cmd_attack(args):
    return _sweep(args, args.attack_mode, args.per_test)


def cmd_fix(args):
    return _sweep(args, "fix", args.per_test)


def summarize(rows) -> list[str]:
    """Mean and sample sd of accuracy per (mode, k), in first-appearance mode order."""
    groups: dict[tuple, list] = {}
    modes: list[str] = []
    for r in rows:
        if r["mode"] not in modes:
            modes.append(r["mode"])
        groups.setdefault((r["mode"], int(r["k"])), []).append(r)
    has_dev = any("dev_accuracy" in r and r["dev_accuracy"] not in ("", None) for r in rows)
    head = f"{'mode':<10}{'k':>4}{'n':>4}  {'accuracy':<18}" + ("  dev_accuracy" if has_dev else "")
    lines = [head]
    for mode in modes:
        for key in sorted(k for k in groups if k[0] == mode):
            grp = groups[key]

            def ms(field):
                vals = np.array([float(r[field]) for r in grp])
                sd = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
                return f"{vals.mean():.4f} ± {sd:.4f}"
            line = f"{mode:<10}{key[1]:>4}{len(grp):>4}  {ms('accuracy'):<18}"
            if has_dev and all(r.get("dev_accuracy") not in ("", None) for r in grp):
                line += f"  {ms('dev_accuracy')}"
            lines.append(line.rstrip())
    return lines


def cmd_report(args):
    rows = []
    for path in args.inputs:
        _need(path, "sweep csv")
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            missing = {"mode", "k", "seed", "accuracy"} - set(reader.fieldnames or ())
            if missing:
                raise InputError(f"{path}: missing columns {sorted(missing)}")
            rows.extend(reader)
    if not rows:
        raise InputError("no sweep rows to report")
    lines = summarize(rows)
    print("\n".join(lines))
    if args.out:
        atomic_write(args.out, "\n".join(lines) + "\n")
    return 0


def cmd_verify(args):
    if args.corpus is None:
        train_set, _, test, _ = synth_corpus(args.seed, 200, 20, 20)
    else:
        train_set = _load_train(args)
        test = _load_split(args.test, "test", train_set)
    model_cfg = _model_config(args, train_set, args.seed)
    ihvp_cfg = IhvpConfig(method="exact", damping=args.damping, scale=args.scale, depth=args.depth,
                          repeats=args.repeats, seed=args.seed)
    results = run_suite(train_set, test, model_cfg, ihvp_cfg, quick=args.quick)
    lines = [r.line() for r in results]
    failed = [r.name for r in results if not r.passed]
    lines.append(f"{len(results) - len(failed)}/{len(results)} checks passed")
    print("\n".join(lines))
    if args.out:
        atomic_write(args.out, "\n".join(lines) + "\n")
    if failed:
        print("failing checks: " + ", ".join(failed), file=sys.stderr)
        return 1
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="inftrace", description="Trace predictions through saliency and influence.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic corpus and lexicon")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-train", type=_positive(int), default=500)
    s.add_argument("--n-dev", type=_positive(int), default=100)
    s.add_argument("--n-test", type=_positive(int), default=100)
    s.add_argument("--noise", type=float, default=0.0)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train", help="train a model and write a checkpoint")
    s.add_argument("--corpus")
    s.add_argument("--test")
    s.add_argument("--checkpoint")
    s.add_argument("--seed", type=int, default=0)
    _model_flags(s)
    s.set_defaults(fn=cmd_train)

    for name, fn, doc in (("saliency", cmd_saliency, "per-token saliency records"),
                          ("trace", cmd_trace, "salient tokens and the training examples behind them")):
        s = sub.add_parser(name, help=doc)
        s.add_argument("--corpus")
        s.add_argument("--test")
        s.add_argument("--checkpoint")
        s.add_argument("--out")
        s.add_argument("--id", type=_int_list, default=None, help="test ids (default: all)")
        s.add_argument("--label", default="gold", help="gold, predicted or a class id")
        s.add_argument("--seed", type=int, default=0)
        if name == "trace":
            s.add_argument("--top-k", type=_positive(int), default=3)
            s.add_argument("--top-m", type=_positive(int), default=3)
            _ihvp_flags(s)
        s.set_defaults(fn=fn)

    for name, fn in (("attack", cmd_attack), ("fix", cmd_fix)):
        s = sub.add_parser(name, help=f"{name} sweep with retraining")
        s.add_argument("--corpus")
        s.add_argument("--dev")
        s.add_argument("--test")
        s.add_argument("--lexicon")
        s.add_argument("--checkpoint")
        s.add_argument("--out", required=True)
        if name == "attack":
            s.add_argument("--attack-mode", choices=("down", "up", "combined"), default="down")
        s.add_argument("--per-test", type=_int_list, default=[1])
        s.add_argument("--restarts", type=_non_negative(int), default=5)
        s.add_argument("--seed", type=_int_list, default=[0])
        s.add_argument("--jobs", type=_positive(int), default=1)
        _ihvp_flags(s)
        s.set_defaults(fn=fn)

    s = sub.add_parser("report", help="aggregate sweep CSVs")
    s.add_argument("inputs", nargs="+")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_report)

    s = sub.add_parser("verify", help="run the oracle suite")
    s.add_argument("--corpus")
    s.add_argument("--test")
    s.add_argument("--out")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--quick", action="store_true", help="fewer random draws")
    _model_flags(s, mode="convex")
    _ihvp_flags(s, depth=0)
    s.set_defaults(fn=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "label", "gold") not in ("gold", "predicted"):
            try:
                int(args.label)
            except ValueError:
                raise InputError(f"--label must be gold, predicted or a class id, got {args.label!r}") from None
        return args.fn(args)
    except (InputError, FileNotFoundError, CheckpointError, CorpusFormatError, LexiconFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any module error is a failed run
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
