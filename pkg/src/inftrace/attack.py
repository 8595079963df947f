"""Training-set perturbations guided by influence on saliency.

Attack modes replace training examples:

* ``down``: lower the saliency of the test example's top token under its
  gold label ``y``.
* ``up``: raise the saliency of the top token under the strongest wrong
  label ``y'``.
* ``combined``: alternate ``down`` and ``up`` edits slot by slot.

The ``fix`` mode appends edited copies instead, for misclassified dev
examples, alternating "raise under ``y``" and "lower under ``y'``" edits and
drawing substitutes from synonyms and antonyms.

Every edit is a single-token substitution from the lexicon.  The search is
two-stage greedy (position by token influence, then the best substitute)
plus ``restarts`` random positions; the best candidate wins.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, Example, Lexicon, ResolvedLexicon
from .ihvp import IhvpConfig
from .influence import Influence, Target, top_salient_target
from .model import Checkpoint, ModelConfig, accuracy, predict, predict_probs, train

log = logging.getLogger(__name__)

MODES = ("down", "up", "combined", "fix")
OBJECTIVES = ("max", "min")


class AttackError(RuntimeError):
    pass


class NoCandidateError(AttackError):
    """No lexicon-covered position (or empty entry) to substitute."""


@dataclass(frozen=True)
class AttackConfig:
    mode: str = "down"
    per_test: int = 1
    restarts: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.per_test < 0 or self.restarts < 0:
            raise ValueError("per_test and restarts must be >= 0")

    @property
    def use_antonyms(self) -> bool:
        return self.mode == "fix"


@dataclass(frozen=True)
class PerturbationRecord:
    train_id: int | None
    position: int
    original: int
    substitute: int
    value: float
    mode: str = ""
    test_id: int | None = None
    label: int | None = None

    def apply(self, z: Example) -> Example:
        return z.substitute(self.position, self.substitute)


def _better(a: float, b: float, objective: str) -> bool:
    return a > b if objective == "max" else a < b


def select_target_token(inf: Influence, z: Example, target: Target, lexicon: ResolvedLexicon,
                        objective: str = "min") -> int:
    """Covered position whose token most supports the target (objective ``min``)
    or most opposes it (``max``); ties go to the lower position."""
    covered = lexicon.covered(z)
    if not covered:
        raise NoCandidateError("no lexicon-covered token")
    sign = 1.0 if objective == "min" else -1.0
    best, best_score = covered[0], None
    for p in covered:
        score = sign * inf.token(z, p, target).value
        if best_score is None or score > best_score:
            best, best_score = p, score
    return best


def best_substitution(inf: Influence, z: Example, position: int, target: Target,
                      objective: str, lexicon: ResolvedLexicon, train_id: int | None = None,
                      mode: str = "") -> PerturbationRecord:
    """Scan every substitute at ``position``; ties keep the earlier candidate."""
    if objective not in OBJECTIVES:
        raise ValueError(f"objective must be one of {OBJECTIVES}")
    original = z.tokens[position]
    cands = [c for c in lexicon.candidates(original) if c != original]
    if not cands:
        raise NoCandidateError(f"empty lexicon entry at position {position}")
    best = None
    for c in cands:
        value = inf.perturbation(z, z.substitute(position, c), target).value
        if best is None or _better(value, best[1], objective):
            best = (c, value)
    return PerturbationRecord(train_id, position, original, best[0], best[1], mode,
                              target.test_id, target.label)


def greedy_perturb(inf: Influence, z: Example, target: Target, objective: str,
                   lexicon: ResolvedLexicon, restarts: int = 5, rng=None,
                   train_id: int | None = None, mode: str = "") -> PerturbationRecord:
    """Two-stage greedy result, challenged by ``restarts`` random positions."""
    pos = select_target_token(inf, z, target, lexicon, objective)
    best = best_substitution(inf, z, pos, target, objective, lexicon, train_id, mode)
    if restarts:
        rng = rng if rng is not None else np.random.default_rng(0)
        covered = lexicon.covered(z)
        for p in rng.choice(covered, size=restarts):
            rec = best_substitution(inf, z, int(p), target, objective, lexicon, train_id, mode)
            if _better(rec.value, best.value, objective):
                best = rec
    return best


def wrong_label(z: Example, theta) -> int:
    """Highest-probability label other than the gold one (ties to the lower id)."""
    probs = predict_probs(z, theta).copy()
    probs[z.label] = -np.inf
    return int(np.argmax(probs))


class _Plan:
    """A target and its training-point ranking: by |influence| for attacks,
    by signed influence (most responsible first) for fixes."""

    def __init__(self, inf: Influence, z: Example, label: int, test_id: int, by_magnitude: bool = True):
        self.target = top_salient_target(z, label, inf.theta, test_id)
        vals = inf.scores(self.target)
        key = np.abs(vals) if by_magnitude else vals
        self.order = sorted(range(len(vals)), key=lambda i: (-key[i], i))


def _slot_spec(mode: str, slot: int):
    """(sub-mode, which label, objective) for slot ``slot`` of a test example."""
    if mode == "combined":
        mode = "down" if slot % 2 == 0 else "up"
    if mode == "down":
        return "down", "gold", "min"
    if mode == "up":
        return "up", "wrong", "max"
    # fix: raise the gold-label saliency, then lower the wrong-label one
    return ("fix-up", "gold", "max") if slot % 2 == 0 else ("fix-down", "wrong", "min")


def craft_attack(corpus: Dataset, test_set: Dataset, cfg: AttackConfig, checkpoint: Checkpoint,
                 lexicon: Lexicon | ResolvedLexicon, ihvp: IhvpConfig | None = None,
                 influence: Influence | None = None):
    """Replace ``per_test`` training examples per test example.

    Returns:
        (perturbed corpus, records).  Training examples already edited for
        an earlier test example, or without any covered token, are skipped
        in favour of the next-ranked one.
    """
    if cfg.mode not in ("down", "up", "combined"):
        raise ValueError("craft_attack needs mode down, up or combined")
    if cfg.per_test == 0:
        return corpus.with_examples(corpus.examples), []
    lex = lexicon if isinstance(lexicon, ResolvedLexicon) else lexicon.resolve(corpus.vocab, False)
    inf = influence or Influence.from_checkpoint(checkpoint, corpus, ihvp)
    theta = checkpoint.theta
    rng = np.random.default_rng(cfg.seed)
    examples = list(corpus.examples)
    used: set[int] = set()
    records = []
    for tid, x in enumerate(test_set):
        plans = {}
        for slot in range(cfg.per_test):
            sub_mode, which, objective = _slot_spec(cfg.mode, slot)
            if which not in plans:
                label = x.label if which == "gold" else wrong_label(x, theta)
                plans[which] = _Plan(inf, x, label, tid)
            plan = plans[which]
            rec = None
            for i in plan.order:
                if i in used or not lex.covered(corpus[i]):
                    continue
                rec = greedy_perturb(inf, corpus[i], plan.target, objective, lex,
                                     cfg.restarts, rng, i, sub_mode)
                break
            if rec is None:
                raise AttackError(f"test example {tid}: fewer than {cfg.per_test} distinct editable "
                                  "training examples remain")
            used.add(rec.train_id)
            examples[rec.train_id] = rec.apply(corpus[rec.train_id])
            records.append(rec)
    return corpus.with_examples(examples), records


def fix_predictions(corpus: Dataset, dev_set: Dataset, cfg: AttackConfig, checkpoint: Checkpoint,
                    lexicon: Lexicon | ResolvedLexicon, ihvp: IhvpConfig | None = None,
                    influence: Influence | None = None):
    """Append up to ``per_test`` edited training copies per misclassified dev example."""
    if cfg.mode != "fix":
        raise ValueError("fix_predictions needs mode fix")
    lex = lexicon if isinstance(lexicon, ResolvedLexicon) else lexicon.resolve(corpus.vocab, True)
    theta = checkpoint.theta
    dev = list(dev_set)
    if not dev:
        return corpus.with_examples(corpus.examples), []
    wrong = np.flatnonzero(predict(dev, theta) != np.array([z.label for z in dev]))
    if len(wrong) == 0 or cfg.per_test == 0:
        return corpus.with_examples(corpus.examples), []
    inf = influence or Influence.from_checkpoint(checkpoint, corpus, ihvp)
    rng = np.random.default_rng(cfg.seed)
    added, records = [], []
    for did in wrong:
        x = dev[did]
        plans, cursor = {}, {}
        for slot in range(cfg.per_test):
            sub_mode, which, objective = _slot_spec("fix", slot)
            if which not in plans:
                label = x.label if which == "gold" else wrong_label(x, theta)
                plans[which] = _Plan(inf, x, label, int(did), by_magnitude=False)
                cursor[which] = 0
            plan = plans[which]
            rec = None
            while cursor[which] < len(plan.order) and rec is None:
                i = plan.order[cursor[which]]
                cursor[which] += 1
                if lex.covered(corpus[i]):
                    rec = greedy_perturb(inf, corpus[i], plan.target, objective, lex,
                                         cfg.restarts, rng, i, sub_mode)
            if rec is None:
                break
            added.append(rec.apply(corpus[rec.train_id]))
            records.append(rec)
    return corpus.with_examples(list(corpus.examples) + added), records


@dataclass
class RetrainReport:
    accuracy: float
    flips: list = field(default_factory=list)
    checkpoint: Checkpoint | None = field(default=None, repr=False)


def evaluate_retrain(corpus: Dataset, test_set: Dataset, config: ModelConfig,
                     baseline: Checkpoint | None = None) -> RetrainReport:
    """Train from scratch with ``config`` (its seed fixes the init) and score ``test_set``.

    ``flips`` lists test ids whose prediction differs from ``baseline``.
    """
    if len(test_set) == 0:
        raise ValueError("empty test set")
    ckpt = train(corpus, config)
    flips = []
    if baseline is not None:
        before = predict(list(test_set), baseline.theta)
        after = predict(list(test_set), ckpt.theta)
        flips = [int(i) for i in np.flatnonzero(before != after)]
    return RetrainReport(accuracy(test_set, ckpt.theta), flips, ckpt)


SWEEP_FIELDS = ("mode", "k", "seed", "accuracy")


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_FIELDS)
    for r in rows:
        w.writerow([r["mode"], r["k"], r["seed"], repr(float(r["accuracy"]))])
    return buf.getvalue()


def format_record(rec: PerturbationRecord, vocab=None) -> dict:
    word = (lambda t: vocab.word(t)) if vocab is not None else (lambda t: t)
    return {"train_id": rec.train_id, "position": rec.position, "original": word(rec.original),
            "substitute": word(rec.substitute), "value": rec.value, "mode": rec.mode,
            "test_id": rec.test_id, "label": rec.label}
