"""Influence of training points, perturbed training points and single
training tokens on a target scalar.

Sign convention: a positive value means upweighting the training point
increases the target.  Removing ``z`` from ``n`` points changes the target
by roughly ``-value / n``; replacing ``z`` with ``z'`` changes it by roughly
``perturbation_influence(z, z') / n``.
"""

from __future__ import annotations

import hashlib
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import engine as E
from .data import UNK_ID, Dataset, Example, atomic_write
from .ihvp import IhvpConfig, make_solver
from .model import loss_gradient
from .saliency import saliency_score_gradient, token_saliency

log = logging.getLogger(__name__)

KINDS = ("params", "saliency")


@dataclass
class Target:
    """What influence is measured on.

    For ``kind="saliency"`` the cached ``gradient`` is d s(x_position) / d theta
    for ``example`` scored at ``label``.
    """

    kind: str
    example: Example | None = None
    position: int | None = None
    label: int | None = None
    gradient: np.ndarray | None = field(default=None, repr=False)
    test_id: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"target kind must be one of {KINDS}")
        if self.kind == "params" and self.gradient is not None:
            raise ValueError("params targets carry no gradient")
        if self.kind == "saliency" and self.gradient is None:
            raise ValueError("saliency targets need a gradient")


def saliency_target(z: Example, position: int, label: int, theta: E.ParamVector,
                    test_id: int | None = None) -> Target:
    g = saliency_score_gradient(z, position, label, theta)
    return Target("saliency", z, position, label, g, test_id)


def top_salient_target(z: Example, label: int, theta: E.ParamVector, test_id: int | None = None) -> Target:
    """Target on the rank-1 salient token of ``z`` under ``label``."""
    report = token_saliency(z, label, theta)
    return saliency_target(z, report.order[0], label, theta, test_id)


@dataclass(frozen=True)
class InfluenceScore:
    train_id: int | None
    value: float
    substitution: tuple[int, int] | None = None
    target: Target | None = field(default=None, repr=False, compare=False)


def _theta_key(theta: E.ParamVector) -> str:
    h = hashlib.sha256(np.ascontiguousarray(theta.data).tobytes())
    h.update(repr(sorted(theta.trainable)).encode())
    return h.hexdigest()[:16]


class GradientCache:
    """Per-example loss gradients keyed by content, optionally mirrored to disk.

    The disk key joins a digest of theta with a digest of (tokens, label), so
    a stale cache for another checkpoint is never read.
    """

    def __init__(self, theta: E.ParamVector, l2: float, directory=None):
        self.theta = theta
        self.l2 = l2
        self.directory = Path(directory) if directory else None
        self._mem: dict[tuple, np.ndarray] = {}
        self._prefix = _theta_key(theta)
        self.hits = self.misses = 0

    def _path(self, key):
        digest = hashlib.sha256(repr(key).encode()).hexdigest()[:24]
        return self.directory / f"{self._prefix}-{digest}.npy"

    def __call__(self, z: Example) -> np.ndarray:
        key = (z.tokens, z.label)
        g = self._mem.get(key)
        if g is not None:
            self.hits += 1
            return g
        path = self._path(key) if self.directory else None
        if path is not None and path.exists():
            g = np.load(path)
        else:
            self.misses += 1
            g = loss_gradient(z, self.theta, self.l2)
            if path is not None:
                buf = io.BytesIO()
                np.save(buf, g)
                atomic_write(path, buf.getvalue())
        g.setflags(write=False)
        self._mem[key] = g
        return g


class Influence:
    """Influence computations against one trained model and training corpus.

    The inverse-Hessian solve runs once per target (on the target gradient)
    and is reused for every training point scored against that target.
    """

    def __init__(self, theta: E.ParamVector, corpus: Dataset, cfg: IhvpConfig | None = None,
                 l2: float = 0.0, cache_dir=None):
        self.theta = theta
        self.corpus = corpus
        self.cfg = cfg or IhvpConfig()
        self.l2 = l2
        self.grad = GradientCache(theta, l2, cache_dir)
        self._solver = None
        self._solved: dict[int, tuple] = {}
        self._G = None

    @classmethod
    def from_checkpoint(cls, ckpt, corpus, cfg=None, cache_dir=None) -> "Influence":
        return cls(ckpt.theta, corpus, cfg, ckpt.config.l2, cache_dir)

    @property
    def solve(self):
        if self._solver is None:
            self._solver = make_solver(self.theta, self.corpus.examples, self.cfg, self.l2)
        return self._solver

    def target_direction(self, target: Target) -> np.ndarray:
        """(H + damping I)^{-1} g, cached on the target object."""
        if target.kind != "saliency":
            raise ValueError("target kind must be 'saliency'")
        hit = self._solved.get(id(target))
        if hit is not None and hit[0] is target.gradient:
            return hit[1]
        u = self.solve(target.gradient)
        self._solved[id(target)] = (target.gradient, u)
        return u

    # point influences

    def on_params(self, z: Example) -> np.ndarray:
        return -self.solve(self.grad(z))

    def value(self, z: Example, target: Target) -> float:
        return -float(self.target_direction(target) @ self.grad(z))

    def on_saliency(self, z: Example, target: Target, train_id: int | None = None) -> InfluenceScore:
        return InfluenceScore(train_id, self.value(z, target), None, target)

    def perturbation(self, z: Example, z_new: Example, target: Target,
                     train_id: int | None = None) -> InfluenceScore:
        if z.label != z_new.label:
            raise ValueError(f"perturbation changes the label ({z.label} -> {z_new.label})")
        if len(z.tokens) != len(z_new.tokens):
            raise ValueError("perturbation changes the example length")
        value = self.value(z_new, target) - self.value(z, target)
        diff = [i for i, (a, b) in enumerate(zip(z.tokens, z_new.tokens)) if a != b]
        sub = (diff[0], z_new.tokens[diff[0]]) if len(diff) == 1 else None
        return InfluenceScore(train_id, value, sub, target)

    def token(self, z: Example, position: int, target: Target, train_id: int | None = None,
              unk_id: int = UNK_ID) -> InfluenceScore:
        if not 0 <= position < len(z.tokens):
            raise IndexError(f"position {position} outside example of length {len(z.tokens)}")
        erased = z.substitute(position, unk_id)
        value = self.value(z, target) - self.value(erased, target)
        return InfluenceScore(train_id, value, (position, unk_id), target)

    def token_profile(self, z: Example, target: Target, unk_id: int = UNK_ID) -> np.ndarray:
        base = self.value(z, target)
        return np.array([base - self.value(z.substitute(p, unk_id), target)
                         for p in range(len(z.tokens))])

    def scores(self, target: Target) -> np.ndarray:
        """Influence of every training point on ``target``."""
        u = self.target_direction(target)
        # row-wise reduction: identical rows give bit-identical scores
        return -(self.corpus_gradients() * u).sum(axis=1)

    def corpus_gradients(self) -> np.ndarray:
        """n x P matrix of per-example loss gradients, built once."""
        if self._G is None:
            self._G = np.stack([self.grad(z) for z in self.corpus])
        return self._G

    def rank(self, target: Target, k: int, by_magnitude: bool = False) -> list[InfluenceScore]:
        """Top-``k`` training points, descending by value (or |value|); ties to lower id."""
        n = len(self.corpus)
        if not 0 <= k <= n:
            raise ValueError(f"k must lie in [0, {n}], got {k}")
        vals = self.scores(target)
        key = np.abs(vals) if by_magnitude else vals
        order = sorted(range(n), key=lambda i: (-key[i], i))
        return [InfluenceScore(i, float(vals[i]), None, target) for i in order[:k]]


# functional forms


def influence_on_params(z, corpus, theta, cfg=None, l2=0.0) -> np.ndarray:
    return Influence(theta, corpus, cfg, l2).on_params(z)


def influence_on_saliency(z, target, corpus, theta, cfg=None, l2=0.0) -> InfluenceScore:
    return Influence(theta, corpus, cfg, l2).on_saliency(z, target)


def perturbation_influence(z, z_new, target, corpus, theta, cfg=None, l2=0.0) -> InfluenceScore:
    return Influence(theta, corpus, cfg, l2).perturbation(z, z_new, target)


def token_influence(z, position, target, corpus, theta, cfg=None, l2=0.0) -> InfluenceScore:
    return Influence(theta, corpus, cfg, l2).token(z, position, target)


def rank_training_examples(target, corpus, theta, cfg=None, k=10, l2=0.0) -> list[InfluenceScore]:
    return Influence(theta, corpus, cfg, l2).rank(target, k)
