"""Inverse-Hessian-vector products for the average training loss.

``exact_ihvp`` densifies the Hessian column by column with HVPs and solves
through a symmetric eigendecomposition.  ``stochastic_ihvp`` is the
single-sample recursion

    h_0 = v,   h_j = v + (I - sigma * (H_{s_j} + damping * I)) h_{j-1}

with one uniformly drawn training point per step, averaged over ``repeats``
independent runs and multiplied by ``sigma``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import engine as E
from .model import Objective

log = logging.getLogger(__name__)

MAX_DENSE_PARAMS = 4096
METHODS = ("exact", "stochastic")


class IhvpError(RuntimeError):
    pass


class SingularHessianError(IhvpError):
    pass


class DivergenceError(IhvpError):
    pass


class HessianTooLargeError(IhvpError):
    pass


@dataclass(frozen=True)
class IhvpConfig:
    method: str = "exact"
    damping: float = 1e-3
    scale: float | None = None
    depth: int = 2000
    repeats: int = 8
    seed: int = 0
    power_steps: int = 20

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.damping < 0:
            raise ValueError("damping must be >= 0")
        if self.method == "stochastic":
            if self.depth < 1 or self.repeats < 1:
                raise ValueError("depth and repeats must be >= 1")
            if self.scale is not None and self.scale <= 0:
                raise ValueError("scale must be > 0")


class HessianOperator:
    """v -> H v for the mean loss over ``examples`` at fixed ``theta``."""

    def __init__(self, theta: E.ParamVector, examples, l2: float = 0.0):
        examples = list(examples)
        if not examples:
            raise ValueError("empty corpus")
        self.theta = theta
        self.size = theta.n_trainable
        self._obj = Objective(theta, examples, l2, with_hvp=True)

    def __call__(self, v) -> np.ndarray:
        return self._obj.hvp(v)


class SampleHessians:
    """Per-example HVP operators, built lazily and cached by example id."""

    def __init__(self, theta: E.ParamVector, examples, l2: float = 0.0):
        self.theta = theta
        self.examples = list(examples)
        self.l2 = l2
        self._ops: dict[int, HessianOperator] = {}

    def __len__(self):
        return len(self.examples)

    def hvp(self, i: int, v) -> np.ndarray:
        op = self._ops.get(i)
        if op is None:
            op = self._ops[i] = HessianOperator(self.theta, [self.examples[i]], self.l2)
        return op(v)


def assemble_hessian(theta: E.ParamVector, examples, l2: float = 0.0,
                     operator: HessianOperator | None = None) -> np.ndarray:
    """Dense Hessian of the mean loss, one HVP per unit vector."""
    P = theta.n_trainable
    if P > MAX_DENSE_PARAMS:
        raise HessianTooLargeError(f"{P} parameters exceed the dense cap of {MAX_DENSE_PARAMS}")
    op = operator or HessianOperator(theta, examples, l2)
    H = np.empty((P, P))
    unit = np.zeros(P)
    for j in range(P):
        unit[j] = 1.0
        H[:, j] = op(unit)
        unit[j] = 0.0
    return H


class ExactSolver:
    """Solves (H + damping I) u = v through one symmetric eigendecomposition."""

    def __init__(self, hessian: np.ndarray, damping: float = 0.0, rcond: float = 1e-12):
        sym = 0.5 * (hessian + hessian.T)
        self.hessian = sym
        self.damping = damping
        evals, self.evecs = np.linalg.eigh(sym)
        self.evals = evals + damping
        top = np.max(np.abs(self.evals)) if self.evals.size else 0.0
        low = np.min(np.abs(self.evals)) if self.evals.size else 0.0
        if top == 0.0 or low <= rcond * top:
            raise SingularHessianError(
                f"H + {damping:g} I is numerically singular (smallest |eigenvalue| {low:.3g}, "
                f"largest {top:.3g}); increase the damping")

    @classmethod
    def for_corpus(cls, theta, examples, damping=0.0, l2=0.0) -> "ExactSolver":
        return cls(assemble_hessian(theta, examples, l2), damping)

    def solve(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.evecs.shape[0],):
            raise E.ShapeError(f"ihvp: vector of shape {v.shape}, expected ({self.evecs.shape[0]},)")
        return self.evecs @ ((self.evecs.T @ v) / self.evals)

    def residual(self, u, v) -> float:
        lhs = self.hessian @ u + self.damping * u
        nv = np.linalg.norm(v)
        return float(np.linalg.norm(lhs - v) / nv) if nv > 0 else float(np.linalg.norm(lhs))


def exact_ihvp(theta: E.ParamVector, examples, v, damping: float = 1e-3, l2: float = 0.0) -> np.ndarray:
    return ExactSolver.for_corpus(theta, examples, damping, l2).solve(v)


def power_lambda_max(matvec, size: int, steps: int = 20, seed: int = 0) -> float:
    """Largest-magnitude eigenvalue estimate by power iteration."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=size)
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(steps):
        y = matvec(x)
        lam = float(x @ y)
        ny = np.linalg.norm(y)
        if ny == 0:
            return 0.0
        x = y / ny
    return abs(lam)


def default_scale(theta, examples, damping, l2=0.0, steps=20, seed=0, operator=None) -> float:
    """1 / (10 * lambda_max(H + damping I))."""
    op = operator or HessianOperator(theta, examples, l2)
    lam = power_lambda_max(lambda x: op(x) + damping * x, theta.n_trainable, steps, seed)
    if lam <= 0:
        raise IhvpError("Hessian power iteration returned a non-positive eigenvalue")
    return 1.0 / (10.0 * lam)


@dataclass
class StochasticInfo:
    scale: float
    last_relative_update: float
    per_repeat: list


def stochastic_ihvp(theta: E.ParamVector, examples, v, cfg: IhvpConfig, l2: float = 0.0,
                    samples: SampleHessians | None = None, return_info: bool = False):
    """Single-sample recursive estimate of (H + damping I)^{-1} v.

    Deterministic given ``cfg.seed``; repeats use independent child seeds.
    """
    v = np.asarray(v, dtype=np.float64)
    samples = samples or SampleHessians(theta, examples, l2)
    n = len(samples)
    if v.shape != (theta.n_trainable,):
        raise E.ShapeError(f"ihvp: vector of shape {v.shape}, expected ({theta.n_trainable},)")
    scale = cfg.scale
    if scale is None:
        scale = default_scale(theta, samples.examples, cfg.damping, l2, cfg.power_steps, cfg.seed)
    vnorm = np.linalg.norm(v)
    if vnorm == 0:
        out = np.zeros_like(v)
        return (out, StochasticInfo(scale, 0.0, [])) if return_info else out

    total = np.zeros_like(v)
    updates = []
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.repeats)
    for rep, child in enumerate(children):
        rng = np.random.default_rng(child)
        picks = rng.integers(n, size=cfg.depth)
        h = v.copy()
        prev = h
        for j, i in enumerate(picks):
            prev = h
            h = v + h - scale * (samples.hvp(int(i), h) + cfg.damping * h)
            if not np.isfinite(h).all() or np.linalg.norm(h) > 1e8 * vnorm:
                raise DivergenceError(
                    f"recursion diverged at step {j + 1} of repeat {rep} (scale {scale:.3g}); "
                    "use a smaller scale")
        nh = np.linalg.norm(h)
        updates.append(float(np.linalg.norm(h - prev) / nh) if nh > 0 else 0.0)
        total += h
    est = scale * total / cfg.repeats
    if return_info:
        return est, StochasticInfo(scale, float(np.mean(updates)), updates)
    return est


def make_solver(theta, examples, cfg: IhvpConfig, l2: float = 0.0):
    """Callable v -> (H + damping I)^{-1} v for the configured method."""
    examples = list(examples)
    if cfg.method == "exact":
        return ExactSolver.for_corpus(theta, examples, cfg.damping, l2).solve
    samples = SampleHessians(theta, examples, l2)
    scale = cfg.scale
    if scale is None:
        scale = default_scale(theta, examples, cfg.damping, l2, cfg.power_steps, cfg.seed)
    from dataclasses import replace
    fixed = replace(cfg, scale=scale)
    return lambda v: stochastic_ihvp(theta, examples, v, fixed, l2, samples=samples)
