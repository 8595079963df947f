"""Oracle checks that compare the library against independent references.

Each check returns a :class:`CheckResult`; :func:`run_suite` runs the set
behind the ``verify`` subcommand.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.stats import spearmanr

from . import engine as E
from .data import Dataset, Example
from .ihvp import (ExactSolver, IhvpConfig, IhvpError, SampleHessians, assemble_hessian,
                   default_scale, stochastic_ihvp)
from .influence import Influence, top_salient_target
from .model import ModelConfig, Objective, init_params, train
from .saliency import saliency_score

log = logging.getLogger(__name__)

# |a - f| / max(|a|, |f|, FLOOR): coordinates far below the floor are judged absolutely
REL_FLOOR = 1e-6


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        return f"{mark}  {self.name:<28} {self.value:<12.4g} (threshold {self.threshold:g}) {self.detail}".rstrip()


# --------------------------------------------------------------------------
# random draws


def random_draw(rng, mode=None, scale=0.5):
    """Random (theta, examples, l2) for derivative checks.

    Parameters are drawn at ``scale`` rather than the training init so the
    nonlinearities are exercised away from their linear regime.
    """
    mode = mode or ("mlp" if rng.random() < 0.5 else "convex")
    vocab = int(rng.integers(3, 10))
    C = int(rng.integers(2, 4))
    cfg = ModelConfig(vocab_size=vocab, d=int(rng.integers(2, 5)), hidden=int(rng.integers(2, 5)),
                      num_classes=C, mode=mode, seed=int(rng.integers(1 << 30)),
                      l2=float(rng.choice([0.0, 1e-2])))
    theta = init_params(cfg)
    theta = E.ParamVector(rng.normal(0, scale, size=len(theta)), dict(theta.segments), theta.trainable)
    examples = [Example(rng.integers(0, vocab, size=int(rng.integers(1, 7))), int(rng.integers(C)))
                for _ in range(int(rng.integers(1, 5)))]
    return theta, examples, cfg.l2


def rel_coord_error(a, f, floor=REL_FLOOR) -> float:
    a, f = np.asarray(a), np.asarray(f)
    return float(np.max(np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)))


def fd_gradient(fn, x, h=1e-4) -> np.ndarray:
    out = np.empty_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        out[i] = (fn(x + e) - fn(x - e)) / (2 * h)
    return out


# --------------------------------------------------------------------------
# checks


def check_gradients(draws=100, seed=0, h=1e-4, tol=1e-5) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(draws):
        theta, examples, l2 = random_draw(rng, mode=("mlp", "convex")[k % 2])
        obj = Objective(theta, examples, l2)
        x = theta.trainable_vector()
        fd = fd_gradient(lambda p: obj.loss_grad(p)[0], x, h)
        worst = max(worst, rel_coord_error(obj.loss_grad(x)[1], fd))
    return CheckResult("gradient vs finite diff", worst < tol, worst, tol, f"{draws} draws")


def check_hvp(draws=50, seed=1, h=1e-5, tol=1e-4) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(draws):
        theta, examples, l2 = random_draw(rng, mode=("mlp", "convex")[k % 2])
        obj = Objective(theta, examples, l2, with_hvp=True)
        x = theta.trainable_vector()
        v = rng.normal(size=len(x))
        v /= np.linalg.norm(v)
        fd = (obj.loss_grad(x + h * v)[1] - obj.loss_grad(x - h * v)[1]) / (2 * h)
        hv = obj.hvp(v)
        worst = max(worst, float(np.linalg.norm(hv - fd) / max(np.linalg.norm(fd), 1e-12)))
    return CheckResult("hvp vs finite diff", worst < tol, worst, tol, f"{draws} draws")


def quadratic_hvp_error(rng, size) -> float:
    """HVP of 0.5 x^T A x on the tape against A v."""
    A = rng.normal(size=(size, size))
    A = A + A.T
    x0, v = rng.normal(size=(1, size)), rng.normal(size=size)
    tape = E.Tape()
    x = tape.variable("x", x0)
    loss = E.inner(E.matmul(x, tape.constant(A)), x) * 0.5
    params = E.ParamVector.from_arrays({"x": x0})
    hv = E.hvp(tape, loss, params, v)
    return float(np.linalg.norm(hv - A @ v) / np.linalg.norm(A @ v))


def check_quadratic_hvp(draws=20, seed=2, tol=1e-12) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = max(quadratic_hvp_error(rng, int(rng.integers(2, 12))) for _ in range(draws))
    return CheckResult("hvp on quadratics", worst < tol, worst, tol, f"{draws} draws")


def check_exact_ihvp(theta, examples, l2, damping, seed=3, tol=1e-10) -> CheckResult:
    try:
        solver = ExactSolver(assemble_hessian(theta, examples, l2), damping)
    except IhvpError as exc:
        return CheckResult("exact ihvp residual", False, math.inf, tol, str(exc))
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(5):
        v = rng.normal(size=theta.n_trainable)
        worst = max(worst, solver.residual(solver.solve(v), v))
    return CheckResult("exact ihvp residual", worst < tol, worst, tol)


def stochastic_vs_exact(theta, examples, l2, cfg: IhvpConfig, rhs=10, seed=4):
    """Relative L2 errors of the stochastic estimate on ``rhs`` random vectors."""
    solver = ExactSolver(assemble_hessian(theta, examples, l2), cfg.damping)
    samples = SampleHessians(theta, examples, l2)
    if cfg.scale is None:
        cfg = replace(cfg, scale=default_scale(theta, examples, cfg.damping, l2, cfg.power_steps, cfg.seed))
    rng = np.random.default_rng(seed)
    errs = []
    for j in range(rhs):
        v = rng.normal(size=theta.n_trainable)
        u = solver.solve(v)
        est = stochastic_ihvp(theta, examples, v, replace(cfg, seed=cfg.seed + j), l2, samples=samples)
        errs.append(float(np.linalg.norm(est - u) / np.linalg.norm(u)))
    return errs, solver, cfg


def auto_depth(solver: ExactSolver, scale: float, bias=1e-2, cap=20000) -> int:
    """Recursion length that brings the truncation bias (1 - scale*lmin)^t below ``bias``."""
    lmin = float(np.min(solver.evals))
    if lmin <= 0 or scale * lmin >= 1:
        return cap
    return int(min(cap, math.ceil(math.log(bias) / math.log1p(-scale * lmin))))


def check_stochastic_ihvp(theta, examples, l2, cfg: IhvpConfig, rhs=10, tol=0.05) -> CheckResult:
    try:
        errs, _, _ = stochastic_vs_exact(theta, examples, l2, cfg, rhs)
    except IhvpError as exc:
        return CheckResult("stochastic vs exact ihvp", False, math.inf, tol, str(exc))
    worst = max(errs)
    return CheckResult("stochastic vs exact ihvp", worst < tol, worst, tol,
                       f"t={cfg.depth} r={cfg.repeats}, {rhs} rhs")


def loo_agreement(ckpt, train_set: Dataset, test_example: Example, n_points=20, damping=0.0):
    """Predicted vs retrained change of the top salient score when removing each of
    the ``n_points`` training points with the largest loss-gradient norm.

    Retraining warm-starts from the trained parameters; the convex objective
    has a unique minimiser, so the start only affects speed.
    """
    theta, n = ckpt.theta, len(train_set)
    inf = Influence.from_checkpoint(ckpt, train_set, IhvpConfig(method="exact", damping=damping))
    target = top_salient_target(test_example, test_example.label, theta)
    s0 = saliency_score(test_example, target.position, target.label, theta)
    norms = np.array([np.linalg.norm(inf.grad(z)) for z in train_set])
    top = sorted(range(n), key=lambda i: (-norms[i], i))[:n_points]
    pred, actual = [], []
    for i in top:
        rest = train_set.with_examples([z for j, z in enumerate(train_set) if j != i])
        retrained = train(rest, ckpt.config, init=theta)
        actual.append(saliency_score(test_example, target.position, target.label, retrained.theta) - s0)
        pred.append(-inf.value(train_set[i], target) / n)
    pred, actual = np.array(pred), np.array(actual)
    rho = float(spearmanr(pred, actual).statistic)
    sign = float(np.mean(np.sign(pred) == np.sign(actual)))
    return rho, sign, pred, actual


def check_loo(ckpt, train_set, test_example, n_points=20, rho_min=0.9, sign_min=0.9,
              damping=0.0) -> list[CheckResult]:
    try:
        rho, sign, _, _ = loo_agreement(ckpt, train_set, test_example, n_points, damping)
    except IhvpError as exc:
        return [CheckResult("influence vs loo (spearman)", False, math.nan, rho_min, str(exc))]
    return [CheckResult("influence vs loo (spearman)", rho >= rho_min, rho, rho_min, f"{n_points} points"),
            CheckResult("influence vs loo (sign)", sign >= sign_min, sign, sign_min)]


def run_suite(train_set: Dataset, test_set: Dataset, model_cfg: ModelConfig, ihvp_cfg: IhvpConfig,
              quick: bool = False) -> list[CheckResult]:
    """The ``verify`` oracle run on a freshly trained model.

    Stochastic IHVP uses ``ihvp_cfg.depth``; when it is ``<= 0`` the depth
    is chosen from the exact spectrum so the truncation bias stays below 1%.
    ``quick`` cuts the random draws, LOO points and repeats (at most 2).
    """
    results = [check_gradients(10 if quick else 100), check_hvp(10 if quick else 50), check_quadratic_hvp()]
    ckpt = train(train_set, model_cfg)
    theta, l2 = ckpt.theta, model_cfg.l2
    exact = check_exact_ihvp(theta, train_set.examples, l2, ihvp_cfg.damping)
    results.append(exact)
    if exact.passed:
        cfg = ihvp_cfg
        if cfg.depth <= 0:
            solver = ExactSolver(assemble_hessian(theta, train_set.examples, l2), cfg.damping)
            scale = cfg.scale or default_scale(theta, train_set.examples, cfg.damping, l2,
                                               cfg.power_steps, cfg.seed)
            cfg = replace(cfg, method="stochastic", scale=scale, depth=auto_depth(solver, scale))
        if quick:
            cfg = replace(cfg, repeats=min(cfg.repeats, 2))
        results.append(check_stochastic_ihvp(theta, train_set.examples, l2, cfg, rhs=1 if quick else 3))
        results.extend(check_loo(ckpt, train_set, test_set[0], n_points=5 if quick else 20,
                                 damping=ihvp_cfg.damping))
    return results
