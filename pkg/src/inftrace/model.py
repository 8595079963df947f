"""Bag-of-embeddings text classifier built on the tape engine.

Two architectures share one parameter layout:

* ``mlp``: embedding lookup -> per-token ``tanh(e W1 + b1)`` -> mean over
  tokens -> linear -> softmax.  Everything is trainable.
* ``convex``: embedding lookup (frozen after init) -> mean over tokens ->
  linear -> softmax.  Only the output layer trains, so the ridge-penalised
  objective is strictly convex.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .data import Dataset, Example

log = logging.getLogger(__name__)

MODES = ("mlp", "convex")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d: int = 8
    hidden: int = 8
    num_classes: int = 2
    unk_id: int = 0
    seed: int = 0
    lr: float = 4.0
    epochs: int = 300
    l2: float | None = None
    mode: str = "mlp"
    tol: float = 1e-8
    max_newton: int = 50

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.l2 is None:
            object.__setattr__(self, "l2", 1e-3 if self.mode == "convex" else 0.0)
        if min(self.d, self.hidden, self.num_classes) < 1:
            raise ValueError("d, hidden and num_classes must be >= 1")
        if not 0 <= self.unk_id < self.vocab_size:
            raise ValueError("unk_id must be a valid vocabulary id")
        if self.l2 < 0:
            raise ValueError("l2 must be >= 0")
        if not (0 < self.lr < np.inf) or self.epochs < 0:
            raise ValueError("lr must be finite and > 0, epochs >= 0")


@dataclass
class Checkpoint:
    config: ModelConfig
    theta: E.ParamVector
    train_fingerprint: int = 0
    grad_norm: float = float("nan")
    loss_history: list = field(default_factory=list, repr=False)


def n_params(config: ModelConfig) -> int:
    return len(init_params(config))


def init_params(config: ModelConfig) -> E.ParamVector:
    """Uniform(-0.1, 0.1) weights and embeddings, zero biases."""
    rng = np.random.default_rng(config.seed)
    u = lambda *shape: rng.uniform(-0.1, 0.1, size=shape)
    arrays = {"embedding": u(config.vocab_size, config.d)}
    if config.mode == "mlp":
        arrays["hidden_w"] = u(config.d, config.hidden)
        arrays["hidden_b"] = np.zeros((1, config.hidden))
        arrays["out_w"] = u(config.hidden, config.num_classes)
    else:
        arrays["out_w"] = u(config.d, config.num_classes)
    arrays["out_b"] = np.zeros((1, config.num_classes))
    trainable = tuple(arrays) if config.mode == "mlp" else ("out_w", "out_b")
    return E.ParamVector.from_arrays(arrays, trainable)


def mode_of(theta: E.ParamVector) -> str:
    return "mlp" if "hidden_w" in theta.segments else "convex"


@dataclass
class Batch:
    tokens: np.ndarray
    offsets: np.ndarray
    labels: np.ndarray

    @classmethod
    def of(cls, examples) -> "Batch":
        examples = list(examples)
        if not examples:
            raise ValueError("empty batch")
        for z in examples:
            if len(z.tokens) == 0:
                raise ValueError("example has no tokens")
        lengths = [len(z.tokens) for z in examples]
        offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int_)
        tokens = np.fromiter((t for z in examples for t in z.tokens), dtype=np.int_, count=offsets[-1])
        return cls(tokens, offsets, np.array([z.label for z in examples], dtype=np.int_))

    def __len__(self):
        return len(self.labels)


def embed(nodes, batch: Batch) -> E.Node:
    return E.gather(nodes["embedding"], batch.tokens)


def encode_logits(nodes, emb: E.Node, batch: Batch) -> E.Node:
    """Logits (n x C) from the token-embedding node ``emb``."""
    if "hidden_w" in nodes:
        act = E.tanh(E.matmul(emb, nodes["hidden_w"]) + nodes["hidden_b"])
        pooled = E.mean_rows(act, batch.offsets)
    else:
        pooled = E.mean_rows(emb, batch.offsets)
    return E.matmul(pooled, nodes["out_w"]) + nodes["out_b"]


def one_hot(labels, num_classes) -> np.ndarray:
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def ridge_term(nodes, theta: E.ParamVector, l2: float):
    if l2 == 0:
        return None
    total = None
    for name in theta.segments:
        if name == "embedding":
            continue
        sq = E.inner(nodes[name], nodes[name])
        total = sq if total is None else total + sq
    return total * (0.5 * l2)


def loss_node(tape: E.Tape, nodes, theta: E.ParamVector, batch: Batch, l2: float) -> E.Node:
    """Mean NLL over the batch plus (l2/2)||non-embedding weights||^2."""
    num_classes = theta["out_b"].shape[1]
    if batch.labels.max() >= num_classes or batch.labels.min() < 0:
        raise ValueError("label out of range")
    probs = E.softmax(encode_logits(nodes, embed(nodes, batch), batch))
    target = tape.constant(one_hot(batch.labels, num_classes) * (-1.0 / len(batch)))
    loss = E.inner(target, E.log(probs))
    ridge = ridge_term(nodes, theta, l2)
    return loss if ridge is None else loss + ridge


class Objective:
    """Replayable tape for the average loss over a fixed set of examples.

    Built once; :meth:`loss_grad` and :meth:`hvp` re-run it on new
    parameter values / directions without re-recording.
    """

    def __init__(self, theta: E.ParamVector, examples, l2: float, with_hvp: bool = False):
        self.theta = theta
        self.batch = Batch.of(examples)
        self.l2 = l2
        self.names = theta.trainable
        tape = E.Tape()
        nodes = theta.bind(tape)
        self.loss = loss_node(tape, nodes, theta, self.batch, l2)
        params = [nodes[n] for n in self.names]
        self.grads = E.gradient(tape, self.loss, params)
        self.hv = None
        if with_hvp:
            dot = None
            for n, g in zip(self.names, self.grads):
                term = E.inner(g, tape.variable("v:" + n, np.zeros(nodes[n].shape)))
                dot = term if dot is None else dot + term
            self.hv = E.gradient(tape, dot, params)
        self.tape = tape
        self._frozen = {n: theta[n] for n in theta.segments if n not in self.names}
        self._replay = None

    def _bindings(self, flat):
        bind = dict(self._frozen)
        bind.update(self.theta.split(flat, self.names))
        return bind

    def loss_grad(self, flat=None):
        flat = self.theta.trainable_vector() if flat is None else flat
        out = E.evaluate(self.tape, self._v_bindings(self._bindings(flat), None),
                         [self.loss, *self.grads])
        return float(out[0]), np.concatenate([g.ravel() for g in out[1:]])

    def _v_bindings(self, bind, v):
        if self.hv is not None:
            pieces = self.theta.split(np.zeros(self.theta.n_trainable) if v is None else v, self.names)
            bind.update({"v:" + n: p for n, p in pieces.items()})
        return bind

    def hvp(self, v, flat=None):
        if self.hv is None:
            raise RuntimeError("objective built without with_hvp=True")
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.theta.n_trainable,):
            raise E.ShapeError(f"hvp: vector of shape {v.shape}, expected ({self.theta.n_trainable},)")
        if flat is None:
            # theta is fixed: replay only the nodes that depend on v
            if self._replay is None:
                free = ["v:" + n for n in self.names]
                bind = self._v_bindings(self._bindings(self.theta.trainable_vector()), None)
                self._replay = E.PartialReplay(self.tape, bind, self.hv, free)
            out = self._replay(self._v_bindings({}, v))
        else:
            out = E.evaluate(self.tape, self._v_bindings(self._bindings(flat), v), self.hv)
        return np.concatenate([h.ravel() for h in out])


# --------------------------------------------------------------------------
# inference


def logits(examples, theta: E.ParamVector) -> np.ndarray:
    batch = Batch.of(examples)
    tape = E.Tape()
    nodes = theta.bind(tape)
    return encode_logits(nodes, embed(nodes, batch), batch).value


def predict_probs_batch(examples, theta: E.ParamVector) -> np.ndarray:
    batch = Batch.of(examples)
    tape = E.Tape()
    nodes = theta.bind(tape)
    return E.softmax(encode_logits(nodes, embed(nodes, batch), batch)).value


def predict_probs(z: Example, theta: E.ParamVector) -> np.ndarray:
    """Class probabilities for one example."""
    if len(z.tokens) == 0:
        raise ValueError("example has no tokens")
    return predict_probs_batch([z], theta)[0]


def nll_loss(z: Example, theta: E.ParamVector, l2: float = 0.0) -> float:
    return Objective(theta, [z], l2).loss_grad()[0]


def loss_gradient(z: Example, theta: E.ParamVector, l2: float = 0.0) -> np.ndarray:
    """Gradient of the single-example loss w.r.t. the trainable parameters."""
    return Objective(theta, [z], l2).loss_grad()[1]


def predict(examples, theta: E.ParamVector) -> np.ndarray:
    # np.argmax returns the first maximum: ties go to the lower class id
    return np.argmax(predict_probs_batch(examples, theta), axis=1)


def accuracy(dataset, theta: E.ParamVector) -> float:
    examples = list(dataset)
    if not examples:
        raise ValueError("accuracy of an empty set is undefined")
    labels = np.array([z.label for z in examples])
    return float(np.mean(predict(examples, theta) == labels))


# --------------------------------------------------------------------------
# training


def _newton_polish(obj: Objective, flat, config: ModelConfig, history):
    """Damped Newton steps on the (strictly convex) output-layer objective."""
    P = len(flat)
    loss, grad = obj.loss_grad(flat)
    for _ in range(config.max_newton):
        if np.max(np.abs(grad)) < config.tol:
            break
        H = np.column_stack([obj.hvp(e, flat) for e in np.eye(P)])
        step = np.linalg.solve(0.5 * (H + H.T), grad)
        t = 1.0
        while True:
            cand = flat - t * step
            cand_loss, cand_grad = obj.loss_grad(cand)
            if cand_loss <= loss + 1e-4 * t * (grad @ -step) or t < 1e-10:
                break
            t *= 0.5
        flat, loss, grad = cand, cand_loss, cand_grad
        history.append(loss)
    return flat, loss, grad


def train(corpus: Dataset, config: ModelConfig, init: E.ParamVector | None = None) -> Checkpoint:
    """Full-batch gradient descent on the mean training loss.

    Each epoch takes one step along the negative gradient.  The step starts
    at ``config.lr`` (or twice the previous accepted step, if smaller) and is
    halved until the loss does not increase, so the loss history is
    monotone.  In convex mode descent is followed by Newton refinement until
    the gradient's max-norm drops below ``config.tol`` (or ``max_newton``
    steps), so the returned parameters are a true minimiser.
    """
    examples = list(corpus)
    if not examples:
        raise ValueError("cannot train on an empty corpus")
    for z in examples:
        if not 0 <= z.label < config.num_classes:
            raise ValueError(f"label {z.label} outside [0, {config.num_classes})")
        if max(z.tokens) >= config.vocab_size:
            raise ValueError("token id outside the vocabulary")
    theta = init if init is not None else init_params(config)
    obj = Objective(theta, examples, config.l2, with_hvp=config.mode == "convex")
    flat = theta.trainable_vector()
    loss, grad = obj.loss_grad(flat)
    history = [loss]
    step = config.lr
    for epoch in range(config.epochs):
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise TrainingDivergedError(f"loss became non-finite at epoch {epoch}")
        step = min(config.lr, 2.0 * step)
        for _ in range(40):
            cand = flat - step * grad
            cand_loss, cand_grad = obj.loss_grad(cand)
            if np.isfinite(cand_loss) and cand_loss <= loss:
                break
            step *= 0.5
        else:
            break  # no descent possible at this precision
        flat, loss, grad = cand, cand_loss, cand_grad
        history.append(loss)
    if not np.isfinite(loss):
        raise TrainingDivergedError(f"loss became non-finite at epoch {config.epochs}")
    if config.mode == "convex":
        flat, loss, grad = _newton_polish(obj, flat, config, history)
    grad_norm = float(np.max(np.abs(grad)))
    log.debug("trained %s model: loss %.6g, |grad|_inf %.3g", config.mode, loss, grad_norm)
    fingerprint = corpus.fingerprint() if isinstance(corpus, Dataset) else 0
    return Checkpoint(config, theta.with_trainable(flat), fingerprint, grad_norm, history)


def config_for(dataset: Dataset, **overrides) -> ModelConfig:
    return ModelConfig(vocab_size=len(dataset.vocab), **overrides)
