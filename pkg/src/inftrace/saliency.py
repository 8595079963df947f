"""Gradient saliency of the input tokens.

The score of token t is the signed sum over embedding dimensions of
d S_y / d e_t, where S_y is the predicted probability of ``label`` (or
the logit, when ``logit=True``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as E
from .data import Example
from .model import Batch, embed, encode_logits


@dataclass
class SaliencyGraph:
    tape: E.Tape
    nodes: dict
    emb: E.Node
    score: E.Node


def saliency_graph(z: Example, label: int, theta: E.ParamVector, logit: bool = False) -> SaliencyGraph:
    """Record S_label as a function of the token-embedding node."""
    num_classes = theta["out_b"].shape[1]
    if not 0 <= label < num_classes:
        raise ValueError(f"label {label} outside [0, {num_classes})")
    if len(z.tokens) == 0:
        raise ValueError("example has no tokens")
    batch = Batch.of([z])
    tape = E.Tape()
    nodes = theta.bind(tape)
    emb = embed(nodes, batch)
    out = encode_logits(nodes, emb, batch)
    if not logit:
        out = E.softmax(out)
    pick = np.zeros((1, num_classes))
    pick[0, label] = 1.0
    return SaliencyGraph(tape, nodes, emb, E.inner(out, tape.constant(pick)))


def input_gradients(z: Example, label: int, theta: E.ParamVector, logit: bool = False) -> np.ndarray:
    """d S_label / d e_t for every token position (an N x d array)."""
    g = saliency_graph(z, label, theta, logit)
    return E.gradient(g.tape, g.score, g.emb).value


@dataclass
class SaliencyReport:
    example: Example
    label: int
    gradients: np.ndarray
    scores: np.ndarray
    ranks: np.ndarray
    order: list

    def __len__(self):
        return len(self.scores)


def rank_positions(scores) -> list[int]:
    """Positions by descending score, ties to the lower position."""
    return sorted(range(len(scores)), key=lambda t: (-scores[t], t))


def token_saliency(z: Example, label: int, theta: E.ParamVector, logit: bool = False) -> SaliencyReport:
    grads = input_gradients(z, label, theta, logit)
    scores = grads.sum(axis=1)
    order = rank_positions(scores)
    ranks = np.empty(len(order), dtype=np.int_)
    ranks[order] = np.arange(1, len(order) + 1)
    return SaliencyReport(z, label, grads, scores, ranks, order)


def top_salient(report: SaliencyReport, k: int) -> list[tuple[int, int, float]]:
    """First ``k`` entries of the ranking as (position, token id, score)."""
    if not 1 <= k <= len(report):
        raise ValueError(f"k must lie in [1, {len(report)}], got {k}")
    return [(t, report.example.tokens[t], float(report.scores[t])) for t in report.order[:k]]


def saliency_score_gradient(z: Example, position: int, label: int, theta: E.ParamVector,
                            logit: bool = False) -> np.ndarray:
    """Gradient w.r.t. the trainable parameters of the token score s(x_position)."""
    if not 0 <= position < len(z.tokens):
        raise IndexError(f"position {position} outside example of length {len(z.tokens)}")
    g = saliency_graph(z, label, theta, logit)
    mask = np.zeros(g.emb.shape)
    mask[position] = 1.0
    return E.mixed_gradient(g.tape, g.score, g.emb, theta, direction=mask)


def saliency_score(z: Example, position: int, label: int, theta: E.ParamVector, logit: bool = False) -> float:
    return float(input_gradients(z, label, theta, logit)[position].sum())
