"""Graph readout and answer classification."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import SegmentIndex, Value
from .config import TrainConfig
from .language import add_linear, linear
from .params import Params

logger = logging.getLogger(__name__)


@dataclass
class AnswerDistribution:
    logits: np.ndarray  # [B, A]
    probs: np.ndarray
    predicted_id: np.ndarray

    @classmethod
    def from_logits(cls, logits: np.ndarray) -> "AnswerDistribution":
        logits = np.atleast_2d(logits)
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        probs = e / e.sum(axis=1, keepdims=True)
        return cls(logits, probs, np.argmax(logits, axis=1))

    def top_k(self, row: int, k: int = 5) -> list[tuple[int, float]]:
        order = np.argsort(-self.probs[row], kind="stable")[:k]
        return [(int(a), float(self.probs[row, a])) for a in order]


def aggregate_final_states(h: Value, node_graph: np.ndarray, num_graphs: int, mode: str = "mean") -> Value:
    """Pool node states into one row per graph; an empty graph yields zeros."""
    idx = SegmentIndex(node_graph, num_graphs)
    empty = np.flatnonzero(idx.counts() == 0)
    if empty.size:
        logger.warning("aggregating %d graph(s) without nodes; using zero summaries", empty.size)
    return ad.segment_reduce(h, idx, mode)


def init_answer_params(params: Params, cfg: TrainConfig, num_answers: int) -> None:
    if num_answers < 2:
        raise ValueError("the answer space needs at least two answers")
    add_linear(params, "answer/fc1", cfg.hidden_dim + cfg.instruction_dim, cfg.answer_hidden)
    add_linear(params, "answer/fc2", cfg.answer_hidden, num_answers)


def answer_logits(h: Value, q: Value, params: Params, cfg: TrainConfig, rng=None, train: bool = False) -> Value:
    z = ad.elu(linear(params, "answer/fc1", ad.concat([h, q], axis=1)))
    z = ad.dropout(z, cfg.dropout, rng, train)
    return linear(params, "answer/fc2", z)


def predict_answer(h: Value, q: Value, params: Params, cfg: TrainConfig) -> AnswerDistribution:
    return AnswerDistribution.from_logits(answer_logits(h, q, params, cfg).data)
