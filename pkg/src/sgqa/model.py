"""The complete question-answering model: language frontend, graph reasoning, answer head."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .answer import aggregate_final_states, answer_logits, init_answer_params
from .autodiff import Value
from .config import TrainConfig
from .data import PAD, GraphTokens, Vocabulary, batch_graphs, pad_questions
from .language import InstructionProgram, decode_instructions, encode_question, init_language_params
from .params import Params
from .reasoning import (
    StepTrace,
    Topology,
    contextual_encode,
    execute_program,
    init_graph_features,
    init_reasoning_params,
)


@dataclass
class ForwardResult:
    logits: Value
    program: InstructionProgram
    node_states: Value
    topology: Topology
    trace: StepTrace
    node_offsets: np.ndarray


class SceneGraphQA:
    """All learnable state plus the forward pass.

    Examples are ``(token_ids, GraphTokens)`` pairs; the graph tokens must
    come from an augmented graph (see :func:`sgqa.data.graph_tokens`).
    """

    def __init__(self, cfg: TrainConfig, vocab: Vocabulary, embeddings: np.ndarray | None = None,
                 pretrained: np.ndarray | None = None):
        self.cfg = cfg
        self.vocab = vocab
        self.params = Params(cfg.seed)
        table = self.params.add("embed/table", (len(vocab.words), cfg.embed_dim), init="normal", scale=1.0)
        if embeddings is not None:
            if embeddings.shape != table.shape:
                raise ValueError(f"embedding matrix shape {embeddings.shape} != {table.shape}")
            table.data[...] = embeddings
        table.data[PAD] = 0.0
        self.pretrained = np.zeros(len(vocab.words), dtype=bool) if pretrained is None else pretrained
        init_language_params(self.params, cfg)
        init_reasoning_params(self.params, cfg)
        init_answer_params(self.params, cfg, len(vocab.answers))

    @property
    def table(self) -> Value:
        return self.params["embed/table"]

    def forward(self, examples: Sequence[tuple[Sequence[int], GraphTokens]], train: bool = False,
                rng: np.random.Generator | None = None) -> ForwardResult:
        cfg = self.cfg
        tokens = pad_questions([t for t, _ in examples], cfg.max_len)
        batch = batch_graphs([g for _, g in examples])
        topo = Topology.from_batch(batch)

        states = encode_question(tokens, self.table, self.params, cfg, rng, train)
        program = decode_instructions(states, tokens, self.params, cfg, rng, train)

        x_hat, e = init_graph_features(batch.tokens, self.table)
        x = contextual_encode(x_hat, e, topo, self.params)
        h, trace = execute_program(x, e, topo, program.instructions, self.params, cfg, rng, train)

        pooled = aggregate_final_states(h, batch.node_graph, batch.num_graphs, cfg.aggregate)
        logits = answer_logits(pooled, program.summary, self.params, cfg, rng, train)
        return ForwardResult(logits, program, h, topo, trace, batch.node_offsets)

    def loss(self, examples, gold: np.ndarray, train: bool = True, rng=None) -> tuple[Value, ForwardResult]:
        result = self.forward(examples, train=train, rng=rng)
        return ad.cross_entropy(result.logits, gold), result
