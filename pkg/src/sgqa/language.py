"""Question encoding and instruction decoding.

A question is embedded, projected to the model width, run through a small
transformer encoder, and then read by ``M`` learned query vectors through
a non-autoregressive transformer decoder. Each decoder output is one
instruction vector; the mean of the non-pad encoder states is the question
summary.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .config import TrainConfig
from .data import PAD, Vocabulary
from .params import Params, rng_for

logger = logging.getLogger(__name__)

NEG_INF = -1e30


@dataclass
class EmbeddingTable:
    matrix: np.ndarray
    pretrained: np.ndarray

    @property
    def coverage(self) -> int:
        return int(self.pretrained.sum())


def random_embeddings(vocab_size: int, dim: int, seed: int) -> np.ndarray:
    table = rng_for(seed, "embeddings/random").uniform(-0.1, 0.1, size=(vocab_size, dim))
    table[PAD] = 0.0
    return table


def load_pretrained_embeddings(path: str | Path, vocab: Vocabulary, dim: int = 300, seed: int = 0) -> EmbeddingTable:
    """Read GloVe-style text vectors for the words in ``vocab``.

    Words missing from the file keep a seeded uniform(-0.1, 0.1) vector and
    are flagged as learned from scratch. The PAD row is always zero.
    """
    table = random_embeddings(len(vocab.words), dim, seed)
    found = np.zeros(len(vocab.words), dtype=bool)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").rstrip().split(" ")
            if len(parts) <= 1:
                continue
            if len(parts) - 1 != dim:
                raise ValueError(f"{path}:{lineno}: expected {dim} values, found {len(parts) - 1}")
            k = vocab.word_to_id.get(parts[0])
            if k is None or k == PAD or found[k]:
                continue
            table[k] = np.array(parts[1:], dtype=np.float64)
            found[k] = True
    table[PAD] = 0.0
    logger.info("pretrained vectors cover %d of %d words", found.sum(), len(vocab.words))
    return EmbeddingTable(table, found)


# --------------------------------------------------------------------------
# building blocks


def add_linear(params: Params, prefix: str, n_in: int, n_out: int, bias: bool = True) -> None:
    params.add(f"{prefix}/W", (n_in, n_out))
    if bias:
        params.add(f"{prefix}/b", (n_out,), init="zeros")


def linear(params: Params, prefix: str, x: Value) -> Value:
    y = ad.matmul(x, params[f"{prefix}/W"])
    b = params.values.get(f"{prefix}/b")
    return y if b is None else ad.add(y, b)


def add_layer_norm(params: Params, prefix: str, dim: int) -> None:
    params.add(f"{prefix}/gamma", (dim,), init="ones")
    params.add(f"{prefix}/beta", (dim,), init="zeros")


def layer_norm(params: Params, prefix: str, x: Value) -> Value:
    return ad.layer_norm(x, params[f"{prefix}/gamma"], params[f"{prefix}/beta"])


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    rates = np.exp(-math.log(10000.0) * (np.arange(0, dim, 2) / dim))
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(pos * rates)
    pe[:, 1::2] = np.cos(pos * rates[: dim // 2])
    return pe


def add_attention(params: Params, prefix: str, dim: int) -> None:
    for part in ("q", "k", "v", "o"):
        add_linear(params, f"{prefix}/{part}", dim, dim)


def attention(
    params: Params, prefix: str, xq: Value, xkv: Value, key_mask: np.ndarray | None, heads: int,
    record: list | None = None,
) -> Value:
    """Multi-head scaled dot-product attention.

    ``xq`` is ``[B, Tq, D]`` and ``xkv`` is ``[B, Tk, D]``; ``key_mask``
    (``[B, Tk]`` bool, True = real token) removes pad keys.
    """
    b, tq, d = xq.shape
    tk = xkv.shape[1]
    dh = d // heads

    def split(x: Value, t: int) -> Value:
        return ad.transpose(ad.reshape(x, (b, t, heads, dh)), (0, 2, 1, 3))

    q = split(linear(params, f"{prefix}/q", xq), tq)
    k = split(linear(params, f"{prefix}/k", xkv), tk)
    v = split(linear(params, f"{prefix}/v", xkv), tk)
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if key_mask is not None:
        bias = np.where(key_mask, 0.0, NEG_INF)[:, None, None, :]
        scores = ad.add(scores, bias)
    weights = ad.softmax(scores, axis=-1)
    if record is not None:
        record.append(weights.data)
    ctx = ad.transpose(ad.matmul(weights, v), (0, 2, 1, 3))
    return linear(params, f"{prefix}/o", ad.reshape(ctx, (b, tq, d)))


def add_feed_forward(params: Params, prefix: str, dim: int, hidden: int) -> None:
    add_linear(params, f"{prefix}/fc1", dim, hidden)
    add_linear(params, f"{prefix}/fc2", hidden, dim)


def feed_forward(params: Params, prefix: str, x: Value, rate: float, rng, train: bool) -> Value:
    h = ad.relu(linear(params, f"{prefix}/fc1", x))
    h = ad.dropout(h, rate, rng, train)
    return linear(params, f"{prefix}/fc2", h)


# --------------------------------------------------------------------------
# encoder / decoder


def init_language_params(params: Params, cfg: TrainConfig) -> None:
    d = cfg.instruction_dim
    add_linear(params, "lang/in_proj", cfg.embed_dim, d)
    for n in range(cfg.encoder_layers):
        p = f"lang/enc{n}"
        add_attention(params, f"{p}/self", d)
        add_layer_norm(params, f"{p}/ln1", d)
        add_feed_forward(params, f"{p}/ffn", d, cfg.ffn_dim)
        add_layer_norm(params, f"{p}/ln2", d)
    params.add("lang/queries", (cfg.M, d), init="normal", scale=1.0)
    for n in range(cfg.decoder_layers):
        p = f"lang/dec{n}"
        add_attention(params, f"{p}/self", d)
        add_layer_norm(params, f"{p}/ln1", d)
        add_attention(params, f"{p}/cross", d)
        add_layer_norm(params, f"{p}/ln2", d)
        add_feed_forward(params, f"{p}/ffn", d, cfg.ffn_dim)
        add_layer_norm(params, f"{p}/ln3", d)


def encoder_layer(params: Params, prefix: str, x: Value, mask: np.ndarray, cfg: TrainConfig,
                  rng, train: bool, record: list | None = None) -> Value:
    a = attention(params, f"{prefix}/self", x, x, mask, cfg.lang_heads, record)
    x = layer_norm(params, f"{prefix}/ln1", ad.add(x, ad.dropout(a, cfg.dropout, rng, train)))
    f = feed_forward(params, f"{prefix}/ffn", x, cfg.dropout, rng, train)
    return layer_norm(params, f"{prefix}/ln2", ad.add(x, ad.dropout(f, cfg.dropout, rng, train)))


def encode_question(
    tokens: np.ndarray, table: Value, params: Params, cfg: TrainConfig,
    rng=None, train: bool = False, record: list | None = None,
) -> Value:
    """Encoder states ``[B, Q, instruction_dim]`` for padded token ids ``[B, Q]``."""
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    b, q = tokens.shape
    if q == 0 or np.any((tokens != PAD).sum(axis=1) == 0):
        raise ValueError("cannot encode an empty question")
    if q > cfg.max_len:
        raise ValueError(f"question length {q} exceeds max_len {cfg.max_len}")
    mask = tokens != PAD
    emb = ad.reshape(ad.embedding_lookup(table, tokens.reshape(-1)), (b, q, table.shape[1]))
    x = linear(params, "lang/in_proj", emb)
    x = ad.add(x, sinusoidal_positions(q, cfg.instruction_dim))
    x = ad.dropout(x, cfg.dropout, rng, train)
    for n in range(cfg.encoder_layers):
        x = encoder_layer(params, f"lang/enc{n}", x, mask, cfg, rng, train, record)
    return x


@dataclass
class InstructionProgram:
    instructions: Value  # [B, M, instruction_dim]
    summary: Value  # [B, instruction_dim]

    @property
    def M(self) -> int:
        return self.instructions.shape[1]


def question_summary(states: Value, tokens: np.ndarray) -> Value:
    mask = (np.atleast_2d(tokens) != PAD).astype(np.float64)
    weights = mask / mask.sum(axis=1, keepdims=True)
    return ad.reduce_sum(ad.mul(states, weights[:, :, None]), axis=1)


def decode_instructions(
    states: Value, tokens: np.ndarray, params: Params, cfg: TrainConfig,
    rng=None, train: bool = False, record: list | None = None,
) -> InstructionProgram:
    tokens = np.atleast_2d(tokens)
    mask = tokens != PAD
    b = states.shape[0]
    queries = params["lang/queries"]
    x = ad.add(np.zeros((b,) + queries.shape), queries)
    for n in range(cfg.decoder_layers):
        p = f"lang/dec{n}"
        a = attention(params, f"{p}/self", x, x, None, cfg.lang_heads)
        x = layer_norm(params, f"{p}/ln1", ad.add(x, ad.dropout(a, cfg.dropout, rng, train)))
        c = attention(params, f"{p}/cross", x, states, mask, cfg.lang_heads, record)
        x = layer_norm(params, f"{p}/ln2", ad.add(x, ad.dropout(c, cfg.dropout, rng, train)))
        f = feed_forward(params, f"{p}/ffn", x, cfg.dropout, rng, train)
        x = layer_norm(params, f"{p}/ln3", ad.add(x, ad.dropout(f, cfg.dropout, rng, train)))
    return InstructionProgram(x, question_summary(states, tokens))
