"""Scene-graph featurisation and instruction-conditioned message passing.

Messages flow along stored edge direction (source to destination), so the
neighbourhood of a node is the set of its in-edges. Every graph carries a
self-loop per node, which keeps all neighbourhoods non-empty.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import SegmentIndex, Value
from .config import TrainConfig
from .data import GraphBatch, GraphTokens
from .language import add_linear, linear
from .params import Params


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class Topology:
    """Edge structure of a (batched) graph in the form the layers consume."""

    src: np.ndarray
    dst: np.ndarray
    num_nodes: int
    node_graph: np.ndarray
    edge_graph: np.ndarray

    @property
    def incoming(self) -> SegmentIndex:
        return SegmentIndex(self.dst, self.num_nodes)

    @classmethod
    def from_batch(cls, batch: GraphBatch) -> "Topology":
        t = batch.tokens
        return cls(t.src, t.dst, t.num_nodes, batch.node_graph, batch.edge_graph)


# --------------------------------------------------------------------------
# features


def init_graph_features(tokens: GraphTokens, table: Value) -> tuple[Value, Value]:
    """Initial node features ``[N, 2E]`` and edge features ``[E_edges, E]``.

    Nodes get the mean name embedding next to the mean attribute embedding
    (zeros without attributes). Edges get the mean relation embedding,
    negated for synthetic reverse edges.
    """
    n, m = tokens.num_nodes, tokens.num_edges
    names = ad.segment_reduce(ad.embedding_lookup(table, tokens.name_ids), SegmentIndex(tokens.name_seg, n), "mean")
    attrs = ad.segment_reduce(ad.embedding_lookup(table, tokens.attr_ids), SegmentIndex(tokens.attr_seg, n), "mean")
    rels = ad.segment_reduce(ad.embedding_lookup(table, tokens.rel_ids), SegmentIndex(tokens.rel_seg, m), "mean")
    edges = ad.mul(rels, tokens.edge_sign[:, None])
    return ad.concat([names, attrs], axis=1), edges


def init_contextual_params(params: Params, cfg: TrainConfig) -> None:
    add_linear(params, "graph/enc", 3 * cfg.embed_dim, cfg.hidden_dim)


def contextual_encode(x_hat: Value, e: Value, topo: Topology, params: Params) -> Value:
    """``x_i = ELU(mean over in-edges (j -> i) of W_enc [x_hat_j ; e_ji])``."""
    pairs = ad.concat([ad.gather(x_hat, topo.src), e], axis=1)
    return ad.elu(ad.segment_reduce(linear(params, "graph/enc", pairs), topo.incoming, "mean"))


def condition_on_instruction(h: Value, e: Value, instr: Value, topo: Topology) -> tuple[Value, Value]:
    """Append each graph's current instruction vector to its node and edge rows."""
    h_hat = ad.concat([h, ad.gather(instr, topo.node_graph)], axis=1)
    e_hat = ad.concat([e, ad.gather(instr, topo.edge_graph)], axis=1)
    return h_hat, e_hat


# --------------------------------------------------------------------------
# layer families


def _post(h_new: Value, h_prev: Value, cfg: TrainConfig, rng, train: bool) -> Value:
    if cfg.residual:
        h_new = ad.add(h_new, h_prev)
    if cfg.use_layer_dropout:
        h_new = ad.dropout(h_new, cfg.dropout, rng, train)
    return h_new


def init_gcn_params(params: Params, prefix: str, cfg: TrainConfig) -> None:
    add_linear(params, f"{prefix}/W", cfg.hidden_dim + cfg.instruction_dim, cfg.hidden_dim)


def gcn_layer(h_hat: Value, topo: Topology, params: Params, prefix: str) -> Value:
    z = linear(params, f"{prefix}/W", h_hat)
    return ad.elu(ad.segment_reduce(ad.gather(z, topo.src), topo.incoming, "mean"))


def init_gine_params(params: Params, prefix: str, cfg: TrainConfig) -> None:
    width = cfg.hidden_dim + cfg.instruction_dim
    add_linear(params, f"{prefix}/edge_proj", cfg.embed_dim + cfg.instruction_dim, width)
    params.add(f"{prefix}/eps", (1,), init="zeros")
    if cfg.gine_theta_depth == 1:
        add_linear(params, f"{prefix}/theta", width, cfg.hidden_dim)
    else:
        add_linear(params, f"{prefix}/theta1", width, cfg.hidden_dim)
        add_linear(params, f"{prefix}/theta2", cfg.hidden_dim, cfg.hidden_dim)
        params.add(f"{prefix}/bn/gamma", (cfg.hidden_dim,), init="ones")
        params.add(f"{prefix}/bn/beta", (cfg.hidden_dim,), init="zeros")
        params.add_buffer(f"{prefix}/bn/mean", np.zeros(cfg.hidden_dim))
        params.add_buffer(f"{prefix}/bn/var", np.ones(cfg.hidden_dim))


def gine_theta(z: Value, params: Params, prefix: str, depth: int, train: bool) -> Value:
    if depth == 1:
        return linear(params, f"{prefix}/theta", z)
    z = ad.relu(linear(params, f"{prefix}/theta1", z))
    z = ad.relu(linear(params, f"{prefix}/theta2", z))
    return ad.batch_norm(
        z, params[f"{prefix}/bn/gamma"], params[f"{prefix}/bn/beta"],
        params.buffers[f"{prefix}/bn/mean"], params.buffers[f"{prefix}/bn/var"], train,
    )


def gine_layer(h_hat: Value, e_hat: Value, topo: Topology, params: Params, prefix: str,
               depth: int = 1, train: bool = False) -> Value:
    """``Theta((1 + eps) h_hat_i + sum over in-edges of ReLU(h_hat_j + proj(e_hat_ji)))``."""
    msg = ad.relu(ad.add(ad.gather(h_hat, topo.src), linear(params, f"{prefix}/edge_proj", e_hat)))
    agg = ad.segment_reduce(msg, topo.incoming, "sum")
    z = ad.add(ad.mul(h_hat, ad.add(params[f"{prefix}/eps"], 1.0)), agg)
    return gine_theta(z, params, prefix, depth, train)


def init_gat_params(params: Params, prefix: str, cfg: TrainConfig) -> None:
    heads = cfg.gat_heads
    dh = cfg.hidden_dim // heads
    add_linear(params, f"{prefix}/W", cfg.hidden_dim + cfg.instruction_dim, heads * dh, bias=False)
    add_linear(params, f"{prefix}/U", cfg.embed_dim + cfg.instruction_dim, heads * dh, bias=False)
    for part in ("a_dst", "a_src", "a_edge"):
        params.add(f"{prefix}/{part}", (heads, dh))
    add_linear(params, f"{prefix}/out", heads * dh, cfg.hidden_dim)


def gat_attention(h_hat: Value, e_hat: Value, topo: Topology, params: Params, prefix: str,
                  heads: int) -> tuple[Value, Value]:
    """Per-head projected nodes ``[N, H, dh]`` and attention weights ``[E, H]``."""
    n = h_hat.shape[0]
    wh = ad.reshape(linear(params, f"{prefix}/W", h_hat), (n, heads, -1))
    ue = ad.reshape(linear(params, f"{prefix}/U", e_hat), (e_hat.shape[0], heads, -1))
    s_dst = ad.reduce_sum(ad.mul(wh, params[f"{prefix}/a_dst"]), axis=-1)
    s_src = ad.reduce_sum(ad.mul(wh, params[f"{prefix}/a_src"]), axis=-1)
    s_edge = ad.reduce_sum(ad.mul(ue, params[f"{prefix}/a_edge"]), axis=-1)
    scores = ad.leaky_relu(ad.add(ad.add(ad.gather(s_dst, topo.dst), ad.gather(s_src, topo.src)), s_edge), 0.2)
    return wh, ad.segment_softmax(scores, topo.incoming)


def gat_layer(h_hat: Value, e_hat: Value, topo: Topology, params: Params, prefix: str,
              heads: int) -> tuple[Value, Value]:
    """Attention-weighted neighbour average, heads concatenated then projected.

    Returns the ELU-activated projection (before residual/dropout) and the
    attention weights.
    """
    wh, alpha = gat_attention(h_hat, e_hat, topo, params, prefix, heads)
    msg = ad.mul(ad.gather(wh, topo.src), ad.reshape(alpha, alpha.shape + (1,)))
    agg = ad.segment_reduce(msg, topo.incoming, "sum")
    n = h_hat.shape[0]
    out = linear(params, f"{prefix}/out", ad.reshape(agg, (n, -1)))
    return ad.elu(out), alpha


def init_lcgn_params(params: Params, cfg: TrainConfig) -> None:
    h, d = cfg.hidden_dim, cfg.instruction_dim
    p = "lcgn"
    add_linear(params, f"{p}/ctx_q", d, h, bias=False)
    add_linear(params, f"{p}/ctx_k", d, h, bias=False)
    add_linear(params, f"{p}/ctx_v", d, h, bias=False)
    params.add(f"{p}/x_ctx_init", (h,), init="normal", scale=1.0)
    add_linear(params, f"{p}/W1", h, h, bias=False)
    add_linear(params, f"{p}/W2", h, h, bias=False)
    for name in ("W3", "W4", "W6"):
        add_linear(params, f"{p}/{name}", 3 * h, h, bias=False)
    add_linear(params, f"{p}/W5", h, h, bias=False)
    add_linear(params, f"{p}/W7", h, h, bias=False)
    add_linear(params, f"{p}/W8", 2 * h, h, bias=False)


def lcgn_contexts(instructions: Value, params: Params) -> Value:
    """Single attention layer over the instruction sequence: ``[B, M, D] -> [B, M, hidden]``."""
    q = linear(params, "lcgn/ctx_q", instructions)
    k = linear(params, "lcgn/ctx_k", instructions)
    v = linear(params, "lcgn/ctx_v", instructions)
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(q.shape[-1]))
    return ad.matmul(ad.softmax(scores, axis=-1), v)


def lcgn_step(x_loc: Value, x_ctx: Value, c_t: Value, topo: Topology, params: Params) -> tuple[Value, Value]:
    """One recurrent LCGN update restricted to the stored edges.

    ``c_t`` is ``[B, hidden]``, one context vector per graph. Returns the
    new context states and the edge weights ``[E]``.
    """
    p = "lcgn"
    gate = ad.mul(linear(params, f"{p}/W1", x_loc), linear(params, f"{p}/W2", x_ctx))
    x_tilde = ad.concat([x_loc, x_ctx, gate], axis=1)
    c3 = ad.gather(linear(params, f"{p}/W5", c_t), topo.edge_graph)
    c7 = ad.gather(linear(params, f"{p}/W7", c_t), topo.edge_graph)
    query = ad.gather(linear(params, f"{p}/W3", x_tilde), topo.dst)
    key = ad.gather(linear(params, f"{p}/W4", x_tilde), topo.src)
    scores = ad.reduce_sum(ad.mul(ad.mul(query, key), c3), axis=1)
    w = ad.segment_softmax(scores, topo.incoming)
    values = ad.mul(ad.gather(linear(params, f"{p}/W6", x_tilde), topo.src), c7)
    msg = ad.mul(values, ad.reshape(w, (-1, 1)))
    agg = ad.segment_reduce(msg, topo.incoming, "sum")
    return linear(params, f"{p}/W8", ad.concat([x_ctx, agg], axis=1)), w


# --------------------------------------------------------------------------
# program execution


@dataclass
class StepRecord:
    step: int
    node_norm_delta: np.ndarray
    attention: np.ndarray | None = None  # [E, heads]


@dataclass
class StepTrace:
    steps: list[StepRecord] = field(default_factory=list)

    def to_json(self, topo: Topology) -> dict:
        out = []
        for rec in self.steps:
            entry = {"step": rec.step, "attention": [], "node_norm_delta": rec.node_norm_delta.tolist()}
            if rec.attention is not None:
                att = rec.attention.reshape(rec.attention.shape[0], -1)
                entry["attention"] = [
                    {"src": int(topo.src[e]), "dst": int(topo.dst[e]), "head": k, "weight": float(att[e, k])}
                    for e in range(att.shape[0]) for k in range(att.shape[1])
                ]
            else:
                del entry["attention"]
            out.append(entry)
        return {"steps": out}


def init_reasoning_params(params: Params, cfg: TrainConfig) -> None:
    init_contextual_params(params, cfg)
    if cfg.family == "lcgn":
        init_lcgn_params(params, cfg)
        return
    init = {"gcn": init_gcn_params, "gine": init_gine_params, "gat": init_gat_params}[cfg.family]
    for step in range(cfg.M):
        init(params, f"step{step}/{cfg.family}", cfg)


def _check_family(params: Params, cfg: TrainConfig) -> None:
    prefix = "lcgn/" if cfg.family == "lcgn" else f"step0/{cfg.family}/"
    if not any(path.startswith(prefix) for path in params):
        raise ConfigurationError(f"parameters do not contain a {cfg.family} reasoning stack")


def execute_program(
    x: Value, e: Value, topo: Topology, instructions: Value, params: Params, cfg: TrainConfig,
    rng=None, train: bool = False,
) -> tuple[Value, StepTrace]:
    """Run the ``M`` reasoning steps starting from contextual node features ``x``.

    ``instructions`` is ``[B, M, instruction_dim]``; graph ``b`` of the batch
    reads row ``b``.
    """
    _check_family(params, cfg)
    m = instructions.shape[1]
    trace = StepTrace()
    if cfg.family == "lcgn":
        contexts = lcgn_contexts(instructions, params)
        h = ad.add(np.zeros((topo.num_nodes, cfg.hidden_dim)), params["lcgn/x_ctx_init"])
        for step in range(m):
            c_t = ad.index(contexts, (slice(None), step, slice(None)))
            h_new, w = lcgn_step(x, h, c_t, topo, params)
            trace.steps.append(StepRecord(step, np.linalg.norm(h_new.data - h.data, axis=1), w.data[:, None]))
            h = h_new
        return h, trace

    h = x
    for step in range(m):
        prefix = f"step{step}/{cfg.family}"
        instr = ad.index(instructions, (slice(None), step, slice(None)))
        h_hat, e_hat = condition_on_instruction(h, e, instr, topo)
        attn = None
        if cfg.family == "gcn":
            h_new = gcn_layer(h_hat, topo, params, prefix)
        elif cfg.family == "gine":
            h_new = gine_layer(h_hat, e_hat, topo, params, prefix, cfg.gine_theta_depth, train)
        else:
            h_new, alpha = gat_layer(h_hat, e_hat, topo, params, prefix, cfg.gat_heads)
            attn = alpha.data
        h_new = _post(h_new, h, cfg, rng, train)
        trace.steps.append(StepRecord(step, np.linalg.norm(h_new.data - h.data, axis=1), attn))
        h = h_new
    return h, trace
