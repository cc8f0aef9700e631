"""Small builders shared by the test modules."""

from pathlib import Path

import numpy as np

from sgqa.config import TrainConfig
from sgqa.data import RESERVED_WORDS, Edge, Node, SceneGraph, Vocabulary, augment_symmetric_edges, graph_tokens

FIXTURES = Path(__file__).parent / "fixtures"

NAMES = ("girl", "ball", "table", "tree", "dog")
ATTRIBUTES = ("red", "small", "green", "tall")
RELATIONS = ("left of", "near", "on", "above")
QUESTION_WORDS = ("what", "is", "the", "color", "of", "there", "a")
ANSWERS = ("ball", "girl", "no", "red", "yes")


def tiny_config(**kw) -> TrainConfig:
    base = dict(hidden_dim=8, embed_dim=6, instruction_dim=8, ffn_dim=12, answer_hidden=10, M=3,
                gat_heads=2, lang_heads=2, max_len=12, encoder_layers=1, decoder_layers=1)
    base.update(kw)
    return TrainConfig(**base)


def tiny_vocab() -> Vocabulary:
    words = set(QUESTION_WORDS) | set(NAMES) | set(ATTRIBUTES)
    for r in RELATIONS:
        words.update(r.split())
    return Vocabulary(list(RESERVED_WORDS) + sorted(words), list(ANSWERS))


def random_scene(rng: np.random.Generator, n_nodes: int, n_edges: int, graph_id: str = "g") -> SceneGraph:
    nodes = []
    for _ in range(n_nodes):
        k = int(rng.integers(0, 3))
        attrs = tuple(rng.choice(ATTRIBUTES, size=k, replace=False).tolist())
        nodes.append(Node(str(rng.choice(NAMES)), attrs))
    pairs = [(i, j) for i in range(n_nodes) for j in range(n_nodes) if i != j]
    edges = []
    if pairs:
        picks = rng.choice(len(pairs), size=min(n_edges, len(pairs)), replace=False)
        for p in sorted(picks.tolist()):
            i, j = pairs[p]
            edges.append(Edge(i, j, str(rng.choice(RELATIONS))))
    return SceneGraph(graph_id, tuple(nodes), tuple(edges))


def permute_scene(g: SceneGraph, perm: np.ndarray) -> SceneGraph:
    """Relabel nodes so that old node ``k`` becomes ``perm[k]``; edge order is kept."""
    nodes = [None] * g.num_nodes
    for k, n in enumerate(g.nodes):
        nodes[perm[k]] = n
    edges = tuple(Edge(int(perm[e.src]), int(perm[e.dst]), e.relation, e.synthetic_reverse) for e in g.edges)
    return SceneGraph(g.graph_id, tuple(nodes), edges)


def tokens_of(g: SceneGraph, vocab: Vocabulary):
    return graph_tokens(augment_symmetric_edges(g), vocab)
