"""Toy scene graphs of coloured shapes on a grid, with templated questions.

Objects sit in distinct cells of a ``rows x cols`` grid. Horizontally
adjacent objects are linked by ``left of`` and vertically adjacent ones by
``above``; only that one direction is stored, so reverse reasoning
("right of", "below") relies on symmetric edge augmentation.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .data import Edge, Node, QuestionRecord, SceneGraph
from .params import rng_for

SHAPES = ("square", "circle", "triangle", "star", "heart", "diamond")
COLORS = ("red", "blue", "green", "yellow", "purple")

# relation asked about -> (stored relation, True if the asked-for object is the stored source)
_DIRECTIONS = {
    "left of": ("left of", True),
    "right of": ("left of", False),
    "above": ("above", True),
    "below": ("above", False),
}


@dataclass(frozen=True)
class GridSpec:
    rows: int = 3
    cols: int = 3
    min_objects: int = 5
    max_objects: int = 7


def make_scene(graph_id: str, rng: np.random.Generator, spec: GridSpec = GridSpec()) -> tuple[SceneGraph, dict]:
    cells = [(r, c) for r in range(spec.rows) for c in range(spec.cols)]
    n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    chosen = sorted(rng.choice(len(cells), size=n, replace=False).tolist())
    looks = list(itertools.product(COLORS, SHAPES))
    picks = rng.choice(len(looks), size=n, replace=False)
    nodes = []
    where = {}
    for k, (cell_no, look_no) in enumerate(zip(chosen, picks)):
        r, c = cells[cell_no]
        color, shape = looks[look_no]
        nodes.append(Node(shape, (color,), (c * 10, r * 10, 10, 10)))
        where[(r, c)] = k
    edges = []
    for (r, c), k in sorted(where.items()):
        if (r, c + 1) in where:
            edges.append(Edge(k, where[(r, c + 1)], "left of"))
        if (r + 1, c) in where:
            edges.append(Edge(k, where[(r + 1, c)], "above"))
    return SceneGraph(graph_id, tuple(nodes), tuple(edges)), where


def _describe(node: Node) -> str:
    return f"{node.attributes[0]} {node.name}"


def _partner(g: SceneGraph, k: int, asked: str) -> int | None:
    stored, asked_is_src = _DIRECTIONS[asked]
    for e in g.edges:
        if e.relation != stored:
            continue
        if asked_is_src and e.dst == k:
            return e.src
        if not asked_is_src and e.src == k:
            return e.dst
    return None


def _relation_query(g: SceneGraph, rng) -> tuple[str, str] | None:
    options = [(k, rel, j) for k in range(g.num_nodes) for rel in _DIRECTIONS
               if (j := _partner(g, k, rel)) is not None]
    if not options:
        return None
    k, rel, j = options[int(rng.integers(len(options)))]
    if rng.random() < 0.5:
        return f"What is {rel} the {_describe(g.nodes[k])}?", g.nodes[j].name
    return f"What color is the object {rel} the {_describe(g.nodes[k])}?", g.nodes[j].attributes[0]


def _relation_verify(g: SceneGraph, rng) -> tuple[str, str] | None:
    if g.num_nodes < 2:
        return None
    k, j = rng.choice(g.num_nodes, size=2, replace=False)
    rel = list(_DIRECTIONS)[int(rng.integers(len(_DIRECTIONS)))]
    truth = _partner(g, int(j), rel) == int(k)
    if not truth and rng.random() < 0.5:
        options = [(kk, rr, jj) for kk in range(g.num_nodes) for rr in _DIRECTIONS
                   if (jj := _partner(g, kk, rr)) is not None]
        if options:
            jj, rel, kk = options[int(rng.integers(len(options)))]
            k, j, truth = kk, jj, True
    answer = "yes" if truth else "no"
    return f"Is the {_describe(g.nodes[k])} {rel} the {_describe(g.nodes[j])}?", answer


def _attribute_query(g: SceneGraph, rng) -> tuple[str, str] | None:
    counts = {}
    for n in g.nodes:
        counts[n.name] = counts.get(n.name, 0) + 1
    unique = [k for k, n in enumerate(g.nodes) if counts[n.name] == 1]
    if not unique:
        return None
    k = unique[int(rng.integers(len(unique)))]
    return f"What color is the {g.nodes[k].name}?", g.nodes[k].attributes[0]


def _object_verify(g: SceneGraph, rng) -> tuple[str, str]:
    present = {(n.attributes[0], n.name) for n in g.nodes}
    if rng.random() < 0.5:
        color, shape = sorted(present)[int(rng.integers(len(present)))]
        return f"Is there a {color} {shape}?", "yes"
    absent = [p for p in itertools.product(COLORS, SHAPES) if p not in present]
    color, shape = absent[int(rng.integers(len(absent)))]
    return f"Is there a {color} {shape}?", "no"


_TEMPLATES = (
    ("relation", "query", _relation_query),
    ("relation", "verify", _relation_verify),
    ("attribute", "query", _attribute_query),
    ("object", "verify", _object_verify),
)


def generate_corpus(
    num_graphs: int = 200,
    questions_per_graph: int = 3,
    seed: int = 0,
    relation_share: float = 0.5,
    spec: GridSpec = GridSpec(),
) -> tuple[dict[str, SceneGraph], list[QuestionRecord]]:
    """Scene graphs keyed by id and their questions.

    Roughly ``relation_share`` of the questions are relational; the rest
    are spread over attribute and existence questions.
    """
    graphs: dict[str, SceneGraph] = {}
    questions: list[QuestionRecord] = []
    for gno in range(num_graphs):
        gid = f"g{gno:04d}"
        rng = rng_for(seed, f"synthetic/{gid}")
        g, _ = make_scene(gid, rng, spec)
        graphs[gid] = g
        made = 0
        attempts = 0
        while made < questions_per_graph and attempts < 50:
            attempts += 1
            if rng.random() < relation_share:
                semantic, structural, fn = _TEMPLATES[int(rng.integers(2))]
            else:
                semantic, structural, fn = _TEMPLATES[2 + int(rng.integers(2))]
            qa = fn(g, rng)
            if qa is None:
                continue
            text, answer = qa
            questions.append(QuestionRecord(f"{gid}q{made}", gid, text, answer, structural, semantic))
            made += 1
    return graphs, questions
