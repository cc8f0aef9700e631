"""GQA-format scene graphs and questions: parsing, augmentation, vocabulary, statistics, batching."""

from __future__ import annotations

import hashlib
import json
import logging
import string
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PAD, UNK, SELF_LOOP = 0, 1, 2
RESERVED_WORDS = ("<pad>", "<unk>", "<self>")

_STRIP = string.punctuation + "“”‘’"


class DataError(ValueError):
    """Input data could not be parsed or is inconsistent."""


@dataclass(frozen=True)
class Node:
    name: str
    attributes: tuple[str, ...] = ()
    bbox: tuple[int, int, int, int] = (0, 0, 0, 0)


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    relation: str
    synthetic_reverse: bool = False


@dataclass(frozen=True)
class SceneGraph:
    graph_id: str
    nodes: tuple[Node, ...] = ()
    edges: tuple[Edge, ...] = ()

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_edges(self) -> int:
        return len(self.edges)


@dataclass(frozen=True)
class QuestionRecord:
    question_id: str
    graph_id: str
    text: str
    answer: str
    structural_type: str = ""
    semantic_type: str = ""


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace and strip surrounding punctuation."""
    out = []
    for raw in text.lower().split():
        tok = raw.strip(_STRIP)
        if tok:
            out.append(tok)
    return out


# --------------------------------------------------------------------------
# parsing


def _load_json(path: str | Path):
    raw = Path(path).read_bytes()
    text = raw.decode("utf-8")
    try:
        return json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise DataError(f"{path}: malformed JSON at byte offset {offset}: {exc.msg}") from None


def scene_graphs_from_json(obj: dict) -> tuple[dict[str, SceneGraph], int]:
    """Convert an already-decoded GQA scene-graph mapping.

    Returns the graphs (sorted by id) and the number of relations dropped
    because their target object does not exist or points at the source.
    """
    if not isinstance(obj, dict):
        raise DataError("scene-graph file must hold a JSON object keyed by image id")
    graphs: dict[str, SceneGraph] = {}
    dropped = 0
    for gid in sorted(obj):
        entry = obj[gid]
        if not isinstance(entry, dict) or "objects" not in entry:
            raise DataError(f"graph {gid!r}: missing required field 'objects'")
        objects = entry["objects"] or {}
        ids = list(objects)
        pos = {oid: k for k, oid in enumerate(ids)}
        nodes = []
        edges = []
        for k, oid in enumerate(ids):
            o = objects[oid]
            if "name" not in o:
                raise DataError(f"graph {gid!r}: object {oid!r} missing required field 'name'")
            bbox = tuple(int(o.get(key, 0)) for key in ("x", "y", "w", "h"))
            nodes.append(Node(o["name"], tuple(o.get("attributes", ()) or ()), bbox))
            for rel in o.get("relations", ()) or ():
                if "object" not in rel or "name" not in rel:
                    raise DataError(f"graph {gid!r}: relation of {oid!r} missing 'object' or 'name'")
                j = pos.get(rel["object"])
                if j is None or j == k:
                    dropped += 1
                    continue
                edges.append(Edge(k, j, rel["name"]))
        graphs[gid] = SceneGraph(gid, tuple(nodes), tuple(edges))
    return graphs, dropped


def parse_scene_graphs(path: str | Path) -> dict[str, SceneGraph]:
    graphs, dropped = scene_graphs_from_json(_load_json(path))
    if dropped:
        logger.warning("%s: dropped %d relations with unresolved targets", path, dropped)
    return graphs


def questions_from_json(obj: dict) -> list[QuestionRecord]:
    if not isinstance(obj, dict):
        raise DataError("question file must hold a JSON object keyed by question id")
    out = []
    for qid in sorted(obj):
        q = obj[qid]
        for key in ("imageId", "question", "answer"):
            if key not in q:
                raise DataError(f"question {qid!r}: missing required field {key!r}")
        types = q.get("types") or {}
        out.append(
            QuestionRecord(
                question_id=str(qid),
                graph_id=str(q["imageId"]),
                text=q["question"],
                answer=q["answer"],
                structural_type=types.get("structural", "") or "",
                semantic_type=types.get("semantic", "") or "",
            )
        )
    return out


def parse_questions(path: str | Path) -> list[QuestionRecord]:
    return questions_from_json(_load_json(path))


def graphs_to_json(graphs: dict[str, SceneGraph]) -> dict:
    """Inverse of :func:`scene_graphs_from_json` for stored (non-synthetic) edges."""
    out = {}
    for gid, g in graphs.items():
        objects = {}
        for k, n in enumerate(g.nodes):
            x, y, w, h = n.bbox
            objects[str(k)] = {
                "name": n.name, "x": x, "y": y, "w": w, "h": h,
                "attributes": list(n.attributes),
                "relations": [
                    {"object": str(e.dst), "name": e.relation}
                    for e in g.edges if e.src == k and not e.synthetic_reverse
                ],
            }
        out[gid] = {"objects": objects}
    return out


def questions_to_json(questions: Iterable[QuestionRecord]) -> dict:
    return {
        q.question_id: {
            "imageId": q.graph_id,
            "question": q.text,
            "answer": q.answer,
            "types": {"structural": q.structural_type, "semantic": q.semantic_type},
        }
        for q in questions
    }


# --------------------------------------------------------------------------
# augmentation


def augment_symmetric_edges(g: SceneGraph) -> SceneGraph:
    """Add a reverse edge for every directed edge that has no partner.

    The reverse keeps the relation string and is flagged
    ``synthetic_reverse``; its feature is negated when embedded.
    """
    present = {(e.src, e.dst) for e in g.edges}
    extra = [
        Edge(e.dst, e.src, e.relation, synthetic_reverse=True)
        for e in g.edges
        if (e.dst, e.src) not in present
    ]
    if not extra:
        return g
    return replace(g, edges=g.edges + tuple(extra))


# --------------------------------------------------------------------------
# vocabulary


@dataclass
class Vocabulary:
    words: list[str]
    answers: list[str]
    word_to_id: dict[str, int] = field(init=False, repr=False)
    answer_to_id: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.words[:3]) != RESERVED_WORDS:
            raise DataError("vocabulary must start with the reserved tokens <pad>, <unk>, <self>")
        self.word_to_id = {w: k for k, w in enumerate(self.words)}
        self.answer_to_id = {a: k for k, a in enumerate(self.answers)}
        if len(self.word_to_id) != len(self.words) or len(self.answer_to_id) != len(self.answers):
            raise DataError("vocabulary contains duplicates")

    def encode(self, text: str) -> list[int]:
        return [self.word_to_id.get(t, UNK) for t in tokenize(text)]

    def answer_id(self, answer: str) -> int:
        """Id of ``answer``, or -1 if it is outside the answer space."""
        return self.answer_to_id.get(answer, -1)

    def to_json(self) -> dict:
        return {"words": list(self.words), "answers": list(self.answers)}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        return cls(list(obj["words"]), list(obj["answers"]))

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), separators=(",", ":"), ensure_ascii=False).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def build_vocabulary(
    graphs: Iterable[SceneGraph], questions: Iterable[QuestionRecord]
) -> Vocabulary:
    questions = list(questions)
    if not any(q.answer for q in questions):
        raise DataError("cannot build a vocabulary without at least one answered question")
    words: set[str] = set()
    for q in questions:
        words.update(tokenize(q.text))
    for g in graphs:
        for n in g.nodes:
            words.update(tokenize(n.name))
            for a in n.attributes:
                words.update(tokenize(a))
        for e in g.edges:
            words.update(tokenize(e.relation))
    words -= set(RESERVED_WORDS)
    answers = sorted({q.answer for q in questions if q.answer})
    return Vocabulary(list(RESERVED_WORDS) + sorted(words), answers)


# --------------------------------------------------------------------------
# statistics


@dataclass
class StatsReport:
    num_graphs: int
    num_nodes: int
    num_edges: int
    avg_nodes: float
    avg_edges: float
    node_types: int
    edge_types: int
    attribute_types: int

    ROWS = (
        ("Total Number of Graphs", "num_graphs"),
        ("Total Number of Nodes", "num_nodes"),
        ("Total Number of Edges", "num_edges"),
        ("Average Number of Nodes per Graph", "avg_nodes"),
        ("Average Number of Edges per Graph", "avg_edges"),
        ("Total Number of Node Types", "node_types"),
        ("Total Number of Edge Types", "edge_types"),
        ("Total Number of Attributes Types", "attribute_types"),
    )

    def to_json(self) -> dict:
        d = {key: getattr(self, key) for _, key in self.ROWS}
        d["avg_nodes_rounded"] = round(self.avg_nodes)
        d["avg_edges_rounded"] = round(self.avg_edges)
        return d

    def to_table(self) -> str:
        width = max(len(label) for label, _ in self.ROWS)
        lines = []
        for label, key in self.ROWS:
            val = getattr(self, key)
            shown = f"{round(val):,}" if isinstance(val, float) else f"{val:,}"
            lines.append(f"{label + ':':<{width + 1}} {shown:>12}")
        return "\n".join(lines)


def compute_stats(graphs: Iterable[SceneGraph]) -> StatsReport:
    """Totals and type counts over stored (pre-augmentation) edges."""
    n_graphs = n_nodes = n_edges = 0
    names: set[str] = set()
    relations: set[str] = set()
    attributes: set[str] = set()
    for g in graphs:
        n_graphs += 1
        n_nodes += g.num_nodes
        for n in g.nodes:
            names.add(n.name)
            attributes.update(n.attributes)
        for e in g.edges:
            if e.synthetic_reverse:
                continue
            n_edges += 1
            relations.add(e.relation)
    avg_n = n_nodes / n_graphs if n_graphs else 0.0
    avg_e = n_edges / n_graphs if n_graphs else 0.0
    return StatsReport(n_graphs, n_nodes, n_edges, avg_n, avg_e, len(names), len(relations), len(attributes))


# --------------------------------------------------------------------------
# featurisation tokens and batching


@dataclass(frozen=True)
class GraphTokens:
    """Token ids needed to embed one (augmented, self-looped) graph.

    Each ``*_ids`` array is paired with a ``*_seg`` array naming the node
    (or edge) the token belongs to; mean pooling runs over those segments.
    """

    num_nodes: int
    src: np.ndarray
    dst: np.ndarray
    edge_sign: np.ndarray
    name_ids: np.ndarray
    name_seg: np.ndarray
    attr_ids: np.ndarray
    attr_seg: np.ndarray
    rel_ids: np.ndarray
    rel_seg: np.ndarray

    @property
    def num_edges(self) -> int:
        return int(self.src.shape[0])


def graph_tokens(g: SceneGraph, vocab: Vocabulary, self_loops: bool = True) -> GraphTokens:
    """Token ids for ``g``; self-loop edges (relation ``<self>``) are appended last."""
    enc = vocab.word_to_id
    name_ids, name_seg, attr_ids, attr_seg = [], [], [], []
    for k, n in enumerate(g.nodes):
        toks = [enc.get(t, UNK) for t in tokenize(n.name)] or [UNK]
        name_ids += toks
        name_seg += [k] * len(toks)
        for a in n.attributes:
            toks = [enc.get(t, UNK) for t in tokenize(a)]
            attr_ids += toks
            attr_seg += [k] * len(toks)
    src, dst, sign, rel_ids, rel_seg = [], [], [], [], []
    for e_no, e in enumerate(g.edges):
        src.append(e.src)
        dst.append(e.dst)
        sign.append(-1.0 if e.synthetic_reverse else 1.0)
        toks = [enc.get(t, UNK) for t in tokenize(e.relation)] or [UNK]
        rel_ids += toks
        rel_seg += [e_no] * len(toks)
    if self_loops:
        base = len(g.edges)
        for k in range(g.num_nodes):
            src.append(k)
            dst.append(k)
            sign.append(1.0)
            rel_ids.append(SELF_LOOP)
            rel_seg.append(base + k)
    as_int = lambda xs: np.asarray(xs, dtype=np.int64)  # noqa: E731
    return GraphTokens(
        g.num_nodes, as_int(src), as_int(dst), np.asarray(sign, dtype=np.float64),
        as_int(name_ids), as_int(name_seg), as_int(attr_ids), as_int(attr_seg),
        as_int(rel_ids), as_int(rel_seg),
    )


@dataclass(frozen=True)
class GraphBatch:
    """Disjoint union of several graphs.

    Node ids of graph ``b`` occupy ``node_offsets[b] : node_offsets[b+1]``;
    ``node_graph`` maps every node to its graph, ``edge_graph`` every edge.
    """

    tokens: GraphTokens
    node_offsets: np.ndarray
    edge_offsets: np.ndarray
    node_graph: np.ndarray
    edge_graph: np.ndarray

    @property
    def num_graphs(self) -> int:
        return int(self.node_offsets.shape[0] - 1)

    @property
    def node_counts(self) -> np.ndarray:
        return np.diff(self.node_offsets)

    @property
    def edge_counts(self) -> np.ndarray:
        return np.diff(self.edge_offsets)


def batch_graphs(parts: Sequence[GraphTokens]) -> GraphBatch:
    """Stack per-graph token bundles into one disjoint-union graph."""
    if not parts:
        raise DataError("cannot batch an empty list of graphs")
    n_counts = np.array([p.num_nodes for p in parts], dtype=np.int64)
    e_counts = np.array([p.num_edges for p in parts], dtype=np.int64)
    n_off = np.concatenate([[0], np.cumsum(n_counts)])
    e_off = np.concatenate([[0], np.cumsum(e_counts)])
    cat = lambda xs: np.concatenate(xs) if xs else np.zeros(0, dtype=np.int64)  # noqa: E731
    tokens = GraphTokens(
        num_nodes=int(n_off[-1]),
        src=cat([p.src + n_off[b] for b, p in enumerate(parts)]),
        dst=cat([p.dst + n_off[b] for b, p in enumerate(parts)]),
        edge_sign=np.concatenate([p.edge_sign for p in parts]),
        name_ids=cat([p.name_ids for p in parts]),
        name_seg=cat([p.name_seg + n_off[b] for b, p in enumerate(parts)]),
        attr_ids=cat([p.attr_ids for p in parts]),
        attr_seg=cat([p.attr_seg + n_off[b] for b, p in enumerate(parts)]),
        rel_ids=cat([p.rel_ids for p in parts]),
        rel_seg=cat([p.rel_seg + e_off[b] for b, p in enumerate(parts)]),
    )
    b_ids = np.arange(len(parts), dtype=np.int64)
    return GraphBatch(tokens, n_off, e_off, np.repeat(b_ids, n_counts), np.repeat(b_ids, e_counts))


def pad_questions(token_lists: Sequence[Sequence[int]], max_len: int | None = None) -> np.ndarray:
    """Right-pad token id lists with PAD into a ``[B, Q]`` int array."""
    if any(len(t) == 0 for t in token_lists):
        raise DataError("cannot encode an empty question")
    width = max(len(t) for t in token_lists)
    if max_len is not None:
        width = min(width, max_len)
    out = np.full((len(token_lists), width), PAD, dtype=np.int64)
    for b, toks in enumerate(token_lists):
        toks = list(toks)[:width]
        out[b, : len(toks)] = toks
    return out
