"""Optimisation, checkpointing and evaluation."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .answer import AnswerDistribution
from .config import TrainConfig
from .data import (
    PAD,
    DataError,
    GraphTokens,
    QuestionRecord,
    SceneGraph,
    Vocabulary,
    augment_symmetric_edges,
    graph_tokens,
)
from .model import SceneGraphQA
from .params import CheckpointError, load_arrays, rng_for, save_arrays

logger = logging.getLogger(__name__)

BINARY_TYPES = frozenset({"verify", "logical", "choose", "compare"})
SEMANTIC_TYPES = ("object", "attribute", "relation", "category", "global")


class NumericError(FloatingPointError):
    """A non-finite value appeared during optimisation."""


# --------------------------------------------------------------------------
# datasets


class Dataset:
    """Questions over augmented scene graphs, with per-graph token caches."""

    def __init__(self, graphs: dict[str, SceneGraph], questions: Sequence[QuestionRecord], augment: bool = True):
        self.graphs = {gid: augment_symmetric_edges(g) if augment else g for gid, g in graphs.items()}
        self.questions = list(questions)
        self._tokens: dict[tuple[int, str], GraphTokens] = {}

    def __len__(self) -> int:
        return len(self.questions)

    def check(self, vocab: Vocabulary, require_known_answers: bool) -> None:
        for q in self.questions:
            if q.graph_id not in self.graphs:
                raise DataError(f"question {q.question_id}: unknown graph id {q.graph_id!r}")
            if require_known_answers and vocab.answer_id(q.answer) < 0:
                raise DataError(f"question {q.question_id}: answer {q.answer!r} is not in the answer vocabulary")

    def tokens_for(self, graph_id: str, vocab: Vocabulary) -> GraphTokens:
        key = (id(vocab), graph_id)
        if key not in self._tokens:
            self._tokens[key] = graph_tokens(self.graphs[graph_id], vocab)
        return self._tokens[key]

    def examples(self, vocab: Vocabulary, indices: Iterable[int] | None = None, max_len: int | None = None):
        picked = range(len(self.questions)) if indices is None else indices
        out, gold = [], []
        for k in picked:
            q = self.questions[k]
            ids = vocab.encode(q.text) or [PAD + 1]
            if max_len is not None:
                ids = ids[:max_len]
            out.append((ids, self.tokens_for(q.graph_id, vocab)))
            gold.append(vocab.answer_id(q.answer))
        return out, np.asarray(gold, dtype=np.int64)


# --------------------------------------------------------------------------
# optimiser and schedule


def lr_at_epoch(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return cfg.lr / cfg.lr_drop_factor ** (epoch // cfg.lr_drop_epoch)


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: OrderedDict[str, np.ndarray] = OrderedDict()
        self.v: OrderedDict[str, np.ndarray] = OrderedDict()

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray | None], lr: float) -> None:
        """Update ``params`` in place. Parameters without a gradient see a zero gradient."""
        check_finite(grads)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for path, p in params.items():
            g = grads.get(path)
            if g is None:
                g = np.zeros_like(p)
            m = self.m.setdefault(path, np.zeros_like(p))
            v = self.v.setdefault(path, np.zeros_like(p))
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> OrderedDict[str, np.ndarray]:
        out: OrderedDict[str, np.ndarray] = OrderedDict()
        for k in self.m:
            out["m/" + k] = self.m[k]
            out["v/" + k] = self.v[k]
        out["t"] = np.array([float(self.t)])
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["t"][0])
        self.m = OrderedDict((k[2:], a.copy()) for k, a in arrays.items() if k.startswith("m/"))
        self.v = OrderedDict((k[2:], a.copy()) for k, a in arrays.items() if k.startswith("v/"))


def check_finite(grads: dict[str, np.ndarray | None]) -> None:
    for path, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {path}")


def clip_global_norm(grads: dict[str, np.ndarray | None], max_norm: float) -> float:
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values() if g is not None)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            if g is not None:
                g *= scale
    return total


# --------------------------------------------------------------------------
# checkpoints


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def checkpoint_save(path: str | Path, model: SceneGraphQA, epoch: int, optimizer: Adam | None = None) -> None:
    path = Path(path)
    save_arrays(path, model.params.arrays())
    meta = {
        "config": model.cfg.to_json(),
        "vocab_hash": model.vocab.digest(),
        "epoch": epoch,
        "vocab": model.vocab.to_json(),
    }
    _sidecar(path).write_text(json.dumps(meta, indent=1, sort_keys=True))
    if optimizer is not None:
        save_arrays(path.with_name(path.name + ".adam"), optimizer.state_arrays())


def checkpoint_load(path: str | Path, family: str | None = None) -> tuple[SceneGraphQA, dict, Adam | None]:
    """Rebuild the model saved at ``path``; ``family`` (if given) must match."""
    path = Path(path)
    arrays = load_arrays(path)
    try:
        meta = json.loads(_sidecar(path).read_text())
    except FileNotFoundError:
        raise CheckpointError(f"{path}: missing sidecar {_sidecar(path).name}") from None
    cfg = TrainConfig.from_json(meta["config"])
    if family is not None and cfg.family != family:
        raise CheckpointError(f"{path}: checkpoint holds a {cfg.family} model, not {family}")
    vocab = Vocabulary.from_json(meta["vocab"])
    if vocab.digest() != meta["vocab_hash"]:
        raise CheckpointError(f"{path}: vocabulary hash mismatch")
    model = SceneGraphQA(cfg, vocab)
    model.params.load_arrays(arrays)
    opt = None
    adam_path = path.with_name(path.name + ".adam")
    if adam_path.exists():
        opt = Adam()
        opt.load_state(load_arrays(adam_path))
    return model, meta, opt


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: SceneGraphQA
    history: list[dict] = field(default_factory=list)
    optimizer: Adam | None = None


def predict(model: SceneGraphQA, dataset: Dataset, batch_size: int | None = None) -> AnswerDistribution:
    bs = batch_size or model.cfg.batch_size
    logits = []
    for start in range(0, len(dataset), bs):
        ex, _ = dataset.examples(model.vocab, range(start, min(start + bs, len(dataset))), model.cfg.max_len)
        logits.append(model.forward(ex, train=False).logits.data)
    if not logits:
        return AnswerDistribution.from_logits(np.zeros((0, len(model.vocab.answers))))
    return AnswerDistribution.from_logits(np.concatenate(logits))


def accuracy(model: SceneGraphQA, dataset: Dataset) -> float:
    if not len(dataset):
        return float("nan")
    dist = predict(model, dataset)
    gold = np.array([model.vocab.answer_id(q.answer) for q in dataset.questions])
    return float(np.mean(dist.predicted_id == gold))


def train_step(model: SceneGraphQA, optimizer: Adam, examples, gold: np.ndarray, lr: float,
               rng: np.random.Generator) -> float:
    model.params.zero_grad()
    loss, _ = model.loss(examples, gold, train=True, rng=rng)
    if not np.isfinite(loss.data):
        raise NumericError("non-finite training loss")
    ad.backward(loss)
    table = model.params["embed/table"]
    if table.grad is not None:
        table.grad[PAD] = 0.0
    grads = {k: v.grad for k, v in model.params.items()}
    check_finite(grads)
    clip_global_norm(grads, model.cfg.clip_norm)
    optimizer.step({k: v.data for k, v in model.params.items()}, grads, lr)
    return float(loss.data)


def train(
    cfg: TrainConfig,
    train_set: Dataset,
    vocab: Vocabulary,
    val_set: Dataset | None = None,
    out_dir: str | Path | None = None,
    embeddings: np.ndarray | None = None,
    resume: str | Path | None = None,
    stop_after_epoch: int | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Minimise mean answer cross-entropy with Adam.

    Each epoch visits the training questions in a seeded order; afterwards
    the checkpoint in ``out_dir`` is overwritten and one JSON line is
    appended to ``train_log.jsonl``. ``stop_after_epoch`` ends the run early
    (used to test resumption).
    """
    train_set.check(vocab, require_known_answers=True)
    if val_set is not None:
        val_set.check(vocab, require_known_answers=False)
    if len(train_set) == 0:
        raise DataError("training set is empty")

    start_epoch = 0
    history: list[dict] = []
    if resume is not None:
        model, meta, optimizer = checkpoint_load(resume, family=cfg.family)
        if model.vocab.digest() != vocab.digest():
            raise CheckpointError("checkpoint vocabulary does not match the dataset vocabulary")
        model.cfg = cfg
        optimizer = optimizer or Adam()
        start_epoch = meta["epoch"] + 1
    else:
        model = SceneGraphQA(cfg, vocab, embeddings)
        optimizer = Adam()

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    n = len(train_set)
    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_at_epoch(epoch, cfg)
        order = rng_for(cfg.seed, f"shuffle/epoch{epoch}").permutation(n)
        losses = []
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            ex, gold = train_set.examples(vocab, idx, cfg.max_len)
            rng = rng_for(cfg.seed, f"dropout/epoch{epoch}/batch{b}")
            losses.append(train_step(model, optimizer, ex, gold, lr, rng) * len(idx))
        entry = {
            "epoch": epoch,
            "loss": float(np.sum(losses) / n),
            "train_acc": accuracy(model, train_set),
            "val_acc": accuracy(model, val_set) if val_set is not None else None,
            "lr": lr,
            "wall_time": time.perf_counter() - t0,
        }
        history.append(entry)
        logger.info("epoch %d loss %.4f train_acc %.3f", epoch, entry["loss"], entry["train_acc"])
        if out is not None:
            checkpoint_save(out / "checkpoint.sgqa", model, epoch, optimizer)
            with open(out / "train_log.jsonl", "a") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        if on_epoch is not None:
            on_epoch(entry)
        if stop_after_epoch is not None and epoch >= stop_after_epoch:
            break
    return TrainResult(model, history, optimizer)


# --------------------------------------------------------------------------
# evaluation


@dataclass
class Bucket:
    correct: int = 0
    count: int = 0

    @property
    def accuracy(self) -> float | None:
        return self.correct / self.count if self.count else None

    def to_json(self) -> dict:
        return {"accuracy": self.accuracy, "count": self.count, "correct": self.correct}


@dataclass
class EvalReport:
    overall: Bucket
    binary: Bucket
    open: Bucket
    by_structural: dict[str, Bucket]
    by_semantic: dict[str, Bucket] | None
    by_word_count: dict[int, Bucket]

    @property
    def accuracy(self) -> float | None:
        return self.overall.accuracy

    def to_json(self) -> dict:
        return {
            "note": "binary = structural type in {verify, logical, choose, compare}; open = all others",
            "accuracy": self.overall.accuracy,
            "binary_accuracy": self.binary.accuracy,
            "open_accuracy": self.open.accuracy,
            "count": self.overall.count,
            "binary_count": self.binary.count,
            "open_count": self.open.count,
            "by_structural": {k: b.to_json() for k, b in self.by_structural.items()},
            "by_semantic": None if self.by_semantic is None else {k: b.to_json() for k, b in self.by_semantic.items()},
            "by_word_count": {str(k): b.to_json() for k, b in self.by_word_count.items()},
        }

    def table_row(self, name: str = "model") -> str:
        def pct(x):
            return "   -  " if x is None else f"{100 * x:6.2f}"

        head = f"{'Method':<16} {'Binary':>7} {'Open':>7} {'Accuracy':>9}"
        row = f"{name:<16} {pct(self.binary.accuracy):>7} {pct(self.open.accuracy):>7} {pct(self.overall.accuracy):>9}"
        return "# binary = verify/logical/choose/compare questions (assumed mapping)\n" + head + "\n" + row

    def breakdown_csv(self, which: str) -> str:
        table = {"semantic": self.by_semantic or {}, "word_count": self.by_word_count,
                 "structural": self.by_structural}[which]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([which, "count", "correct", "accuracy"])
        for key, b in table.items():
            writer.writerow([key, b.count, b.correct, "" if b.accuracy is None else f"{b.accuracy:.6f}"])
        return buf.getvalue()


def word_count(text: str) -> int:
    return len(text.split())


def build_report(questions: Sequence[QuestionRecord], predicted: Sequence[str]) -> EvalReport:
    """Tally exact-match accuracy overall and per breakdown."""
    if len(questions) != len(predicted):
        raise ValueError("questions and predictions differ in length")
    overall, binary, open_ = Bucket(), Bucket(), Bucket()
    structural: dict[str, Bucket] = {}
    semantic: dict[str, Bucket] = {}
    words: dict[int, Bucket] = {}
    for q, p in zip(questions, predicted):
        hit = int(p is not None and p == q.answer)
        buckets = [overall, binary if q.structural_type in BINARY_TYPES else open_,
                   words.setdefault(word_count(q.text), Bucket())]
        if q.structural_type:
            buckets.append(structural.setdefault(q.structural_type, Bucket()))
        if q.semantic_type:
            buckets.append(semantic.setdefault(q.semantic_type, Bucket()))
        for b in buckets:
            b.count += 1
            b.correct += hit
    order = {t: k for k, t in enumerate(SEMANTIC_TYPES)}
    sem = dict(sorted(semantic.items(), key=lambda kv: (order.get(kv[0], len(order)), kv[0]))) or None
    return EvalReport(overall, binary, open_, dict(sorted(structural.items())), sem, dict(sorted(words.items())))


@dataclass
class Evaluation:
    report: EvalReport
    predictions: list[dict]


def evaluate(model: SceneGraphQA, dataset: Dataset, top_k: int = 5) -> Evaluation:
    dataset.check(model.vocab, require_known_answers=False)
    dist = predict(model, dataset)
    answers = model.vocab.answers
    predicted = [answers[k] for k in dist.predicted_id]
    preds = []
    for row, (q, p) in enumerate(zip(dataset.questions, predicted)):
        preds.append({
            "question_id": q.question_id,
            "predicted": p,
            "gold": q.answer,
            "correct": p == q.answer,
            "top5": [{"answer": answers[a], "prob": pr} for a, pr in dist.top_k(row, top_k)],
        })
    return Evaluation(build_report(dataset.questions, predicted), preds)
