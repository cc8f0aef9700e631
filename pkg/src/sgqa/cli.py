"""Command-line entry point: ``sgqa stats|preprocess|train|eval|ask|trace|synth``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path


from .config import AGGREGATES, FAMILIES, ConfigError, TrainConfig
from .data import (
    DataError,
    QuestionRecord,
    Vocabulary,
    augment_symmetric_edges,
    build_vocabulary,
    compute_stats,
    graphs_to_json,
    parse_questions,
    parse_scene_graphs,
    questions_to_json,
)
from .language import load_pretrained_embeddings
from .params import CheckpointError
from .reasoning import ConfigurationError
from .synthetic import generate_corpus
from .training import Dataset, NumericError, checkpoint_load, evaluate, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

logger = logging.getLogger("sgqa")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


# --------------------------------------------------------------------------
# config flags

_HELP = {
    "lr": "base learning rate",
    "batch_size": "questions per optimisation step",
    "epochs": "training epochs",
    "lr_drop_epoch": "divide the learning rate every this many epochs",
    "lr_drop_factor": "learning-rate divisor",
    "clip_norm": "global gradient-norm clip (0 disables)",
    "seed": "seed for initialisation, shuffling and dropout",
    "family": "message-passing family",
    "M": "instruction vectors per question (= reasoning steps)",
    "hidden_dim": "node state width",
    "embed_dim": "word embedding width",
    "instruction_dim": "instruction / question-summary width",
    "gat_heads": "attention heads per GAT layer",
    "gine_theta_depth": "depth of the GINE update network (1 or 2)",
    "layer_residual": "residual connection around each reasoning layer (default: on for gat only)",
    "layer_dropout": "dropout after each reasoning layer (default: on for gat only)",
    "aggregate": "graph readout",
    "answer_hidden": "hidden width of the answer classifier",
    "dropout": "dropout rate",
    "lang_heads": "attention heads in the question transformer",
    "ffn_dim": "feed-forward width in the question transformer",
    "encoder_layers": "question encoder layers",
    "decoder_layers": "instruction decoder layers",
    "max_len": "maximum question length in tokens",
}


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    defaults = TrainConfig()
    group = p.add_argument_group("model and optimisation (override --config)")
    for f in dataclasses.fields(TrainConfig):
        flag = "--" + f.name.lower().replace("_", "-")
        default = getattr(defaults, f.name)
        kind = {"int": int, "float": float, "str": str}.get(type(default).__name__, _bool)
        kw = dict(dest=f"cfg_{f.name}", default=None, type=kind,
                  metavar=None if f.name in ("family", "aggregate") else f.name.upper(),
                  help=f"{_HELP[f.name]} (default: {default})")
        if f.name == "family":
            kw["choices"] = FAMILIES
        if f.name == "aggregate":
            kw["choices"] = AGGREGATES
        group.add_argument(flag, **kw)


def _config_from_args(args) -> TrainConfig:
    base = TrainConfig.load(args.config).to_json() if args.config else TrainConfig().to_json()
    for f in dataclasses.fields(TrainConfig):
        value = getattr(args, f"cfg_{f.name}")
        if value is not None:
            base[f.name] = value
    return TrainConfig.from_json(base)


# --------------------------------------------------------------------------
# commands


def cmd_stats(args) -> int:
    report = compute_stats(parse_scene_graphs(args.graphs).values())
    sys.stdout.write(_dump(report.to_json()) if args.json else report.to_table() + "\n")
    return EXIT_OK


def _augmented_cache(graphs) -> tuple[dict, dict]:
    cache = {}
    counts = {"graphs": 0, "stored_edges": 0, "synthetic_edges": 0, "per_graph": {}}
    for gid, g in graphs.items():
        aug = augment_symmetric_edges(g)
        cache[gid] = {
            "nodes": [{"name": n.name, "attributes": list(n.attributes), "bbox": list(n.bbox)} for n in aug.nodes],
            "edges": [[e.src, e.dst, e.relation, e.synthetic_reverse] for e in aug.edges],
        }
        added = aug.num_edges - g.num_edges
        counts["graphs"] += 1
        counts["stored_edges"] += g.num_edges
        counts["synthetic_edges"] += added
        counts["per_graph"][gid] = added
    return cache, counts


def cmd_preprocess(args) -> int:
    graphs = parse_scene_graphs(args.graphs)
    questions = parse_questions(args.questions)
    vocab = build_vocabulary(graphs.values(), questions)
    cache, counts = _augmented_cache(graphs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "vocab.json").write_text(_dump(vocab.to_json()))
    (out / "graphs_augmented.json").write_text(_dump(cache))
    (out / "augmentation.json").write_text(_dump(counts))
    print(f"{counts['graphs']} graphs, {counts['stored_edges']} stored edges, "
          f"{counts['synthetic_edges']} synthetic reverse edges; vocabulary {len(vocab.words)} words, "
          f"{len(vocab.answers)} answers -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    graphs = parse_scene_graphs(args.graphs)
    questions = parse_questions(args.questions)
    val = parse_questions(args.val_questions) if args.val_questions else None
    if args.vocab:
        vocab = Vocabulary.from_json(json.loads(Path(args.vocab).read_text()))
    else:
        vocab = build_vocabulary(graphs.values(), questions)
    embeddings = None
    if args.embeddings:
        embeddings = load_pretrained_embeddings(args.embeddings, vocab, cfg.embed_dim, cfg.seed).matrix

    def report(entry):
        val_text = "" if entry["val_acc"] is None else f" val_acc {entry['val_acc']:.4f}"
        print(f"epoch {entry['epoch']:3d} loss {entry['loss']:.4f} train_acc {entry['train_acc']:.4f}"
              f"{val_text} lr {entry['lr']:.2e}", flush=True)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(_dump(cfg.to_json()))
    train(cfg, Dataset(graphs, questions), vocab, Dataset(graphs, val) if val is not None else None,
          out_dir=out, embeddings=embeddings, resume=args.resume, on_epoch=report)
    print(f"checkpoint: {out / 'checkpoint.sgqa'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _, _ = checkpoint_load(args.checkpoint)
    graphs = parse_scene_graphs(args.graphs)
    questions = parse_questions(args.questions)
    result = evaluate(model, Dataset(graphs, questions))
    report = result.report
    if args.json:
        sys.stdout.write(_dump(report.to_json()))
    else:
        print(report.table_row(args.name or model.cfg.family.upper()))
    if args.csv_dir:
        d = Path(args.csv_dir)
        d.mkdir(parents=True, exist_ok=True)
        for which in ("semantic", "word_count", "structural"):
            (d / f"breakdown_{which}.csv").write_text(report.breakdown_csv(which))
    if args.predictions:
        Path(args.predictions).write_text(_dump(result.predictions))
    return EXIT_OK


def _single_question(args):
    model, _, _ = checkpoint_load(args.checkpoint)
    graphs = parse_scene_graphs(args.graphs)
    if args.graph_id not in graphs:
        raise DataError(f"unknown graph id {args.graph_id!r}")
    q = QuestionRecord("ask", args.graph_id, args.question, "")
    if not model.vocab.encode(args.question):
        raise UsageError("the question contains no tokens")
    ds = Dataset({args.graph_id: graphs[args.graph_id]}, [q])
    ex, _ = ds.examples(model.vocab, max_len=model.cfg.max_len)
    return model, model.forward(ex, train=False)


def _answer_doc(model, result) -> dict:
    from .answer import AnswerDistribution

    dist = AnswerDistribution.from_logits(result.logits.data)
    answers = model.vocab.answers
    return {
        "answer": answers[int(dist.predicted_id[0])],
        "top5": [{"answer": answers[a], "prob": p} for a, p in dist.top_k(0, 5)],
    }


def cmd_ask(args) -> int:
    model, result = _single_question(args)
    doc = _answer_doc(model, result)
    if args.json:
        sys.stdout.write(_dump(doc))
    else:
        print(f"answer: {doc['answer']}")
        for row in doc["top5"]:
            print(f"  {row['answer']:<20} {row['prob']:.4f}")
    return EXIT_OK


def cmd_trace(args) -> int:
    model, result = _single_question(args)
    doc = result.trace.to_json(result.topology)
    doc.update(_answer_doc(model, result))
    doc["family"] = model.cfg.family
    text = _dump(doc)
    if args.out:
        Path(args.out).write_text(text)
        print(f"{len(doc['steps'])} steps -> {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_synth(args) -> int:
    graphs, questions = generate_corpus(args.num_graphs, args.questions_per_graph, seed=args.seed)
    ids = sorted(graphs)
    cut = int(round(len(ids) * (1.0 - args.holdout)))
    train_ids = set(ids[:cut])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "scene_graphs.json").write_text(_dump(graphs_to_json(graphs)))
    (out / "train_questions.json").write_text(_dump(questions_to_json(q for q in questions if q.graph_id in train_ids)))
    (out / "val_questions.json").write_text(_dump(questions_to_json(q for q in questions if q.graph_id not in train_ids)))
    print(f"{len(graphs)} graphs, {len(questions)} questions ({len(train_ids)} training graphs) -> {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="sgqa", description="Scene-graph question answering with instruction-conditioned GNNs.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("stats", help="scene-graph statistics table", formatter_class=fmt)
    s.add_argument("--graphs", required=True, help="GQA scene-graph JSON")
    s.add_argument("--json", action="store_true", help="emit JSON instead of a table")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("preprocess", help="vocabulary and augmented-graph cache", formatter_class=fmt)
    s.add_argument("--graphs", required=True, help="GQA scene-graph JSON")
    s.add_argument("--questions", required=True, help="GQA question JSON")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", help="train a model", formatter_class=argparse.RawDescriptionHelpFormatter)
    s.add_argument("--config", help="JSON config file; flags override its values")
    s.add_argument("--graphs", required=True, help="GQA scene-graph JSON")
    s.add_argument("--questions", required=True, help="training questions")
    s.add_argument("--val-questions", help="validation questions (reported per epoch)")
    s.add_argument("--vocab", help="vocabulary JSON from `preprocess` (default: built from the inputs)")
    s.add_argument("--embeddings", help="GloVe-format text vectors (default: random initialisation)")
    s.add_argument("--out", required=True, help="output directory for checkpoint and log")
    s.add_argument("--resume", help="checkpoint to continue from")
    _add_config_flags(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="accuracy report for a checkpoint", formatter_class=fmt)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--graphs", required=True)
    s.add_argument("--questions", required=True)
    s.add_argument("--json", action="store_true", help="emit the full report as JSON")
    s.add_argument("--csv-dir", help="write per-breakdown CSV files here")
    s.add_argument("--predictions", help="write per-question predictions JSON here")
    s.add_argument("--name", help="row label in the table (default: family name)")
    s.set_defaults(func=cmd_eval)

    for name, func, helptext in (("ask", cmd_ask, "answer one question"),
                                 ("trace", cmd_trace, "per-step reasoning trace for one question")):
        s = sub.add_parser(name, help=helptext, formatter_class=fmt)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--graphs", required=True)
        s.add_argument("--graph-id", required=True)
        s.add_argument("--question", required=True)
        if name == "ask":
            s.add_argument("--json", action="store_true", help="emit JSON")
        else:
            s.add_argument("--out", help="write the trace JSON here (default: stdout)")
        s.set_defaults(func=func)

    s = sub.add_parser("synth", help="generate the toy grid-of-shapes corpus", formatter_class=fmt)
    s.add_argument("--out", required=True)
    s.add_argument("--num-graphs", type=int, default=200)
    s.add_argument("--questions-per-graph", type=int, default=3)
    s.add_argument("--holdout", type=float, default=0.2, help="fraction of graphs held out for validation")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, ConfigurationError) as exc:
        print(f"sgqa: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"sgqa: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, FileNotFoundError, IsADirectoryError, ValueError) as exc:
        print(f"sgqa: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
