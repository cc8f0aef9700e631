"""Acceptance suite: one criterion per ``@pytest.mark.criterion`` name.

A summary with one PASS/FAIL/SKIP line per criterion is printed at the end
of the run (see ``conftest.py``). The synthetic end-to-end criterion trains
two models and dominates the runtime (a few minutes on one CPU core).

Set ``SGQA_GQA_VAL_GRAPHS`` to the GQA validation scene-graph JSON to enable
the full-size statistics check.
"""

import os
import time

import numpy as np
import pytest

from sgqa.autodiff import Value, grad_check
from sgqa.config import TrainConfig
from sgqa.data import (
    Edge,
    Node,
    SceneGraph,
    augment_symmetric_edges,
    build_vocabulary,
    compute_stats,
    graph_tokens,
    parse_scene_graphs,
)
from sgqa.model import SceneGraphQA
from sgqa.reasoning import contextual_encode, gat_layer, gcn_layer, gine_layer, init_graph_features, lcgn_step
from sgqa.synthetic import generate_corpus
from sgqa.training import (
    Dataset,
    build_report,
    checkpoint_load,
    checkpoint_save,
    evaluate,
    lr_at_epoch,
    train,
)

from helpers import FIXTURES, permute_scene, random_scene, tiny_config, tiny_vocab, tokens_of
from test_reasoning import (
    conditioned,
    make_inputs,
    oracle_contextual,
    oracle_gat,
    oracle_gcn,
    oracle_gine,
    oracle_lcgn,
)
from test_training import load_eval_fixture

FAMILIES = ("gcn", "gine", "gat", "lcgn")
QUESTION = "what is the color of the ball left of the girl"


def detail(record_property, text):
    record_property("detail", text)


def model_for(family, seed=0, **kw):
    cfg = tiny_config(family=family, dropout=0.0, seed=seed, **kw)
    return SceneGraphQA(cfg, tiny_vocab())


def example(model, g, text=QUESTION):
    return model.vocab.encode(text), tokens_of(g, model.vocab)


# --------------------------------------------------------------------------
# gradient suite

GRADIENT_CASES = {
    "contextual encoder": ("gat", {}, ("graph/enc/",)),
    "GCN": ("gcn", {}, ("step0/gcn/", "step2/gcn/")),
    "GINE depth 1": ("gine", {"gine_theta_depth": 1}, ("step0/gine/", "step2/gine/")),
    "GINE depth 2": ("gine", {"gine_theta_depth": 2}, ("step0/gine/", "step2/gine/")),
    "GAT 4 heads": ("gat", {"gat_heads": 4}, ("step0/gat/", "step2/gat/")),
    "LCGN step": ("lcgn", {}, ("lcgn/",)),
    "seq2seq encoder layer": ("gat", {}, ("lang/enc0/",)),
    "answer head": ("gat", {}, ("answer/",)),
}


@pytest.mark.criterion("gradient suite")
@pytest.mark.parametrize("component", list(GRADIENT_CASES))
def test_gradient_suite(component, record_property):
    family, kw, prefixes = GRADIENT_CASES[component]
    model = model_for(family, seed=11, **kw)
    rng = np.random.default_rng(5)
    g = random_scene(rng, 5, 6)
    if kw.get("gine_theta_depth") == 2:
        for name, buf in model.params.buffers.items():
            buf[...] = rng.uniform(0.5, 2.0, size=buf.shape) if name.endswith("var") else rng.normal(size=buf.shape)
    examples = [example(model, g), example(model, g, "is there a red ball")]
    gold = np.array([model.vocab.answer_id("red"), model.vocab.answer_id("yes")])
    chosen = [v for k, v in model.params.items() if k.startswith(prefixes)]
    assert chosen
    start = time.perf_counter()
    err = grad_check(lambda: model.loss(examples, gold, train=False)[0], chosen,
                     epsilon=1e-5, max_entries=12, rng=np.random.default_rng(0))
    detail(record_property, f"{component}: {err:.1e} in {time.perf_counter() - start:.1f}s")
    assert err < 1e-4


# --------------------------------------------------------------------------
# attention normalisation


@pytest.mark.criterion("attention normalisation")
@pytest.mark.parametrize("family", ["gat", "lcgn"])
def test_attention_normalisation(family, record_property):
    model = model_for(family, seed=3)
    rng = np.random.default_rng(17)
    worst, singles = 0.0, 0
    for trial in range(100):
        n = int(rng.integers(1, 8))
        g = random_scene(rng, n, int(rng.integers(0, 2 * n + 1)), f"g{trial}")
        result = model.forward([example(model, g)])
        dst = result.topology.dst
        counts = np.bincount(dst, minlength=result.topology.num_nodes)
        for step in result.trace.steps:
            att = step.attention.reshape(len(dst), -1)
            sums = np.zeros((result.topology.num_nodes, att.shape[1]))
            np.add.at(sums, dst, att)
            worst = max(worst, float(np.abs(sums[counts > 0] - 1.0).max()))
            lone = counts[dst] == 1
            assert np.all(att[lone] == 1.0)
            singles += int(lone.sum())
    detail(record_property, f"{family}: max |sum-1| {worst:.1e}, {singles} singleton weights exactly 1")
    assert worst <= 1e-9
    assert singles > 0


# --------------------------------------------------------------------------
# equivariance / invariance


@pytest.mark.criterion("equivariance and invariance")
@pytest.mark.parametrize("family", FAMILIES)
def test_permutation_equivariance(family, record_property):
    model = model_for(family, seed=4)
    rng = np.random.default_rng(23)
    drift_h = drift_logits = 0.0
    for trial in range(20):
        n = int(rng.integers(2, 7))
        g = random_scene(rng, n, int(rng.integers(1, 2 * n + 1)))
        perm = rng.permutation(n)
        base = model.forward([example(model, g)])
        moved = model.forward([example(model, permute_scene(g, perm))])
        drift_h = max(drift_h, float(np.abs(moved.node_states.data[perm] - base.node_states.data).max()))
        drift_logits = max(drift_logits, float(np.abs(moved.logits.data - base.logits.data).max()))
    detail(record_property, f"{family}: h drift {drift_h:.1e}, logit drift {drift_logits:.1e}")
    assert drift_h <= 1e-12 and drift_logits <= 1e-12


@pytest.mark.criterion("equivariance and invariance")
@pytest.mark.parametrize("family", FAMILIES)
def test_component_independence(family):
    model = model_for(family, seed=6)
    rng = np.random.default_rng(29)
    a = random_scene(rng, 3, 3)
    others = [random_scene(rng, 4, 5), random_scene(rng, 2, 1), SceneGraph("x", (Node("dog", ("tall",)),), ())]
    states = []
    for b in others:
        shift = a.num_nodes
        edges = a.edges + tuple(Edge(e.src + shift, e.dst + shift, e.relation) for e in b.edges)
        joint = SceneGraph("ab", a.nodes + b.nodes, edges)
        states.append(model.forward([example(model, joint)]).node_states.data[: a.num_nodes])
    for s in states[1:]:
        np.testing.assert_array_equal(s, states[0])


# --------------------------------------------------------------------------
# oracle equivalence


@pytest.mark.criterion("oracle equivalence")
@pytest.mark.parametrize("family", FAMILIES)
def test_batched_equals_per_graph(family, record_property):
    model = model_for(family, seed=8)
    rng = np.random.default_rng(31)
    scenes = [random_scene(rng, n, m, f"g{k}") for k, (n, m) in enumerate([(4, 4), (1, 0), (5, 7), (3, 2)])]
    texts = [QUESTION, "is there a red ball", "what is the color of the tree", "is the girl near a dog"]
    batch = model.forward([example(model, g, t) for g, t in zip(scenes, texts)])
    worst = 0.0
    for k, (g, t) in enumerate(zip(scenes, texts)):
        single = model.forward([example(model, g, t)])
        lo, hi = batch.node_offsets[k], batch.node_offsets[k] + g.num_nodes
        worst = max(worst, float(np.abs(batch.node_states.data[lo:hi] - single.node_states.data).max()),
                    float(np.abs(batch.logits.data[k] - single.logits.data[0]).max()))
    detail(record_property, f"{family} batched vs single: {worst:.1e}")
    assert worst <= 1e-12


@pytest.mark.criterion("oracle equivalence")
@pytest.mark.parametrize("layer", ["contextual", "gcn", "gine1", "gine2", "gat", "lcgn"])
def test_layer_matches_loop_oracle(layer):
    tol = 1e-12
    family = layer.rstrip("12").replace("contextual", "gat")
    kw = {"gine_theta_depth": int(layer[-1])} if layer.startswith("gine") else {}
    cfg, topo, params, _, x_hat, e, rng = make_inputs(family, seed=41, n=4, m=5, **kw)
    if layer == "contextual":
        got = contextual_encode(x_hat, e, topo, params).data
        want = oracle_contextual(x_hat.data, e.data, topo, params)
    elif layer == "lcgn":
        x = contextual_encode(x_hat, e, topo, params)
        x_ctx = Value(rng.normal(size=(topo.num_nodes, cfg.hidden_dim)))
        c = Value(rng.normal(size=(1, cfg.hidden_dim)))
        out, w = lcgn_step(x, x_ctx, c, topo, params)
        want, want_w = oracle_lcgn(x.data, x_ctx.data, c.data, topo, params)
        np.testing.assert_allclose(w.data, want_w, rtol=0, atol=tol)
        got = out.data
    else:
        prefix = f"step0/{family}"
        h_hat, e_hat = conditioned(cfg, x_hat, e, topo, params, rng)
        if family == "gcn":
            got = gcn_layer(h_hat, topo, params, prefix).data
            want = oracle_gcn(h_hat.data, topo, params, prefix)
        elif family == "gine":
            params[f"{prefix}/eps"].data[...] = -0.4
            got = gine_layer(h_hat, e_hat, topo, params, prefix, cfg.gine_theta_depth).data
            want = oracle_gine(h_hat.data, e_hat.data, topo, params, prefix, cfg.gine_theta_depth)
        else:
            out, alpha = gat_layer(h_hat, e_hat, topo, params, prefix, cfg.gat_heads)
            want, want_alpha = oracle_gat(h_hat.data, e_hat.data, topo, params, prefix, cfg.gat_heads)
            np.testing.assert_allclose(alpha.data, want_alpha, rtol=0, atol=tol)
            got = out.data
    np.testing.assert_allclose(got, want, rtol=0, atol=tol)


# --------------------------------------------------------------------------
# preprocessing


@pytest.mark.criterion("preprocessing")
def test_augmentation_rules(record_property):
    rng = np.random.default_rng(37)
    vocab = tiny_vocab()
    table = Value(rng.normal(size=(len(vocab.words), 5)))
    scenes = list(parse_scene_graphs(FIXTURES / "three_graphs.json").values())
    scenes += [random_scene(rng, int(rng.integers(1, 7)), int(rng.integers(0, 12)), f"r{k}") for k in range(50)]
    reverses = 0
    for g in scenes:
        once = augment_symmetric_edges(g)
        pairs = {(e.src, e.dst) for e in once.edges}
        assert all((j, i) in pairs for i, j in pairs)
        assert augment_symmetric_edges(once) == once
        assert once.edges[: g.num_edges] == g.edges
        if g.graph_id.startswith("img"):
            continue
        _, e = init_graph_features(graph_tokens(once, vocab, self_loops=False), table)
        for k, edge in enumerate(once.edges[g.num_edges:], start=g.num_edges):
            origin = next(i for i, o in enumerate(g.edges) if (o.src, o.dst) == (edge.dst, edge.src))
            np.testing.assert_array_equal(e.data[k], -e.data[origin])
            reverses += 1
    detail(record_property, f"{len(scenes)} graphs, {reverses} negated reverse edges")


@pytest.mark.criterion("preprocessing")
def test_fixture_statistics(record_property):
    s = compute_stats(parse_scene_graphs(FIXTURES / "three_graphs.json").values())
    got = (s.num_graphs, s.num_nodes, s.num_edges, s.node_types, s.edge_types, s.attribute_types)
    detail(record_property, f"fixture counts {got}")
    assert got == (3, 9, 8, 8, 7, 7)
    assert s.avg_nodes == 3.0 and s.avg_edges == pytest.approx(8 / 3, abs=0)


@pytest.mark.criterion("preprocessing")
def test_gqa_validation_statistics(record_property):
    path = os.environ.get("SGQA_GQA_VAL_GRAPHS")
    if not path:
        pytest.skip("SGQA_GQA_VAL_GRAPHS not set")
    s = compute_stats(parse_scene_graphs(path).values())
    got = (s.num_graphs, s.num_nodes, s.num_edges, round(s.avg_nodes), round(s.avg_edges),
           s.node_types, s.edge_types, s.attribute_types)
    detail(record_property, f"GQA val {got}")
    assert got == (10_696, 174_331, 534_889, 16, 50, 1_536, 295, 603)


# --------------------------------------------------------------------------
# synthetic end-to-end

SYNTH = dict(hidden_dim=64, embed_dim=64, instruction_dim=64, ffn_dim=128, answer_hidden=128,
             lr=1e-3, batch_size=16, epochs=50, seed=0)


@pytest.fixture(scope="module")
def synthetic_runs():
    graphs, questions = generate_corpus(200, 3, seed=0)
    eval_graphs, eval_questions = generate_corpus(200, 12, seed=0)
    assert eval_graphs == graphs
    train_ids = set(sorted(graphs)[:160])
    train_q = [q for q in questions if q.graph_id in train_ids]
    held_out = [q for q in eval_questions if q.graph_id not in train_ids and q.semantic_type == "relation"]
    vocab = build_vocabulary(graphs.values(), questions)
    runs = {}
    for family in ("gat", "gcn"):
        start = time.perf_counter()
        result = train(TrainConfig(family=family, **SYNTH), Dataset(graphs, train_q), vocab)
        seconds = time.perf_counter() - start
        held = evaluate(result.model, Dataset(graphs, held_out)).report
        runs[family] = {"history": result.history, "seconds": seconds, "relation_acc": held.accuracy,
                        "n_held_out": held.overall.count}
    return runs


@pytest.mark.criterion("synthetic end-to-end")
def test_gat_fits_training_set(synthetic_runs, record_property):
    run = synthetic_runs["gat"]
    accs = [h["train_acc"] for h in run["history"]]
    first = next((k + 1 for k, a in enumerate(accs) if a >= 0.95), None)
    detail(record_property, f"GAT train acc {max(accs):.3f}, >=0.95 first at epoch {first}, {run['seconds']:.0f}s")
    assert len(accs) <= 50 and first is not None
    assert run["seconds"] < 600


@pytest.mark.criterion("synthetic end-to-end")
def test_gat_not_below_gcn_on_held_out_relations(synthetic_runs, record_property):
    gat, gcn = synthetic_runs["gat"], synthetic_runs["gcn"]
    detail(record_property, f"held-out relation acc GAT {gat['relation_acc']:.3f} vs GCN {gcn['relation_acc']:.3f} "
                            f"on {gat['n_held_out']} questions")
    assert gat["relation_acc"] >= gcn["relation_acc"]


# --------------------------------------------------------------------------
# schedule / determinism


@pytest.mark.criterion("schedule and determinism")
def test_schedule_points():
    cfg = TrainConfig(lr=1e-4)
    got = [lr_at_epoch(e, cfg) for e in (0, 89, 90, 180)]
    np.testing.assert_allclose(got, [1e-4, 1e-4, 1e-5, 1e-6], rtol=1e-12)


def small_corpus():
    graphs, questions = generate_corpus(12, 3, seed=2)
    return graphs, questions, build_vocabulary(graphs.values(), questions)


@pytest.mark.criterion("schedule and determinism")
def test_seeded_runs_bit_identical():
    graphs, questions, vocab = small_corpus()
    cfg = tiny_config(epochs=2, batch_size=8, lr=1e-3, seed=9)
    a = train(cfg, Dataset(graphs, questions), vocab)
    b = train(cfg, Dataset(graphs, questions), vocab)
    for (ka, va), (kb, vb) in zip(a.model.params.items(), b.model.params.items()):
        assert ka == kb
        np.testing.assert_array_equal(va.data, vb.data)
    strip = lambda h: [{k: v for k, v in e.items() if k != "wall_time"} for e in h]  # noqa: E731
    assert strip(a.history) == strip(b.history)


@pytest.mark.criterion("schedule and determinism")
def test_checkpoint_round_trip(tmp_path):
    graphs, questions, vocab = small_corpus()
    result = train(tiny_config(epochs=1, batch_size=8, family="gine", gine_theta_depth=2), Dataset(graphs, questions), vocab)
    path = tmp_path / "m.sgqa"
    checkpoint_save(path, result.model, 0, result.optimizer)
    loaded, meta, _ = checkpoint_load(path)
    assert meta["epoch"] == 0 and loaded.cfg == result.model.cfg
    for (ka, va), (kb, vb) in zip(result.model.params.items(), loaded.params.items()):
        assert ka == kb
        np.testing.assert_array_equal(va.data, vb.data)
    for name, buf in result.model.params.buffers.items():
        np.testing.assert_array_equal(loaded.params.buffers[name], buf)
    ds = Dataset(graphs, questions)
    ex, _ = ds.examples(vocab, max_len=loaded.cfg.max_len)
    np.testing.assert_array_equal(loaded.forward(ex).logits.data, result.model.forward(ex).logits.data)


# --------------------------------------------------------------------------
# report plumbing


@pytest.mark.criterion("report plumbing")
def test_hand_tally(record_property):
    qs, preds = load_eval_fixture()
    r = build_report(qs, preds)
    assert (r.overall.correct, r.overall.count) == (13, 20)
    assert (r.binary.correct, r.binary.count) == (7, 10)
    assert (r.open.correct, r.open.count) == (6, 10)
    assert {k: (b.correct, b.count) for k, b in r.by_semantic.items()} == {
        "object": (1, 2), "attribute": (4, 7), "relation": (6, 7), "category": (1, 2), "global": (1, 2)}
    assert {k: (b.correct, b.count) for k, b in r.by_word_count.items()} == {
        4: (2, 4), 5: (3, 5), 6: (5, 6), 7: (2, 2), 8: (1, 3)}
    detail(record_property, "overall 13/20, binary 7/10, open 6/10")


@pytest.mark.criterion("report plumbing")
def test_evaluate_uses_same_tally():
    graphs, questions, vocab = small_corpus()
    model = SceneGraphQA(tiny_config(), vocab)
    result = evaluate(model, Dataset(graphs, questions))
    again = build_report(questions, [p["predicted"] for p in result.predictions])
    assert result.report.to_json() == again.to_json()
    assert sum(p["correct"] for p in result.predictions) == result.report.overall.correct
