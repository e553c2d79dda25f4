import json

import numpy as np
import pytest

from scr.errors import ContractViolation, EmptyEvaluation
from scr.evaluation import (classification_metrics, compute_rank, evaluate_classification,
                            evaluate_link_prediction, filter_graph, format_table,
                            link_prediction_queries, null_mrr, predict_classes, ranking_metrics,
                            write_metrics)
from scr.kg import KnowledgeGraph, Query, augment_graph, ontology_features
from scr.model import init_params, prepare_graph
from scr.oracles import metrics_oracle, rank_oracle
from scr.synthetic import random_kg, two_cluster_graph
from scr.tasks import transform_node_task


def test_rank_examples():
    assert compute_rank(0, [0.9, 0.8, 0.95]) == 2
    assert compute_rank(4, np.zeros(10)) == 1
    assert compute_rank(0, [0.9, 0.8, 0.95], filter=[2]) == 1
    with pytest.raises(ContractViolation):
        compute_rank(0, [0.9, 0.8], filter=[0])


def test_metric_examples():
    m = ranking_metrics([1, 2, 4])
    assert m["mrr"] == pytest.approx(0.5833, abs=1e-4)
    assert m["hits@3"] == pytest.approx(0.6667, abs=1e-4)
    assert ranking_metrics([1, 1, 1]) == {"mrr": 1.0, "hits@1": 1.0, "hits@3": 1.0, "hits@10": 1.0}
    with pytest.raises(EmptyEvaluation):
        ranking_metrics([])


def test_metrics_match_scalar_recomputation():
    ranks = np.random.default_rng(0).integers(1, 500, 10_000)
    got = ranking_metrics(ranks)
    want = metrics_oracle(ranks.tolist())
    assert got == want


def test_rank_matches_pairwise_oracle():
    rng = np.random.default_rng(1)
    for _ in range(300):
        c = int(rng.integers(2, 30))
        scores = np.round(rng.normal(size=c), 1)  # coarse values force ties
        true = int(rng.integers(c))
        others = [i for i in range(c) if i != true]
        filt = rng.choice(others, size=int(rng.integers(0, len(others) + 1)), replace=False).tolist()
        assert compute_rank(true, scores, filt) == rank_oracle(true, scores.tolist(), filt)
        assert compute_rank(true, scores, filt) <= compute_rank(true, scores)


def test_monotone_transform_invariance():
    rng = np.random.default_rng(2)
    scores = rng.normal(size=(50, 20))
    for fn in (np.exp, lambda x: 3 * x + 1, np.tanh):
        for row in scores:
            assert compute_rank(3, row) == compute_rank(3, fn(row))
        assert np.array_equal(np.argmax(scores, 1), np.argmax(fn(scores), 1))


def test_null_mrr():
    assert null_mrr(1) == 1.0
    assert null_mrr(4) == pytest.approx((1 + 1 / 2 + 1 / 3 + 1 / 4) / 4)


def test_untrained_model_sits_in_null_band():
    kg = random_kg(100, 3, 300, seed=0)
    idx = np.random.default_rng(0).permutation(300)
    held = kg.triples[idx[:30]]
    aug = augment_graph(KnowledgeGraph(kg.triples[idx[30:]], 100, 3))
    filt = filter_graph(kg.triples, num_entities=100, num_relations=3)
    ctx = prepare_graph(aug, ontology_features(aug), 64)
    null = null_mrr(100)
    for seed in range(3):
        mrr = evaluate_link_prediction(init_params(seed=seed), ctx, held, filt)["mrr"]
        assert null / 3 <= mrr <= 3 * null, (seed, mrr)


def test_both_directions_evaluated():
    aug = augment_graph(KnowledgeGraph([(0, 0, 1), (1, 1, 2)], 3, 2))
    qs = link_prediction_queries(aug, [(0, 0, 1)])
    assert qs == [Query(0, 0, 1), Query(1, aug.inverse(0), 0)]
    ctx = prepare_graph(aug, ontology_features(aug), 8)
    params = init_params(8, 1, 1)
    assert evaluate_link_prediction(params, ctx, [(0, 0, 1)], batch_size=1)["count"] == 2


def test_parallel_evaluation_matches_serial():
    aug = augment_graph(random_kg(30, 2, 60, seed=3))
    ctx = prepare_graph(aug, ontology_features(aug), 16)
    params = init_params(16, 2, 2, seed=1)
    triples = aug.base_triples[:20]
    a = evaluate_link_prediction(params, ctx, triples, batch_size=3, threads=1)
    b = evaluate_link_prediction(params, ctx, triples, batch_size=3, threads=4)
    assert a == b


def test_classification_metrics():
    m = classification_metrics([0, 1], [0, 1], 2)
    assert m["accuracy"] == 1.0 and m["macro_f1"] == 1.0
    single = classification_metrics([1, 1, 1, 1], [1, 1, 0, 1], 2)
    assert single["macro_f1"] == pytest.approx((2 * 3 / (2 * 3 + 1) + 0.0) / 2)
    only = classification_metrics([0, 0, 0], [0, 0, 0], 3)
    assert only["macro_f1"] == 1.0
    assert only["per_class"][0] == {"support": 3, "predicted": 3, "correct": 3}
    with pytest.raises(EmptyEvaluation):
        classification_metrics([], [], 2)


def test_classification_ties_pick_lower_class():
    tkg = transform_node_task(two_cluster_graph(num_nodes=20, seed=0))
    aug = augment_graph(tkg.kg)
    ctx = prepare_graph(aug, tkg.features, 8)
    params = init_params(8, 1, 1)
    for t in params.score_mlp.tensors().values():
        t.data[:] = 0
    queries = [q for q, _, _ in tkg.classification_queries("test")]
    assert predict_classes(params, ctx, queries, tkg.label_entities).tolist() == [0] * len(queries)
    metrics = evaluate_classification(params, ctx, tkg, "test")
    assert metrics["count"] == len(queries)
    assert metrics["per_class"][1]["predicted"] == 0


def test_write_metrics_and_table(tmp_path):
    write_metrics(tmp_path / "m.jsonl", [{"mrr": 0.5, "split": "test"}, {"mrr": 0.25}])
    rows = [json.loads(line) for line in (tmp_path / "m.jsonl").read_text().splitlines()]
    assert rows == [{"mrr": 0.5, "split": "test"}, {"mrr": 0.25}]
    table = format_table({"mrr": 0.5, "hits@1": 0.25})
    assert table.splitlines() == ["       mrr  0.5000", "    hits@1  0.2500"]
