"""Filtered ranking metrics and classification through label queries."""

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, EmptyEvaluation
from .kg import KnowledgeGraph, Query, augment_graph
from .model import score_all
from .parallel import chunks, map_ordered


@dataclass(frozen=True)
class RankResult:
    query: Query
    rank: int
    candidate_count: int


def compute_rank(true_entity, logits, filter=None):
    """``1 +`` the number of unfiltered candidates scoring strictly higher.

    Ties go to the true entity. ``filter`` lists other known positives and
    must not contain ``true_entity``.
    """
    logits = np.asarray(logits)
    keep = np.ones(len(logits), dtype=bool)
    if filter is not None and len(filter):
        filt = np.asarray(list(filter), dtype=np.int64)
        if np.any(filt == true_entity):
            raise ContractViolation(f"true entity {true_entity} is in the filter set")
        keep[filt] = False
    return 1 + int(np.sum((logits > logits[true_entity]) & keep))


def ranking_metrics(ranks, hits=(1, 3, 10)):
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        raise EmptyEvaluation("no ranks to aggregate")
    # correctly rounded, so the value does not depend on query order
    out = {"mrr": math.fsum(1.0 / ranks) / ranks.size}
    for k in hits:
        out[f"hits@{k}"] = float(np.mean(ranks <= k))
    return out


def filter_graph(*triple_sets, num_entities, num_relations):
    """Augmented graph holding every known-true triple, for filtered ranking."""
    triples = np.unique(np.concatenate([np.asarray(t, dtype=np.int64).reshape(-1, 3)
                                        for t in triple_sets]), axis=0)
    return augment_graph(KnowledgeGraph(triples, num_entities, num_relations))


def link_prediction_queries(kg, triples):
    """Tail query and inverse-relation head query for each base triple."""
    out = []
    for h, r, t in np.asarray(triples, dtype=np.int64).reshape(-1, 3).tolist():
        out.append(Query(h, r, t))
        out.append(Query(t, kg.inverse(r), h))
    return out


def rank_queries(params, ctx, queries, filter_kg=None, batch_size=8, threads=1,
                 use_semantics=True):
    """Filtered rank of each query's answer among all entities."""
    def run(batch):
        logits = score_all(batch, ctx, params, use_semantics=use_semantics)
        ranks = []
        for q, row in zip(batch, logits):
            known = filter_kg.tails(q.source, q.relation) if filter_kg is not None else ()
            known = [e for e in np.asarray(known).tolist() if e != q.answer]
            ranks.append(compute_rank(q.answer, row, known))
        return ranks

    out = map_ordered(run, chunks(list(queries), batch_size), threads)
    return [r for batch in out for r in batch]


def evaluate_link_prediction(params, ctx, eval_triples, filter_kg=None, batch_size=8, threads=1,
                             use_semantics=True):
    """MRR and Hits@k over both prediction directions of ``eval_triples``."""
    queries = link_prediction_queries(ctx.kg, eval_triples)
    ranks = rank_queries(params, ctx, queries, filter_kg, batch_size, threads, use_semantics)
    metrics = ranking_metrics(ranks)
    metrics["count"] = len(ranks)
    return metrics


def null_mrr(num_candidates):
    """Expected MRR of a uniformly random ranking."""
    return float(np.sum(1.0 / np.arange(1, num_candidates + 1)) / num_candidates)


def classification_metrics(y_true, y_pred, num_classes):
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.size == 0:
        raise EmptyEvaluation("no classification queries")
    present = np.union1d(np.unique(y_true), np.unique(y_pred))
    f1s = []
    per_class = {}
    for c in range(num_classes):
        tp = int(np.sum((y_pred == c) & (y_true == c)))
        fp = int(np.sum((y_pred == c) & (y_true != c)))
        fn = int(np.sum((y_pred != c) & (y_true == c)))
        per_class[c] = {"support": int(np.sum(y_true == c)), "predicted": int(np.sum(y_pred == c)),
                        "correct": tp}
        if c in present:
            denom = 2 * tp + fp + fn
            f1s.append(2 * tp / denom if denom else 0.0)
    return {"accuracy": float(np.mean(y_true == y_pred)), "macro_f1": float(np.mean(f1s)),
            "per_class": per_class, "count": int(y_true.size)}


def predict_classes(params, ctx, queries, label_entities, batch_size=8, threads=1):
    """Argmax over label entities; ties resolve to the lower class index."""
    label_entities = np.asarray(label_entities)

    def run(batch):
        logits = score_all(batch, ctx, params)
        return np.argmax(logits[:, label_entities], axis=1).tolist()

    out = map_ordered(run, chunks(list(queries), batch_size), threads)
    return np.array([p for batch in out for p in batch], dtype=np.int64)


def evaluate_classification(params, ctx, tkg, split="test", batch_size=8, threads=1):
    items = tkg.classification_queries(split)
    if not items:
        raise EmptyEvaluation(f"no {split} queries")
    queries = [q for q, _, _ in items]
    y_true = [c for _, _, c in items]
    y_pred = predict_classes(params, ctx, queries, tkg.label_entities, batch_size, threads)
    return classification_metrics(y_true, y_pred, len(tkg.label_entities))


def write_metrics(path, records):
    with open(path, "w", encoding="utf-8") as fout:
        for rec in records:
            fout.write(json.dumps(rec, sort_keys=True) + "\n")


def format_table(metrics, keys=("mrr", "hits@1", "hits@3", "hits@10")):
    rows = [f"{k:>10s}  {metrics[k]:.4f}" for k in keys if k in metrics]
    return "\n".join(rows)
