"""Node and graph classification recast as tail prediction on a task KG.

Class labels become entities reached through ``is_attributed_with``; for
graph tasks each graph also gets a super-graph entity that its member nodes
point to through ``belongs_to_graph``.
"""

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import EmptyGraph, NoLabels, ParseError, ShapeError
from .io import read_features, read_fvec, write_feature_tsv, write_fvec
from .kg import KnowledgeGraph, Query, write_triples
from .semantics import unify_features

EDGE = "edge"
ATTRIBUTED = "is_attributed_with"
BELONGS = "belongs_to_graph"
SIMILAR = "is_semantic_similar"
SPLITS = ("train", "val", "test")


@dataclass
class NodeTaskDataset:
    """A single graph with labeled nodes.

    ``labels`` maps node to class (``-1`` for unlabeled); ``split`` maps
    node to one of ``train``/``val``/``test``.
    """

    num_nodes: int
    edges: np.ndarray
    features: Optional[np.ndarray]
    labels: dict
    split: dict
    num_classes: Optional[int] = None
    node_names: Optional[list] = None
    class_names: Optional[list] = None

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if len(self.edges) and (self.edges.min() < 0 or self.edges.max() >= self.num_nodes):
            raise IndexError("edge endpoint out of range")
        for node in list(self.labels) + list(self.split):
            if not 0 <= node < self.num_nodes:
                raise IndexError(f"node {node} out of range")
        if self.features is None:
            self.features = np.zeros((self.num_nodes, 0))
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.shape[0] != self.num_nodes:
            raise ShapeError(f"{self.features.shape[0]} feature rows for {self.num_nodes} nodes")
        if self.num_classes is None:
            self.num_classes = max(self.labels.values(), default=-1) + 1

    def nodes_in(self, split):
        return sorted(n for n, s in self.split.items() if s == split)


@dataclass
class GraphTaskDataset:
    """A collection of small graphs with per-graph labels.

    ``graphs`` is a list of ``(num_nodes, edges, features)`` tuples, features
    being ``None`` or a ``(num_nodes, d0)`` array.
    """

    graphs: list
    labels: dict
    split: dict
    num_classes: Optional[int] = None
    graph_names: Optional[list] = None

    def __post_init__(self):
        for i, (n, edges, _) in enumerate(self.graphs):
            edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
            if len(edges) and (edges.min() < 0 or edges.max() >= n):
                raise IndexError(f"graph {i}: edge endpoint out of range")
        if self.num_classes is None:
            self.num_classes = max(self.labels.values(), default=-1) + 1

    def graphs_in(self, split):
        return sorted(g for g, s in self.split.items() if s == split)


@dataclass
class TaskKG:
    kg: KnowledgeGraph
    features: np.ndarray
    label_entities: list
    queries_by_split: dict
    relation_ids: dict
    label_triples: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    item_entities: Optional[np.ndarray] = None

    @property
    def eval_queries(self):
        return [item for s in ("val", "test") for item in self.queries_by_split.get(s, [])]

    def classification_queries(self, split):
        """``(Query, candidate label entities, true class)`` for one split."""
        cands = list(self.label_entities)
        return [(q, cands, c) for q, c in self.queries_by_split.get(split, [])]


def _budget_order(train_items, labels, seed):
    """Training items in a stratified order: every prefix is close to class-balanced.

    Within a class the order is a seeded permutation; across classes items are
    merged by their quantile position ``(j + 0.5) / n_c``.
    """
    by_class = {}
    for item in train_items:
        by_class.setdefault(labels[item], []).append(item)
    keyed = []
    for c in sorted(by_class):
        members = sorted(by_class[c])
        perm = np.random.default_rng([seed, c]).permutation(len(members))
        for j, idx in enumerate(perm):
            keyed.append(((j + 0.5) / len(members), c, j, members[idx]))
    keyed.sort()
    return keyed


def select_budget(train_items, labels, budget, seed=0):
    """Training items kept under ``budget``.

    A float in ``(0, 1]`` keeps ``round(budget * total)`` items along the
    stratified order; an integer keeps that many per class. Larger budgets
    always keep supersets of smaller ones.
    """
    labeled = [i for i in train_items if labels.get(i, -1) >= 0]
    order = _budget_order(labeled, labels, seed)
    if isinstance(budget, (int, np.integer)) and not isinstance(budget, bool):
        if budget < 1:
            raise NoLabels(f"per-class label budget must be >= 1, got {budget}")
        chosen = [item for _, _, j, item in order if j < budget]
    else:
        budget = float(budget)
        if not 0.0 < budget <= 1.0:
            raise NoLabels(f"label budget fraction must be in (0, 1], got {budget}")
        count = int(math.floor(budget * len(order) + 0.5))
        chosen = [item for _, _, _, item in order[:count]]
    if not chosen:
        raise NoLabels("no training labels survive the label budget")
    return sorted(chosen)


def _class_means(features, members, labels, num_classes):
    out = np.zeros((num_classes, features.shape[1]))
    for c in range(num_classes):
        rows = [m for m in members if labels[m] == c]
        if rows:
            out[c] = features[rows].mean(axis=0)
    return out


def _eval_queries(ds_split, labels, entity_of, relation):
    out = {}
    for split in ("val", "test"):
        items = sorted(i for i, s in ds_split.items() if s == split and labels.get(i, -1) >= 0)
        out[split] = [(Query(int(entity_of(i)), relation, None), labels[i]) for i in items]
    return out


def transform_node_task(ds, label_budget=1.0, seed=0):
    """Task KG for node classification.

    Entities are the nodes followed by one entity per class. Undirected edges
    emit a single ``edge`` triple; selected training nodes get a label triple.
    """
    n, K = ds.num_nodes, ds.num_classes
    edge_r, attr_r = 0, 1
    chosen = select_budget(ds.nodes_in("train"), ds.labels, label_budget, seed)
    label_triples = np.array([(x, attr_r, n + ds.labels[x]) for x in chosen], dtype=np.int64)
    edge_triples = np.column_stack([ds.edges[:, 0], np.full(len(ds.edges), edge_r), ds.edges[:, 1]])
    triples = np.concatenate([edge_triples.reshape(-1, 3), label_triples.reshape(-1, 3)])
    node_names = ds.node_names or [f"n{i}" for i in range(n)]
    class_names = ds.class_names or [f"class{c}" for c in range(K)]
    kg = KnowledgeGraph(triples, n + K, 2, entity_names=list(node_names) + [f"label:{c}" for c in class_names],
                        relation_names=[EDGE, ATTRIBUTED])
    features = np.concatenate([ds.features, _class_means(ds.features, chosen, ds.labels, K)])
    queries = _eval_queries(ds.split, ds.labels, lambda i: i, attr_r)
    queries["train"] = [(Query(int(x), attr_r, n + ds.labels[x]), ds.labels[x]) for x in chosen]
    return TaskKG(kg, features, list(range(n, n + K)), queries,
                  {EDGE: edge_r, ATTRIBUTED: attr_r}, label_triples, np.arange(n))


def _similar_pairs(pooled, k_graph, delta):
    M = len(pooled)
    if k_graph <= 0 or M < 2:
        return []
    if k_graph >= M:
        warnings.warn(f"k_graph={k_graph} >= {M} graphs; clipped to {M - 1}", stacklevel=3)
        k_graph = M - 1
    norms = np.linalg.norm(pooled, axis=1)
    unit = np.divide(pooled, norms[:, None], out=np.zeros_like(pooled), where=norms[:, None] > 0)
    S = unit @ unit.T
    pairs = []
    for i in range(M):
        if norms[i] == 0:
            continue
        row = S[i].copy()
        row[i] = -np.inf
        row[norms == 0] = -np.inf
        order = np.lexsort((np.arange(M), -row))[:k_graph]
        pairs.extend((i, int(j)) for j in order if row[j] >= delta)
    return pairs


def transform_graph_task(ds, pooling="mean", k_graph=1, delta=0.9, unified_dim=64, seed=0,
                         label_budget=1.0):
    """Task KG for graph classification.

    Entity layout: member nodes of every graph (graph by graph), then one
    super-graph entity per graph, then one entity per class.
    """
    if pooling != "mean":
        raise ValueError(f"unsupported pooling {pooling!r}")
    edge_r, attr_r, belongs_r, similar_r = 0, 1, 2, 3
    M, K = len(ds.graphs), ds.num_classes
    sizes = [int(g[0]) for g in ds.graphs]
    for i, s in enumerate(sizes):
        if s == 0:
            raise EmptyGraph(f"graph {i} has no nodes")
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    total = int(offsets[-1])
    super_of = total + np.arange(M)
    label_base = total + M

    widths = {np.asarray(f).shape[1] for _, _, f in ds.graphs if f is not None}
    if len(widths) > 1:
        raise ShapeError(f"inconsistent node feature widths {sorted(widths)}")
    d0 = widths.pop() if widths else 0
    X = np.zeros((total, d0))
    for i, (_, _, f) in enumerate(ds.graphs):
        if f is not None:
            X[offsets[i]:offsets[i + 1]] = np.asarray(f, dtype=np.float64)
    U = unify_features(X, unified_dim, seed=seed).data if d0 else np.zeros((total, unified_dim))
    pooled = np.stack([U[offsets[i]:offsets[i + 1]].mean(axis=0) for i in range(M)])

    triples = []
    for i, (_, edges, _) in enumerate(ds.graphs):
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2) + offsets[i]
        triples.extend((int(u), edge_r, int(v)) for u, v in edges)
    for i in range(M):
        triples.extend((int(v), belongs_r, int(super_of[i])) for v in range(offsets[i], offsets[i + 1]))
    chosen = select_budget(ds.graphs_in("train"), ds.labels, label_budget, seed)
    label_triples = [(int(super_of[g]), attr_r, label_base + ds.labels[g]) for g in chosen]
    triples.extend(label_triples)
    triples.extend((int(super_of[i]), similar_r, int(super_of[j]))
                   for i, j in _similar_pairs(pooled, k_graph, delta))

    names = [f"g{i}:n{v}" for i in range(M) for v in range(sizes[i])]
    names += [f"graph:{ds.graph_names[i] if ds.graph_names else i}" for i in range(M)]
    names += [f"label:{c}" for c in range(K)]
    kg = KnowledgeGraph(np.array(triples, dtype=np.int64).reshape(-1, 3), label_base + K, 4,
                        entity_names=names, relation_names=[EDGE, ATTRIBUTED, BELONGS, SIMILAR])
    member_labels = {}
    for c in range(K):
        member_labels[c] = [g for g in chosen if ds.labels[g] == c]
    label_feats = np.stack([pooled[member_labels[c]].mean(axis=0) if member_labels[c]
                            else np.zeros(unified_dim) for c in range(K)])
    features = np.concatenate([U, pooled, label_feats])
    queries = _eval_queries(ds.split, ds.labels, lambda g: super_of[g], attr_r)
    queries["train"] = [(Query(int(super_of[g]), attr_r, label_base + ds.labels[g]), ds.labels[g])
                        for g in chosen]
    return TaskKG(kg, features, list(range(label_base, label_base + K)), queries,
                  {EDGE: edge_r, ATTRIBUTED: attr_r, BELONGS: belongs_r, SIMILAR: similar_r},
                  np.array(label_triples, dtype=np.int64).reshape(-1, 3), super_of)


# ---------------------------------------------------------------------------
# dataset directories

def _read_tsv(path, ncols):
    rows = []
    with open(path, encoding="utf-8") as fin:
        for lineno, line in enumerate(fin, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t") if "\t" in line else line.split()
            if len(parts) != ncols:
                raise ParseError(f"expected {ncols} fields, got {len(parts)}", line=lineno, path=path)
            rows.append(parts)
    return rows


def _class_index(values):
    names = sorted(set(values), key=lambda v: (not v.lstrip("-").isdigit(), int(v) if v.lstrip("-").isdigit() else 0, v))
    return {name: i for i, name in enumerate(names)}, names


def load_node_dataset(directory):
    """Read ``edges.tsv``, ``labels.tsv``, ``split.tsv`` and optional features."""
    d = Path(directory)
    edges = _read_tsv(d / "edges.tsv", 2)
    labels_raw = _read_tsv(d / "labels.tsv", 2)
    split_raw = _read_tsv(d / "split.tsv", 2)
    ids = {}

    def node(name):
        return ids.setdefault(name, len(ids))

    edge_arr = np.array([(node(u), node(v)) for u, v in edges], dtype=np.int64).reshape(-1, 2)
    for name, _ in labels_raw + split_raw:
        node(name)
    classes, class_names = _class_index([c for _, c in labels_raw])
    labels = {node(n): classes[c] for n, c in labels_raw}
    split = {}
    for n, s in split_raw:
        if s not in SPLITS:
            raise ParseError(f"unknown split {s!r}", path=d / "split.tsv")
        split[node(n)] = s
    features = None
    for fname in ("features.fvec", "features.tsv"):
        if (d / fname).exists():
            features = read_features(d / fname, ids, len(ids))
            break
    return NodeTaskDataset(len(ids), edge_arr, features, labels, split, len(class_names),
                           list(ids), class_names)


def load_graph_dataset(directory):
    """Read ``graph_edges.tsv``, ``graph_labels.tsv``, ``graph_split.tsv`` and
    optional ``node_features.fvec`` with ``node_index.tsv``."""
    d = Path(directory)
    edge_rows = _read_tsv(d / "graph_edges.tsv", 3)
    label_rows = _read_tsv(d / "graph_labels.tsv", 2)
    split_rows = _read_tsv(d / "graph_split.tsv", 2)
    graph_ids, local = {}, {}

    def graph(name):
        if name not in graph_ids:
            graph_ids[name] = len(graph_ids)
            local[graph_ids[name]] = {}
        return graph_ids[name]

    def node(g, name):
        return local[g].setdefault(name, len(local[g]))

    edges = {}
    for g, u, v in edge_rows:
        gi = graph(g)
        edges.setdefault(gi, []).append((node(gi, u), node(gi, v)))
    for g, _ in label_rows + split_rows:
        graph(g)
    index_rows = []
    if (d / "node_index.tsv").exists():
        index_rows = _read_tsv(d / "node_index.tsv", 3)
        for g, n, _ in index_rows:
            node(graph(g), n)
    feats = None
    if (d / "node_features.fvec").exists():
        feats = read_fvec(d / "node_features.fvec")
    graphs = []
    for gi in range(len(graph_ids)):
        n = len(local[gi])
        f = None
        if feats is not None:
            f = np.zeros((n, feats.shape[1]))
        graphs.append([n, np.array(edges.get(gi, []), dtype=np.int64).reshape(-1, 2), f])
    if feats is not None:
        for g, n, row in index_rows:
            gi = graph_ids[g]
            graphs[gi][2][local[gi][n]] = feats[int(row)]
    classes, class_names = _class_index([c for _, c in label_rows])
    labels = {graph_ids[g]: classes[c] for g, c in label_rows}
    split = {graph_ids[g]: s for g, s in split_rows}
    bad = set(split.values()) - set(SPLITS)
    if bad:
        raise ParseError(f"unknown split(s) {sorted(bad)}", path=d / "graph_split.tsv")
    return GraphTaskDataset([tuple(g) for g in graphs], labels, split, len(class_names), list(graph_ids))


def write_task_kg(tkg, directory):
    """Write a task KG as ``triples.tsv``, ``features.fvec``, ``labels.tsv`` and
    ``queries.tsv`` (split, entity, true class)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_triples(tkg.kg, d / "triples.tsv")
    write_fvec(d / "features.fvec", tkg.features)
    names = tkg.kg.entity_names
    with open(d / "labels.tsv", "w", encoding="utf-8") as fout:
        for c, e in enumerate(tkg.label_entities):
            fout.write(f"{c}\t{names[e]}\n")
    with open(d / "queries.tsv", "w", encoding="utf-8") as fout:
        for split in SPLITS:
            for q, c in tkg.queries_by_split.get(split, []):
                fout.write(f"{split}\t{names[q.source]}\t{c}\n")


def write_node_dataset(ds, directory):
    """Inverse of :func:`load_node_dataset`."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = ds.node_names or [f"n{i}" for i in range(ds.num_nodes)]
    classes = ds.class_names or [str(c) for c in range(ds.num_classes)]
    with open(d / "edges.tsv", "w", encoding="utf-8") as fout:
        for u, v in ds.edges.tolist():
            fout.write(f"{names[u]}\t{names[v]}\n")
    with open(d / "labels.tsv", "w", encoding="utf-8") as fout:
        for node in range(ds.num_nodes):
            if ds.labels.get(node, -1) >= 0:
                fout.write(f"{names[node]}\t{classes[ds.labels[node]]}\n")
    with open(d / "split.tsv", "w", encoding="utf-8") as fout:
        for node in sorted(ds.split):
            fout.write(f"{names[node]}\t{ds.split[node]}\n")
    if ds.features.shape[1]:
        write_feature_tsv(d / "features.tsv", ds.features, names)


def write_graph_dataset(ds, directory):
    """Inverse of :func:`load_graph_dataset`."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = ds.graph_names or [f"g{i}" for i in range(len(ds.graphs))]
    with open(d / "graph_edges.tsv", "w", encoding="utf-8") as fout:
        for gi, (n, edges, _) in enumerate(ds.graphs):
            for u, v in np.asarray(edges).reshape(-1, 2).tolist():
                fout.write(f"{names[gi]}\t{u}\t{v}\n")
    with open(d / "graph_labels.tsv", "w", encoding="utf-8") as fout:
        for g in sorted(ds.labels):
            fout.write(f"{names[g]}\t{ds.labels[g]}\n")
    with open(d / "graph_split.tsv", "w", encoding="utf-8") as fout:
        for g in sorted(ds.split):
            fout.write(f"{names[g]}\t{ds.split[g]}\n")
    if any(f is not None for _, _, f in ds.graphs):
        feats = []
        with open(d / "node_index.tsv", "w", encoding="utf-8") as fout:
            for gi, (n, _, f) in enumerate(ds.graphs):
                for v in range(n):
                    fout.write(f"{names[gi]}\t{v}\t{len(feats)}\n")
                    feats.append(f[v])
        write_fvec(d / "node_features.fvec", np.array(feats))
