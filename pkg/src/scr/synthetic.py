"""Seeded synthetic datasets for tests, demos and desk-scale checks."""

from pathlib import Path

import numpy as np

from .kg import KnowledgeGraph
from .tasks import GraphTaskDataset, NodeTaskDataset


def random_kg(num_entities, num_relations, num_triples, seed=0):
    """Uniformly random distinct triples without self-loops."""
    rng = np.random.default_rng(seed)
    seen = set()
    limit = num_entities * (num_entities - 1) * num_relations
    target = min(num_triples, limit)
    while len(seen) < target:
        h, t = rng.integers(0, num_entities, size=2)
        if h == t:
            continue
        seen.add((int(h), int(rng.integers(0, num_relations)), int(t)))
    triples = np.array(sorted(seen), dtype=np.int64).reshape(-1, 3)
    return KnowledgeGraph(triples, num_entities, num_relations)


def toy_kg(seed=0):
    """Eight entities, three relations: the gradient-check instance."""
    return random_kg(8, 3, 14, seed)


def memorization_kg(seed=0, num_entities=50, num_relations=4, num_triples=120):
    return random_kg(num_entities, num_relations, num_triples, seed)


def composition_kg(num_entities=200, seed=0):
    """Graph governed by the rule ``r3(x, z) <- r1(x, y), r2(y, z)``.

    Every entity has one random ``r1`` and one random ``r2`` successor; ``r3``
    holds exactly on the two-hop compositions. Relations: 0=r1, 1=r2, 2=r3.
    """
    rng = np.random.default_rng(seed)
    n = num_entities
    ents = np.arange(n)
    r1 = (ents + rng.integers(1, n, size=n)) % n
    r2 = (ents + rng.integers(1, n, size=n)) % n
    r3 = r2[r1]
    triples = np.concatenate([
        np.column_stack([ents, np.zeros(n, dtype=np.int64), r1]),
        np.column_stack([ents, np.ones(n, dtype=np.int64), r2]),
        np.column_stack([ents, np.full(n, 2), r3]),
    ]).astype(np.int64)
    triples = np.unique(triples, axis=0)
    return KnowledgeGraph(triples, n, 3, entity_names=[f"e{i}" for i in range(n)],
                          relation_names=["r1", "r2", "r3"])


def split_rule_targets(kg, relation=2, fraction=0.2, seed=0):
    """Hold out ``fraction`` of ``relation`` triples: returns ``(inference_kg, held_out)``."""
    rng = np.random.default_rng(seed)
    base = kg.base_triples
    idx = np.flatnonzero(base[:, 1] == relation)
    held = np.sort(rng.choice(idx, size=max(1, int(round(fraction * len(idx)))), replace=False))
    keep = np.setdiff1d(np.arange(len(base)), held)
    inference = KnowledgeGraph(base[keep], kg.num_entities, kg.num_relations,
                               kg.entity_names, kg.relation_names)
    return inference, base[held]


def two_cluster_graph(num_nodes=200, p_in=0.08, p_out=0.005, feature_dim=16, noise=1.0,
                      train_frac=0.3, val_frac=0.2, seed=0):
    """Two homophilic communities with class-shifted Gaussian features."""
    rng = np.random.default_rng(seed)
    labels = np.repeat([0, 1], [num_nodes // 2, num_nodes - num_nodes // 2])
    labels = labels[rng.permutation(num_nodes)]
    same = labels[:, None] == labels[None, :]
    probs = np.where(same, p_in, p_out)
    upper = np.triu(rng.random((num_nodes, num_nodes)) < probs, k=1)
    edges = np.argwhere(upper)
    centers = rng.normal(size=(2, feature_dim)) * 2.0
    features = centers[labels] + noise * rng.normal(size=(num_nodes, feature_dim))
    order = rng.permutation(num_nodes)
    n_train = int(train_frac * num_nodes)
    n_val = int(val_frac * num_nodes)
    split = {}
    for i, node in enumerate(order.tolist()):
        split[node] = "train" if i < n_train else "val" if i < n_train + n_val else "test"
    return NodeTaskDataset(num_nodes, edges, features, {i: int(c) for i, c in enumerate(labels)},
                           split, 2)


def _cycle(n):
    return [(i, (i + 1) % n) for i in range(n)]


def _star(n):
    return [(0, i) for i in range(1, n)]


def two_motif_graphs(num_graphs=40, min_size=5, max_size=9, train_frac=0.5, val_frac=0.1, seed=0):
    """Cycles (class 0) versus stars (class 1) with one-hot degree features."""
    rng = np.random.default_rng(seed)
    graphs, labels = [], {}
    max_degree = max_size
    for g in range(num_graphs):
        cls = g % 2
        n = int(rng.integers(min_size, max_size + 1))
        edges = np.array(_cycle(n) if cls == 0 else _star(n), dtype=np.int64)
        deg = np.bincount(edges.reshape(-1), minlength=n)
        feats = np.zeros((n, max_degree + 1))
        feats[np.arange(n), np.minimum(deg, max_degree)] = 1.0
        graphs.append((n, edges, feats))
        labels[g] = cls
    order = rng.permutation(num_graphs)
    n_train = int(train_frac * num_graphs)
    n_val = int(val_frac * num_graphs)
    split = {}
    for i, g in enumerate(order.tolist()):
        split[g] = "train" if i < n_train else "val" if i < n_train + n_val else "test"
    return GraphTaskDataset(graphs, labels, split, 2)


def write_kg_dataset(directory, train, valid=None, test=None):
    """Write ``train.txt``/``valid.txt``/``test.txt`` from base-triple arrays of ``train``'s vocabulary.

    ``train`` is a :class:`KnowledgeGraph`; ``valid`` and ``test`` are triple arrays.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    ents = train.entity_names or [f"e{i}" for i in range(train.num_entities)]
    rels = train.relation_names or [f"r{i}" for i in range(train.num_relations)]
    for name, triples in (("train", train.base_triples), ("valid", valid), ("test", test)):
        if triples is None:
            continue
        with open(d / f"{name}.txt", "w", encoding="utf-8") as fout:
            for h, r, t in np.asarray(triples).reshape(-1, 3).tolist():
                fout.write(f"{ents[h]}\t{rels[r]}\t{ents[t]}\n")
    return d
