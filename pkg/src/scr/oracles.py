"""Brute-force reference implementations and the self-test harness.

Everything here uses plain Python loops over triples, entities and candidate
pairs, sharing no code paths with the vectorized implementations it checks.
"""

import math
import time

import numpy as np

from .relgraph import INTERACTIONS


def adjacency_oracle(triples, entity, relation):
    return sorted(t for h, r, t in triples if h == entity and r == relation)


def relation_graph_oracle(kg, sem=None):
    """Edge set ``{(r1, kind, r2)}`` computed from per-relation side sets."""
    n_rel = kg.num_relations
    rs = n_rel
    heads = [set() for _ in range(n_rel + 1)]
    tails = [set() for _ in range(n_rel + 1)]
    for h, r, t in kg.triples.tolist():
        heads[r].add(h)
        tails[r].add(t)
    if sem is not None:
        for owner, members in enumerate(sem.members):
            if len(members):
                heads[rs].add(owner)
                tails[rs].update(int(m) for m in members)
    sides = {"h": heads, "t": tails}
    edges = set()
    for kind, name in enumerate(INTERACTIONS):
        a, b = sides[name[0]], sides[name[2]]
        for r1 in range(n_rel + 1):
            for r2 in range(n_rel + 1):
                if r1 == rs and r2 == rs:
                    continue
                if a[r1] & b[r2]:
                    edges.add((r1, kind, r2))
    return edges


def semantic_neighbors_oracle(U, kg, k, delta):
    """Per-entity neighbor lists by exhaustive cosine comparison."""
    U = np.asarray(U, dtype=np.float64)
    n = len(U)
    topo = [set() for _ in range(n)]
    for h, _, t in kg.base_triples.tolist():
        topo[h].add(t)
        topo[t].add(h)
    norms = [math.sqrt(float(np.dot(row, row))) for row in U]
    out = []
    for i in range(n):
        if k == 0 or norms[i] == 0:
            out.append([])
            continue
        cands = []
        for j in range(n):
            if j == i or j in topo[i] or norms[j] == 0:
                continue
            cos = float(np.dot(U[i], U[j])) / (norms[i] * norms[j])
            if cos >= delta:
                cands.append((-cos, j))
        cands.sort()
        out.append([j for _, j in cands[:k]])
    return out


def rank_oracle(true_entity, scores, filtered=()):
    filtered = set(filtered)
    better = 0
    for j, s in enumerate(scores):
        if j != true_entity and j not in filtered and s > scores[true_entity]:
            better += 1
    return 1 + better


def metrics_oracle(ranks):
    n = len(ranks)
    out = {"mrr": math.fsum(1.0 / r for r in ranks) / n}
    for k in (1, 3, 10):
        out[f"hits@{k}"] = sum(1 for r in ranks if r <= k) / n
    return out


def cmp_oracle(init, edges, relation_tables, layers):
    """Conditional message passing with per-node loops in double precision.

    ``edges`` is a list of ``(src, rel, dst)``; ``relation_tables[l]`` and
    ``layers[l]`` are plain arrays / :class:`LayerParams`.
    """
    h = np.array(init, dtype=np.float64)
    n, d = h.shape
    incoming = [[] for _ in range(n)]
    for src, rel, dst in edges:
        incoming[dst].append((src, rel))
    for layer, table in zip(layers, relation_tables):
        table = np.asarray(table, dtype=np.float64)
        W = layer.weight.data.astype(np.float64)
        b = layer.bias.data.astype(np.float64)[0]
        gamma = layer.gamma.data.astype(np.float64)[0]
        beta = layer.beta.data.astype(np.float64)[0]
        new = np.zeros_like(h)
        for v in range(n):
            msgs = [h[w] * table[r] for w, r in incoming[v]]
            if msgs:
                mean = sum(msgs) / len(msgs)
                var = sum((m - mean) ** 2 for m in msgs) / len(msgs)
                std = np.sqrt(var + 1e-8) - np.sqrt(1e-8)
            else:
                mean = np.zeros(d)
                std = np.zeros(d)
            z = np.concatenate([h[v], mean, std]) @ W + b
            mu = z.mean()
            sd = math.sqrt(((z - mu) ** 2).mean() + 1e-5)
            new[v] = np.maximum((z - mu) / sd * gamma + beta, 0.0) + h[v]
        h = new
    return h


# ---------------------------------------------------------------------------
# self-test

def _random_instance(rng, max_entities=12, max_relations=4):
    from .kg import KnowledgeGraph, augment_graph
    n = int(rng.integers(3, max_entities + 1))
    R = int(rng.integers(1, max_relations + 1))
    m = int(rng.integers(1, 3 * n))
    triples = {(int(rng.integers(n)), int(rng.integers(R)), int(rng.integers(n))) for _ in range(m)}
    kg = KnowledgeGraph(np.array(sorted(triples)), n, R)
    return augment_graph(kg)


def check_relation_graph(rng):
    from .relgraph import build_relation_graph
    from .semantics import semantic_neighbors
    kg = _random_instance(rng)
    U = rng.normal(size=(kg.num_entities, 4))
    sem = semantic_neighbors(U, kg, int(rng.integers(0, 3)), float(rng.uniform(-0.5, 0.9)))
    return build_relation_graph(kg, sem).edge_set() == relation_graph_oracle(kg, sem)


def check_semantic_neighbors(rng):
    from .semantics import semantic_neighbors
    kg = _random_instance(rng)
    U = rng.normal(size=(kg.num_entities, int(rng.integers(1, 6))))
    U[rng.random(len(U)) < 0.1] = 0.0
    k, delta = int(rng.integers(0, 5)), float(rng.uniform(-1.0, 0.9))
    got = semantic_neighbors(U, kg, k, delta)
    want = semantic_neighbors_oracle(U, kg, k, delta)
    return all(list(map(int, a)) == b for a, b in zip(got.members, want))


def check_adjacency(rng):
    kg = _random_instance(rng)
    triples = kg.triples.tolist()
    return all(kg.neighbors(e, r) == adjacency_oracle(triples, e, r)
               for e in range(kg.num_entities) for r in range(kg.num_relations))


def check_ranking(rng):
    from .evaluation import compute_rank, ranking_metrics
    ranks = []
    for _ in range(int(rng.integers(1, 20))):
        c = int(rng.integers(2, 30))
        scores = rng.integers(0, 5, size=c).astype(float)
        true = int(rng.integers(c))
        filt = [j for j in range(c) if j != true and rng.random() < 0.2]
        r = compute_rank(true, scores, filt)
        if r != rank_oracle(true, scores.tolist(), filt):
            return False
        ranks.append(r)
    got, want = ranking_metrics(ranks), metrics_oracle(ranks)
    return got == want


def check_cmp(rng):
    from . import numerics as nx
    from .model import cmp_forward, init_params
    kg = _random_instance(rng, 8, 3)
    d = int(rng.integers(2, 6))
    params = init_params(d, 1, int(rng.integers(1, 3)), seed=int(rng.integers(1 << 30)), dtype=np.float64)
    init = rng.normal(size=(kg.num_entities, d))
    tables = [rng.normal(size=(kg.num_relations, d)) for _ in params.ent_layers]
    with nx.no_grad():
        got = cmp_forward(init, kg, [nx.Tensor(t) for t in tables], params.ent_layers).data
    want = cmp_oracle(init, kg.triples.tolist(), tables, params.ent_layers)
    return float(np.max(np.abs(got - want))) <= 1e-5


SUITES = {
    "relation_graph": check_relation_graph,
    "semantic_neighbors": check_semantic_neighbors,
    "adjacency": check_adjacency,
    "ranking": check_ranking,
    "cmp_forward": check_cmp,
}


def run_selftest(instances=100, seed=0):
    """Run every oracle suite on ``instances`` random cases.

    Returns a list of ``{suite, passed, failures, instances, seconds}`` records.
    """
    results = []
    for index, (name, fn) in enumerate(SUITES.items()):
        rng = np.random.default_rng([seed, index])
        start = time.perf_counter()
        failures = sum(0 if fn(rng) else 1 for _ in range(instances))
        results.append({"suite": name, "passed": failures == 0, "failures": failures,
                        "instances": instances, "seconds": round(time.perf_counter() - start, 3)})
    return results
