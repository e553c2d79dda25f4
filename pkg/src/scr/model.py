"""Conditional message passing with semantic neighbor injection.

A batch of ``B`` queries on a graph with ``N`` nodes is laid out as a
``(B * N, d)`` state matrix, query ``b`` owning rows ``b*N .. b*N + N - 1``.
Edges are replicated per query, so one sparse pass serves the whole batch.
"""

import itertools
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import MissingRelation, ShapeError
from .kg import Query
from .numerics import Segments, Tensor
from .relgraph import RelationGraph, build_relation_graph
from .semantics import SemanticNeighborSet, semantic_neighbors, unify_features


@dataclass
class LayerParams:
    proj: Tensor
    weight: Tensor
    bias: Tensor
    gamma: Tensor
    beta: Tensor

    def tensors(self):
        return OrderedDict(proj=self.proj, weight=self.weight, bias=self.bias,
                           gamma=self.gamma, beta=self.beta)


@dataclass
class MLPParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def tensors(self):
        return OrderedDict(w1=self.w1, b1=self.b1, w2=self.w2, b2=self.b2)

    def __call__(self, x):
        hidden = nx.relu(nx.add(nx.matmul(x, self.w1), self.b1))
        return nx.add(nx.matmul(hidden, self.w2), self.b2)


_uids = itertools.count()


@dataclass
class ModelParams:
    """All trainable tensors. ``version`` changes whenever values change."""

    P: Tensor
    rel_layers: list
    ent_layers: list
    v_a: Tensor
    merge_mlp: MLPParams
    score_mlp: MLPParams
    version: int = 0
    uid: int = field(default_factory=lambda: next(_uids))

    @property
    def dim(self):
        return self.P.shape[1]

    @property
    def dtype(self):
        return self.P.dtype

    def named_parameters(self):
        out = OrderedDict(P=self.P)
        for prefix, layers in (("rel", self.rel_layers), ("ent", self.ent_layers)):
            for i, layer in enumerate(layers):
                for name, t in layer.tensors().items():
                    out[f"{prefix}.{i}.{name}"] = t
        out["v_a"] = self.v_a
        for prefix, mlp in (("merge", self.merge_mlp), ("score", self.score_mlp)):
            for name, t in mlp.tensors().items():
                out[f"{prefix}.{name}"] = t
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def bump(self):
        self.version += 1

    def load_arrays(self, arrays):
        named = self.named_parameters()
        missing = set(named) - set(arrays)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, t in named.items():
            value = np.asarray(arrays[name])
            if value.shape != t.shape:
                raise ShapeError(f"{name}: expected {t.shape}, got {value.shape}")
            t.data[...] = value
        self.bump()

    def copy(self):
        clone = init_params(self.dim, len(self.rel_layers), len(self.ent_layers),
                            dtype=self.dtype)
        clone.load_arrays({k: v.data.copy() for k, v in self.named_parameters().items()})
        return clone


def _glorot(rng, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype), requires_grad=True)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _layer(rng, d, dtype):
    return LayerParams(proj=_glorot(rng, d, d, dtype), weight=_glorot(rng, 3 * d, d, dtype),
                       bias=_zeros((1, d), dtype),
                       gamma=Tensor(np.ones((1, d), dtype=dtype), requires_grad=True),
                       beta=_zeros((1, d), dtype))


def _mlp(rng, d, out, dtype, out_gain=1.0):
    w2 = _glorot(rng, d, out, dtype)
    w2.data *= out_gain
    return MLPParams(_glorot(rng, d, d, dtype), _zeros((1, d), dtype), w2, _zeros((1, out), dtype))


# Residual states grow with depth, so a full-gain scoring layer starts with
# logits of several units; a 0.1 gain keeps the first-batch loss near 2 ln 2.
SCORE_OUT_GAIN = 0.1


def init_params(dim=64, rel_layers=6, ent_layers=6, seed=0, dtype=np.float32):
    """Glorot-uniform matrices, zero biases, ``v_a ~ U(0.5, 1)``; the score
    head's output layer is scaled by :data:`SCORE_OUT_GAIN`."""
    rng = np.random.default_rng(seed)
    P = _glorot(rng, 4, dim, dtype)
    rel = [_layer(rng, dim, dtype) for _ in range(rel_layers)]
    ent = [_layer(rng, dim, dtype) for _ in range(ent_layers)]
    v_a = Tensor(rng.uniform(0.5, 1.0, size=(1, dim)).astype(dtype), requires_grad=True)
    return ModelParams(P, rel, ent, v_a, _mlp(rng, dim, dim, dtype),
                       _mlp(rng, dim, 1, dtype, SCORE_OUT_GAIN))


# ---------------------------------------------------------------------------
# graph preprocessing

@dataclass
class GraphContext:
    """An augmented graph with one feature view and everything derived from it."""

    kg: object
    features: object
    sem: SemanticNeighborSet
    rg: RelationGraph
    feature_type: str = "provided"
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def num_entities(self):
        return self.kg.num_entities

    def relabel(self, perm):
        """Same context with entity ``i`` renamed ``perm[i]``."""
        from .kg import KnowledgeGraph
        from .semantics import UnifiedFeatures
        perm = np.asarray(perm)
        kg = self.kg
        triples = kg.triples.copy()
        triples[:, 0] = perm[triples[:, 0]]
        triples[:, 2] = perm[triples[:, 2]]
        new_kg = KnowledgeGraph(triples, kg.num_entities, kg.num_relations, augmented=kg.augmented,
                                base_triple_count=kg.base_triple_count)
        inv = np.argsort(perm)
        U = UnifiedFeatures(self.features.data[inv], self.features.raw[inv],
                            self.features.effective_rank)
        return GraphContext(new_kg, U, self.sem.permute(perm), self.rg, self.feature_type)


def prepare_graph(kg, X, dim, k=0, delta=0.9, seed=0, feature_type="provided"):
    """Unify ``X``, extract semantic neighbors, and build the relation graph."""
    U = unify_features(X, dim, seed=seed)
    sem = semantic_neighbors(U, kg, k, delta)
    return GraphContext(kg, U, sem, build_relation_graph(kg, sem), feature_type)


# ---------------------------------------------------------------------------
# message passing

def _batched_edges(graph, batch_size, edge_mask=None):
    cache = graph.__dict__.setdefault("_scr_edge_cache", {})
    key = batch_size
    if edge_mask is None and key in cache:
        return cache[key]
    src, rel, dst = graph.message_edges()
    n, m = graph.num_nodes, len(src)
    offsets = np.repeat(np.arange(batch_size, dtype=np.int64), m)
    b_src = np.tile(src, batch_size) + offsets * n
    b_dst = np.tile(dst, batch_size) + offsets * n
    b_rel = np.tile(rel, batch_size)
    if edge_mask is not None:
        keep = edge_mask.reshape(-1)
        b_src, b_dst, b_rel, offsets = b_src[keep], b_dst[keep], b_rel[keep], offsets[keep]
    out = (Segments(b_src, n * batch_size), b_rel, offsets, Segments(b_dst, n * batch_size))
    if edge_mask is None:
        cache[key] = out
    return out


def cmp_forward(init, graph, relation_embs, layers, batch_size=1, per_query_relations=False,
                edge_mask=None):
    """Run ``len(layers)`` rounds of conditional message passing.

    ``relation_embs[l]`` holds the layer-``l`` edge-type embeddings; with
    ``per_query_relations`` the table is split into ``batch_size`` equal
    blocks, one per query. A message along ``(w, r, v)`` is
    ``h_w * rel[r]``; nodes aggregate MEAN and STD of incoming messages and
    update ``h <- ReLU(LN(W [h; mean; std] + b)) + h``.

    ``edge_mask`` is an optional boolean ``(batch_size, num_edges)`` array
    dropping edges from individual query copies.
    """
    init = nx.as_tensor(init)
    n = graph.num_nodes
    if init.shape[0] != n * batch_size:
        raise ShapeError(f"init has {init.shape[0]} rows, expected {n * batch_size}")
    if len(relation_embs) < len(layers):
        raise ShapeError("one relation embedding table per layer required")
    src, rel, offsets, dst = _batched_edges(graph, batch_size, edge_mask)
    h = init
    for layer, table in zip(layers, relation_embs):
        rows = table.shape[0]
        stride = rows // batch_size if per_query_relations else rows
        if stride < graph.num_edge_types:
            raise MissingRelation(f"{graph.num_edge_types} edge types, {stride} embeddings")
        rel_index = rel + offsets * stride if per_query_relations else rel
        rel_seg = Segments(rel_index, rows)
        msg = nx.hadamard(nx.gather_rows(h, src), nx.gather_rows(table, rel_seg))
        mean, std = nx.segment_mean_std(msg, dst)
        hidden = nx.add(nx.matmul(nx.concat([h, mean, std]), layer.weight), layer.bias)
        h = nx.add(nx.relu(nx.layer_norm(hidden, layer.gamma, layer.beta)), h)
    return h


def _layer_tables(base, layers):
    return [nx.matmul(base, layer.proj) for layer in layers]


@dataclass
class RelationRepresentations:
    R_q: Tensor
    R_g: Tensor
    batch_size: int = 1


def relation_representations(queries, rg, params, R_g=None):
    """Query-conditioned (``R_q``) and query-independent (``R_g``) relation states.

    ``queries`` may be empty or ``None`` to compute only ``R_g``.
    """
    queries = _as_queries(queries)
    d = params.dim
    n = rg.num_nodes
    tables = _layer_tables(params.P, params.rel_layers)
    if R_g is None:
        ones = Tensor(np.ones((n, d), dtype=params.dtype))
        R_g = cmp_forward(ones, rg, tables, params.rel_layers)
    if not queries:
        return RelationRepresentations(None, R_g, 0)
    B = len(queries)
    rels = np.array([q.relation for q in queries], dtype=np.int64)
    if rels.min() < 0 or rels.max() >= n:
        raise IndexError(f"query relation out of range for {n} relation-graph nodes")
    init = np.zeros((B * n, d), dtype=params.dtype)
    init[np.arange(B) * n + rels] = 1.0
    R_q = cmp_forward(Tensor(init), rg, tables, params.rel_layers, batch_size=B)
    return RelationRepresentations(R_q, R_g, B)


def _as_queries(queries):
    if queries is None:
        return []
    if isinstance(queries, Query):
        return [queries]
    return [q if isinstance(q, Query) else Query(*q) for q in queries]


def init_conditional_states(queries, num_entities, query_vectors, v_a, sem=None):
    """Initial states: ``r_q`` on the source row, ``v_a`` on its semantic neighbors.

    ``query_vectors`` is a ``(B, d)`` tensor with one relation vector per query.
    """
    queries = _as_queries(queries)
    B = len(queries)
    query_vectors = nx.as_tensor(query_vectors)
    if query_vectors.shape[0] != B:
        raise ShapeError(f"{query_vectors.shape[0]} query vectors for {B} queries")
    sources = np.array([q.source for q in queries], dtype=np.int64)
    if len(sources) and (sources.min() < 0 or sources.max() >= num_entities):
        raise IndexError("query source out of range")
    rows = np.arange(B) * num_entities + sources
    h = nx.scatter_add(query_vectors, rows, B * num_entities)
    if sem is not None:
        targets = [b * num_entities + sem[q.source] for b, q in enumerate(queries)]
        targets = np.concatenate(targets) if targets else np.zeros(0, dtype=np.int64)
        if len(targets):
            spread = nx.gather_rows(v_a, np.zeros(len(targets), dtype=np.int64))
            h = nx.add(h, nx.scatter_add(spread, targets, B * num_entities))
    return h


def nonparametric_semantic_rep(ctx, R_g, params):
    """Query-independent propagation of the unified features with frozen weights.

    Cached on ``ctx`` until ``params.version`` changes; never recorded on a tape.
    """
    key = ("H_g", params.uid, params.version)
    cached = ctx._cache.get(key)
    if cached is not None:
        return cached
    U = ctx.features if isinstance(ctx.features, np.ndarray) else ctx.features.data
    U = np.asarray(U)
    if U.shape[1] != params.dim:
        raise ShapeError(f"unified features have {U.shape[1]} columns, model dim is {params.dim}")
    with nx.no_grad():
        tables = _layer_tables(Tensor(R_g.data), params.ent_layers)
        H_g = cmp_forward(Tensor(U.astype(params.dtype)), ctx.kg, tables, params.ent_layers)
    H_g = Tensor(H_g.data)
    ctx._cache = {k: v for k, v in ctx._cache.items() if k[1:] == key[1:]}
    ctx._cache[key] = H_g
    return H_g


def query_independent_relations(ctx, params):
    key = ("R_g", params.uid, params.version)
    cached = ctx._cache.get(key)
    if cached is None:
        with nx.no_grad():
            cached = Tensor(relation_representations(None, ctx.rg, params).R_g.data)
        ctx._cache[key] = cached
    return cached


def scmp_forward(queries, ctx, params, reps=None, edge_mask=None, use_semantics=True):
    """Entity states ``CMP(q) + merge_mlp(H_g)`` for a batch of queries.

    Returns a ``(B * N, d)`` tensor. ``use_semantics=False`` drops both the
    semantic-neighbor initialization and the fused semantic term.
    """
    queries = _as_queries(queries)
    B = len(queries)
    n = ctx.num_entities
    if reps is None:
        reps = relation_representations(queries, ctx.rg, params,
                                        R_g=query_independent_relations(ctx, params))
    rows = np.arange(B) * ctx.rg.num_nodes + np.array([q.relation for q in queries])
    query_vectors = nx.gather_rows(reps.R_q, rows)
    sem = ctx.sem if use_semantics else None
    init = init_conditional_states(queries, n, query_vectors, params.v_a, sem)
    tables = _layer_tables(reps.R_q, params.ent_layers)
    H = cmp_forward(init, ctx.kg, tables, params.ent_layers, batch_size=B,
                    per_query_relations=True, edge_mask=edge_mask)
    if use_semantics:
        H_g = nonparametric_semantic_rep(ctx, reps.R_g, params)
        merged = params.merge_mlp(H_g)
        H = nx.add(H, nx.gather_rows(merged, np.tile(np.arange(n), B)))
    return H


def score_candidates(H, candidates, params):
    """Logits ``score_mlp(H[candidates])`` as a ``(len(candidates), 1)`` tensor."""
    candidates = np.asarray(candidates, dtype=np.int64).reshape(-1)
    if len(candidates) and (candidates.min() < 0 or candidates.max() >= H.shape[0]):
        raise IndexError("candidate out of range")
    if len(candidates) == 0:
        return Tensor(np.zeros((0, 1), dtype=H.dtype))
    return params.score_mlp(nx.gather_rows(H, candidates))


def score_all(queries, ctx, params, use_semantics=True):
    """``(B, N)`` logits of every entity for every query, without recording."""
    queries = _as_queries(queries)
    n = ctx.num_entities
    with nx.no_grad():
        H = scmp_forward(queries, ctx, params, use_semantics=use_semantics)
        logits = params.score_mlp(H)
    return logits.data.reshape(len(queries), n)


def baseline_forward(queries, kg, params):
    """Plain conditional message passing: relation graph without the semantic
    node, source-only initialization, no semantic fusion."""
    queries = _as_queries(queries)
    full = build_relation_graph(kg, None)
    rg = RelationGraph(full.num_nodes - 1, full.without_semantic_node(), full.relation_names)
    reps = relation_representations(queries, rg, params)
    B = len(queries)
    rows = np.arange(B) * rg.num_nodes + np.array([q.relation for q in queries])
    init = init_conditional_states(queries, kg.num_entities, nx.gather_rows(reps.R_q, rows),
                                   params.v_a, None)
    tables = _layer_tables(reps.R_q, params.ent_layers)
    return cmp_forward(init, kg, tables, params.ent_layers, batch_size=B, per_query_relations=True)
