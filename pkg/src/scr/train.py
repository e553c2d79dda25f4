"""Training loop: filtered negative sampling, BCE objective, Adam, feature cycling.

Each batch is split into fixed-size chunks of queries. Chunks run on their own
tapes (possibly in parallel) and write gradients into private sinks, which are
then summed in chunk order in double precision, so results do not depend on
the number of worker threads.
"""

import json
import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import numerics as nx
from .checkpoint import Checkpoint
from .errors import AssumptionViolated, ConfigError, NoNegatives, TrainingDiverged
from .evaluation import evaluate_link_prediction, filter_graph
from .kg import Query, augment_graph, ontology_features, ones_features
from .model import (init_params, prepare_graph, query_independent_relations,
                    nonparametric_semantic_rep, scmp_forward, score_candidates)
from .parallel import chunks, map_ordered

logger = logging.getLogger(__name__)

FEATURE_TYPES = ("provided", "ones", "ontology")


@dataclass
class TrainConfig:
    lr: float = 5e-4
    batch_size: int = 8
    negatives: int = 16
    epochs: int = 10
    feature_cycle_interval: int = 100
    feature_types: tuple = ("provided",)
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    dim: int = 64
    rel_layers: int = 6
    ent_layers: int = 6
    k: int = 0
    delta: float = 0.9
    chunk_size: int = 4
    threads: int = 1
    remove_target_edges: bool = True
    eval_batch_size: int = 16
    use_semantics: bool = True

    def __post_init__(self):
        self.feature_types = tuple(self.feature_types)
        self.validate()

    def validate(self):
        if self.negatives < 1:
            raise ConfigError("negatives must be >= 1")
        if self.batch_size < 1 or self.chunk_size < 1:
            raise ConfigError("batch_size and chunk_size must be >= 1")
        if not self.feature_types:
            raise ConfigError("feature_types must be non-empty")
        unknown = set(self.feature_types) - set(FEATURE_TYPES)
        if unknown:
            raise ConfigError(f"unknown feature types {sorted(unknown)}")
        if self.feature_cycle_interval < 1:
            raise ConfigError("feature_cycle_interval must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")

    def to_dict(self):
        out = asdict(self)
        out["feature_types"] = list(self.feature_types)
        return out

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**data)


# ---------------------------------------------------------------------------
# data

@dataclass
class TrainingGraph:
    """One training KG with a prepared context per feature type.

    ``kg`` is augmented; ``train_triples`` are base triples used as positives.
    """

    kg: object
    contexts: dict
    train_triples: np.ndarray
    valid_triples: Optional[np.ndarray] = None
    filter_kg: object = None
    name: str = "kg"
    both_directions: bool = True
    negative_pools: Optional[dict] = None

    def queries(self):
        out = []
        for h, r, t in np.asarray(self.train_triples).tolist():
            out.append(Query(h, r, t))
            if self.both_directions:
                out.append(Query(t, self.kg.inverse(r), h))
        return out

    def pool(self, relation):
        return None if not self.negative_pools else self.negative_pools.get(relation)


def feature_matrix(kg, feature_type, provided=None, dim=64):
    """Raw features of one type for the augmented graph ``kg``."""
    if feature_type == "provided":
        if provided is None:
            raise ConfigError("feature type 'provided' requested but no features were given")
        return np.asarray(provided, dtype=np.float64)
    if feature_type == "ones":
        return ones_features(kg, dim)
    if feature_type == "ontology":
        return ontology_features(kg)
    raise ConfigError(f"unknown feature type {feature_type!r}")


def make_training_graph(kg, cfg, features=None, valid_triples=None, extra_known=(), name="kg"):
    """Augment ``kg`` and prepare one context per configured feature type.

    ``extra_known`` lists further triple arrays that count as true for
    filtered validation ranking.
    """
    aug = kg if kg.augmented else augment_graph(kg)
    contexts = {}
    for ft in cfg.feature_types:
        X = feature_matrix(aug, ft, features, cfg.dim)
        contexts[ft] = prepare_graph(aug, X, cfg.dim, k=cfg.k, delta=cfg.delta, seed=cfg.seed,
                                     feature_type=ft)
    filt = None
    if valid_triples is not None and len(valid_triples):
        filt = filter_graph(aug.base_triples, valid_triples, *extra_known,
                            num_entities=aug.num_entities, num_relations=aug.num_base_relations)
    return TrainingGraph(aug, contexts, np.asarray(aug.base_triples), valid_triples, filt, name)


# ---------------------------------------------------------------------------
# objective

def sample_negatives(query, kg, n, rng, candidates=None):
    """``n`` corrupted tails drawn uniformly (with replacement) from entities
    that do not complete a known triple ``(source, relation, e)``.

    ``candidates`` optionally restricts the pool (e.g. to label entities).
    """
    if n < 1:
        raise ConfigError("n must be >= 1")
    if candidates is None:
        mask = np.ones(kg.num_entities, dtype=bool)
    else:
        mask = np.zeros(kg.num_entities, dtype=bool)
        mask[np.asarray(candidates, dtype=np.int64)] = True
    mask[kg.tails(query.source, query.relation)] = False
    pool = np.flatnonzero(mask)
    if len(pool) == 0:
        raise NoNegatives(f"every entity is a known answer of {query}")
    return pool[rng.integers(0, len(pool), size=n)]


def objective_weights(batch_size, n, scale=1.0):
    """Per-logit weights for the layout ``[pos, neg_1..neg_n]`` per query."""
    w = np.full((batch_size, n + 1), 1.0 / n)
    w[:, 0] = 1.0
    return (w * scale / batch_size).reshape(-1)


def batch_loss(queries, negatives, H, params, num_entities, scale=1.0):
    """Mean over queries of ``-log s(pos) - 1/n sum log(1 - s(neg))``.

    ``H`` holds the ``(B * N, d)`` states from :func:`scmp_forward`.
    ``scale`` multiplies the result (used to split a batch into chunks).
    """
    negatives = np.asarray(negatives, dtype=np.int64)
    B, n = negatives.shape
    answers = np.array([q.answer for q in queries], dtype=np.int64)
    cand = np.concatenate([answers[:, None], negatives], axis=1)
    rows = (np.arange(B)[:, None] * num_entities + cand).reshape(-1)
    logits = score_candidates(H, rows, params)
    targets = np.zeros((B, n + 1))
    targets[:, 0] = 1.0
    return nx.bce_with_logits(logits, targets.reshape(-1), objective_weights(B, n, scale))


def target_edge_mask(kg, queries):
    """Per-query mask hiding the queried triple and its inverse."""
    mask = np.ones((len(queries), len(kg.triples)), dtype=bool)
    for b, q in enumerate(queries):
        ids = kg.edge_ids([(q.source, q.relation, q.answer), (q.answer, kg.inverse(q.relation), q.source)])
        mask[b, ids[ids >= 0]] = False
    return mask


# ---------------------------------------------------------------------------
# optimizer

class Adam:
    """Adam with float32 moments so that checkpoints capture the full state."""

    def __init__(self, named_params, lr=5e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = OrderedDict(named_params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = OrderedDict((k, np.zeros(p.shape, dtype=np.float32)) for k, p in self.params.items())
        self.v = OrderedDict((k, np.zeros(p.shape, dtype=np.float32)) for k, p in self.params.items())

    def step(self, grads):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            m = b1 * self.m[name].astype(np.float64) + (1.0 - b1) * g
            v = b2 * self.v[name].astype(np.float64) + (1.0 - b2) * g * g
            self.m[name] = m.astype(np.float32)
            self.v[name] = v.astype(np.float32)
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data[...] = (p.data.astype(np.float64) - update).astype(p.dtype)


def clip_gradients(grads, max_norm):
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm and total > max_norm:
        factor = max_norm / total
        grads = OrderedDict((k, g * factor) for k, g in grads.items())
    return grads, total


# ---------------------------------------------------------------------------
# loop

@dataclass
class TrainResult:
    params: object
    best_params: object
    checkpoint: Checkpoint
    best_checkpoint: Checkpoint
    log: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    va_checks: int = 0


def active_feature(cfg, global_batch):
    types = cfg.feature_types
    return types[(global_batch // cfg.feature_cycle_interval) % len(types)]


def make_checkpoint(params, opt, cfg, epoch, step, best_val=None):
    tensors = OrderedDict()
    for name, p in params.named_parameters().items():
        tensors[f"param/{name}"] = p.data
    for name in opt.m:
        tensors[f"adam/m/{name}"] = opt.m[name]
        tensors[f"adam/v/{name}"] = opt.v[name]
    state = {"epoch": epoch, "step": step, "adam_t": opt.t,
             "rng": {"seed": cfg.seed, "stream": "numpy-pcg64[seed,epoch,batch]"}}
    if best_val is not None:
        state["best_val_mrr"] = best_val
    config = cfg.to_dict()
    config.pop("threads")  # worker count never changes results
    return Checkpoint(config, tensors, state)


def params_from_checkpoint(ckpt):
    cfg = ckpt.config
    params = init_params(cfg.get("dim", 64), cfg.get("rel_layers", 6), cfg.get("ent_layers", 6),
                         seed=cfg.get("seed", 0))
    params.load_arrays(ckpt.params())
    return params


def _batch_gradients(graph, ctx, params, queries, negatives, cfg, batch_len):
    """Loss value and double-precision gradients of one batch."""
    named = params.named_parameters()
    key_of = {id(p): name for name, p in named.items()}
    # warm the query-independent caches before threads share the context
    R_g = query_independent_relations(ctx, params)
    if cfg.use_semantics:
        nonparametric_semantic_rep(ctx, R_g, params)
    n_ent = ctx.num_entities
    pieces = list(zip(chunks(queries, cfg.chunk_size), chunks(list(negatives), cfg.chunk_size)))

    def run(piece):
        qs, negs = piece
        mask = target_edge_mask(ctx.kg, qs) if cfg.remove_target_edges else None
        sink = {}
        with nx.Tape() as tape:
            H = scmp_forward(qs, ctx, params, edge_mask=mask, use_semantics=cfg.use_semantics)
            loss = batch_loss(qs, negs, H, params, n_ent, scale=len(qs) / batch_len)
        nx.backward(tape, loss, sink=sink)
        return loss.item(), sink

    results = map_ordered(run, pieces, cfg.threads)
    grads = OrderedDict((name, np.zeros(p.shape)) for name, p in named.items())
    total = 0.0
    for value, sink in results:
        total += value
        for pid, g in sink.items():
            grads[key_of[pid]] += g
    return total, grads


def run_training(graphs, cfg, params=None, resume=None, log_path=None, dump_path=None,
                 stop_epoch=None, on_epoch=None):
    """Train on ``graphs`` (a list of :class:`TrainingGraph`).

    ``resume`` continues from a checkpoint written by a previous call;
    ``stop_epoch`` ends early after that many completed epochs, as does a
    truthy return from ``on_epoch(record, params)``.
    """
    if isinstance(graphs, TrainingGraph):
        graphs = [graphs]
    if params is None:
        params = init_params(cfg.dim, cfg.rel_layers, cfg.ent_layers, seed=cfg.seed)
    opt = Adam(params.named_parameters(), cfg.lr, (cfg.beta1, cfg.beta2), cfg.adam_eps)
    start_epoch, step, best_val = 0, 0, None
    if resume is not None:
        params.load_arrays(resume.params())
        moments = resume.moments()
        for name in opt.m:
            opt.m[name] = moments[f"m/{name}"].astype(np.float32)
            opt.v[name] = moments[f"v/{name}"].astype(np.float32)
        opt.t = int(resume.state["adam_t"])
        start_epoch = int(resume.state["epoch"])
        step = int(resume.state["step"])
        best_val = resume.state.get("best_val_mrr")
    per_graph = [g.queries() for g in graphs]
    result = TrainResult(params, params.copy(), None, None)
    result.best_checkpoint = make_checkpoint(params, opt, cfg, start_epoch, step, best_val)
    last_epoch = cfg.epochs if stop_epoch is None else min(cfg.epochs, stop_epoch)
    completed = start_epoch
    log_file = open(log_path, "a" if resume is not None else "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(start_epoch, last_epoch):
            order_rng = np.random.default_rng([cfg.seed, epoch])
            plan = []
            for gi, qs in enumerate(per_graph):
                perm = order_rng.permutation(len(qs))
                for chunk in chunks(perm.tolist(), cfg.batch_size):
                    plan.append((gi, [qs[i] for i in chunk]))
            plan = [plan[i] for i in order_rng.permutation(len(plan))]
            epoch_losses = []
            feature = active_feature(cfg, step)
            for bi, (gi, queries) in enumerate(plan):
                graph = graphs[gi]
                feature = active_feature(cfg, step)
                ctx = graph.contexts[feature]
                rng = np.random.default_rng([cfg.seed, epoch, bi])
                negatives = np.stack([sample_negatives(q, graph.kg, cfg.negatives, rng, graph.pool(q.relation))
                                      for q in queries])
                loss, grads = _batch_gradients(graph, ctx, params, queries, negatives, cfg, len(queries))
                if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                    dump = {"epoch": epoch, "batch": bi, "graph": graph.name, "feature": feature,
                            "loss": loss, "queries": [list(q) for q in queries],
                            "negatives": negatives.tolist()}
                    if dump_path:
                        with open(dump_path, "w", encoding="utf-8") as fout:
                            json.dump(dump, fout, indent=1, default=float)
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch} batch {bi}", dump)
                grads, _ = clip_gradients(grads, cfg.grad_clip)
                opt.step(grads)
                params.bump()
                result.va_checks += 1
                if not np.all(params.v_a.data != 0):
                    raise AssumptionViolated(
                        f"v_a has zero entries after step {step}: "
                        f"{np.flatnonzero(params.v_a.data == 0).tolist()}")
                step += 1
                epoch_losses.append(loss)
                result.losses.append(loss)
            record = {"epoch": epoch + 1, "loss": float(np.mean(epoch_losses)) if epoch_losses else None,
                      "val_mrr": None, "val_hits10": None, "active_feature": feature}
            val = _validate(graphs, params, cfg)
            if val is not None:
                record["val_mrr"], record["val_hits10"] = val
            result.log.append(record)
            if log_file:
                log_file.write(json.dumps(record, sort_keys=True) + "\n")
                log_file.flush()
            score = record["val_mrr"]
            if score is None or best_val is None or score > best_val:
                best_val = score if score is not None else best_val
                result.best_params = params.copy()
                result.best_checkpoint = make_checkpoint(params, opt, cfg, epoch + 1, step, best_val)
            completed = epoch + 1
            if on_epoch is not None and on_epoch(record, params):
                break
    finally:
        if log_file:
            log_file.close()
    result.checkpoint = make_checkpoint(params, opt, cfg, completed, step, best_val)
    return result


def _validate(graphs, params, cfg):
    mrrs, hits = [], []
    for graph in graphs:
        if graph.valid_triples is None or not len(graph.valid_triples):
            continue
        ctx = graph.contexts[cfg.feature_types[0]]
        m = evaluate_link_prediction(params, ctx, graph.valid_triples, graph.filter_kg,
                                     batch_size=cfg.eval_batch_size, threads=cfg.threads,
                                     use_semantics=cfg.use_semantics)
        mrrs.append(m["mrr"])
        hits.append(m["hits@10"])
    if not mrrs:
        return None
    return float(np.mean(mrrs)), float(np.mean(hits))
