"""Command-line pipeline: ``scr <subcommand> [options]``.

Configuration comes from an optional YAML/JSON file with flat keys, then
dedicated flags, then ``--key=value`` overrides. Unknown keys are rejected.
Every command writes a ``manifest.json`` into ``--out``; files are written as
``<name>.partial`` and renamed only after the command succeeds.
"""

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .checkpoint import load_checkpoint, to_bytes
from .errors import ConfigError, SCRError
from .evaluation import (evaluate_classification, evaluate_link_prediction, filter_graph,
                         format_table, null_mrr)
from .io import read_features, write_fvec
from .kg import Query, Vocabulary, augment_graph, from_labeled_triples, read_triple_rows
from .model import GraphContext, init_params, prepare_graph, score_all
from .relgraph import build_relation_graph
from .semantics import SemanticNeighborSet, UnifiedFeatures
from .tasks import (load_graph_dataset, load_node_dataset, transform_graph_task,
                    transform_node_task, write_task_kg)
from .train import (TrainConfig, TrainingGraph, feature_matrix,
                    params_from_checkpoint, run_training)

logger = logging.getLogger("scr")

# run-level keys on top of TrainConfig; "threads" never affects results
RUN_KEYS = {
    "train_data": [],
    "data": None,
    "label_budget": 1.0,
    "k_graph": 1,
    "graph_delta": 0.9,
    "task": "node",
    "finetune_epochs": 0,
    "top": 10,
}
NON_SEMANTIC = {"threads"}


@dataclass
class RunConfig:
    train: TrainConfig
    run: dict

    def to_dict(self, include_threads=True):
        out = dict(self.train.to_dict())
        out.update(self.run)
        if not include_threads:
            for key in NON_SEMANTIC:
                out.pop(key, None)
        return out


def _coerce(value):
    if isinstance(value, str):
        try:
            return yaml.safe_load(value)
        except yaml.YAMLError:
            return value
    return value


def build_config(args, extra):
    """Merge config file, flags and ``--key=value`` overrides into a RunConfig."""
    data = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fin:
            loaded = yaml.safe_load(fin) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{args.config}: expected a mapping of flat keys")
        data.update(loaded)
    flag_map = {"seed": "seed", "threads": "threads", "k": "k", "delta": "delta",
                "label_budget": "label_budget", "data": "data"}
    for attr, key in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            data[key] = value
    if getattr(args, "feature_type", None):
        data["feature_types"] = [s.strip() for s in args.feature_type.split(",") if s.strip()]
    for item in extra:
        if not item.startswith("--") or "=" not in item:
            raise ConfigError(f"unrecognized argument {item!r}; overrides use --key=value")
        key, value = item[2:].split("=", 1)
        data[key.replace("-", "_")] = _coerce(value)
    train_keys = {f.name for f in fields(TrainConfig)}
    unknown = set(data) - train_keys - set(RUN_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    if "feature_types" in data and isinstance(data["feature_types"], str):
        data["feature_types"] = [data["feature_types"]]
    run = dict(RUN_KEYS)
    run.update({k: v for k, v in data.items() if k in RUN_KEYS})
    if isinstance(run["train_data"], str):
        run["train_data"] = [run["train_data"]]
    try:
        train = TrainConfig(**{k: v for k, v in data.items() if k in train_keys})
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(train, run)


# ---------------------------------------------------------------------------
# files, hashes, manifest

def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fin:
        for block in iter(lambda: fin.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def git_blob_digest(data):
    """Content digest in git's blob format: ``sha1("blob <len>\\0" + data)``."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def canonical_hash(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode("utf-8")).hexdigest()


class Outputs:
    """Tracks files written by a command; finalizes or leaves them ``.partial``."""

    def __init__(self, directory):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.pending = []

    def path(self, name):
        final = self.dir / name
        tmp = final.with_name(final.name + ".partial")
        self.pending.append((tmp, final))
        return tmp

    def commit(self):
        for tmp, final in self.pending:
            if tmp.exists():
                os.replace(tmp, final)
        done = [final for _, final in self.pending]
        self.pending = []
        return done


def dataset_files(directory):
    d = Path(directory)
    return sorted(p for p in d.rglob("*") if p.is_file() and not p.name.endswith(".partial"))


def write_manifest(outputs, command, cfg, datasets=(), checkpoint_bytes=None, extra_outputs=None):
    files = {}
    for d in datasets:
        if d is None:
            continue
        p = Path(d)
        targets = dataset_files(p) if p.is_dir() else [p]
        for f in targets:
            files[str(f)] = sha256_file(f)
    manifest = {
        "command": command,
        "version": __version__,
        "config": cfg.to_dict(include_threads=False),
        "config_hash": canonical_hash(cfg.to_dict(include_threads=False)),
        "datasets": files,
    }
    if checkpoint_bytes is not None:
        manifest["checkpoint_digest"] = git_blob_digest(checkpoint_bytes)
    produced = {}
    for tmp, final in outputs.pending:
        if tmp.exists():
            produced[final.name] = sha256_file(tmp)
    produced.update(extra_outputs or {})
    manifest["outputs"] = produced
    with open(outputs.path("manifest.json"), "w", encoding="utf-8") as fout:
        json.dump(manifest, fout, indent=1, sort_keys=True)
        fout.write("\n")
    return manifest


# ---------------------------------------------------------------------------
# KG datasets

def _find(directory, stem):
    for ext in (".txt", ".tsv"):
        p = Path(directory) / f"{stem}{ext}"
        if p.exists():
            return p
    return None


@dataclass
class KGDataset:
    """Triples of one graph: ``train`` forms the graph, ``valid``/``test`` are held out."""

    path: Path
    kg: object
    vocab: Vocabulary
    splits: dict
    features: object = None


def load_kg_dataset(directory):
    """Read ``train``/``valid``/``test`` triple files (``.txt`` or ``.tsv``).

    One vocabulary covers all splits, in file order train, valid, test.
    """
    d = Path(directory)
    if not d.is_dir():
        raise ConfigError(f"dataset directory {d} does not exist")
    train_file = _find(d, "train")
    if train_file is None:
        raise ConfigError(f"{d}: missing train.txt / train.tsv")
    vocab = Vocabulary()
    rows = {"train": read_triple_rows(train_file)}
    for name in ("valid", "test"):
        p = _find(d, name)
        rows[name] = read_triple_rows(p) if p is not None else []
    for name in ("train", "valid", "test"):
        for h, r, t in rows[name]:
            vocab.entity_id(h)
            vocab.relation_id(r)
            vocab.entity_id(t)
    kg, vocab = from_labeled_triples(rows["train"], vocab, source=str(train_file))
    splits = {"train": kg.triples}
    for name in ("valid", "test"):
        ids = [(vocab.entities[h], vocab.relations[r], vocab.entities[t]) for h, r, t in rows[name]]
        splits[name] = np.array(ids, dtype=np.int64).reshape(-1, 3)
    features = None
    for fname in ("features.fvec", "features.tsv"):
        if (d / fname).exists():
            features = read_features(d / fname, vocab.entities, len(vocab.entities))
            break
    return KGDataset(d, kg, vocab, splits, features)


def cache_dir():
    value = os.environ.get("SCR_CACHE_DIR")
    return Path(value) if value else None


def _context_key(ds, feature_type, cfg):
    parts = {"files": [sha256_file(f) for f in dataset_files(ds.path)], "feature": feature_type,
             "dim": cfg.dim, "k": cfg.k, "delta": cfg.delta, "seed": cfg.seed}
    return canonical_hash(parts)[:24]


def prepared_context(ds, aug, feature_type, cfg):
    """Context for one feature view, read from / written to ``SCR_CACHE_DIR`` when set."""
    root = cache_dir()
    path = None
    if root is not None:
        path = root / f"ctx-{_context_key(ds, feature_type, cfg)}.npz"
        if path.exists():
            with np.load(path) as z:
                counts = z["sem_counts"]
                members = np.split(z["sem_members"], np.cumsum(counts)[:-1]) if len(counts) else []
                scores = np.split(z["sem_scores"], np.cumsum(counts)[:-1]) if len(counts) else []
                sem = SemanticNeighborSet([m.astype(np.int64) for m in members], list(scores))
                U = UnifiedFeatures(z["unified"], z["raw"], int(z["rank"]))
            return GraphContext(aug, U, sem, build_relation_graph(aug, sem), feature_type)
    X = feature_matrix(aug, feature_type, ds.features, cfg.dim)
    ctx = prepare_graph(aug, X, cfg.dim, k=cfg.k, delta=cfg.delta, seed=cfg.seed,
                        feature_type=feature_type)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".partial")
        with open(tmp, "wb") as fout:
            np.savez(fout, unified=ctx.features.data, raw=ctx.features.raw,
                     rank=ctx.features.effective_rank,
                     sem_counts=np.array([len(m) for m in ctx.sem.members], dtype=np.int64),
                     sem_members=np.concatenate(ctx.sem.members) if ctx.sem.members else np.zeros(0),
                     sem_scores=np.concatenate(ctx.sem.scores) if ctx.sem.scores else np.zeros(0))
        os.replace(tmp, path)
    return ctx


def training_graph(ds, cfg):
    aug = augment_graph(ds.kg)
    contexts = {ft: prepared_context(ds, aug, ft, cfg) for ft in cfg.feature_types}
    valid = ds.splits["valid"]
    filt = None
    if len(valid):
        filt = filter_graph(ds.splits["train"], valid, ds.splits["test"],
                            num_entities=aug.num_entities, num_relations=aug.num_base_relations)
    return TrainingGraph(aug, contexts, np.asarray(aug.base_triples), valid if len(valid) else None,
                         filt, ds.path.name)


def _load_params(args, cfg):
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        return params_from_checkpoint(ckpt), to_bytes(ckpt)
    params = init_params(cfg.train.dim, cfg.train.rel_layers, cfg.train.ent_layers, seed=cfg.train.seed)
    return params, None


def _require_data(cfg):
    if not cfg.run["data"]:
        raise ConfigError("no dataset given (use --data or the 'data' config key)")
    return cfg.run["data"]


# ---------------------------------------------------------------------------
# subcommands

def cmd_preprocess(args, cfg, out):
    ds = load_kg_dataset(_require_data(cfg))
    aug = augment_graph(ds.kg)
    summary = {"entities": aug.num_entities, "base_relations": aug.num_base_relations,
               "base_triples": aug.base_triple_count, "augmented_triples": len(aug.triples)}
    for ft in cfg.train.feature_types:
        ctx = prepared_context(ds, aug, ft, cfg.train)
        write_fvec(out.path(f"unified_{ft}.fvec"), ctx.features.data)
        with open(out.path(f"semantic_neighbors_{ft}.tsv"), "w", encoding="utf-8") as fout:
            for owner, members in enumerate(ctx.sem.members):
                for m in members:
                    fout.write(f"{ds.vocab.entity_names()[owner]}\t{ds.vocab.entity_names()[m]}\n")
        ctx.rg.to_tsv(out.path(f"relation_graph_{ft}.tsv"))
        summary[f"semantic_pairs_{ft}"] = int(sum(len(m) for m in ctx.sem.members))
        summary[f"relation_graph_edges_{ft}"] = int(len(ctx.rg.edges))
    with open(out.path("augmented.tsv"), "w", encoding="utf-8") as fout:
        names = aug.entity_names or ds.vocab.entity_names()
        rels = aug.relation_names
        for h, r, t in aug.triples.tolist():
            fout.write(f"{names[h]}\t{rels[r]}\t{names[t]}\n")
    with open(out.path("summary.json"), "w", encoding="utf-8") as fout:
        json.dump(summary, fout, indent=1, sort_keys=True)
    print(json.dumps(summary, sort_keys=True))
    return write_manifest(out, "preprocess", cfg, [ds.path])


def cmd_train(args, cfg, out):
    paths = list(cfg.run["train_data"]) or ([cfg.run["data"]] if cfg.run["data"] else [])
    if not paths:
        raise ConfigError("no training data (use --data or the 'train_data' config key)")
    datasets = [load_kg_dataset(p) for p in paths]
    graphs = [training_graph(ds, cfg.train) for ds in datasets]
    params, resume = None, None
    if args.checkpoint:
        resume = load_checkpoint(args.checkpoint)
    result = run_training(graphs, cfg.train, params=params, resume=resume,
                          log_path=out.path("metrics.jsonl"), dump_path=out.dir / "divergence.json")
    last = to_bytes(result.checkpoint)
    best = to_bytes(result.best_checkpoint)
    with open(out.path("checkpoint.scr"), "wb") as fout:
        fout.write(last)
    with open(out.path("best.scr"), "wb") as fout:
        fout.write(best)
    for rec in result.log:
        print(json.dumps(rec, sort_keys=True))
    return write_manifest(out, "train", cfg, paths, checkpoint_bytes=best)


def cmd_eval_kg(args, cfg, out):
    ds = load_kg_dataset(_require_data(cfg))
    params, ckpt_bytes = _load_params(args, cfg)
    if cfg.train.dim != params.dim:
        cfg.train.dim = params.dim
    aug = augment_graph(ds.kg)
    ft = cfg.train.feature_types[0]
    ctx = prepared_context(ds, aug, ft, cfg.train)
    test = ds.splits["test"] if len(ds.splits["test"]) else ds.splits["valid"]
    if not len(test):
        raise ConfigError(f"{ds.path}: no test or valid triples to evaluate")
    filt = filter_graph(ds.splits["train"], ds.splits["valid"], ds.splits["test"],
                        num_entities=aug.num_entities, num_relations=aug.num_base_relations)
    metrics = evaluate_link_prediction(params, ctx, test, filt, batch_size=cfg.train.eval_batch_size,
                                       threads=cfg.train.threads, use_semantics=cfg.train.use_semantics)
    metrics["null_mrr"] = null_mrr(aug.num_entities)
    metrics["feature_type"] = ft
    metrics["dataset"] = ds.path.name
    with open(out.path("metrics.jsonl"), "w", encoding="utf-8") as fout:
        fout.write(json.dumps(metrics, sort_keys=True) + "\n")
    print(format_table(metrics))
    return write_manifest(out, "eval-kg", cfg, [ds.path], checkpoint_bytes=ckpt_bytes)


def _transform(cfg, task):
    data = _require_data(cfg)
    budget = cfg.run["label_budget"]
    if task == "node":
        return transform_node_task(load_node_dataset(data), budget, seed=cfg.train.seed), data
    return transform_graph_task(load_graph_dataset(data), k_graph=cfg.run["k_graph"],
                                delta=cfg.run["graph_delta"], unified_dim=cfg.train.dim,
                                seed=cfg.train.seed, label_budget=budget), data


def _tkg_summary(tkg):
    return {"entities": tkg.kg.num_entities, "base_relations": tkg.kg.num_relations,
            "base_triples": len(tkg.kg.triples), "label_entities": len(tkg.label_entities),
            "label_triples": len(tkg.label_triples),
            "queries": {s: len(v) for s, v in tkg.queries_by_split.items()}}


def cmd_transform(args, cfg, out, task):
    tkg, data = _transform(cfg, task)
    tmp_dir = out.dir / "task_kg.partial"
    write_task_kg(tkg, tmp_dir)
    summary = _tkg_summary(tkg)
    with open(out.path("summary.json"), "w", encoding="utf-8") as fout:
        json.dump(summary, fout, indent=1, sort_keys=True)
    print(json.dumps(summary, sort_keys=True))
    written = {f"task_kg/{f.name}": sha256_file(f) for f in sorted(tmp_dir.iterdir())}
    manifest = write_manifest(out, f"transform-{task}", cfg, [data], extra_outputs=written)
    final = out.dir / "task_kg"
    if final.exists():
        for f in final.iterdir():
            f.unlink()
        final.rmdir()
    os.replace(tmp_dir, final)
    return manifest


def classification_context(tkg, cfg):
    aug = augment_graph(tkg.kg)
    ft = cfg.train.feature_types[0]
    X = tkg.features if ft == "provided" else feature_matrix(aug, ft, None, cfg.train.dim)
    return prepare_graph(aug, X, cfg.train.dim, k=cfg.train.k, delta=cfg.train.delta,
                         seed=cfg.train.seed, feature_type=ft)


def classification_training_graph(tkg, ctx):
    label_entities = np.asarray(tkg.label_entities)
    return TrainingGraph(ctx.kg, {ctx.feature_type: ctx}, tkg.label_triples, None, None, "task",
                         both_directions=False,
                         negative_pools={tkg.relation_ids["is_attributed_with"]: label_entities})


def cmd_eval_class(args, cfg, out):
    tkg, data = _transform(cfg, cfg.run["task"])
    params, ckpt_bytes = _load_params(args, cfg)
    cfg.train.dim = params.dim
    ctx = classification_context(tkg, cfg)
    records = []
    if cfg.run["finetune_epochs"]:
        tcfg = TrainConfig(**{**cfg.train.to_dict(), "epochs": cfg.run["finetune_epochs"],
                              "feature_types": [ctx.feature_type]})
        result = run_training([classification_training_graph(tkg, ctx)], tcfg, params=params)
        params = result.params
        records.extend({"phase": "finetune", **r} for r in result.log)
    for split in ("val", "test"):
        if not tkg.queries_by_split.get(split):
            continue
        m = evaluate_classification(params, ctx, tkg, split, batch_size=cfg.train.eval_batch_size,
                                    threads=cfg.train.threads)
        m["per_class"] = {str(k): v for k, v in m["per_class"].items()}
        records.append({"phase": "eval", "split": split, **m})
        print(f"{split}: accuracy {m['accuracy']:.4f}  macro-F1 {m['macro_f1']:.4f}  (n={m['count']})")
    with open(out.path("metrics.jsonl"), "w", encoding="utf-8") as fout:
        for rec in records:
            fout.write(json.dumps(rec, sort_keys=True) + "\n")
    return write_manifest(out, "eval-class", cfg, [data], checkpoint_bytes=ckpt_bytes)


def cmd_rank(args, cfg, out):
    ds = load_kg_dataset(_require_data(cfg))
    params, ckpt_bytes = _load_params(args, cfg)
    cfg.train.dim = params.dim
    aug = augment_graph(ds.kg)
    try:
        head = ds.vocab.entities[args.head]
    except KeyError:
        raise ConfigError(f"unknown entity {args.head!r}") from None
    rel_name = args.relation
    inverse = rel_name.endswith("^-1")
    try:
        rel = ds.vocab.relations[rel_name[:-3] if inverse else rel_name]
    except KeyError:
        raise ConfigError(f"unknown relation {rel_name!r}") from None
    if inverse:
        rel = aug.inverse(rel)
    ctx = prepared_context(ds, aug, cfg.train.feature_types[0], cfg.train)
    logits = score_all([Query(head, rel)], ctx, params)[0]
    order = np.lexsort((np.arange(len(logits)), -logits))[: cfg.run["top"]]
    names = ds.vocab.entity_names()
    rows = [{"rank": i + 1, "entity": names[e], "score": float(logits[e])} for i, e in enumerate(order)]
    with open(out.path("ranking.jsonl"), "w", encoding="utf-8") as fout:
        for row in rows:
            fout.write(json.dumps(row, sort_keys=True) + "\n")
    for row in rows:
        print(f"{row['rank']:>4d}  {row['score']:+.4f}  {row['entity']}")
    return write_manifest(out, "rank", cfg, [ds.path], checkpoint_bytes=ckpt_bytes)


def cmd_selftest(args, cfg, out):
    from .oracles import run_selftest
    results = run_selftest(args.instances, seed=cfg.train.seed)
    with open(out.path("selftest.jsonl"), "w", encoding="utf-8") as fout:
        for rec in results:
            fout.write(json.dumps({k: v for k, v in rec.items() if k != "seconds"}, sort_keys=True) + "\n")
    for rec in results:
        print(f"{'PASS' if rec['passed'] else 'FAIL'}  {rec['suite']:<20s} "
              f"{rec['instances'] - rec['failures']}/{rec['instances']}")
    write_manifest(out, "selftest", cfg)
    if not all(r["passed"] for r in results):
        raise SelftestFailed("oracle suites failed")
    return None


class SelftestFailed(SCRError):
    pass


# ---------------------------------------------------------------------------

def make_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON file with flat config keys")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--out", default="scr_out", help="output directory")
    common.add_argument("--checkpoint", help="checkpoint file to load")
    common.add_argument("--feature-type", help="comma-separated list of provided, ones, ontology")
    common.add_argument("--k", type=int, help="semantic neighbors per entity")
    common.add_argument("--delta", type=float, help="semantic similarity threshold")
    common.add_argument("--label-budget", type=_coerce, help="fraction in (0,1] or per-class count")
    common.add_argument("--data", help="dataset directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="scr", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("preprocess", parents=[common], help="augmented KG, unified features, neighbors, relation graph")
    sub.add_parser("train", parents=[common], help="train on one or more KGs")
    sub.add_parser("eval-kg", parents=[common], help="inductive link prediction on a dataset")
    sub.add_parser("transform-node", parents=[common], help="node classification dataset to task KG")
    sub.add_parser("transform-graph", parents=[common], help="graph classification dataset to task KG")
    sub.add_parser("eval-class", parents=[common], help="classification through label queries")
    rank = sub.add_parser("rank", parents=[common], help="score one (head, relation, ?) query")
    rank.add_argument("--head", required=True)
    rank.add_argument("--relation", required=True, help="relation name; append ^-1 for the inverse")
    selftest = sub.add_parser("selftest", parents=[common], help="run the brute-force oracle suites")
    selftest.add_argument("--instances", type=int, default=100)
    return parser


COMMANDS = {
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "eval-kg": cmd_eval_kg,
    "transform-node": lambda a, c, o: cmd_transform(a, c, o, "node"),
    "transform-graph": lambda a, c, o: cmd_transform(a, c, o, "graph"),
    "eval-class": cmd_eval_class,
    "rank": cmd_rank,
    "selftest": cmd_selftest,
}


def main(argv=None):
    parser = make_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = None
    try:
        cfg = build_config(args, extra)
        out = Outputs(args.out)
        COMMANDS[args.command](args, cfg, out)
        out.commit()
    except (SCRError, OSError, KeyError, ValueError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        if out is not None and out.pending:
            err["partial_outputs"] = [str(tmp) for tmp, _ in out.pending if tmp.exists()]
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
