"""Semantic conditional message passing for inductive knowledge graph reasoning."""

from .errors import SCRError
from .evaluation import (compute_rank, evaluate_classification, evaluate_link_prediction,
                         ranking_metrics)
from .kg import KnowledgeGraph, Query, Triple, Vocabulary, augment_graph, parse_triples
from .model import GraphContext, ModelParams, init_params, prepare_graph, score_all, scmp_forward
from .relgraph import RelationGraph, build_relation_graph
from .semantics import semantic_neighbors, unify_features
from .tasks import TaskKG, transform_graph_task, transform_node_task
from .train import TrainConfig, make_training_graph, run_training

__version__ = "0.1.0"

__all__ = [
    "SCRError", "KnowledgeGraph", "Query", "Triple", "Vocabulary", "augment_graph",
    "parse_triples", "unify_features", "semantic_neighbors", "RelationGraph",
    "build_relation_graph", "ModelParams", "GraphContext", "init_params", "prepare_graph",
    "scmp_forward", "score_all", "TrainConfig", "make_training_graph", "run_training",
    "compute_rank", "ranking_metrics", "evaluate_link_prediction", "evaluate_classification",
    "TaskKG", "transform_node_task", "transform_graph_task",
]
