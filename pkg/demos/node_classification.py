"""Node classification as link prediction.

Class labels become entities and each labelled training node gets an
``is_attributed_with`` edge to its class. Classifying a node means ranking the
label entities for the query ``(node, is_attributed_with, ?)``.
"""

import numpy as np

from scr.evaluation import evaluate_classification
from scr.kg import augment_graph
from scr.model import init_params, prepare_graph
from scr.synthetic import two_cluster_graph
from scr.tasks import ATTRIBUTED, transform_node_task
from scr.train import TrainConfig, TrainingGraph, run_training

ds = two_cluster_graph(num_nodes=200, seed=0)
tkg = transform_node_task(ds, label_budget=0.5)
print(f"task KG: {tkg.kg.num_entities} entities ({ds.num_nodes} nodes + {ds.num_classes} labels), "
      f"{len(tkg.kg)} triples, {len(tkg.label_triples)} label edges")

aug = augment_graph(tkg.kg)
ctx = prepare_graph(aug, tkg.features, 32, k=2, delta=0.5)
graph = TrainingGraph(aug, {"provided": ctx}, tkg.label_triples, both_directions=False,
                      negative_pools={tkg.relation_ids[ATTRIBUTED]: np.asarray(tkg.label_entities)})
cfg = TrainConfig(dim=32, rel_layers=3, ent_layers=3, epochs=3, lr=2e-3, batch_size=16,
                  chunk_size=16, negatives=4, k=2, delta=0.5)

before = evaluate_classification(init_params(32, 3, 3, seed=0), ctx, tkg, "test")
result = run_training(graph, cfg)
after = evaluate_classification(result.params, ctx, tkg, "test")
print(f"test accuracy: untrained {before['accuracy']:.3f}, trained {after['accuracy']:.3f} "
      f"(macro-F1 {after['macro_f1']:.3f}, n={after['count']})")
