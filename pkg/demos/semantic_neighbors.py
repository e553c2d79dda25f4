"""Why entity features matter: two candidates that topology cannot tell apart.

The query entity q reaches a hub a, and a points at both e1 and e2. Every
path from q to e1 has a mirror path to e2, so plain conditional message
passing must give them the same score. Here e1's features resemble q's, so e1
becomes a semantic neighbor of q and the semantic model can separate them.
"""

import numpy as np

from scr.kg import KnowledgeGraph, Query, augment_graph
from scr.model import init_params, prepare_graph, score_all

kg = augment_graph(KnowledgeGraph([(0, 0, 1), (1, 0, 2), (1, 0, 3)], 4, 1,
                                  entity_names=["q", "a", "e1", "e2"]))
X = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.95, 0.05, 0.0], [0.0, 0.0, 1.0]])
params = init_params(8, 2, 2, seed=0)

with_sem = prepare_graph(kg, X, 8, k=1, delta=0.5)
print("semantic neighbors of q:", [kg.entity_names[i] for i in with_sem.sem[0]])

reduced = params.copy()
reduced.merge_mlp.w2.data[:] = 0
reduced.merge_mlp.b2.data[:] = 0
reduced.bump()
without = prepare_graph(kg, X, 8, k=0)

for label, ctx, p in (("semantic", with_sem, params), ("topology only", without, reduced)):
    logits = score_all([Query(0, 0)], ctx, p)[0]
    print(f"{label:>14}: e1 {logits[2]:+.5f}  e2 {logits[3]:+.5f}  gap {abs(logits[2] - logits[3]):.2e}")
