"""Relation graph over the relations of an augmented knowledge graph.

Nodes are the ``|R+|`` relations plus one semantic relation ``r_s`` (always the
last node). An edge ``(r1, l1-l2, r2)`` exists when some entity sits on side
``l1`` of a triple of ``r1`` and on side ``l2`` of a triple of ``r2``. The
semantic relation behaves as if every semantic neighbor pair ``(v, e)`` were a
triple ``(v, r_s, e)``, except that ``r_s`` never interacts with itself.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

INTERACTIONS = ("h2h", "h2t", "t2h", "t2t")
MIRROR = np.array([0, 2, 1, 3])
_SIDES = {"h2h": (0, 0), "h2t": (0, 1), "t2h": (1, 0), "t2t": (1, 1)}


@dataclass
class RelationGraph:
    num_nodes: int
    edges: np.ndarray
    relation_names: list = None

    num_edge_types = len(INTERACTIONS)

    @property
    def semantic_node(self):
        return self.num_nodes - 1

    def message_edges(self):
        return self.edges[:, 0], self.edges[:, 1], self.edges[:, 2]

    def edge_set(self):
        return set(map(tuple, self.edges.tolist()))

    def without_semantic_node(self):
        keep = (self.edges[:, 0] != self.semantic_node) & (self.edges[:, 2] != self.semantic_node)
        return self.edges[keep]

    def to_tsv(self, path):
        names = self.relation_names or [str(i) for i in range(self.num_nodes - 1)]
        names = list(names) + ["<semantic>"]
        with open(path, "w", encoding="utf-8") as fout:
            for src, kind, dst in self.edges.tolist():
                fout.write(f"{names[src]}\t{INTERACTIONS[kind]}\t{names[dst]}\n")


def _incidence(rows, cols, n_rows, n_cols):
    M = sp.csr_matrix((np.ones(len(rows), dtype=np.int64), (rows, cols)), shape=(n_rows, n_cols))
    M.data[:] = 1
    return M


def build_relation_graph(kg, sem=None):
    """Relation graph of an augmented ``kg`` with semantic neighbors ``sem``."""
    if not kg.augmented:
        raise ValueError("relation graph needs the augmented graph")
    n_rel = kg.num_relations
    rs = n_rel
    h, r, t = kg.triples.T
    sem_heads = sem_tails = np.zeros(0, dtype=np.int64)
    if sem is not None and not sem.is_empty():
        owners, members = sem.pairs()
        sem_heads, sem_tails = np.unique(owners), np.unique(members)
    head_rows = np.concatenate([h, sem_heads])
    head_cols = np.concatenate([r, np.full(len(sem_heads), rs)])
    tail_rows = np.concatenate([t, sem_tails])
    tail_cols = np.concatenate([r, np.full(len(sem_tails), rs)])
    sides = (_incidence(head_rows, head_cols, kg.num_entities, n_rel + 1),
             _incidence(tail_rows, tail_cols, kg.num_entities, n_rel + 1))

    parts = []
    for kind, name in enumerate(INTERACTIONS):
        l1, l2 = _SIDES[name]
        A = (sides[l1].T @ sides[l2]).tocoo()
        src, dst = A.row, A.col
        keep = ~((src == rs) & (dst == rs))
        parts.append(np.stack([src[keep], np.full(keep.sum(), kind), dst[keep]], axis=1))
    edges = np.concatenate(parts).astype(np.int64)
    edges = np.unique(edges, axis=0)
    return RelationGraph(n_rel + 1, edges, kg.relation_names)
