"""Knowledge graph storage, parsing and triple augmentation.

Relations of an augmented graph are laid out as ``[base | inverse | identity]``:
base relation ``r`` has inverse ``r + R`` and the identity relation is ``2R``.
"""

import logging
import warnings
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .errors import AlreadyAugmented, EmptyDataset, InvalidDimension, ParseError

logger = logging.getLogger(__name__)

INVERSE_SUFFIX = "^-1"
IDENTITY_NAME = "<identity>"


class Triple(NamedTuple):
    head: int
    relation: int
    tail: int


class Query(NamedTuple):
    """A tail query ``(source, relation, ?)``.

    Head queries ``(?, r, t)`` are expressed as ``Query(t, inverse(r))``.
    """

    source: int
    relation: int
    answer: Optional[int] = None


class Vocabulary:
    """Entity and relation name-to-index maps in first-occurrence order."""

    def __init__(self, entities=None, relations=None):
        self.entities = dict(entities or {})
        self.relations = dict(relations or {})

    def entity_id(self, name):
        idx = self.entities.get(name)
        if idx is None:
            idx = self.entities[name] = len(self.entities)
        return idx

    def relation_id(self, name):
        idx = self.relations.get(name)
        if idx is None:
            idx = self.relations[name] = len(self.relations)
        return idx

    def entity_names(self):
        return list(self.entities)

    def relation_names(self):
        return list(self.relations)

    def copy(self):
        return Vocabulary(self.entities, self.relations)


class KnowledgeGraph:
    """Immutable triple store with per-(head, relation) adjacency.

    Parameters:
        triples (array-like): ``(n, 3)`` integer array of ``(head, relation, tail)``
        num_entities (int): size of the entity vocabulary
        num_relations (int): size of the relation vocabulary (augmented count
            when ``augmented`` is set)
        entity_names, relation_names (list of str, optional): vocabularies
        augmented (bool): whether ``triples`` already holds the inverse and
            identity triples
        base_triple_count (int, optional): number of base triples, required
            for augmented graphs
    """

    def __init__(self, triples, num_entities, num_relations, entity_names=None,
                 relation_names=None, augmented=False, base_triple_count=None):
        triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        self.num_entities = int(num_entities)
        self.num_relations = int(num_relations)
        self.augmented = bool(augmented)
        if augmented:
            self.num_base_relations = (self.num_relations - 1) // 2
            self.base_triple_count = int(base_triple_count)
        else:
            self.num_base_relations = self.num_relations
            self.base_triple_count = len(triples)
        if len(triples):
            if triples[:, [0, 2]].min() < 0 or triples[:, [0, 2]].max() >= self.num_entities:
                raise IndexError("triple entity index out of range")
            if triples[:, 1].min() < 0 or triples[:, 1].max() >= self.num_relations:
                raise IndexError("triple relation index out of range")
        self.triples = triples
        self.triples.setflags(write=False)
        self.entity_names = list(entity_names) if entity_names is not None else None
        self.relation_names = list(relation_names) if relation_names is not None else None
        self._build_adjacency()

    def _build_adjacency(self):
        h, r, t = self.triples.T
        key = h * self.num_relations + r
        order = np.lexsort((t, key))
        self._adj_tails = t[order]
        self._adj_keys = key[order]
        full = (key * self.num_entities + t)[order]
        self._edge_keys = full
        self._edge_order = order

    def __len__(self):
        return len(self.triples)

    def __repr__(self):
        return (f"KnowledgeGraph(entities={self.num_entities}, relations={self.num_relations}, "
                f"triples={len(self.triples)}, augmented={self.augmented})")

    @property
    def num_nodes(self):
        return self.num_entities

    @property
    def num_edge_types(self):
        return self.num_relations

    def message_edges(self):
        """``(src, relation, dst)`` arrays; messages flow head to tail."""
        return self.triples[:, 0], self.triples[:, 1], self.triples[:, 2]

    @property
    def base_triples(self):
        return self.triples[:self.base_triple_count]

    @property
    def identity_relation(self):
        if not self.augmented:
            raise ValueError("graph is not augmented")
        return 2 * self.num_base_relations

    def inverse(self, relation):
        """Index of the inverse of ``relation`` (identity maps to itself)."""
        if not self.augmented:
            raise ValueError("graph is not augmented")
        R = self.num_base_relations
        relation = np.asarray(relation)
        out = np.where(relation < R, relation + R, np.where(relation < 2 * R, relation - R, relation))
        return int(out) if out.ndim == 0 else out

    def neighbors(self, entity, relation):
        """Sorted tails ``w`` with ``(entity, relation, w)`` in the triple store."""
        if not 0 <= entity < self.num_entities:
            raise IndexError(f"entity {entity} out of range")
        if not 0 <= relation < self.num_relations:
            raise IndexError(f"relation {relation} out of range")
        key = entity * self.num_relations + relation
        lo, hi = np.searchsorted(self._adj_keys, [key, key + 1])
        return self._adj_tails[lo:hi].tolist()

    def tails(self, entity, relation):
        """Like :meth:`neighbors` but returns a numpy view without range checks."""
        key = entity * self.num_relations + relation
        lo, hi = np.searchsorted(self._adj_keys, [key, key + 1])
        return self._adj_tails[lo:hi]

    def edge_ids(self, triples):
        """Positions of ``triples`` in :attr:`triples`, ``-1`` where absent."""
        triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        key = (triples[:, 0] * self.num_relations + triples[:, 1]) * self.num_entities + triples[:, 2]
        pos = np.searchsorted(self._edge_keys, key)
        pos = np.minimum(pos, len(self._edge_keys) - 1)
        if len(self._edge_keys) == 0:
            return np.full(len(key), -1, dtype=np.int64)
        found = self._edge_keys[pos] == key
        return np.where(found, self._edge_order[pos], -1)

    def contains(self, head, relation, tail):
        return bool(self.edge_ids([(head, relation, tail)])[0] >= 0)

    def topological_neighbors(self):
        """Per-entity sets of entities sharing a base triple, either direction."""
        out = [set() for _ in range(self.num_entities)]
        for h, _, t in self.base_triples.tolist():
            out[h].add(t)
            out[t].add(h)
        return out


def augment_graph(kg):
    """Add inverse and identity triples: ``|T+| = 2|T| + |E|``, ``|R+| = 2|R| + 1``."""
    if kg.augmented:
        raise AlreadyAugmented("graph already contains inverse and identity triples")
    R = kg.num_relations
    base = kg.triples
    inverse = np.stack([base[:, 2], base[:, 1] + R, base[:, 0]], axis=1)
    ent = np.arange(kg.num_entities, dtype=np.int64)
    identity = np.stack([ent, np.full_like(ent, 2 * R), ent], axis=1)
    names = None
    if kg.relation_names is not None:
        names = (list(kg.relation_names)
                 + [n + INVERSE_SUFFIX for n in kg.relation_names]
                 + [IDENTITY_NAME])
    return KnowledgeGraph(np.concatenate([base, inverse, identity]), kg.num_entities, 2 * R + 1,
                          entity_names=kg.entity_names, relation_names=names,
                          augmented=True, base_triple_count=len(base))


def from_labeled_triples(rows, vocab=None, source=None):
    """Build an unaugmented graph from ``(head, relation, tail)`` name tuples."""
    vocab = vocab.copy() if vocab is not None else Vocabulary()
    seen = set()
    ids = []
    duplicates = 0
    for h, r, t in rows:
        triple = (vocab.entity_id(h), vocab.relation_id(r), vocab.entity_id(t))
        if triple in seen:
            duplicates += 1
            continue
        seen.add(triple)
        ids.append(triple)
    if duplicates:
        warnings.warn(f"{source or 'input'}: dropped {duplicates} duplicate triple(s)", stacklevel=2)
    kg = KnowledgeGraph(np.array(ids, dtype=np.int64).reshape(-1, 3), len(vocab.entities),
                        len(vocab.relations), entity_names=vocab.entity_names(),
                        relation_names=vocab.relation_names())
    return kg, vocab


def read_triple_rows(path):
    """Yield ``(head, relation, tail)`` strings from a TSV triple file."""
    path = Path(path)
    rows = []
    with open(path, encoding="utf-8") as fin:
        for lineno, line in enumerate(fin, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not all(p.strip() for p in parts):
                raise ParseError(f"expected 3 tab-separated fields, got {len(parts)}",
                                 line=lineno, path=path)
            rows.append(tuple(p.strip() for p in parts))
    return rows


def parse_triples(path, vocab=None):
    """Parse a TSV triple file into an unaugmented graph.

    Entity and relation ids follow first occurrence, extending ``vocab``
    when given. Returns ``(kg, vocab)``.
    """
    rows = read_triple_rows(path)
    if not rows:
        raise EmptyDataset(f"{path}: no triples")
    return from_labeled_triples(rows, vocab, source=str(path))


def write_triples(kg, path):
    """Write the base triples of ``kg`` as a TSV file using its vocabularies."""
    ents = kg.entity_names or [str(i) for i in range(kg.num_entities)]
    rels = kg.relation_names or [str(i) for i in range(kg.num_relations)]
    with open(path, "w", encoding="utf-8") as fout:
        for h, r, t in kg.base_triples.tolist():
            fout.write(f"{ents[h]}\t{rels[r]}\t{ents[t]}\n")


def neighbors(kg, entity, relation):
    return kg.neighbors(entity, relation)


def ontology_features(kg):
    """Count, per entity, how often it heads a triple of each augmented relation."""
    if not kg.augmented:
        raise ValueError("ontology features are defined on the augmented graph")
    X = np.zeros((kg.num_entities, kg.num_relations))
    np.add.at(X, (kg.triples[:, 0], kg.triples[:, 1]), 1.0)
    return X


def ones_features(kg, dim):
    if dim < 1:
        raise InvalidDimension(f"feature dimension must be >= 1, got {dim}")
    return np.ones((kg.num_entities, int(dim)))
