"""Feature unification and semantic neighbor extraction."""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import InvalidDimension, NonFiniteFeatures, ShapeError

ROW_NORM_EPS = 1e-12


def randomized_svd(X, rank, oversample=8, n_iter=2, seed=0):
    """Randomized truncated SVD (range finder with power iterations).

    Returns ``(U, s, Vt)`` holding the leading ``rank`` singular triplets.
    """
    X = np.asarray(X, dtype=np.float64)
    m, n = X.shape
    rank = min(rank, m, n)
    if rank == 0:
        return np.zeros((m, 0)), np.zeros(0), np.zeros((0, n))
    width = min(rank + oversample, m, n)
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(X @ rng.standard_normal((n, width)))
    for _ in range(n_iter):
        Z, _ = np.linalg.qr(X.T @ Q)
        Q, _ = np.linalg.qr(X @ Z)
    Ub, s, Vt = np.linalg.svd(Q.T @ X, full_matrices=False)
    return (Q @ Ub)[:, :rank], s[:rank], Vt[:rank]


def row_layer_norm(G, eps=ROW_NORM_EPS):
    """Per-row standardization without scale/shift; constant rows map to zero."""
    mean = G.mean(axis=1, keepdims=True)
    centered = G - mean
    var = (centered ** 2).mean(axis=1, keepdims=True)
    out = np.zeros_like(G)
    ok = var[:, 0] > 0
    out[ok] = centered[ok] / np.sqrt(var[ok] + eps)
    return out


@dataclass
class UnifiedFeatures:
    """Row-normalized ``d``-wide features and the matrix they were normalized from."""

    data: np.ndarray
    raw: np.ndarray
    effective_rank: int

    @property
    def shape(self):
        return self.data.shape


def truncated_svd(X, rank, seed=0, oversample=8, n_iter=2):
    """Leading ``rank`` singular triplets of ``X``.

    Falls back to an exact thin SVD when the matrix is narrow enough that a
    randomized sketch would cover a large share of its column space anyway;
    the sketch with two power iterations is not accurate on flat spectra.
    """
    m, n = X.shape
    rank = min(rank, m, n)
    if min(m, n) <= 2 * (rank + oversample):
        U, s, Vt = np.linalg.svd(X, full_matrices=False)
        return U[:, :rank], s[:rank], Vt[:rank]
    return randomized_svd(X, rank, oversample=oversample, n_iter=n_iter, seed=seed)


def unify_features(X, d, seed=0, oversample=8, n_iter=2):
    """Project features of any width onto ``d`` columns.

    The leading left singular vectors scaled by their singular values are
    zero-padded to ``d`` columns and row-normalized, so inner products
    between rows approximate those of the best rank-``d`` factorization.
    """
    if d < 1:
        raise InvalidDimension(f"unified dimension must be >= 1, got {d}")
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError(f"feature matrix must be 2-D, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise NonFiniteFeatures("feature matrix contains NaN or inf")
    n, d0 = X.shape
    q = min(d, d0, n)
    G = np.zeros((n, d))
    if q > 0:
        U, s, _ = truncated_svd(X, q, seed=seed, oversample=oversample, n_iter=n_iter)
        G[:, :U.shape[1]] = U * s
    rank = int(np.sum(G.any(axis=0)))
    return UnifiedFeatures(row_layer_norm(G), G, rank)


@dataclass
class SemanticNeighborSet:
    """Per-entity semantic neighbors in descending similarity."""

    members: list
    scores: list

    def __len__(self):
        return len(self.members)

    def __getitem__(self, entity):
        return self.members[entity]

    @classmethod
    def empty(cls, num_entities):
        return cls([np.zeros(0, dtype=np.int64) for _ in range(num_entities)],
                   [np.zeros(0) for _ in range(num_entities)])

    def pairs(self):
        """``(owner, neighbor)`` index arrays over all sets."""
        if not self.members:
            return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
        owners = np.repeat(np.arange(len(self.members)), [len(m) for m in self.members])
        return owners.astype(np.int64), np.concatenate(self.members).astype(np.int64)

    def is_empty(self):
        return all(len(m) == 0 for m in self.members)

    def permute(self, perm):
        """Relabel entities with ``new = perm[old]``."""
        perm = np.asarray(perm)
        members = [None] * len(self.members)
        scores = [None] * len(self.members)
        for old, (m, s) in enumerate(zip(self.members, self.scores)):
            members[perm[old]] = perm[m]
            scores[perm[old]] = s
        return SemanticNeighborSet(members, scores)


def _topology(kg):
    base = kg.base_triples
    n = kg.num_entities
    rows = np.concatenate([base[:, 0], base[:, 2], np.arange(n)])
    cols = np.concatenate([base[:, 2], base[:, 0], np.arange(n)])
    A = sp.csr_matrix((np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(n, n))
    A.sum_duplicates()
    return A


def semantic_neighbors(U, kg, k, delta, block_size=1024):
    """Top-``k`` cosine neighbors above ``delta`` that are not topological neighbors.

    Ties are broken by the lower entity index. Entities with a zero feature row
    neither own nor join any set.
    """
    data = U.data if isinstance(U, UnifiedFeatures) else np.asarray(U, dtype=np.float64)
    n = data.shape[0]
    if n != kg.num_entities:
        raise ShapeError(f"{n} feature rows for {kg.num_entities} entities")
    if k < 0:
        raise ValueError("k must be non-negative")
    if k == 0 or n == 0:
        return SemanticNeighborSet.empty(n)
    norms = np.linalg.norm(data, axis=1)
    valid = norms > 0
    unit = np.zeros_like(data, dtype=np.float64)
    unit[valid] = data[valid] / norms[valid, None]
    A = _topology(kg)

    members, scores = [], []
    for start in range(0, n, block_size):
        stop = min(start + block_size, n)
        S = unit[start:stop] @ unit.T
        S[:, ~valid] = -np.inf
        S[~valid[start:stop]] = -np.inf
        r, c = A[start:stop].nonzero()
        S[r, c] = -np.inf
        S[S < delta] = -np.inf
        if k < n:
            kth = -np.partition(-S, k - 1, axis=1)[:, k - 1]
        else:
            kth = np.full(stop - start, -np.inf)
        for i in range(stop - start):
            row = S[i]
            if np.isneginf(kth[i]):
                idx = np.flatnonzero(np.isfinite(row))
            else:
                above = np.flatnonzero(row > kth[i])
                tied = np.flatnonzero(row == kth[i])[:k - len(above)]
                idx = np.concatenate([above, tied])
            idx = idx[np.lexsort((idx, -row[idx]))][:k]
            members.append(idx.astype(np.int64))
            scores.append(row[idx])
    return SemanticNeighborSet(members, scores)
