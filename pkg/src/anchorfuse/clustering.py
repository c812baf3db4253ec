"""PCA, kNN graphs and Leiden clustering shared by the selector, gate and metrics."""

from __future__ import annotations

import igraph as ig
import leidenalg
import numpy as np
from scipy import sparse
from sklearn.decomposition import PCA
from sklearn.neighbors import NearestNeighbors


def pca_embed(X, n_components: int, random_state: int = 0) -> np.ndarray:
    """PCA scores with a deterministic sign: each component's largest-|loading| entry is positive."""
    X = np.asarray(X, dtype=np.float64)
    n_components = int(min(n_components, X.shape[0], X.shape[1]))
    pca = PCA(n_components=n_components, svd_solver="full", random_state=random_state)
    scores = pca.fit_transform(X)
    comps = pca.components_
    signs = np.sign(comps[np.arange(comps.shape[0]), np.argmax(np.abs(comps), axis=1)])
    signs[signs == 0] = 1.0
    return scores * signs


def knn_indices(X, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest neighbours of every row, excluding the row itself.

    Euclidean distance; ties broken by index (stable sort on distance).
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if k >= n:
        raise ValueError(f"k={k} requires more than {k} points, got {n}")
    if n <= 2048:
        sq = np.sum(X * X, axis=1)
        dist = sq[:, None] + sq[None, :] - 2.0 * X @ X.T
        np.fill_diagonal(dist, np.inf)
        order = np.argsort(dist, axis=1, kind="stable")
        return order[:, :k]
    nn = NearestNeighbors(n_neighbors=k + 1).fit(X)
    _, idx = nn.kneighbors(X)
    out = np.empty((n, k), dtype=int)
    for i in range(n):
        row = idx[i][idx[i] != i]
        out[i] = row[:k]
    return out


def knn_graph(X, k: int) -> sparse.csr_matrix:
    """Symmetric (union) unweighted kNN adjacency."""
    idx = knn_indices(X, k)
    n = idx.shape[0]
    rows = np.repeat(np.arange(n), idx.shape[1])
    a = sparse.csr_matrix((np.ones(rows.size), (rows, idx.ravel())), shape=(n, n))
    a = a.maximum(a.T)
    a.setdiag(0)
    a.eliminate_zeros()
    return a.tocsr()


def _to_igraph(adj: sparse.spmatrix) -> ig.Graph:
    upper = sparse.triu(adj, k=1).tocoo()
    g = ig.Graph(n=adj.shape[0], edges=list(zip(upper.row.tolist(), upper.col.tolist())))
    g.es["weight"] = upper.data.tolist()
    return g


def leiden(adj: sparse.spmatrix, resolution: float, seed: int = 0) -> np.ndarray:
    """Leiden (RB-configuration) membership, relabelled to contiguous ids ordered by first appearance."""
    g = _to_igraph(adj)
    part = leidenalg.find_partition(
        g,
        leidenalg.RBConfigurationVertexPartition,
        weights="weight",
        resolution_parameter=resolution,
        seed=seed,
        n_iterations=-1,
    )
    return relabel(np.asarray(part.membership))


def relabel(labels) -> np.ndarray:
    labels = np.asarray(labels)
    _, first = np.unique(labels, return_index=True)
    mapping = {u: i for i, u in enumerate(labels[np.sort(first)])}
    return np.array([mapping[x] for x in labels], dtype=int)


def pca_knn_leiden(X, n_pcs: int, n_neighbors: int, resolution: float, seed: int = 0) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] < n_neighbors + 1:
        raise ValueError(f"need at least n_neighbors + 1 = {n_neighbors + 1} cells, got {X.shape[0]}")
    emb = pca_embed(X, n_pcs, random_state=seed)
    return leiden(knn_graph(emb, n_neighbors), resolution, seed=seed)
