"""Anchor/variant gene discovery with the discriminability-sensitivity quadrant."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .clustering import pca_knn_leiden
from .data import DataFormatError, ExpressionDataset, GenePartition
from .validation import check_domains, check_expression


@dataclass
class SelectorConfig:
    tau_dom: float = 0.0
    tau_str: float = 0.0
    n_pcs: int = 50
    n_neighbors: int = 15
    leiden_resolution: float = 1.0
    epsilon: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.n_pcs < 1 or self.n_neighbors < 1:
            raise ValueError("n_pcs and n_neighbors must be >= 1")


@dataclass(eq=False)
class GeneScoreTable:
    genes: np.ndarray
    s_dom: np.ndarray
    s_str: np.ndarray
    z_dom: np.ndarray
    z_str: np.ndarray
    pseudo_clusters: np.ndarray = None


def zscore(values) -> np.ndarray:
    """Population z-score; a constant vector maps to all zeros."""
    values = np.asarray(values, dtype=np.float64)
    sd = values.std()
    if values.size == 0 or sd == 0:
        return np.zeros_like(values)
    return (values - values.mean()) / sd


def domain_sensitivity(X, domains, eps: float = 1e-8) -> np.ndarray:
    """Mean over domains of ``|domain mean - global mean| / (global std + eps)`` per gene."""
    X = np.asarray(X, dtype=np.float64)
    domains = np.asarray(domains)
    levels = np.unique(domains)
    if len(levels) < 2:
        raise DataFormatError("domain sensitivity needs at least 2 domains")
    mu_all = X.mean(axis=0)
    sd_all = X.std(axis=0)
    total = np.zeros(X.shape[1])
    for b in levels:
        rows = X[domains == b]
        if rows.shape[0] == 0:
            raise DataFormatError(f"domain {b!r} is empty")
        total += np.abs(rows.mean(axis=0) - mu_all)
    return total / len(levels) / (sd_all + eps)


def structure_separability(X, clusters, eps: float = 1e-8) -> np.ndarray:
    """Between-cluster over within-cluster variance per gene (both size-weighted)."""
    X = np.asarray(X, dtype=np.float64)
    clusters = np.asarray(clusters)
    levels = np.unique(clusters)
    if len(levels) < 2:
        raise ValueError("structure separability needs at least 2 clusters")
    n = X.shape[0]
    mu = X.mean(axis=0)
    between = np.zeros(X.shape[1])
    within = np.zeros(X.shape[1])
    for c in levels:
        rows = X[clusters == c]
        w = rows.shape[0] / n
        between += w * (rows.mean(axis=0) - mu) ** 2
        within += w * rows.var(axis=0)
    return between / (within + eps)


def pseudo_cluster(X, cfg: SelectorConfig = None) -> np.ndarray:
    cfg = cfg or SelectorConfig()
    return pca_knn_leiden(X, cfg.n_pcs, cfg.n_neighbors, cfg.leiden_resolution, seed=cfg.seed)


def score_genes(X, domains, genes=None, cfg: SelectorConfig = None, clusters=None) -> GeneScoreTable:
    cfg = cfg or SelectorConfig()
    X = np.asarray(X, dtype=np.float64)
    genes = np.arange(X.shape[1]) if genes is None else np.asarray(genes, dtype=int)
    Xs = X[:, genes]
    if clusters is None:
        clusters = pseudo_cluster(Xs, cfg)
    s_dom = domain_sensitivity(Xs, domains, cfg.epsilon)
    s_str = structure_separability(Xs, clusters, cfg.epsilon)
    return GeneScoreTable(
        genes=genes,
        s_dom=s_dom,
        s_str=s_str,
        z_dom=zscore(s_dom),
        z_str=zscore(np.log(s_str + cfg.epsilon)),
        pseudo_clusters=np.asarray(clusters),
    )


def anchor_mask(z_dom, z_str, tau_dom: float, tau_str: float) -> np.ndarray:
    return (np.asarray(z_dom) <= tau_dom) & (np.asarray(z_str) >= tau_str)


def quadrant_split(scores: GeneScoreTable, cfg: SelectorConfig = None) -> GenePartition:
    cfg = cfg or SelectorConfig()
    mask = anchor_mask(scores.z_dom, scores.z_str, cfg.tau_dom, cfg.tau_str)
    return GenePartition(
        selected=scores.genes,
        anchors=scores.genes[mask],
        variants=scores.genes[~mask],
        s_dom=scores.s_dom,
        s_str=scores.s_str,
        z_dom=scores.z_dom,
        z_str=scores.z_str,
        thresholds=(cfg.tau_dom, cfg.tau_str),
    )


def boundary_band_flips(scores: GeneScoreTable, tau, delta) -> np.ndarray:
    """Genes whose anchor membership differs between thresholds ``tau`` and ``tau + delta``."""
    before = anchor_mask(scores.z_dom, scores.z_str, tau[0], tau[1])
    after = anchor_mask(scores.z_dom, scores.z_str, tau[0] + delta[0], tau[1] + delta[1])
    return np.asarray(scores.genes)[before != after]


def random_split(partition: GenePartition, seed: int = 0) -> GenePartition:
    """Size-matched uniformly random anchors drawn from the same pool."""
    rng = np.random.default_rng(seed)
    sel = partition.selected
    pick = np.zeros(len(sel), dtype=bool)
    pick[rng.choice(len(sel), size=partition.n_anchors, replace=False)] = True
    return GenePartition(
        selected=sel,
        anchors=sel[pick],
        variants=sel[~pick],
        s_dom=partition.s_dom,
        s_str=partition.s_str,
        z_dom=partition.z_dom,
        z_str=partition.z_str,
        thresholds=partition.thresholds,
    )


def write_partition_tsv(partition: GenePartition, gene_ids, path):
    anchors = set(partition.anchors.tolist())
    cols = (partition.s_dom, partition.s_str, partition.z_dom, partition.z_str)
    with open(path, "w") as fh:
        fh.write("gene_id\ts_dom\ts_str\tz_dom\tz_str\tassignment\n")
        for k, g in enumerate(partition.selected):
            role = "anchor" if int(g) in anchors else "variant"
            fh.write("\t".join([gene_ids[g], *(repr(float(a[k])) for a in cols), role]) + "\n")


class QuadrantGeneSelector(TransformerMixin, BaseEstimator):
    """Split a gene pool into domain-stable anchors and domain-sensitive variants.

    Parameters
    ----------
    tau_dom, tau_str : float
        Thresholds on the standardized domain-sensitivity and (log) structure
        separability scores. A gene is an anchor when ``z_dom <= tau_dom`` and
        ``z_str >= tau_str``.
    n_pcs, n_neighbors, leiden_resolution : PCA -> kNN -> Leiden settings for the
        pseudo-clusters used by the separability score.
    epsilon : float
        Stabiliser in both score denominators.
    random_split : bool
        Replace the quadrant anchors with a size-matched random draw.
    random_state : int

    Attributes
    ----------
    scores_ : GeneScoreTable
    partition_ : GenePartition
    n_features_in_ : int
    """

    def __init__(self, tau_dom=0.0, tau_str=0.0, n_pcs=50, n_neighbors=15, leiden_resolution=1.0,
                 epsilon=1e-8, random_split=False, random_state=0):
        self.tau_dom = tau_dom
        self.tau_str = tau_str
        self.n_pcs = n_pcs
        self.n_neighbors = n_neighbors
        self.leiden_resolution = leiden_resolution
        self.epsilon = epsilon
        self.random_split = random_split
        self.random_state = random_state

    def _config(self) -> SelectorConfig:
        return SelectorConfig(self.tau_dom, self.tau_str, self.n_pcs, self.n_neighbors,
                              self.leiden_resolution, self.epsilon, self.random_state)

    def fit(self, X, domains, genes=None):
        if isinstance(X, ExpressionDataset):
            X = X.values
        X = check_expression(X)
        domains = check_domains(domains, X.shape[0])
        cfg = self._config()
        self.scores_ = score_genes(X, domains, genes, cfg)
        part = quadrant_split(self.scores_, cfg)
        if self.random_split:
            part = random_split(part, seed=self.random_state)
        self.partition_ = part
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        """Columns reordered as ``[variants | anchors]``."""
        check_is_fitted(self, "partition_")
        if isinstance(X, ExpressionDataset):
            X = X.values
        X = check_expression(X, n_features=self.n_features_in_)
        return X[:, self.partition_.order]

    def split(self, X):
        Xo = self.transform(X)
        g = self.partition_.n_variants
        return Xo[:, :g], Xo[:, g:]

    def get_support(self, indices=False):
        check_is_fitted(self, "partition_")
        if indices:
            return self.partition_.anchors
        mask = np.zeros(self.n_features_in_, dtype=bool)
        mask[self.partition_.anchors] = True
        return mask
