"""Variant-only, instance-wise domain gate built from two Leiden resolutions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .clustering import pca_knn_leiden

EPS = 1e-8


@dataclass
class GateConfig:
    enabled: bool = True
    low_res: float = 0.3
    high_res: float = 1.0
    strength: float = 1.0
    w_low: float = 0.5
    w_high: float = 0.5
    min_cells: int = 20
    w_mu: float = 1.0
    w_sigma: float = 0.5
    w_v: float = 0.5
    n_pcs: int = 50
    n_neighbors: int = 15
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.strength <= 1.0:
            raise ValueError("gate strength must lie in [0, 1]")
        if min(self.w_low, self.w_high, self.w_mu, self.w_sigma, self.w_v) < 0:
            raise ValueError("gate weights must be non-negative")
        if self.enabled and self.w_low + self.w_high <= 0:
            raise ValueError("w_low + w_high must be positive when the gate is enabled")


def local_domain_score(X, domains, clusters, cfg: GateConfig = None) -> np.ndarray:
    """Per-(cluster, gene) cross-domain dispersion inside each cluster.

    ``X`` holds the variant columns only. For an eligible cluster (at least
    ``min_cells`` cells from at least two domains), with per-domain means
    ``m_b``, stds ``s_b`` and variances ``v_b``, and cluster mean/std/variance
    ``m, s, v``::

        dmu  = mean_b |m_b - m| / (s + eps)
        dsig = mean_b |s_b - mean(s_b)| / (s + eps)
        dvar = (max_b v_b - min_b v_b) / (v + eps)
        score = w_mu * dmu + w_sigma * dsig + w_v * dvar

    Ineligible clusters get an all-zero row. Rows are indexed by cluster id.
    """
    cfg = cfg or GateConfig()
    X = np.asarray(X, dtype=np.float64)
    domains = np.asarray(domains)
    clusters = np.asarray(clusters)
    n_clusters = int(clusters.max()) + 1 if clusters.size else 0
    out = np.zeros((n_clusters, X.shape[1]))
    for c in range(n_clusters):
        rows = clusters == c
        levels = np.unique(domains[rows])
        if rows.sum() < cfg.min_cells or len(levels) < 2:
            continue
        Xc = X[rows]
        m, s, v = Xc.mean(axis=0), Xc.std(axis=0), Xc.var(axis=0)
        dc = domains[rows]
        mb = np.array([Xc[dc == b].mean(axis=0) for b in levels])
        sb = np.array([Xc[dc == b].std(axis=0) for b in levels])
        vb = sb ** 2
        dmu = np.abs(mb - m).mean(axis=0) / (s + EPS)
        dsig = np.abs(sb - sb.mean(axis=0)).mean(axis=0) / (s + EPS)
        dvar = (vb.max(axis=0) - vb.min(axis=0)) / (v + EPS)
        out[c] = cfg.w_mu * dmu + cfg.w_sigma * dsig + cfg.w_v * dvar
    return out


def normalize_scores(scores) -> np.ndarray:
    """Rectify and scale each cluster row by its max over genes."""
    pos = np.maximum(np.asarray(scores, dtype=np.float64), 0.0)
    if pos.shape[1] == 0:
        return pos
    return pos / (pos.max(axis=1, keepdims=True) + EPS)


def combine_layers(gamma_low, gamma_high, c_low, c_high, w_low, w_high) -> np.ndarray:
    return np.clip(w_low * gamma_low[c_low] + w_high * gamma_high[c_high], 0.0, 1.0)


def gate_clusterings(X_cluster, cfg: GateConfig):
    c_low = pca_knn_leiden(X_cluster, cfg.n_pcs, cfg.n_neighbors, cfg.low_res, seed=cfg.seed)
    c_high = pca_knn_leiden(X_cluster, cfg.n_pcs, cfg.n_neighbors, cfg.high_res, seed=cfg.seed)
    return c_low, c_high


def build_gate(X_var, domains, cfg: GateConfig = None, X_cluster=None, clusterings=None) -> np.ndarray:
    """Gate tensor ``gamma`` (cells x variant genes) in [0, 1].

    Clusters come from PCA -> kNN -> Leiden at ``low_res`` and ``high_res`` on
    ``X_cluster`` (the anchor block in the pipeline; defaults to ``X_var``).
    Precomputed ``(c_low, c_high)`` may be passed as ``clusterings``.
    """
    cfg = cfg or GateConfig()
    X_var = np.asarray(X_var, dtype=np.float64)
    n, g = X_var.shape
    if not cfg.enabled or g == 0:
        return np.zeros((n, g))
    if clusterings is None:
        clusterings = gate_clusterings(X_var if X_cluster is None else X_cluster, cfg)
    c_low, c_high = clusterings
    gamma_low = normalize_scores(local_domain_score(X_var, domains, c_low, cfg))
    gamma_high = normalize_scores(local_domain_score(X_var, domains, c_high, cfg))
    return combine_layers(gamma_low, gamma_high, c_low, c_high, cfg.w_low, cfg.w_high)


def apply_gate(x, gamma, is_variant, strength: float) -> np.ndarray:
    """Attenuate variant coordinates: ``x * (1 - [variant] * strength * gamma)``.

    ``x`` is a cell vector (or matrix) over the selected genes; ``gamma`` covers
    the variant coordinates in order; anchor coordinates are returned untouched.
    """
    if not 0.0 <= strength <= 1.0:
        raise ValueError("gate strength must lie in [0, 1]")
    x = np.array(x, dtype=np.float64, copy=True)
    is_variant = np.asarray(is_variant, dtype=bool)
    gamma = np.asarray(gamma, dtype=np.float64)
    x[..., is_variant] = x[..., is_variant] * (1.0 - strength * gamma)
    return x


def write_gate_tsv(gamma, gene_ids, path):
    """Per-gene gate summary: mean, max and fraction of cells with gamma > 0."""
    gamma = np.asarray(gamma)
    with open(path, "w") as fh:
        fh.write("gene_id\tmean_gamma\tmax_gamma\tfrac_active\n")
        for j, gid in enumerate(gene_ids):
            col = gamma[:, j]
            stats = (col.mean(), col.max(initial=0.0), (col > 0).mean())
            fh.write("\t".join([gid, *(repr(float(x)) for x in stats)]) + "\n")
