"""QC, normalisation, HVG selection, MixUp and the synthetic multi-batch generator."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .data import DataFormatError, ExpressionDataset, require_domains

logger = logging.getLogger(__name__)


class EmptyDatasetError(ValueError):
    pass


@dataclass
class PreprocessConfig:
    min_genes_per_cell: int = 200
    min_cells_per_gene: int = 3
    max_mito_pct: float = 5.0
    target_sum: float = 10000.0
    n_hvgs: int = 2000
    mixup_k: int = 300
    mito_prefix: str = "MT-"

    def __post_init__(self):
        for name in ("min_genes_per_cell", "min_cells_per_gene", "max_mito_pct", "target_sum", "n_hvgs", "mixup_k"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def _qc_pass(d: ExpressionDataset, cfg: PreprocessConfig, mito_mask) -> tuple:
    X = d.values
    cells = np.flatnonzero((X > 0).sum(axis=1) >= cfg.min_genes_per_cell)
    genes = np.flatnonzero((X[cells] > 0).sum(axis=0) >= cfg.min_cells_per_gene)
    if mito_mask is not None:
        total = X[cells].sum(axis=1)
        mito = X[np.ix_(cells, np.flatnonzero(mito_mask))].sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            pct = np.where(total > 0, 100.0 * mito / total, 0.0)
        cells = cells[pct <= cfg.max_mito_pct]
    return cells, genes


def qc_filter(d: ExpressionDataset, cfg: PreprocessConfig = None) -> ExpressionDataset:
    """Drop low-quality cells and rarely detected genes.

    One pass applies, in order: cells with fewer than ``min_genes_per_cell``
    detected genes, genes detected in fewer than ``min_cells_per_gene`` cells,
    cells whose mitochondrial percentage exceeds ``max_mito_pct``.  Passes are
    repeated until nothing changes, so the result is idempotent.
    """
    cfg = cfg or PreprocessConfig()
    if d.layer != "raw_counts":
        raise DataFormatError("qc_filter expects the raw_counts layer")
    mito_all = np.array([g.upper().startswith(cfg.mito_prefix.upper()) for g in d.gene_ids])
    if not mito_all.any():
        logger.info("no gene ids start with %r; skipping mitochondrial filter", cfg.mito_prefix)
    cur = d
    while True:
        mito = np.array([g.upper().startswith(cfg.mito_prefix.upper()) for g in cur.gene_ids])
        cells, genes = _qc_pass(cur, cfg, mito if mito.any() else None)
        if len(cells) == 0 or len(genes) == 0:
            raise EmptyDatasetError("QC removed every cell" if len(cells) == 0 else "QC removed every gene")
        if len(cells) == cur.n_cells and len(genes) == cur.n_genes:
            return cur
        cur = cur.subset(cells, genes)


def normalize_log1p(d: ExpressionDataset, target_sum: float = 10000.0) -> ExpressionDataset:
    if d.layer != "raw_counts":
        raise DataFormatError("normalize_log1p expects the raw_counts layer")
    totals = d.values.sum(axis=1)
    zero = np.flatnonzero(totals <= 0)
    if len(zero):
        raise ValueError(f"cell {d.cell_ids[zero[0]]!r} has zero total counts")
    scaled = d.values * (target_sum / totals)[:, None]
    return d.with_values(np.log1p(scaled), layer="lognorm")


def dispersion(X, eps: float = 1e-12) -> np.ndarray:
    """Per-gene variance / mean (0 for all-zero genes)."""
    mean = X.mean(axis=0)
    var = X.var(axis=0)
    return np.where(mean > eps, var / np.maximum(mean, eps), 0.0)


def hvg_scores(d: ExpressionDataset) -> np.ndarray:
    """Mean across domains of each gene's within-domain dispersion rank (0 = most dispersed)."""
    levels = require_domains(d)
    ranks = []
    for b in levels:
        disp = dispersion(d.values[d.domains == b])
        ranks.append(rankdata(-disp, method="average") - 1.0)
    return np.mean(ranks, axis=0)


def select_hvgs(d: ExpressionDataset, n: int) -> list:
    """Top-``n`` genes by batch-aware dispersion rank; ties resolve to the lower index."""
    if d.layer != "lognorm":
        raise DataFormatError("select_hvgs expects the lognorm layer")
    if n > d.n_genes:
        raise ValueError(f"requested {n} HVGs from {d.n_genes} genes")
    score = hvg_scores(d)
    order = np.lexsort((np.arange(d.n_genes), score))
    return order[:n].tolist()


def mixup(xi, xj, alpha: float) -> np.ndarray:
    xi = np.asarray(xi, dtype=np.float64)
    xj = np.asarray(xj, dtype=np.float64)
    if xi.shape != xj.shape:
        raise ValueError(f"length mismatch: {xi.shape} vs {xj.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    return alpha * xi + (1.0 - alpha) * xj


def mixup_neighbor_pools(X, domains, k: int) -> list:
    """For each cell, indices of its ``k`` nearest same-domain cells (fewer if the domain is small)."""
    X = np.asarray(X, dtype=np.float64)
    domains = np.asarray(domains)
    pools = [None] * X.shape[0]
    for b in np.unique(domains):
        idx = np.flatnonzero(domains == b)
        sub = X[idx]
        sq = (sub * sub).sum(axis=1)
        dist = sq[:, None] + sq[None, :] - 2.0 * sub @ sub.T
        np.fill_diagonal(dist, np.inf)
        kk = min(k, len(idx) - 1)
        order = np.argsort(dist, axis=1, kind="stable")[:, :kk]
        for row, i in enumerate(idx):
            pools[i] = idx[order[row]] if kk > 0 else np.array([i])
    return pools


def mixup_batch(X, pools, rng: np.random.Generator) -> np.ndarray:
    """Mix every row with a random pool neighbour, alpha ~ U(0, 1)."""
    X = np.asarray(X)
    partner = np.array([p[rng.integers(len(p))] for p in pools])
    alpha = rng.uniform(0.0, 1.0, size=(X.shape[0], 1))
    return alpha * X + (1.0 - alpha) * X[partner]


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticSpec:
    n_cells: int = 600
    n_genes: int = 200
    n_types: int = 3
    n_domains: int = 2
    n_variant_genes: int = 50
    batch_shift_scale: float = 2.0
    noise_scale: float = 0.3
    seed: int = 0
    type_scale: float = 1.0
    informative_fraction: float = 0.8
    base_level: float = 3.0

    def __post_init__(self):
        if self.n_variant_genes > self.n_genes:
            raise ValueError("n_variant_genes cannot exceed n_genes")
        if self.n_types < 2 or self.n_domains < 2:
            raise ValueError("need at least 2 types and 2 domains")
        if self.n_cells < 1 or self.n_genes < 1:
            raise ValueError("n_cells and n_genes must be positive")
        if self.batch_shift_scale < 0 or self.noise_scale < 0 or self.type_scale < 0:
            raise ValueError("scales must be non-negative")
        if not 0.0 <= self.informative_fraction <= 1.0:
            raise ValueError("informative_fraction must lie in [0, 1]")


def generate_synthetic(spec: SyntheticSpec):
    """Planted-structure lognorm data.

    Returns ``(dataset, truth)`` where ``truth`` has ``cell_types``, ``planted``
    (sorted indices of batch-shifted genes), ``informative`` (boolean mask of
    genes whose type centres differ) and ``type_informative`` (informative and
    not planted).

    Domains are uniform overall and balanced within each type.
    Each planted gene receives per-domain offsets ``shift * v`` with ``v`` a
    random permutation of ``linspace(-1, 1, n_domains)``; other genes carry no
    domain effect.
    """
    rng = np.random.default_rng(spec.seed)
    n, g, t, b = spec.n_cells, spec.n_genes, spec.n_types, spec.n_domains

    planted = np.sort(rng.choice(g, size=spec.n_variant_genes, replace=False))
    is_planted = np.zeros(g, dtype=bool)
    is_planted[planted] = True
    # planted genes always carry type signal; others with probability informative_fraction
    informative = is_planted | (rng.uniform(size=g) < spec.informative_fraction)

    base = spec.base_level + rng.uniform(-0.5, 0.5, size=g)
    # every informative gene separates the types: spread offsets in random order plus jitter
    spread = np.linspace(-1.0, 1.0, t)
    type_effect = np.stack([rng.permutation(spread) for _ in range(g)], axis=1)
    type_effect = type_effect + 0.25 * rng.standard_normal((t, g))
    centers = base[None, :] + spec.type_scale * type_effect * informative[None, :]

    offsets = np.zeros((b, g))
    levels = np.linspace(-1.0, 1.0, b)
    for j in planted:
        offsets[:, j] = spec.batch_shift_scale * rng.permutation(levels)

    types = rng.integers(t, size=n)
    # domains are balanced within each type so type composition cannot mimic a batch effect
    domains = np.empty(n, dtype=int)
    start = rng.integers(b, size=t)
    for k in range(t):
        rows = np.flatnonzero(types == k)
        domains[rows] = rng.permutation((np.arange(rows.size) + start[k]) % b)
    noise = spec.noise_scale * rng.standard_normal((n, g))
    values = np.clip(centers[types] + offsets[domains] + noise, 0.0, None)

    ds = ExpressionDataset(
        values=values,
        gene_ids=[f"G{j}" for j in range(g)],
        cell_ids=[f"C{i}" for i in range(n)],
        domains=np.array([f"B{x}" for x in domains]),
        cell_types=np.array([f"T{x}" for x in types]),
        layer="lognorm",
    )
    truth = {
        "cell_types": ds.cell_types,
        "planted": planted,
        "informative": informative,
        "type_informative": informative & ~is_planted,
    }
    return ds, truth
