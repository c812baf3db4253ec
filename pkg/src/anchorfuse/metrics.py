"""Integration scoreboard (ARI/NMI/ASW/GC, BioMean/Overall) and the over-correction stress metric."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import cdist
from scipy.special import comb

from .clustering import knn_graph, knn_indices, leiden, pca_embed
from .data import EmbeddingMatrix, ExpressionDataset, MetricsReport

logger = logging.getLogger(__name__)


def _default_resolutions():
    return [round(0.1 * i, 1) for i in range(1, 21)]


@dataclass
class EvalConfig:
    pca_cap: int = 64
    knn_k: int = 15
    leiden_resolutions: list = field(default_factory=_default_resolutions)
    oc_k: int = 15
    oc_perturb_fraction: float = 0.5
    oc_shift: float = 1.0
    oc_focus: str = ""
    seed: int = 0

    def __post_init__(self):
        if self.pca_cap < 2:
            raise ValueError("pca_cap must be >= 2")
        self.leiden_resolutions = [float(r) for r in self.leiden_resolutions]
        if not self.leiden_resolutions:
            raise ValueError("leiden_resolutions must be non-empty")
        if not 0.0 < self.oc_perturb_fraction < 1.0:
            raise ValueError("oc_perturb_fraction must lie in (0, 1)")


def _values(e) -> np.ndarray:
    return np.asarray(e.values if isinstance(e, EmbeddingMatrix) else e, dtype=np.float64)


def cap_embedding(e, cap: int = 64):
    """PCA-project to ``cap`` dims when wider; narrower embeddings pass through untouched."""
    X = _values(e)
    if X.shape[1] <= cap:
        return e
    if X.shape[0] < 2:
        raise ValueError("PCA cap needs at least two cells")
    Z = pca_embed(X, min(cap, X.shape[0]))
    if isinstance(e, EmbeddingMatrix):
        return EmbeddingMatrix(Z, e.source)
    return Z


# ---------------------------------------------------------------------------
# partition agreement


def _contingency(u, v) -> np.ndarray:
    u = np.asarray(u)
    v = np.asarray(v)
    if u.shape != v.shape:
        raise ValueError(f"label length mismatch: {u.shape[0]} vs {v.shape[0]}")
    _, ui = np.unique(u, return_inverse=True)
    _, vi = np.unique(v, return_inverse=True)
    table = np.zeros((ui.max(initial=-1) + 1, vi.max(initial=-1) + 1), dtype=np.int64)
    np.add.at(table, (ui, vi), 1)
    return table


def ari(u, v) -> float:
    table = _contingency(u, v)
    n = int(table.sum())
    if n == 0:
        raise ValueError("ARI needs at least one label")
    sum_ij = comb(table, 2).sum()
    sum_a = comb(table.sum(axis=1), 2).sum()
    sum_b = comb(table.sum(axis=0), 2).sum()
    expected = sum_a * sum_b / comb(n, 2) if n > 1 else 0.0
    max_index = 0.5 * (sum_a + sum_b)
    denom = max_index - expected
    if denom == 0:
        return 1.0
    return float((sum_ij - expected) / denom)


def _entropy(counts) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(u, v) -> float:
    """``2 I(U;V) / (H(U) + H(V))`` with natural logs; 1 when both partitions are trivial."""
    table = _contingency(u, v).astype(np.float64)
    n = table.sum()
    if n == 0:
        raise ValueError("NMI needs at least one label")
    hu, hv = _entropy(table.sum(axis=1)), _entropy(table.sum(axis=0))
    if hu + hv == 0:
        return 1.0
    pij = table / n
    outer = np.outer(table.sum(axis=1), table.sum(axis=0)) / n ** 2
    nz = pij > 0
    mi = float((pij[nz] * np.log(pij[nz] / outer[nz])).sum())
    return float(np.clip(2.0 * mi / (hu + hv), 0.0, 1.0))


def cluster_sweep(e, truth, cfg: EvalConfig = None):
    """Leiden over the resolution grid; ARI and NMI are maximised independently."""
    cfg = cfg or EvalConfig()
    X = _values(cap_embedding(e, cfg.pca_cap))
    truth = np.asarray(truth)
    if X.shape[0] <= cfg.knn_k:
        raise ValueError(f"need more than knn_k={cfg.knn_k} cells, got {X.shape[0]}")
    adj = knn_graph(X, cfg.knn_k)
    best_ari, best_nmi, best_res = -np.inf, -np.inf, float("nan")
    for res in cfg.leiden_resolutions:
        labels = leiden(adj, res, seed=cfg.seed)
        a, m = ari(truth, labels), nmi(truth, labels)
        if a > best_ari:
            best_ari, best_res = a, res
        best_nmi = max(best_nmi, m)
    return float(best_ari), float(best_nmi), best_res


# ---------------------------------------------------------------------------
# silhouettes and connectivity


def _pairwise(X) -> np.ndarray:
    return cdist(X, X)


def silhouette_samples(X, labels) -> np.ndarray:
    """Per-point silhouette; singleton clusters and zero ``max(a, b)`` give 0."""
    X = _values(X)
    _, lab = np.unique(np.asarray(labels), return_inverse=True)
    k = lab.max() + 1
    if k < 2:
        raise ValueError("silhouette needs at least two labels")
    D = _pairwise(X)
    onehot = np.eye(k)[lab]
    sums = D @ onehot
    sizes = onehot.sum(axis=0)
    own = sizes[lab]
    a = sums[np.arange(len(lab)), lab] / np.maximum(own - 1, 1)
    other = sums / sizes[None, :]
    other[np.arange(len(lab)), lab] = np.inf
    b = other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    s[own == 1] = 0.0
    return s


def asw_celltype(e, types) -> float:
    types = np.asarray(types)
    if len(np.unique(types)) < 2:
        raise ValueError("ASW_ct needs at least two cell types")
    return float((silhouette_samples(e, types).mean() + 1.0) / 2.0)


def asw_batch(e, types, domains) -> float:
    """Mean over types of ``mean(1 - |s_domain|)`` within the type; single-domain types score 1."""
    X = _values(e)
    types = np.asarray(types)
    domains = np.asarray(domains)
    scores = []
    for t in np.unique(types):
        rows = types == t
        if len(np.unique(domains[rows])) < 2:
            scores.append(1.0)
            continue
        s = silhouette_samples(X[rows], domains[rows])
        scores.append(float((1.0 - np.abs(s)).mean()))
    return float(np.mean(scores)) if scores else 1.0


def graph_connectivity(e, types, k: int = 15) -> float:
    """Mean over types of largest-component fraction of the within-type symmetric kNN graph."""
    X = _values(e)
    types = np.asarray(types)
    scores = []
    for t in np.unique(types):
        rows = np.flatnonzero(types == t)
        n = len(rows)
        if n == 1:
            scores.append(1.0)
            continue
        adj = knn_graph(X[rows], min(k, n - 1))
        _, comp = connected_components(adj, directed=False)
        scores.append(np.bincount(comp).max() / n)
    return float(np.mean(scores))


def aggregate(ari_best, nmi_best, asw_ct, asw_batch, gc, **extra) -> MetricsReport:
    parts = {"ari_best": ari_best, "nmi_best": nmi_best, "asw_ct": asw_ct, "asw_batch": asw_batch, "gc": gc}
    for name, value in parts.items():
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"{name}={value} outside [0, 1]")
    return MetricsReport.from_parts(ari_best, nmi_best, asw_ct, asw_batch, gc, **extra)


# ---------------------------------------------------------------------------
# over-correction


def oc_score(e, labels, eval_set=None, k: int = 15) -> float:
    """Mean fraction of each evaluated cell's k nearest neighbours carrying a different label."""
    X = _values(e)
    labels = np.asarray(labels)
    n = X.shape[0]
    if k >= n:
        raise ValueError(f"k={k} must be smaller than the number of cells ({n})")
    idx = np.arange(n) if eval_set is None else np.asarray(eval_set)
    if idx.dtype == bool:
        idx = np.flatnonzero(idx)
    if idx.size == 0:
        raise ValueError("eval_set is empty")
    nbrs = knn_indices(X, k)[idx]
    return float((labels[nbrs] != labels[idx][:, None]).mean())


def oc_normalized(method_oc: float, raw_oc: float) -> float:
    return float(method_oc - raw_oc)


@dataclass(frozen=True)
class PerturbationSetup:
    dataset: ExpressionDataset
    pseudo_labels: np.ndarray
    perturbed: np.ndarray
    focus: np.ndarray


def oc_perturbation_setup(d: ExpressionDataset, focus_type, fraction: float, shift: float, seed: int = 0,
                          variant_genes=None) -> PerturbationSetup:
    """Shift the variant genes of a random fraction of one cell type.

    ``variant_genes`` indexes the columns to shift (all genes when omitted).
    Pseudo labels are the cell types, with the perturbed subset as an extra
    label ``<focus>__perturbed``.
    """
    if not d.has_cell_types:
        raise ValueError("perturbation setup needs cell types")
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    types = np.asarray(d.cell_types).astype(str)
    focus = np.flatnonzero(types == str(focus_type))
    if focus.size == 0:
        raise ValueError(f"focus type {focus_type!r} not present")
    rng = np.random.default_rng(seed)
    n_pert = int(round(fraction * focus.size))
    chosen = np.sort(rng.choice(focus, size=n_pert, replace=False))
    cols = np.arange(d.n_genes) if variant_genes is None else np.asarray(variant_genes)
    values = np.array(d.values, dtype=np.float64, copy=True)
    values[np.ix_(chosen, cols)] = np.maximum(values[np.ix_(chosen, cols)] + shift, 0.0)
    pseudo = types.astype(object)
    pseudo[chosen] = f"{focus_type}__perturbed"
    return PerturbationSetup(d.with_values(values), pseudo.astype(str), chosen, focus)


def oc_report(method_e, raw_e, pseudo_labels, focus, k: int = 15, cap: int = 64) -> dict:
    """High-dimensional OC on all cells and on the focus type, plus the raw-normalised focus score."""
    m = _values(cap_embedding(method_e, cap))
    r = _values(cap_embedding(raw_e, cap))
    m_all, m_focus = oc_score(m, pseudo_labels, None, k), oc_score(m, pseudo_labels, focus, k)
    r_focus = oc_score(r, pseudo_labels, focus, k)
    return {"oc_hd_all": m_all, "oc_hd_focus": m_focus, "oc_norm": oc_normalized(m_focus, r_focus)}


def external_oc(paths, pseudo_labels, focus, k: int = 15):
    """Mean and std of focus OC over user-supplied 2-D embeddings."""
    from .data import load_embedding

    vals = []
    for p in paths:
        e = load_embedding(p)
        if e.d != 2:
            raise ValueError(f"{p}: external embedding must be 2-D, got d={e.d}")
        vals.append(oc_score(e.values, pseudo_labels, focus, k))
    return float(np.mean(vals)), float(np.std(vals))


def evaluate(e, types, domains, cfg: EvalConfig = None, **extra) -> MetricsReport:
    """Full scoreboard on the capped embedding."""
    cfg = cfg or EvalConfig()
    if types is None:
        raise ValueError("evaluation needs cell-type labels")
    X = _values(cap_embedding(e, cfg.pca_cap))
    a, m, res = cluster_sweep(X, types, cfg)
    return aggregate(
        ari_best=max(a, 0.0), nmi_best=m,
        asw_ct=asw_celltype(X, types),
        asw_batch=asw_batch(X, types, domains),
        gc=graph_connectivity(X, types, cfg.knn_k),
        leiden_resolution_at_best=res, **extra,
    )


def metric_table(reports: dict, path):
    """Write a metric-bar TSV: one row per embedding, one column per score."""
    cols = ["ari_best", "nmi_best", "asw_ct", "asw_batch", "gc", "bio_mean", "overall"]
    with open(path, "w") as fh:
        fh.write("embedding\t" + "\t".join(cols) + "\n")
        for name, r in reports.items():
            fh.write(name + "\t" + "\t".join(repr(float(getattr(r, c))) for c in cols) + "\n")


__all__ = [
    "EvalConfig", "cap_embedding", "ari", "nmi", "cluster_sweep", "silhouette_samples", "asw_celltype",
    "asw_batch", "graph_connectivity", "aggregate", "oc_score", "oc_normalized", "oc_perturbation_setup",
    "oc_report", "external_oc", "evaluate", "metric_table", "PerturbationSetup",
]
