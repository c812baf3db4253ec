"""Shared data model and on-disk formats.

Formats
-------
matrix   : ``N G NNZ`` header, then ``row col value`` triplets (0-indexed).
           A dense CSV (one row per cell, no header) is accepted on read.
labels   : tab-separated ``cell_id  domain  [cell_type]``, row-aligned with cells.
genes    : one gene id per line (optional; defaults to ``G0..G{G-1}``).
embedding: ``N d source`` header, then N whitespace-separated rows.
report   : ``key=value`` lines.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np
from scipy import sparse

LAYERS = ("raw_counts", "lognorm")
EMBEDDING_SOURCES = ("variant_stream", "anchor_stream", "refined_anchor", "fused", "external")


class DataFormatError(ValueError):
    """Raised when a file or in-memory object violates its declared layout."""


@dataclass(frozen=True, eq=False)
class ExpressionDataset:
    values: np.ndarray
    gene_ids: tuple
    cell_ids: tuple
    domains: np.ndarray
    cell_types: Optional[np.ndarray] = None
    layer: str = "lognorm"

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise DataFormatError("values must be a 2-D cells x genes matrix")
        n, g = values.shape
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "gene_ids", tuple(str(x) for x in self.gene_ids))
        object.__setattr__(self, "cell_ids", tuple(str(x) for x in self.cell_ids))
        object.__setattr__(self, "domains", np.asarray(self.domains).astype(str))
        if self.cell_types is not None:
            object.__setattr__(self, "cell_types", np.asarray(self.cell_types).astype(str))

        if self.layer not in LAYERS:
            raise DataFormatError(f"unknown layer {self.layer!r}; expected one of {LAYERS}")
        if len(self.gene_ids) != g:
            raise DataFormatError(f"{len(self.gene_ids)} gene ids for {g} columns")
        if len(self.cell_ids) != n:
            raise DataFormatError(f"{len(self.cell_ids)} cell ids for {n} rows")
        if len(set(self.gene_ids)) != g:
            raise DataFormatError("duplicate gene ids")
        if len(set(self.cell_ids)) != n:
            raise DataFormatError("duplicate cell ids")
        if self.domains.shape != (n,):
            raise DataFormatError("domains must have one entry per cell")
        if self.cell_types is not None and self.cell_types.shape != (n,):
            raise DataFormatError("cell_types must have one entry per cell")
        if not np.all(np.isfinite(values)):
            raise DataFormatError("values contain non-finite entries")
        if np.any(values < 0):
            raise DataFormatError("values contain negative entries")
        if self.layer == "raw_counts" and not np.all(values == np.round(values)):
            raise DataFormatError("raw_counts layer must hold integers")
        values.setflags(write=False)

    @property
    def n_cells(self) -> int:
        return self.values.shape[0]

    @property
    def n_genes(self) -> int:
        return self.values.shape[1]

    @property
    def domain_levels(self) -> np.ndarray:
        return np.unique(self.domains)

    @property
    def has_cell_types(self) -> bool:
        return self.cell_types is not None and bool(np.all(self.cell_types != ""))

    def subset(self, cells=None, genes=None, values=None, layer=None) -> "ExpressionDataset":
        """Return a new dataset restricted to ``cells`` x ``genes`` (index arrays or masks)."""
        cells = np.arange(self.n_cells) if cells is None else _as_index(cells, self.n_cells)
        genes = np.arange(self.n_genes) if genes is None else _as_index(genes, self.n_genes)
        if values is None:
            values = self.values[np.ix_(cells, genes)]
        return ExpressionDataset(
            values=values,
            gene_ids=[self.gene_ids[j] for j in genes],
            cell_ids=[self.cell_ids[i] for i in cells],
            domains=self.domains[cells],
            cell_types=None if self.cell_types is None else self.cell_types[cells],
            layer=self.layer if layer is None else layer,
        )

    def with_values(self, values, layer=None) -> "ExpressionDataset":
        return self.subset(values=np.asarray(values, dtype=np.float64), layer=layer)


def _as_index(sel, n):
    sel = np.asarray(sel)
    if sel.dtype == bool:
        return np.flatnonzero(sel)
    return sel.astype(int)


def require_domains(d: ExpressionDataset, minimum: int = 2):
    levels = d.domain_levels
    if len(levels) < minimum:
        raise DataFormatError(f"need at least {minimum} domains, found {len(levels)}")
    return levels


@dataclass(frozen=True, eq=False)
class GenePartition:
    """Anchor/variant split of the selected gene pool.

    ``selected`` holds dataset column indices; ``anchors`` and ``variants`` are
    subsets of it.  ``order`` lists the selected genes with variants first, so
    ``X[:, order][:, :n_variants]`` is the variant block.
    """

    selected: np.ndarray
    anchors: np.ndarray
    variants: np.ndarray
    s_dom: np.ndarray
    s_str: np.ndarray
    z_dom: np.ndarray
    z_str: np.ndarray
    thresholds: tuple = (0.0, 0.0)

    def __post_init__(self):
        for name in ("selected", "anchors", "variants"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=int))
        for name in ("s_dom", "s_str", "z_dom", "z_str"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        sel = set(self.selected.tolist())
        a, v = set(self.anchors.tolist()), set(self.variants.tolist())
        if a & v:
            raise DataFormatError("anchors and variants overlap")
        if a | v != sel:
            raise DataFormatError("anchors and variants must cover the selected genes")

    @property
    def order(self) -> np.ndarray:
        return np.concatenate([self.variants, self.anchors])

    @property
    def n_variants(self) -> int:
        return len(self.variants)

    @property
    def n_anchors(self) -> int:
        return len(self.anchors)

    def is_anchor(self) -> np.ndarray:
        """Boolean mask aligned with ``selected``."""
        return np.isin(self.selected, self.anchors)


@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    values: np.ndarray
    source: str = "external"

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 1 and values.size == 0:
            values = values.reshape(0, 0)
        if values.ndim != 2:
            raise DataFormatError("embedding must be 2-D")
        if not np.all(np.isfinite(values)):
            raise DataFormatError("embedding contains non-finite entries")
        if self.source not in EMBEDDING_SOURCES:
            raise DataFormatError(f"unknown embedding source {self.source!r}")
        object.__setattr__(self, "values", values)

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @property
    def n(self) -> int:
        return self.values.shape[0]


_CORE_FIELDS = ("ari_best", "nmi_best", "asw_ct", "asw_batch", "gc", "bio_mean", "overall")


@dataclass
class MetricsReport:
    ari_best: float
    nmi_best: float
    asw_ct: float
    asw_batch: float
    gc: float
    bio_mean: float
    overall: float
    leiden_resolution_at_best: float = float("nan")
    oc_hd_all: Optional[float] = None
    oc_hd_focus: Optional[float] = None
    oc_norm: Optional[float] = None
    extras: dict = field(default_factory=dict)

    @classmethod
    def from_parts(cls, ari_best, nmi_best, asw_ct, asw_batch, gc, **kw) -> "MetricsReport":
        bio_mean = (asw_ct + ari_best + nmi_best + gc) / 4.0
        overall = 0.4 * asw_batch + 0.6 * bio_mean
        return cls(ari_best, nmi_best, asw_ct, asw_batch, gc, bio_mean, overall, **kw)

    def as_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "extras"}
        out.update(self.extras)
        return out


# ---------------------------------------------------------------------------
# readers / writers


def _read_triplets(path):
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 3:
            raise DataFormatError(f"{path}: header must be 'N G NNZ'")
        try:
            n, g, nnz = (int(x) for x in header)
        except ValueError as exc:
            raise DataFormatError(f"{path}: non-integer header") from exc
        rows, cols, vals = [], [], []
        for lineno, line in enumerate(fh, start=2):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3:
                raise DataFormatError(f"{path}:{lineno}: expected 'row col value'")
            try:
                r, c, v = int(parts[0]), int(parts[1]), float(parts[2])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: malformed triplet") from exc
            if not (0 <= r < n and 0 <= c < g):
                raise DataFormatError(f"{path}:{lineno}: index out of range")
            rows.append(r)
            cols.append(c)
            vals.append(v)
    if len(vals) != nnz:
        raise DataFormatError(f"{path}: header declares {nnz} entries, found {len(vals)}")
    if any(v < 0 for v in vals):
        raise DataFormatError(f"{path}: negative value in matrix")
    mat = sparse.coo_matrix((vals, (rows, cols)), shape=(n, g)).toarray()
    return mat


def _read_dense_csv(path):
    try:
        mat = np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError as exc:
        raise DataFormatError(f"{path}: malformed CSV") from exc
    if np.any(mat < 0):
        raise DataFormatError(f"{path}: negative value in matrix")
    return mat


def read_matrix(path) -> np.ndarray:
    if str(path).endswith(".csv"):
        return _read_dense_csv(path)
    return _read_triplets(path)


def write_matrix(values, path):
    """Write a matrix in sparse-triplet form (zeros omitted)."""
    values = np.asarray(values, dtype=np.float64)
    r, c = np.nonzero(values)
    with open(path, "w") as fh:
        fh.write(f"{values.shape[0]} {values.shape[1]} {len(r)}\n")
        for i, j in zip(r.tolist(), c.tolist()):
            fh.write(f"{i} {j} {float(values[i, j])!r}\n")


def read_labels(path):
    cell_ids, domains, types = [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) < 2:
                raise DataFormatError(f"{path}:{lineno}: need 'cell_id<TAB>domain[<TAB>cell_type]'")
            cell_ids.append(parts[0])
            domains.append(parts[1])
            types.append(parts[2] if len(parts) > 2 else "")
    has_types = any(t != "" for t in types)
    return cell_ids, np.array(domains), (np.array(types) if has_types else None)


def write_labels(cell_ids, domains, path, cell_types=None):
    with open(path, "w") as fh:
        for i, cid in enumerate(cell_ids):
            row = [str(cid), str(domains[i])]
            if cell_types is not None:
                row.append(str(cell_types[i]))
            fh.write("\t".join(row) + "\n")


def read_gene_ids(path):
    with open(path) as fh:
        return [line.strip() for line in fh if line.strip()]


def write_gene_ids(gene_ids, path):
    with open(path, "w") as fh:
        fh.writelines(f"{g}\n" for g in gene_ids)


def load_dataset(matrix_path, labels_path, layer: str = "raw_counts", genes_path=None) -> ExpressionDataset:
    """Read a matrix + labels pair into a validated :class:`ExpressionDataset`.

    When ``genes_path`` is omitted, ``<matrix_path>.genes`` is used if present.
    """
    if layer not in LAYERS:
        raise DataFormatError(f"unknown layer {layer!r}; expected one of {LAYERS}")
    values = read_matrix(matrix_path)
    cell_ids, domains, types = read_labels(labels_path)
    if len(cell_ids) != values.shape[0]:
        raise DataFormatError(
            f"labels file has {len(cell_ids)} rows but matrix has {values.shape[0]} cells"
        )
    if genes_path is None and os.path.exists(f"{matrix_path}.genes"):
        genes_path = f"{matrix_path}.genes"
    if genes_path is not None:
        gene_ids = read_gene_ids(genes_path)
    else:
        gene_ids = [f"G{j}" for j in range(values.shape[1])]
    return ExpressionDataset(values, gene_ids, cell_ids, domains, types, layer)


def save_dataset(d: ExpressionDataset, matrix_path, labels_path):
    write_matrix(d.values, matrix_path)
    write_gene_ids(d.gene_ids, f"{matrix_path}.genes")
    write_labels(d.cell_ids, d.domains, labels_path, d.cell_types)


def save_embedding(e: EmbeddingMatrix, path):
    with open(path, "w") as fh:
        fh.write(f"{e.values.shape[0]} {e.values.shape[1]} {e.source}\n")
        for row in e.values:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_embedding(path) -> EmbeddingMatrix:
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) not in (2, 3):
            raise DataFormatError(f"{path}: header must be 'N d [source]'")
        try:
            n, d = int(header[0]), int(header[1])
        except ValueError as exc:
            raise DataFormatError(f"{path}: non-integer header") from exc
        source = header[2] if len(header) == 3 else "external"
        rows = []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                row = [float(tok) for tok in line.split()]
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: non-numeric token") from exc
            if len(row) != d:
                raise DataFormatError(f"{path}:{lineno}: expected {d} values, got {len(row)}")
            rows.append(row)
    if len(rows) != n:
        raise DataFormatError(f"{path}: header declares {n} rows, found {len(rows)}")
    values = np.array(rows, dtype=np.float64).reshape(n, d)
    return EmbeddingMatrix(values, source)


def save_report(r: MetricsReport, path):
    """Write ``key=value`` lines. ``None`` (not computed) is written as an empty value."""
    items = r.as_dict()
    for key, value in items.items():
        if value is None:
            continue
        if key == "leiden_resolution_at_best" and math.isnan(value):
            continue
        if not math.isfinite(float(value)):
            raise ValueError(f"refusing to serialize non-finite field {key}={value}")
    with open(path, "w") as fh:
        for key, value in items.items():
            fh.write(f"{key}={'' if value is None else repr(float(value))}\n")


def load_report(path) -> MetricsReport:
    raw = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DataFormatError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            raw[key.strip()] = None if value.strip() == "" else float(value)
    missing = [k for k in _CORE_FIELDS if k not in raw]
    if missing:
        raise DataFormatError(f"{path}: missing fields {missing}")
    known = {f.name for f in fields(MetricsReport)} - {"extras"}
    kw = {k: v for k, v in raw.items() if k in known}
    extras = {k: v for k, v in raw.items() if k not in known}
    return MetricsReport(**kw, extras=extras)
