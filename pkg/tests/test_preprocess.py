import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from sklearn.cluster import KMeans
from sklearn.metrics import adjusted_rand_score

from anchorfuse.data import DataFormatError, ExpressionDataset
from anchorfuse.preprocess import (
    EmptyDatasetError, PreprocessConfig, SyntheticSpec, generate_synthetic, hvg_scores, mixup,
    mixup_batch, mixup_neighbor_pools, normalize_log1p, qc_filter, select_hvgs,
)


def counts_dataset(values, gene_ids=None, domains=None):
    values = np.asarray(values)
    n, g = values.shape
    return ExpressionDataset(
        values=values,
        gene_ids=gene_ids or [f"G{j}" for j in range(g)],
        cell_ids=[f"C{i}" for i in range(n)],
        domains=domains if domains is not None else ["A", "B"] * (n // 2) + ["A"] * (n % 2),
        layer="raw_counts",
    )


def test_qc_drops_sparse_cell():
    X = np.ones((5, 250), dtype=int)
    X[2, 150:] = 0  # 150 detected genes
    out = qc_filter(counts_dataset(X))
    assert "C2" not in out.cell_ids and out.n_cells == 4


def test_qc_drops_rare_gene():
    X = np.ones((6, 210), dtype=int)
    X[2:, 7] = 0  # detected in 2 cells
    out = qc_filter(counts_dataset(X), PreprocessConfig(min_genes_per_cell=200))
    assert "G7" not in out.gene_ids and out.n_genes == 209


def test_qc_identity_when_clean():
    X = np.ones((4, 220), dtype=int)
    d = counts_dataset(X)
    out = qc_filter(d)
    np.testing.assert_array_equal(out.values, d.values)
    assert out.cell_ids == d.cell_ids and out.gene_ids == d.gene_ids


def test_qc_mito_filter():
    X = np.ones((4, 220), dtype=int)
    X[1, 0] = 100  # MT- gene dominates cell 1
    ids = ["MT-CO1"] + [f"G{j}" for j in range(1, 220)]
    out = qc_filter(counts_dataset(X, gene_ids=ids))
    assert out.cell_ids == ("C0", "C2", "C3")


def test_qc_everything_removed():
    with pytest.raises(EmptyDatasetError):
        qc_filter(counts_dataset(np.ones((3, 10), dtype=int)))


def test_qc_requires_counts(small_synthetic):
    with pytest.raises(DataFormatError):
        qc_filter(small_synthetic[0])


@given(arrays(np.int64, (12, 15), elements=st.integers(0, 3)))
def test_qc_idempotent(X):
    cfg = PreprocessConfig(min_genes_per_cell=6, min_cells_per_gene=4)
    try:
        once = qc_filter(counts_dataset(X), cfg)
    except EmptyDatasetError:
        return
    twice = qc_filter(once, cfg)
    np.testing.assert_array_equal(once.values, twice.values)
    assert once.cell_ids == twice.cell_ids and once.gene_ids == twice.gene_ids


def test_normalize_forced_arithmetic():
    d = normalize_log1p(counts_dataset(np.array([[1, 1, 0], [2, 0, 0]])), 10000)
    np.testing.assert_allclose(d.values[0], [np.log(5001), np.log(5001), 0.0])
    assert d.values[1, 2] == 0.0 and d.layer == "lognorm"


def test_normalize_zero_cell():
    with pytest.raises(ValueError, match="C1"):
        normalize_log1p(counts_dataset(np.array([[1, 2], [0, 0]])))


@given(arrays(np.int64, (5, 7), elements=st.integers(0, 1000)), st.floats(1.0, 1e5))
def test_normalize_row_sums(X, target):
    X[:, 0] += 1
    d = normalize_log1p(counts_dataset(X), target)
    np.testing.assert_allclose(np.expm1(d.values).sum(axis=1), target, rtol=0, atol=1e-6 * max(1.0, target / 1e4))


def lognorm_dataset(X, domains):
    n, g = X.shape
    return ExpressionDataset(X, [f"G{j}" for j in range(g)], [f"C{i}" for i in range(n)], domains)


def brute_hvg_order(X, domains):
    """Per-domain dispersion ranks computed gene by gene, averaged, then sorted with index tie-break."""
    g = X.shape[1]
    per_domain = []
    for b in sorted(set(domains)):
        rows = X[np.asarray(domains) == b]
        disp = []
        for j in range(g):
            col = rows[:, j]
            disp.append(col.var() / col.mean() if col.mean() > 0 else 0.0)
        ranks = []
        for j in range(g):
            above = sum(1 for x in disp if x > disp[j])
            ties = sum(1 for x in disp if x == disp[j])
            ranks.append(above + (ties - 1) / 2)
        per_domain.append(ranks)
    score = np.mean(per_domain, axis=0)
    return sorted(range(g), key=lambda j: (score[j], j))


def test_hvg_saturation_matches_oracle():
    rng = np.random.default_rng(0)
    X = rng.gamma(2.0, 1.0, size=(60, 12))
    dom = np.array(["A", "B"] * 30)
    got = select_hvgs(lognorm_dataset(X, dom), 12)
    assert got == brute_hvg_order(X, dom)


def test_hvg_planted_variance():
    rng = np.random.default_rng(1)
    X = 5.0 + rng.normal(0, 0.1, size=(80, 30))
    X[:, 17] = 5.0 + rng.normal(0, 1.0, size=80)  # ~10x the spread
    d = lognorm_dataset(np.clip(X, 0, None), np.array(["A", "B"] * 40))
    assert select_hvgs(d, 1) == [17]


def test_hvg_tie_break():
    X = np.tile([[1.0, 2.0], [3.0, 4.0]], (5, 1))
    X = np.hstack([X[:, :1], X[:, :1]])  # two identical genes
    d = lognorm_dataset(X, np.array(["A", "B"] * 5))
    assert select_hvgs(d, 2) == [0, 1]
    assert hvg_scores(d)[0] == hvg_scores(d)[1]


def test_hvg_too_many():
    d = lognorm_dataset(np.ones((4, 3)), np.array(["A", "B"] * 2))
    with pytest.raises(ValueError):
        select_hvgs(d, 4)


def test_mixup_examples():
    np.testing.assert_array_equal(mixup([0, 2], [2, 0], 1.0), [0, 2])
    np.testing.assert_array_equal(mixup([0, 2], [2, 0], 0.0), [2, 0])
    np.testing.assert_array_equal(mixup([0, 2], [2, 0], 0.5), [1, 1])
    with pytest.raises(ValueError, match="mismatch"):
        mixup([0, 1], [0, 1, 2], 0.5)


vec = arrays(np.float64, 6, elements=st.floats(-1e3, 1e3))


@given(vec, vec, st.floats(0.0, 1.0))
def test_mixup_on_segment(xi, xj, alpha):
    out = mixup(xi, xj, alpha)
    lo, hi = np.minimum(xi, xj), np.maximum(xi, xj)
    tol = 1e-9 * (1 + np.abs(hi))
    assert np.all(out >= lo - tol) and np.all(out <= hi + tol)


def test_mixup_pools_same_domain():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(40, 5))
    dom = np.array(["A"] * 25 + ["B"] * 15)
    pools = mixup_neighbor_pools(X, dom, k=10)
    for i, p in enumerate(pools):
        assert len(p) == 10 and i not in p
        assert set(dom[p]) == {dom[i]}
    mixed = mixup_batch(X, pools, np.random.default_rng(1))
    assert mixed.shape == X.shape


def test_synthetic_deterministic():
    a, ta = generate_synthetic(SyntheticSpec(seed=5))
    b, tb = generate_synthetic(SyntheticSpec(seed=5))
    np.testing.assert_array_equal(a.values, b.values)
    np.testing.assert_array_equal(ta["planted"], tb["planted"])
    assert a.values.min() >= 0


def domain_gap(d, genes):
    levels = d.domain_levels
    means = np.array([d.values[d.domains == b][:, genes].mean(axis=0) for b in levels])
    return np.abs(means[0] - means[1])


def test_synthetic_null_shift():
    d, truth = generate_synthetic(SyntheticSpec(batch_shift_scale=0.0, seed=2))
    assert len(truth["planted"]) == 50
    # types are assigned independently of domains, so gaps are sampling noise only
    assert domain_gap(d, np.arange(d.n_genes)).max() < 0.35


def test_synthetic_kmeans_oracle(acceptance_synthetic):
    d, truth = acceptance_synthetic
    clean = np.setdiff1d(np.arange(d.n_genes), truth["planted"])
    labels = KMeans(3, n_init=10, random_state=0).fit_predict(d.values[:, clean])
    assert adjusted_rand_score(truth["cell_types"], labels) >= 0.9


@given(st.integers(0, 10_000), st.floats(0.1, 0.5), st.floats(2.0, 4.0))
def test_synthetic_gap_ratio(seed, noise, ratio):
    spec = SyntheticSpec(n_cells=400, n_genes=60, n_variant_genes=15, noise_scale=noise,
                         batch_shift_scale=ratio * noise, seed=seed)
    d, truth = generate_synthetic(spec)
    other = np.setdiff1d(np.arange(d.n_genes), truth["planted"])
    assert domain_gap(d, truth["planted"]).mean() >= 5 * domain_gap(d, other).mean()


def test_synthetic_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(n_genes=10, n_variant_genes=11)
    with pytest.raises(ValueError):
        SyntheticSpec(n_types=1)
