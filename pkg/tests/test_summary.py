import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from sparsegx import summary as su
from sparsegx.config import HyperParameters, McmcControl
from sparsegx.dataset import ExpressionMatrix, ValidationError
from sparsegx.sampler import run_chain


def make_summary(pi, beta=None, names=None, genes=None):
    pi = np.atleast_2d(np.asarray(pi, float))
    beta = np.where(pi > 0, 1.0, np.nan) if beta is None else np.asarray(beta, float)
    p, K = pi.shape
    return su.PosteriorSummary(pi, beta, np.zeros_like(pi), np.zeros(K), np.zeros(K), np.ones(p),
                               100, 0, tuple(genes or (f"g{i}" for i in range(p))),
                               tuple(names or (f"c{j}" for j in range(K))))


def test_threshold_counts_examples():
    s = make_summary(np.array([[1.0, 0.96], [1.0, 0.5], [1.0, 0.99]]))
    assert su.threshold_counts(s, 0.95)[1] == 2
    # strict comparison: a value equal to the threshold is not counted
    assert su.threshold_counts(s, 0.99)[1] == 0
    assert su.threshold_counts(s, 0.985)[1] == 1


def test_threshold_rejects_bad_q():
    with pytest.raises(ValueError):
        su.threshold_counts(make_summary([[0.5]]), 1.0)


@given(hnp.arrays(float, (12, 3), elements=st.floats(0, 1)), st.floats(0.01, 0.98),
       st.floats(0.001, 0.5))
def test_threshold_counts_monotone(pi, q, step):
    s = make_summary(pi)
    q2 = min(q + step, 0.99)
    assert np.all(su.threshold_counts(s, q2) <= su.threshold_counts(s, q))


def test_selected_genes():
    s = make_summary(np.array([[1.0, 0.96], [1.0, 0.5]]))
    assert su.selected_genes(s, "c1") == ["g0"]


def test_intersections_example():
    counts = su.gene_set_intersections({"A": "abc", "B": "bc", "C": "c"})
    assert counts[("A",)] == 1 and counts[("A", "B")] == 1 and counts[("A", "B", "C")] == 1
    assert sum(counts.values()) == 3
    assert all(v == 0 for k, v in counts.items() if k not in {("A",), ("A", "B"), ("A", "B", "C")})


def test_intersections_disjoint():
    counts = su.gene_set_intersections({"A": "ab", "B": "cd", "C": "e"})
    assert {k: v for k, v in counts.items() if v} == {("A",): 2, ("B",): 2, ("C",): 1}


def test_intersections_limit():
    with pytest.raises(ValueError):
        su.gene_set_intersections({str(i): "a" for i in range(6)})


@given(st.lists(st.sets(st.integers(0, 20)), min_size=1, max_size=5))
def test_intersections_partition_union(sets):
    named = {f"S{i}": s for i, s in enumerate(sets)}
    counts = su.gene_set_intersections(named)
    assert sum(counts.values()) == len(set().union(*sets))
    assert len(counts) == 2 ** len(sets) - 1


def test_expected_fdr_examples():
    s = make_summary(np.array([[1, 0.99], [1, 0.97], [1, 0.96], [1, 0.2]]))
    assert su.expected_fdr(s, 1, 0.95) == pytest.approx(0.08 / 3)
    assert su.expected_fdr(s, 1, 0.95) == pytest.approx(0.02667, abs=1e-5)
    assert su.expected_fdr(make_summary([[1, 1.0], [1, 1.0]]), 1, 0.95) == 0.0
    assert su.expected_fdr(make_summary([[1, 0.96]]), 1, 0.95) == pytest.approx(0.04)


def test_expected_fdr_empty():
    with pytest.raises(ValueError, match="undefined"):
        su.expected_fdr(make_summary([[1, 0.5]]), 1, 0.95)


@given(hnp.arrays(float, 15, elements=st.floats(0, 1)), st.floats(0.01, 0.99))
def test_expected_fdr_bounded(col, q):
    s = make_summary(np.column_stack([np.ones(15), col]))
    if np.any(col > q):
        assert su.expected_fdr(s, 1, q) <= 1 - q + 1e-12


def test_beta_absent_when_never_included():
    z = np.zeros((1, 2))
    s = su.summarize(z, z, z, np.zeros(2), np.zeros(2), np.ones(1), 10, 0)
    assert np.all(np.isnan(s.beta_mean)) and np.all(s.pi_star == 0)
    assert s.shrunk_effects.tolist() == [[0.0, 0.0]]


def _design(n):
    return np.column_stack([np.ones(n), np.arange(n) % 2, np.linspace(-1, 1, n)])


def test_corrected_expression_intercept_only():
    X = np.array([[8.0, 9.0, 7.0, 8.0]])
    s = make_summary([[1.0, 0.0, 0.0]], beta=[[8.0, np.nan, np.nan]])
    np.testing.assert_allclose(su.corrected_expression(X, s, _design(4), []), X - 8.0)


def test_corrected_expression_identity():
    X = 8 + np.random.default_rng(1).standard_normal((3, 6))
    s = make_summary(np.column_stack([np.ones(3), np.zeros(3), np.zeros(3)]),
                     beta=np.column_stack([np.full(3, 8.0), np.full((3, 2), np.nan)]))
    np.testing.assert_array_equal(su.corrected_expression(X, s, _design(6), [2], False), X)
    np.testing.assert_array_equal(su.corrected_expression(X, s, _design(6), [], False), X)


@given(hnp.arrays(float, (3, 5), elements=st.floats(-5, 5)))
def test_corrected_expression_empty_set_identity(X):
    s = make_summary(np.full((3, 3), 0.7), beta=np.ones((3, 3)))
    np.testing.assert_array_equal(su.corrected_expression(X, s, _design(5), [], False), X)


def test_corrected_expression_keeps_matrix_type():
    X = ExpressionMatrix(("a",), ("s1", "s2"), np.array([[8.0, 9.0]]))
    s = make_summary([[1.0, 0.0, 0.0]], beta=[[8.0, np.nan, np.nan]], genes=["a"])
    out = su.corrected_expression(X, s, _design(2), ["c2"])
    assert isinstance(out, ExpressionMatrix) and out.gene_ids == ("a",)


def test_corrected_expression_mismatch():
    with pytest.raises(ValidationError):
        su.corrected_expression(np.zeros((2, 4)), make_summary([[1.0, 0, 0]]), _design(4), [])


def test_corrected_expression_removes_artifact():
    r = np.random.default_rng(4)
    n = 40
    artifact = r.standard_normal(n)
    artifact -= artifact.mean()
    H = np.column_stack([np.ones(n), artifact])
    X = (8 + 0.8 * artifact + 0.1 * r.standard_normal(n))[None, :]
    s = run_chain(X, H, HyperParameters(), McmcControl(burn_in=300, samples=1000, seed=2))
    assert s.pi_star[0, 1] > 0.99
    raw = su.corrected_expression(X, s, H, [])
    fixed = su.corrected_expression(X, s, H, [1])
    assert fixed.var() <= raw.var()
    assert fixed.var() < 0.05


def test_decomposition_no_significant_columns():
    X = np.array([[8.0, 9.0, 7.0, 8.0]])
    s = make_summary([[1.0, 0.2, 0.1]], beta=[[8.0, 1.0, 1.0]])
    d = su.decompose_gene(X, s, _design(4), 0).as_dict()
    assert list(d) == ["data", "c0", "residual"]
    np.testing.assert_allclose(d["residual"], X[0] - 8.0)


@given(hnp.arrays(float, (2, 6), elements=st.floats(-10, 10)),
       hnp.arrays(float, (2, 3), elements=st.floats(0, 1)),
       hnp.arrays(float, (2, 3), elements=st.floats(-3, 3)))
def test_decomposition_reconstructs_data(X, pi, beta):
    s = make_summary(pi, beta=beta)
    d = su.decompose_gene(X, s, _design(6), 1, threshold=None)
    comps = dict(d.components)
    total = sum(v for k, v in comps.items() if k != "data")
    assert np.max(np.abs(total - X[1])) < 1e-9


def test_decomposition_planted_effect_dominates():
    r = np.random.default_rng(6)
    n = 30
    H = np.column_stack([np.ones(n), r.integers(0, 2, (n, 3))]).astype(float)
    X = (8 + 1.2 * H[:, 2] + 0.15 * r.standard_normal(n))[None, :]
    s = run_chain(X, H, HyperParameters(), McmcControl(burn_in=300, samples=1000, seed=1))
    d = su.decompose_gene(X, s, H, 0, threshold=None)
    energy = {k: float(np.sum(v ** 2)) for k, v in d.components[2:-1]}
    assert max(energy, key=energy.get) == "j3"
    assert su.decompose_gene(X, s, H, 0).as_dict().keys() == {"data", "j1", "j3", "residual"}


def test_decomposition_long_format():
    X = ExpressionMatrix(("a",), ("s1", "s2"), np.array([[8.0, 9.0]]))
    s = make_summary([[1.0, 0.0, 0.0]], beta=[[8.0, np.nan, np.nan]], genes=["a"])
    text = su.format_decompositions([su.decompose_gene(X, s, _design(2), "a")])
    rows = text.splitlines()
    assert rows[0] == "gene\tcomponent\tsample\tvalue"
    assert rows[1] == "a\tdata\ts1\t8.000000"
    assert len(rows) == 1 + 3 * 2


def test_summary_table_round_trip(tmp_path):
    pi = np.array([[1.0, 0.25, 0.0], [1.0, 0.987654321, 0.5]])
    beta = np.array([[8.1234567, -0.5, np.nan], [7.0, 1.25, 0.125]])
    s = make_summary(pi, beta=beta, names=["Intercept", "a", "b"])
    path = tmp_path / "s.tsv"
    su.save_summary_table(s, path)
    back = su.load_summary_table(path)
    assert back.gene_ids == s.gene_ids and back.column_names == s.column_names
    np.testing.assert_allclose(back.pi_star, pi, atol=5e-7)
    np.testing.assert_allclose(back.beta_mean, beta, atol=5e-7)
    assert np.isnan(back.beta_mean[0, 2])
    assert path.read_text().splitlines()[2] == "g0\ta\t0.250000\t-0.500000\t0.000000"
