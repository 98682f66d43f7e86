import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from sparsegx import signature as sg
from sparsegx.dataset import ExpressionMatrix, ValidationError, gene_map


def eigh_oracle(X):
    """Leading weights and scores from eigendecompositions of X X' and X' X."""
    evals, evecs = np.linalg.eigh(X @ X.T)
    d0 = np.sqrt(evals[-1])
    u = evecs[:, -1]
    u = u if u[np.argmax(np.abs(u))] > 0 else -u
    weights = u / d0
    _, right = np.linalg.eigh(X.T @ X)
    v = right[:, -1]
    scores = v if v @ (X.T @ u) > 0 else -v
    return weights, scores, np.sqrt(np.clip(evals[::-1], 0, None))


def test_single_gene():
    sig = sg.metagene(np.array([[1.0, 2.0, 2.0]]), ["a"])
    np.testing.assert_allclose(sig.singular_values, [3.0])
    np.testing.assert_allclose(sig.scores, [1 / 3, 2 / 3, 2 / 3])
    np.testing.assert_allclose(sig.weights, [1 / 3])


def test_rank_one():
    u, v = np.array([1.0, 2.0]), np.array([1.0, 0.0, 0.0])
    sig = sg.metagene(np.outer(u, v))
    np.testing.assert_allclose(sig.weights, u / 5, atol=1e-15)
    np.testing.assert_allclose(sig.scores, v, atol=1e-15)
    assert sig.rank == 1


@pytest.mark.parametrize("seed", range(5))
def test_random_matches_eigh_oracle(seed):
    X = np.random.default_rng(seed).standard_normal((10, 8))
    sig = sg.metagene(X)
    w, f, d = eigh_oracle(X)
    np.testing.assert_allclose(sig.weights, w, atol=1e-9)
    np.testing.assert_allclose(sig.scores, f, atol=1e-9)
    np.testing.assert_allclose(sig.singular_values, d[:8], atol=1e-9)
    U, dd, Vt = np.linalg.svd(X, full_matrices=False)
    assert np.max(np.abs(X - (U * dd) @ Vt)) < 1e-9


def test_rank_zero():
    with pytest.raises(sg.RankError, match="rank 0"):
        sg.metagene(np.zeros((3, 4)))


def test_reduced_rank_drops_zero_singular_values():
    X = np.outer([1.0, 1.0, 2.0], [1.0, 2.0, 3.0, 4.0])
    X[1] += np.array([0, 1.0, 0, 0])
    assert sg.metagene(X).rank == 2


def test_rejects_nonfinite():
    with pytest.raises(ValidationError):
        sg.metagene(np.array([[1.0, np.inf]]))


@given(hnp.arrays(float, st.tuples(st.integers(1, 6), st.integers(1, 7)),
                  elements=st.floats(-10, 10)))
def test_invariants(X):
    if np.linalg.norm(X) < 1e-6:
        return
    sig = sg.metagene(X)
    assert sig.weights[np.argmax(np.abs(sig.weights))] > 0
    np.testing.assert_allclose(sig.weights @ X, sig.scores, atol=1e-9)
    np.testing.assert_allclose(sg.project(sig, X), sig.scores, rtol=1e-12, atol=1e-12)


def test_project_identity_relative():
    X = 8 + np.random.default_rng(2).standard_normal((12, 9))
    sig = sg.metagene(X)
    err = np.linalg.norm(sg.project(sig, X) - sig.scores) / np.linalg.norm(sig.scores)
    assert err < 1e-12


def test_project_zero_and_linear():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((4, 6))
    sig = sg.metagene(X)
    np.testing.assert_array_equal(sg.project(sig, np.zeros((4, 5))), np.zeros(5))
    np.testing.assert_allclose(sg.project(sig, 2 * X), 2 * sig.scores, atol=1e-12)
    Y1, Y2 = rng.standard_normal((4, 5)), rng.standard_normal((4, 5))
    np.testing.assert_allclose(sg.project(sig, 3 * Y1 - Y2),
                               3 * sg.project(sig, Y1) - sg.project(sig, Y2), atol=1e-12)


def test_project_through_map_permutation_invariant():
    rng = np.random.default_rng(4)
    mouse = ("m1", "m2", "m3")
    sig = sg.metagene(rng.standard_normal((3, 5)), mouse)
    Y = rng.standard_normal((3, 7))
    human = ExpressionMatrix(("h1", "h2", "h3"), tuple(f"t{i}" for i in range(7)), Y)
    gmap = gene_map([("m1", "h1"), ("m2", "h2"), ("m3", "h3")])
    base = sg.project(sig, human, gmap)
    perm = [2, 0, 1]
    shuffled = ExpressionMatrix(tuple(human.gene_ids[i] for i in perm), human.sample_ids, Y[perm])
    np.testing.assert_allclose(sg.project(sig, shuffled, gmap), base, atol=1e-14)
    np.testing.assert_allclose(base, sig.weights @ Y, atol=1e-14)


def test_project_lists_missing_genes():
    sig = sg.metagene(np.eye(3), ("m1", "m2", "m3"))
    human = ExpressionMatrix(("h1",), ("t",), np.ones((1, 1)))
    with pytest.raises(ValidationError, match="m2, m3"):
        sg.project(sig, human, {"m1": "h1"})


def test_project_aligned_array_shape():
    sig = sg.metagene(np.eye(3))
    with pytest.raises(ValidationError):
        sg.project(sig, np.ones((2, 4)))


def test_signature_file_round_trip(tmp_path):
    X = ExpressionMatrix(("a", "b"), ("s1", "s2", "s3"), np.array([[1.0, 2.0, 4.0], [0.5, -1.0, 3.0]]))
    sig = sg.metagene(X, name="risk6", source="mouse")
    sg.save_signature(sig, tmp_path / "sig.tsv")
    back = sg.load_signature(tmp_path / "sig.tsv")
    assert back.gene_ids == sig.gene_ids and back.sample_ids == sig.sample_ids
    assert (back.name, back.source) == ("risk6", "mouse")
    np.testing.assert_array_equal(back.weights, sig.weights)
    np.testing.assert_array_equal(back.scores, sig.scores)
    np.testing.assert_array_equal(back.singular_values, sig.singular_values)
    text = (tmp_path / "sig.tsv").read_text()
    assert text.startswith("# name=risk6\n# source=mouse\n")
    assert "gene\tweight\n" in text and "sample\tscore\n" in text
