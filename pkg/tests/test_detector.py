import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from metric_ood import detector as D
from metric_ood.errors import ConfigurationError, UsageError


def test_centroids_are_class_means():
    emb = np.array([[0.0, 0.0], [2.0, 0.0], [10.0, 10.0], [12.0, 10.0]])
    c = D.compute_centroids(emb, [7, 7, 2, 2])
    assert c.class_ids == (2, 7)
    assert c.centers.tolist() == [[11.0, 10.0], [1.0, 0.0]]


def test_missing_class_rejected():
    with pytest.raises(ConfigurationError):
        D.compute_centroids(np.zeros((2, 2)), [1, 1], class_ids=[1, 2])


def test_nonfinite_centroids_rejected():
    with pytest.raises(ConfigurationError):
        D.ClassCentroids((0,), np.array([[np.nan, 0.0]]))


def _two_centers():
    return D.ClassCentroids((0, 1), np.array([[0.0, 0.0], [10.0, 0.0]]))


def test_score_hand_values():
    c = _two_centers()
    assert D.ood_score(np.array([3.0, 0.0]), c) == -3.0
    assert D.ood_score(np.array([10.0, 0.0]), c) == 0.0
    assert D.classify(np.array([3.0, 0.0]), c) == 0
    assert D.classify(np.array([9.0, 1.0]), c) == 1


def test_score_dimension_mismatch():
    with pytest.raises(UsageError):
        D.ood_score(np.zeros(3), _two_centers())


def test_empty_centroids():
    with pytest.raises(UsageError):
        D.ood_scores(np.zeros((1, 2)), D.ClassCentroids((), np.zeros((0, 2))))


def test_tie_goes_to_lowest_class_id():
    c = D.ClassCentroids((2, 5), np.array([[-1.0, 0.0], [1.0, 0.0]]))
    assert D.classify(np.zeros(2), c) == 2


def test_score_permutation_invariant():
    rng = np.random.default_rng(0)
    centers = rng.normal(size=(4, 3))
    emb = rng.normal(size=(20, 3))
    a = D.ood_scores(emb, D.ClassCentroids((0, 1, 2, 3), centers))
    b = D.ood_scores(emb, D.ClassCentroids((0, 1, 2, 3), centers[::-1]))
    assert np.array_equal(a, b)


@given(seed=st.integers(0, 2**32 - 1), shift=st.floats(-100, 100))
def test_score_invariants(seed, shift):
    rng = np.random.default_rng(seed)
    centers = rng.normal(scale=5, size=(3, 4))
    emb = np.r_[rng.normal(scale=5, size=(10, 4)), centers[1:2]]
    c = D.ClassCentroids((3, 4, 9), centers)
    scores = D.ood_scores(emb, c)
    assert np.all(scores <= 0) and scores[-1] == 0.0
    assert np.all(scores[:-1] < 0)
    # classify picks the center attaining the score
    pred = D.classify_batch(emb, c)
    idx = [c.class_ids.index(p) for p in pred]
    assert np.allclose(-np.linalg.norm(emb - centers[idx], axis=1), scores, rtol=0, atol=1e-12)
    moved = D.ood_scores(emb + shift, D.ClassCentroids(c.class_ids, centers + shift))
    assert np.allclose(moved, scores, rtol=0, atol=1e-9)


def test_max_softmax():
    assert D.max_softmax_score(np.zeros(4)) == pytest.approx(0.25, abs=1e-15)
    assert D.max_softmax_score(np.array([0.0, 100.0])) == pytest.approx(1.0, abs=1e-40)
    e = [math.exp(v) for v in (1, 2, 3)]
    assert D.max_softmax_score(np.array([1.0, 2.0, 3.0])) == pytest.approx(e[2] / sum(e), rel=1e-14)
    assert D.max_softmax_score(np.array([1.0, 2.0, 3.0])) == pytest.approx(0.6652, abs=5e-5)
    with pytest.raises(UsageError):
        D.max_softmax_score(np.array([1.0]))


# -- Jacobi / PCA --------------------------------------------------------------------------------


def test_jacobi_matches_numpy_eigh():
    rng = np.random.default_rng(1)
    for d in (1, 2, 5, 16, 64):
        a = rng.normal(size=(d, d))
        a = a + a.T
        w, v = D.jacobi_eigh(a)
        ref = np.linalg.eigh(a)[0][::-1]
        assert np.allclose(w, ref, rtol=0, atol=1e-9 * max(1, np.abs(ref).max()))
        assert np.allclose(v.T @ v, np.eye(d), atol=1e-10)
        assert np.allclose(a @ v, v * w, atol=1e-8 * max(1, np.abs(ref).max()))


def test_jacobi_rejects_non_square():
    with pytest.raises(UsageError):
        D.jacobi_eigh(np.zeros((2, 3)))


def test_pca_on_diagonal_line():
    t = np.linspace(-1, 1, 11)
    x = np.c_[t, t]
    r = D.pca_project(x, k=1)
    assert r.explained_variance_ratio[0] == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(r.components[0], [1 / math.sqrt(2)] * 2, atol=1e-12)
    assert np.allclose(r.projected[:, 0], math.sqrt(2) * t, atol=1e-12)


def test_pca_against_numpy_oracle():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(200, 5)) @ rng.normal(size=(5, 5)) + 3.0
    r = D.pca_project(x, k=3)
    xc = x - x.mean(axis=0)
    w, v = np.linalg.eigh(np.cov(x, rowvar=False))
    w, v = w[::-1], v[:, ::-1]
    for j in range(3):
        sign = np.sign(v[np.argmax(np.abs(v[:, j])), j])
        assert np.allclose(r.components[j], sign * v[:, j], atol=1e-9)
        assert np.allclose(r.projected[:, j], xc @ (sign * v[:, j]), atol=1e-8)
    assert np.allclose(r.explained_variance_ratio, w[:3] / w.sum(), atol=1e-12)


def test_pca_degenerate_rank():
    rng = np.random.default_rng(3)
    x = np.zeros((20, 5))
    x[:, 0] = rng.normal(size=20)
    r = D.pca_project(x, k=3)
    assert r.degenerate.tolist() == [False, True, True]
    assert not r.projected[:, 1:].any()
    assert not r.components[1:].any()
    assert r.explained_variance_ratio.tolist()[1:] == [0.0, 0.0]


def test_pca_rejects_small_inputs():
    with pytest.raises(UsageError):
        D.pca_project(np.zeros((3, 5)), k=3)
    with pytest.raises(UsageError):
        D.pca_project(np.zeros((10, 2)), k=3)


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(4, 40), d=st.integers(3, 8))
def test_pca_invariants(seed, n, d):
    rng = np.random.default_rng(seed)
    x = rng.normal(scale=rng.uniform(0.1, 10), size=(n, d))
    r = D.pca_project(x, k=3)
    assert np.all(np.abs(r.projected.mean(axis=0)) <= 1e-9)
    gram = r.components @ r.components.T
    assert np.allclose(gram - np.diag(np.diag(gram)), 0.0, atol=1e-8)
    assert np.all(np.diff(r.explained_variance_ratio) <= 1e-12)


def test_pca_csv(tmp_path):
    path = tmp_path / "p.csv"
    D.write_pca_csv(path, np.array([[1.0, 2.0, 3.0]]), [7], ["in"])
    lines = path.read_text().splitlines()
    assert lines[0] == "component_1,component_2,component_3,label,origin"
    assert lines[1] == "1.0,2.0,3.0,7,in"
