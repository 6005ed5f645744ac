import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from metric_ood.errors import PairingWarning, UsageError
from metric_ood.losses import (PairBatch, PairSchedule, batch_metric_loss, build_pairs,
                               contrastive_pair_loss, cross_entropy_loss, odm_pair_loss)


def fd_pair(fn, e1, e2, h=1e-5):
    """Central-difference gradients of a pair loss wrt both embeddings."""
    g1, g2 = np.zeros_like(e1), np.zeros_like(e2)
    for k in range(len(e1)):
        d = np.zeros_like(e1)
        d[k] = h
        g1[k] = (fn(e1 + d, e2) - fn(e1 - d, e2)) / (2 * h)
        g2[k] = (fn(e1, e2 + d) - fn(e1, e2 - d)) / (2 * h)
    return g1, g2


# -- pair losses -------------------------------------------------------------------------


def test_same_class_coincident_pair_is_zero():
    loss, g1, g2 = contrastive_pair_loss(np.ones(3), np.ones(3), 0, 10.0)
    assert loss == 0.0 and not g1.any() and not g2.any()


def test_hinge_inactive_beyond_margin():
    for d in (10.0, 10.5, 30.0):
        loss, g1, g2 = contrastive_pair_loss(np.zeros(2), np.array([d, 0.0]), 1, 10.0)
        assert loss == 0.0 and not g1.any() and not g2.any()


def test_different_class_hand_value():
    e1, e2 = np.array([0.0, 0.0]), np.array([4.0, 0.0])
    loss, g1, g2 = contrastive_pair_loss(e1, e2, 1, 10.0)
    assert loss == 18.0
    # dL/de1 = -(m - D) (e1 - e2) / D = -(6)(-4, 0)/4
    assert g1.tolist() == [6.0, 0.0]
    assert g2.tolist() == [-6.0, 0.0]
    f1, f2 = fd_pair(lambda a, b: contrastive_pair_loss(a, b, 1, 10.0)[0], e1, e2)
    assert np.allclose(f1, g1, atol=1e-6) and np.allclose(f2, g2, atol=1e-6)


def test_zero_distance_different_class_gradient_is_zero():
    loss, g1, g2 = contrastive_pair_loss(np.ones(2), np.ones(2), 1, 3.0)
    assert loss == 4.5
    assert not g1.any() and not g2.any()


def test_odm_gating():
    rng = np.random.default_rng(0)
    e1, e2 = rng.normal(size=4), rng.normal(size=4)
    for y in (0, 1):
        loss, g1, g2 = odm_pair_loss(e1, e2, y, 0, 10.0)
        assert loss == 0.0 and not g1.any() and not g2.any()
        a = odm_pair_loss(e1, e2, y, 1, 10.0)
        b = contrastive_pair_loss(e1, e2, y, 10.0)
        assert a[0] == b[0]
        assert a[1].tobytes() == b[1].tobytes() and a[2].tobytes() == b[2].tobytes()


def test_odm_in_out_pair_at_half_margin():
    loss, _, _ = odm_pair_loss(np.zeros(3), np.array([0.0, 5.0, 0.0]), 1, 1, 10.0)
    assert loss == 0.5 * 5.0 ** 2


def test_pair_loss_argument_errors():
    with pytest.raises(UsageError):
        contrastive_pair_loss(np.zeros(2), np.zeros(3), 0)
    with pytest.raises(UsageError):
        contrastive_pair_loss(np.zeros(2), np.zeros(2), 0, margin=0)
    with pytest.raises(UsageError):
        odm_pair_loss(np.zeros(2), np.zeros(2), 0, 2)


vec = st.lists(st.floats(-20, 20), min_size=3, max_size=3).map(np.array)
# coordinates on a 1/8 grid: a component difference is 0 or >= 1/8, so finite
# differences never have to resolve a tiny gradient beside a large loss
grid_vec = st.lists(st.integers(-160, 160), min_size=3, max_size=3).map(lambda v: np.array(v) / 8.0)


@given(e1=vec, e2=vec, y=st.integers(0, 1), m=st.floats(0.5, 20))
def test_pair_loss_symmetry(e1, e2, y, m):
    l1, a1, b1 = contrastive_pair_loss(e1, e2, y, m)
    l2, a2, b2 = contrastive_pair_loss(e2, e1, y, m)
    assert l1 == pytest.approx(l2, rel=1e-12, abs=1e-300)
    assert np.allclose(a1, b2, rtol=1e-12, atol=0) and np.allclose(b1, a2, rtol=1e-12, atol=0)


@given(d1=st.floats(0, 30), d2=st.floats(0, 30), m=st.floats(0.5, 20))
def test_hinge_monotone_in_distance(d1, d2, m):
    lo, hi = sorted((d1, d2))
    l_lo = contrastive_pair_loss(np.zeros(1), np.array([lo]), 1, m)[0]
    l_hi = contrastive_pair_loss(np.zeros(1), np.array([hi]), 1, m)[0]
    assert l_hi <= l_lo
    if lo >= m:
        assert l_lo == 0.0


@given(e1=grid_vec, e2=grid_vec, y=st.integers(0, 1), m=st.floats(0.5, 20), z=st.integers(0, 1))
def test_pair_gradients_match_finite_differences(e1, e2, y, m, z):
    d = np.linalg.norm(e1 - e2)
    if abs(d - m) <= 1e-3 or d < 1e-3:
        return
    fn = lambda a, b: odm_pair_loss(a, b, y, z, m)[0]
    _, g1, g2 = odm_pair_loss(e1, e2, y, z, m)
    f1, f2 = fd_pair(fn, e1, e2)
    for a, f in ((g1, f1), (g2, f2)):
        assert np.all(np.abs(a - f) / (np.abs(a) + np.abs(f) + 1e-8) <= 1e-4)


# -- pair building ---------------------------------------------------------------------------


def test_in_only_batch_mixes_same_and_different():
    labels = np.array([2, 2, 6, 6, 7, 7, 2, 6])
    pb = build_pairs(labels, ["in"] * 8, PairSchedule(), np.random.default_rng(0), step=2)
    assert len(pb) == 8
    assert set(pb.y.tolist()) == {0, 1}
    assert np.all(pb.z == 1)
    pb.check(labels, np.ones(8, dtype=bool))


def test_two_out_samples_give_empty_batch():
    with pytest.warns(PairingWarning):
        pb = build_pairs(np.array([-1, -1]), ["out", "out"], PairSchedule(), np.random.default_rng(0), step=2)
    assert len(pb) == 0


def test_schedule_phases():
    labels = np.array([2] * 4 + [6] * 4 + [7] * 4 + [-1] * 4)
    origin = np.array([True] * 12 + [False] * 4)
    sched = PairSchedule(cross_ratio=0.25, period=2)
    odd = build_pairs(labels, origin, sched, np.random.default_rng(1), step=1)
    even = build_pairs(labels, origin, sched, np.random.default_rng(1), step=2)
    assert odd.n_cross(origin) == 0 and len(odd) == 16
    assert even.n_cross(origin) == 4 and len(even) == 16
    # 12 in/in pairs split evenly between same and different class
    assert int(np.sum(even.y == 0)) == 6
    cross = even.pairs[even.y == 1]
    cross = cross[~origin[cross[:, 1]]]
    assert np.all(origin[cross[:, 0]])


def test_shortfall_is_refilled_from_other_pools():
    labels = np.array([0, 1, 2, 3])  # no same-class candidates
    pb = build_pairs(labels, ["in"] * 4, PairSchedule(), np.random.default_rng(0))
    assert len(pb) == 4 and np.all(pb.y == 1)
    assert len({tuple(p) for p in pb.pairs.tolist()}) == 4


def test_pairs_drawn_without_replacement():
    labels = np.repeat([2, 6, 7], 10)
    pb = build_pairs(labels, ["in"] * 30, PairSchedule(), np.random.default_rng(5))
    assert len({tuple(p) for p in pb.pairs.tolist()}) == len(pb)


def test_eight_in_eight_out_never_out_out():
    labels = np.array([2, 6, 7, 2, 6, 7, 2, 6] + [-1] * 8)
    origin = np.array(["in"] * 8 + ["out"] * 8)
    is_in = origin == "in"
    sched = PairSchedule()
    total = 0
    for seed in range(10_000):
        pb = build_pairs(labels, origin, sched, np.random.default_rng(seed), step=2)
        total += pb.n_out_out(is_in)
    assert total == 0


@given(n_in=st.integers(0, 20), n_out=st.integers(0, 20), n_classes=st.integers(1, 4),
       step=st.integers(1, 4), ratio=st.floats(0, 1), seed=st.integers(0, 2**32 - 1))
def test_pair_invariants_property(n_in, n_out, n_classes, step, ratio, seed):
    rng = np.random.default_rng(seed)
    labels = np.concatenate([rng.integers(0, n_classes, n_in), np.full(n_out, -1)])
    is_in = np.r_[np.ones(n_in, bool), np.zeros(n_out, bool)]
    perm = rng.permutation(len(labels))
    labels, is_in = labels[perm], is_in[perm]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", PairingWarning)
        pb = build_pairs(labels, is_in, PairSchedule(cross_ratio=ratio), rng, step=step)
    pb.check(labels, is_in)
    assert pb.n_out_out(is_in) == 0


# -- batch loss ---------------------------------------------------------------------------------


def test_batch_loss_all_zero():
    emb = np.array([[0.0, 0.0], [0.0, 0.0], [20.0, 0.0]])
    pb = PairBatch(np.array([[0, 1], [0, 2]]), np.array([0, 1]), np.array([1, 1]))
    out = batch_metric_loss(emb, pb, 10.0)
    assert out.value == 0.0 and not out.embedding_gradients.any()


def test_batch_loss_single_pair_equals_pair_loss():
    rng = np.random.default_rng(3)
    emb = rng.normal(size=(4, 3))
    pb = PairBatch(np.array([[1, 3]]), np.array([1]), np.array([1]))
    out = batch_metric_loss(emb, pb, 10.0)
    loss, g1, g2 = contrastive_pair_loss(emb[1], emb[3], 1, 10.0)
    assert out.value == loss
    assert np.array_equal(out.embedding_gradients[1], g1)
    assert np.array_equal(out.embedding_gradients[3], g2)
    assert not out.embedding_gradients[[0, 2]].any()


def test_batch_loss_mean_of_two_pairs():
    emb = np.array([[0.0, 0.0], [4.0, 0.0], [0.0, 2.0]])
    # (0,1): y=1, D=4 -> 18; (0,2): y=0, D=2 -> 2
    pb = PairBatch(np.array([[0, 1], [0, 2]]), np.array([1, 0]), np.array([1, 1]))
    out = batch_metric_loss(emb, pb, 10.0)
    assert out.value == 10.0
    assert out.embedding_gradients[0].tolist() == [3.0, -1.0]


def test_batch_loss_empty_warns():
    with pytest.warns(PairingWarning):
        out = batch_metric_loss(np.ones((3, 2)), PairBatch.empty(), 10.0)
    assert out.value == 0.0 and not out.embedding_gradients.any()


def test_batch_gradient_matches_finite_differences():
    rng = np.random.default_rng(8)
    for _ in range(20):
        emb = rng.normal(scale=4, size=(10, 3))
        labels = rng.integers(0, 3, 10)
        is_in = rng.random(10) < 0.7
        is_in[:2] = True
        labels[~is_in] = -1
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", PairingWarning)
            pb = build_pairs(labels, is_in, PairSchedule(period=1), rng)
        d = np.linalg.norm(emb[pb.pairs[:, 0]] - emb[pb.pairs[:, 1]], axis=1)
        if np.any(np.abs(d - 10.0) <= 1e-3):
            continue
        out = batch_metric_loss(emb, pb, 10.0, kind="odm")
        fd = np.zeros_like(emb)
        for i in range(10):
            for k in range(3):
                e = emb.copy()
                e[i, k] += 1e-6
                plus = batch_metric_loss(e, pb, 10.0, kind="odm").value
                e[i, k] -= 2e-6
                minus = batch_metric_loss(e, pb, 10.0, kind="odm").value
                fd[i, k] = (plus - minus) / 2e-6
        g = out.embedding_gradients
        assert np.all(np.abs(g - fd) / (np.abs(g) + np.abs(fd) + 1e-8) <= 1e-4)


def test_odm_batch_equals_contrastive_bitwise():
    rng = np.random.default_rng(4)
    emb = rng.normal(scale=5, size=(16, 5))
    labels = np.r_[rng.integers(0, 3, 12), [-1] * 4]
    is_in = np.r_[np.ones(12, bool), np.zeros(4, bool)]
    pb = build_pairs(labels, is_in, PairSchedule(), rng, step=2)
    a = batch_metric_loss(emb, pb, 10.0, kind="odm")
    b = batch_metric_loss(emb, pb, 10.0, kind="contrastive")
    assert a.value == b.value
    assert a.embedding_gradients.tobytes() == b.embedding_gradients.tobytes()


# -- cross-entropy --------------------------------------------------------------------------------


def test_cross_entropy_uniform():
    loss, grad = cross_entropy_loss(np.zeros((4, 3)), np.array([0, 1, 2, 0]))
    assert loss == pytest.approx(math.log(3), abs=1e-15)


def test_cross_entropy_saturated():
    loss, _ = cross_entropy_loss(np.array([[1000.0, 0.0, 0.0]]), np.array([0]))
    assert loss == pytest.approx(0.0, abs=1e-300)
    loss, _ = cross_entropy_loss(np.array([[-1000.0, 0.0]]), np.array([0]))
    assert loss == pytest.approx(1000.0)


def test_cross_entropy_hand_value():
    loss, _ = cross_entropy_loss(np.array([[1.0, 2.0, 3.0]]), np.array([2]))
    expected = -math.log(math.exp(3) / (math.exp(1) + math.exp(2) + math.exp(3)))
    assert loss == pytest.approx(expected, rel=1e-14)
    assert loss == pytest.approx(0.4076, abs=5e-5)


def test_cross_entropy_gradient():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(6, 4))
    labels = rng.integers(0, 4, 6)
    _, grad = cross_entropy_loss(logits, labels)
    assert np.all(np.abs(grad.sum(axis=1)) <= 1e-12)
    fd = np.zeros_like(logits)
    for idx in np.ndindex(*logits.shape):
        l = logits.copy()
        l[idx] += 1e-6
        plus = cross_entropy_loss(l, labels)[0]
        l[idx] -= 2e-6
        fd[idx] = (plus - cross_entropy_loss(l, labels)[0]) / 2e-6
    assert np.all(np.abs(grad - fd) / (np.abs(grad) + np.abs(fd) + 1e-8) <= 1e-4)


def test_cross_entropy_label_range():
    with pytest.raises(UsageError):
        cross_entropy_loss(np.zeros((2, 3)), np.array([0, 3]))
