import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from bevmotion.clustering import bfs_clusters
from bevmotion.errors import ShapeError
from bevmotion.losses import (
    LossInputs,
    LossWeights,
    backward_consistency,
    cluster_consistency,
    forward_consistency,
    knn_consistency,
    moving_mask,
    smooth_l1,
    state_cross_entropy,
    total_loss,
)
from bevmotion.pseudo import MOVING, STATIC, MotionField, StateMap


def field(disp, valid=None):
    disp = np.asarray(disp, dtype=float)
    if valid is None:
        valid = np.ones(disp.shape[:2], dtype=bool)
    return MotionField(disp, valid)


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        hi, lo = x.copy(), x.copy()
        hi[idx] += h
        lo[idx] -= h
        g[idx] = (f(hi) - f(lo)) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)


# -- smooth-L1 -----------------------------------------------------------------


def test_smooth_l1_examples():
    z = np.zeros((1, 1, 2))
    assert smooth_l1(z, z)[0] == 0.0
    assert smooth_l1(np.array([[[0.5, 0.0]]]), z)[0] == pytest.approx(0.125)
    assert smooth_l1(np.array([[[2.0, 0.0]]]), z)[0] == pytest.approx(1.5)


def test_smooth_l1_empty_mask():
    value, grad = smooth_l1(np.ones((2, 2, 2)), np.zeros((2, 2, 2)), np.zeros((2, 2), bool))
    assert value == 0.0 and not grad.any()


def test_smooth_l1_gradient(rng):
    p, t = rng.normal(0, 1.5, (4, 4, 2)), rng.normal(0, 1.5, (4, 4, 2))
    g = smooth_l1(p, t)[1]
    assert rel_err(g, numeric_grad(lambda x: smooth_l1(x, t)[0], p)) < 1e-6


# -- cluster / KNN -------------------------------------------------------------


def cluster_oracle(M, clusters):
    n = clusters.sizes().sum()
    total = 0.0
    for cells in clusters.members:
        for a in cells:
            total += sum(np.linalg.norm(M[tuple(a)] - M[tuple(b)]) for b in cells) / len(cells)
    return total / n if n else 0.0


def test_cluster_examples():
    valid = np.array([[True, True]])
    cl = bfs_clusters(valid)
    assert cluster_consistency(np.array([[[1.0, 0.0], [0.0, 0.0]]]), cl)[0] == pytest.approx(0.5)
    assert cluster_consistency(np.ones((1, 2, 2)), cl)[0] == 0.0
    singles = bfs_clusters(np.eye(4, dtype=bool), connectivity=4)
    assert cluster_consistency(np.random.default_rng(0).normal(size=(4, 4, 2)), singles)[0] == 0.0


def test_knn_examples():
    two = np.array([[[1.0, 0.0], [0.0, 0.0]]])
    assert knn_consistency(two, k=1)[0] == pytest.approx(1.0)
    assert knn_consistency(np.full((3, 3, 2), 0.7), k=4)[0] == 0.0
    # fewer than k+1 cells falls back to all other cells
    assert knn_consistency(two, k=5)[0] == pytest.approx(1.0)


def test_line_instance_cluster_sees_far_side_disagreement():
    valid = np.zeros((3, 22), dtype=bool)
    valid[1, 1:21] = True
    M = np.zeros((3, 22, 2))
    M[1, 1:11, 0] = 1.0  # the two halves of one object disagree
    M[1, 11:21, 0] = -1.0
    c = cluster_consistency(M, bfs_clusters(valid))[0]
    k = knn_consistency(M, 2, valid)[0]
    assert c == pytest.approx(1.0)  # half of every cell's mates differ by 2
    assert k == pytest.approx(0.1)  # only the two cells at the seam see a difference
    assert c > k


@given(arrays(np.bool_, (5, 6)), st.integers(0, 10_000))
def test_cluster_matches_oracle_and_is_nonnegative(valid, seed):
    M = np.random.default_rng(seed).normal(size=(5, 6, 2))
    cl = bfs_clusters(valid)
    value, grad = cluster_consistency(M, cl)
    assert value >= 0
    assert value == pytest.approx(cluster_oracle(M, cl), abs=1e-12)
    assert not grad[~valid].any()


@given(arrays(np.bool_, (5, 6)), st.integers(0, 10_000))
def test_cluster_invariant_to_relabeling(valid, seed):
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(5, 6, 2))
    cl = bfs_clusters(valid)
    perm = rng.permutation(cl.n_clusters)
    shuffled = type(cl)(cl.cluster_id, [cl.members[i] for i in perm])
    assert cluster_consistency(M, shuffled)[0] == pytest.approx(cluster_consistency(M, cl)[0], abs=1e-12)


def test_cluster_invariant_to_padding_with_empty_cells(rng):
    valid = rng.random((5, 5)) < 0.5
    M = rng.normal(size=(5, 5, 2))
    big_valid = np.zeros((9, 9), bool)
    big_valid[2:7, 2:7] = valid
    big_M = rng.normal(size=(9, 9, 2))  # junk in the empty cells must not matter
    big_M[2:7, 2:7] = M
    assert cluster_consistency(big_M, bfs_clusters(big_valid))[0] == pytest.approx(
        cluster_consistency(M, bfs_clusters(valid))[0], abs=1e-12
    )


def test_cluster_and_knn_gradients(rng):
    valid = rng.random((5, 5)) < 0.6
    M = rng.normal(size=(5, 5, 2))
    cl = bfs_clusters(valid)
    assert rel_err(cluster_consistency(M, cl)[1], numeric_grad(lambda x: cluster_consistency(x, cl)[0], M)) < 1e-6
    assert rel_err(knn_consistency(M, 3, valid)[1], numeric_grad(lambda x: knn_consistency(x, 3, valid)[0], M)) < 1e-6


# -- backward / forward consistency -----------------------------------------


def test_backward_examples():
    f = field([[[0.3, -1.2]]])
    assert backward_consistency(f, field(-f.disp))[0] == 0.0
    v, gf, gb = backward_consistency(field([[[1.0, 0.0]]]), field([[[0.0, 0.0]]]))
    assert v == pytest.approx(0.5)
    assert np.array_equal(gf, gb)


def test_backward_mask_mismatch():
    with pytest.raises(ShapeError):
        backward_consistency(field(np.zeros((1, 2, 2))), field(np.zeros((1, 2, 2)), np.array([[True, False]])))


def test_forward_examples(rng):
    m1 = rng.normal(size=(3, 3, 2))
    assert forward_consistency(field(m1), field(2 * m1))[0] == 0.0
    assert forward_consistency(field([[[0.1, 0.0]]]), field([[[0.1, 0.0]]]))[0] == pytest.approx(0.005)


def test_consistency_gradients(rng):
    a, b = rng.normal(size=(4, 4, 2)), rng.normal(size=(4, 4, 2))
    _, g1, g2 = forward_consistency(field(a), field(b))
    assert rel_err(g1, numeric_grad(lambda x: forward_consistency(field(x), field(b))[0], a)) < 1e-6
    assert rel_err(g2, numeric_grad(lambda x: forward_consistency(field(a), field(x))[0], b)) < 1e-6
    _, gf, _ = backward_consistency(field(a), field(b))
    assert rel_err(gf, numeric_grad(lambda x: backward_consistency(field(x), field(b))[0], a)) < 1e-6


# -- state head ---------------------------------------------------------------


def test_cross_entropy_examples(rng):
    static = StateMap(np.full((2, 2), STATIC, np.int8))
    logits = np.zeros((2, 2, 2))
    logits[..., 0], logits[..., 1] = 10, -10
    assert state_cross_entropy(logits, static)[0] == pytest.approx(0.0, abs=1e-8)
    assert state_cross_entropy(np.zeros((2, 2, 2)), static)[0] == pytest.approx(math.log(2))
    z = rng.normal(size=(3, 3, 2))
    labels = StateMap(rng.integers(0, 2, (3, 3)).astype(np.int8))
    _, g = state_cross_entropy(z, labels)
    p = np.exp(z) / np.exp(z).sum(-1, keepdims=True)
    assert np.allclose(g, (p - np.eye(2)[labels.labels]) / 9)
    assert rel_err(g, numeric_grad(lambda x: state_cross_entropy(x, labels)[0], z)) < 1e-6


def test_moving_mask():
    logits = np.array([[[1.0, 0.0], [0.0, 1.0]], [[0.0, 2.0], [3.0, -1.0]]])
    assert np.array_equal(moving_mask(logits), [[False, True], [True, False]])
    assert np.array_equal(moving_mask(logits, np.array([[True, False], [True, True]])), [[False, False], [True, False]])


# -- total loss -----------------------------------------------------------------


def make_inputs(rng, H=6, W=6, state_bias=0.0):
    valid = rng.random((H, W)) < 0.6
    one = field(rng.normal(size=(H, W, 2)), valid).masked()
    two = field(rng.normal(size=(H, W, 2)), valid).masked()
    logits = rng.normal(size=(H, W, 2))
    logits[..., MOVING] += state_bias
    labels = StateMap(np.where(valid, rng.integers(0, 2, (H, W)), -1).astype(np.int8))
    return LossInputs(
        valid=valid,
        pred_motion=rng.normal(size=(H, W, 4)),
        state_logits=logits,
        labels_one=one,
        labels_two=two,
        state_labels=labels,
        clusters=bfs_clusters(valid),
        pred_motion_bwd=rng.normal(size=(H, W, 4)),
    )


def test_default_weights():
    w = LossWeights()
    assert (w.alpha, w.beta, w.gamma, w.sigma) == (0.05, 1.0, 0.1, 0.2)


def test_perfect_prediction_sup_only_is_zero(rng):
    inp = make_inputs(rng)
    inp.pred_motion = np.concatenate([inp.labels_one.disp, inp.labels_two.disp], axis=-1)
    report, _ = total_loss(inp, LossWeights(0, 0, 0, 0), msm_enabled=False)
    assert report.total == 0.0


@given(st.integers(0, 10_000), st.booleans(), st.sampled_from(["cluster", "knn"]))
def test_report_recomposes(seed, msm, smoothness):
    rng = np.random.default_rng(seed)
    w = LossWeights(*rng.uniform(0, 2, 4))
    report, _ = total_loss(make_inputs(rng), w, msm, smoothness)
    assert abs(report.total - report.recompose()) < 1e-9
    assert min(report.sup, report.cluster, report.back, report.forward, report.state) >= 0


def test_msm_with_all_static_logits_zeroes_sup(rng):
    inp = make_inputs(rng, state_bias=-100.0)
    report, grads = total_loss(inp, LossWeights(0, 0, 0, 0), msm_enabled=True)
    assert report.sup == 0.0 and report.masked_cells == 0
    assert not grads.motion.any()


def test_msm_changes_sup_only_through_mask(rng):
    inp = make_inputs(rng)
    mask = moving_mask(inp.state_logits, inp.valid)
    report, _ = total_loss(inp, LossWeights(0, 0, 0, 0), msm_enabled=True)
    s1 = smooth_l1(inp.pred_motion[..., :2], inp.labels_one.disp, mask)[0]
    s2 = smooth_l1(inp.pred_motion[..., 2:], inp.labels_two.disp, mask)[0]
    assert report.sup == pytest.approx(s1 + s2, abs=1e-12)


def test_switchboard_zero_weight_equals_omission(rng):
    inp = make_inputs(rng)
    off = LossWeights(alpha=0.0, beta=0.0, gamma=0.1, sigma=0.2)
    with_terms, g_with = total_loss(inp, off)
    inp.clusters = None
    inp.pred_motion_bwd = None
    without, g_without = total_loss(inp, off)
    assert with_terms.total == without.total
    assert np.array_equal(g_with.motion, g_without.motion)
    assert g_with.motion_bwd is None


def test_total_gradient_matches_finite_differences(rng):
    inp = make_inputs(rng, H=4, W=4)
    w = LossWeights()
    _, g = total_loss(inp, w)

    def value(m):
        inp2 = LossInputs(**{**inp.__dict__, "pred_motion": m})
        return total_loss(inp2, w)[0].total

    assert rel_err(g.motion, numeric_grad(value, inp.pred_motion)) < 1e-6
