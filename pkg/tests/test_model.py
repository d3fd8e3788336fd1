import numpy as np
import pytest
from hypothesis import given, strategies as st

from bevmotion.errors import InvalidCacheError, ShapeError, TruncatedFileError, VersionError
from bevmotion.losses import LossWeights
from bevmotion.model import (
    OptimizerState,
    adam_step,
    backward,
    forward,
    grad_check,
    init_params,
    load_checkpoint,
    save_checkpoint,
)

from helpers import TERM_WEIGHTS, loss_regime, random_problem, total_loss_fn


def test_zero_params_give_zero_outputs():
    p = init_params(5, 4).zeros_like()
    out = forward(np.ones((5, 6, 7)), p)
    assert out.motion.shape == (6, 7, 4) and out.state_logits.shape == (6, 7, 2)
    assert not out.motion.any() and not out.state_logits.any()


def test_zero_input_output_is_spatially_constant():
    p = init_params(5, 4, seed=3)
    p = p.map(lambda a: a + 0.1)  # positive biases keep ReLUs active
    out = forward(np.zeros((5, 7, 7)), p)
    # the second layer zero-pads non-zero activations, so only the interior is flat
    inner_m, inner_s = out.motion[1:-1, 1:-1], out.state_logits[1:-1, 1:-1]
    assert np.allclose(inner_m, inner_m[0, 0]) and np.allclose(inner_s, inner_s[0, 0])
    b = type(p)(*[np.zeros_like(a) if i % 2 == 0 else a for i, a in enumerate(p.arrays())])
    flat = forward(np.zeros((5, 7, 7)), b)  # biases alone, no weights
    assert np.allclose(flat.motion, b.motion_b) and np.allclose(flat.state_logits, b.state_b)


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        forward(np.zeros((4, 6, 6)), init_params(5, 4))


def test_translation_equivariance(rng):
    p = init_params(5, 8, seed=1)
    x = (rng.random((5, 16, 16)) < 0.3).astype(float)
    shifted = np.roll(x, 1, axis=2)
    shifted[:, :, 0] = 0
    a, b = forward(x, p), forward(shifted, p)
    # two 3x3 layers: outputs 2 cells from the border only see interior input
    assert np.allclose(a.motion[2:-2, 2:-3], b.motion[2:-2, 3:-2])
    assert np.allclose(a.state_logits[2:-2, 2:-3], b.state_logits[2:-2, 3:-2])


def test_forward_does_not_mutate_params(rng):
    p = init_params(5, 4)
    before = p.flat().copy()
    forward(rng.random((5, 8, 8)), p)
    assert np.array_equal(before, p.flat())


def test_zero_output_gradient_gives_zero_grads(rng):
    p = init_params(5, 4)
    out = forward(rng.random((5, 8, 8)), p)
    g = backward(out.cache, None, None)
    assert not g.flat().any()


def test_single_pixel_gradient_is_confined_to_receptive_field(rng):
    p = init_params(5, 6, seed=2).map(lambda a: a + 0.05)
    out = forward(rng.random((5, 12, 12)), p)
    dm = np.zeros((12, 12, 4))
    dm[6, 5, 1] = 1.0
    g, dx = backward(out.cache, dm, None, want_input_grad=True)
    rows, cols = np.nonzero(np.abs(dx).sum(axis=0))
    assert rows.size > 0
    assert rows.min() >= 4 and rows.max() <= 8 and cols.min() >= 3 and cols.max() <= 7
    # only the touched channel of the motion head gets a weight gradient
    assert not np.delete(g.motion_w, 1, axis=1).any() and g.motion_w[:, 1].any()
    assert not g.state_w.any()


def test_stale_cache_rejected(rng):
    p = init_params(5, 4)
    out = forward(rng.random((5, 8, 8)), p)
    other = p.map(lambda a: a + 1.0)
    with pytest.raises(InvalidCacheError):
        backward(out.cache, np.ones((8, 8, 4)), None, other)


def test_linear_loss_grad_check(rng):
    p = init_params(5, 4, seed=5)
    x = rng.random((5, 8, 8))

    def loss(outs):
        o = outs[0]
        return o.motion.sum() + o.state_logits.sum(), [(np.ones_like(o.motion), np.ones_like(o.state_logits))]

    r = grad_check(p, x, loss, n_samples=80)
    assert r.n_checked > 0
    assert r.max_rel_error < 1e-8


def test_grad_check_flags_a_wrong_gradient(rng):
    p = init_params(5, 4, seed=5)
    x = rng.random((5, 8, 8))

    def loss(outs):
        o = outs[0]
        return o.motion.sum(), [(2 * np.ones_like(o.motion), None)]

    assert not grad_check(p, x, loss).passed


@pytest.mark.parametrize("seed", [0, 1])
@pytest.mark.parametrize("term", sorted(TERM_WEIGHTS))
def test_loss_term_gradients(seed, term):
    pb = random_problem(seed)
    r = grad_check(pb[0], [pb[1], pb[2]], total_loss_fn(pb, TERM_WEIGHTS[term], msm=True),
                   n_samples=64, seed=seed, regime=loss_regime(pb))
    assert r.n_checked >= 32
    assert r.passed, r


def test_knn_smoothness_gradient():
    pb = random_problem(7)
    fn = total_loss_fn(pb, LossWeights(1.0, 0.0, 0.0, 0.0), msm=False, smoothness="knn", with_backward=False)
    r = grad_check(pb[0], [pb[1]], fn, n_samples=64, regime=loss_regime(pb, msm=False))
    assert r.passed, r


def test_adam_zero_gradient_keeps_params():
    p = init_params(5, 4)
    state = OptimizerState.create(p)
    new, state = adam_step(p, p.zeros_like(), state)
    assert np.array_equal(new.flat(), p.flat())
    assert state.step == 1


def test_adam_first_step_magnitude_is_lr():
    p = init_params(5, 4)
    g = p.map(lambda a: np.full_like(a, 0.37))
    new, _ = adam_step(p, g, OptimizerState.create(p))
    assert np.allclose(p.flat() - new.flat(), 0.004, rtol=1e-6)


def test_learning_rate_schedule():
    s = OptimizerState.create(init_params(5, 4))
    assert s.lr_at(0) == 0.004 and s.lr_at(9) == 0.004
    assert s.lr_at(10) == 0.002 and s.lr_at(20) == 0.001


def test_adam_is_deterministic(rng):
    p = init_params(5, 4)
    g = p.map(lambda a: rng.normal(size=a.shape))
    a = adam_step(*adam_step(p, g, OptimizerState.create(p))[:1], g, OptimizerState.create(p))
    b = adam_step(*adam_step(p, g, OptimizerState.create(p))[:1], g, OptimizerState.create(p))
    assert np.array_equal(a[0].flat(), b[0].flat())


@given(t_in=st.integers(1, 6), hidden=st.integers(1, 5), seed=st.integers(0, 100))
def test_checkpoint_round_trip(t_in, hidden, seed, tmp_path_factory):
    path = tmp_path_factory.mktemp("ck") / "m.bin"
    p = init_params(t_in, hidden, seed)
    save_checkpoint(path, p, 9, 11)
    q, header = load_checkpoint(path)
    assert header == {"version": (1, 0), "t_in": t_in, "hidden": hidden, "H": 9, "W": 11}
    assert np.array_equal(q.flat(), p.flat().astype(np.float32).astype(np.float64))


def test_checkpoint_truncated_and_version(tmp_path):
    path = tmp_path / "m.bin"
    save_checkpoint(path, init_params(5, 4), 8, 8)
    raw = path.read_bytes()
    path.write_bytes(raw[:-4])
    with pytest.raises(TruncatedFileError):
        load_checkpoint(path)
    path.write_bytes(raw[:8] + (9).to_bytes(2, "little") + raw[10:])
    with pytest.raises(VersionError):
        load_checkpoint(path)
