"""Small random problems shared by the gradient tests."""

import numpy as np

from bevmotion.clustering import bfs_clusters
from bevmotion.losses import LossInputs, LossWeights, total_loss
from bevmotion.model import init_params
from bevmotion.pseudo import MotionField, pseudo_state_labels


def random_problem(seed, H=8, W=8, t_in=5, hidden=4, density=0.5):
    rng = np.random.default_rng(seed)
    params = init_params(t_in, hidden, seed)
    # Continuous inputs keep cell outputs distinct, away from the norm kink at zero.
    x_fwd = rng.uniform(0, 1, (t_in, H, W))
    x_bwd = rng.uniform(0, 1, (t_in, H, W))
    valid = rng.random((H, W)) < density
    valid[0, 0] = valid[0, 1] = True
    one = MotionField(rng.normal(0, 0.6, (H, W, 2)), valid).masked()
    two = MotionField(rng.normal(0, 1.2, (H, W, 2)), valid, 0.4).masked()
    state = pseudo_state_labels(one)
    return params, x_fwd, x_bwd, valid, one, two, state, bfs_clusters(valid)


def total_loss_fn(problem, weights=LossWeights(), msm=True, smoothness="cluster", with_backward=True):
    """``loss_fn`` for grad_check over the forward (and backward) pass outputs."""
    _, _, _, valid, one, two, state, clusters = problem

    def fn(outs):
        fwd = outs[0]
        bwd = outs[1] if with_backward else None
        inp = LossInputs(
            valid=valid,
            pred_motion=fwd.motion,
            state_logits=fwd.state_logits,
            labels_one=one,
            labels_two=two,
            state_labels=state,
            clusters=clusters,
            pred_motion_bwd=None if bwd is None else bwd.motion,
        )
        report, g = total_loss(inp, weights, msm, smoothness)
        grads = [(g.motion, g.state)]
        if with_backward:
            grads.append((g.motion_bwd if g.motion_bwd is not None else np.zeros_like(bwd.motion), None))
        return report.total, grads

    return fn


# Weight vectors isolating each term; sup is always present.
TERM_WEIGHTS = {
    "sup": LossWeights(0.0, 0.0, 0.0, 0.0),
    "cluster": LossWeights(1.0, 0.0, 0.0, 0.0),
    "back": LossWeights(0.0, 1.0, 0.0, 0.0),
    "forward": LossWeights(0.0, 0.0, 1.0, 0.0),
    "state": LossWeights(0.0, 0.0, 0.0, 1.0),
    "total": LossWeights(),
}


def loss_regime(problem, msm=True, beta=1.0):
    """Supervision mask plus smooth-L1 branch of every residual the loss sees."""
    from bevmotion.losses import moving_mask

    _, _, _, valid, one, two, _, _ = problem

    def fn(outs):
        m = outs[0].motion
        parts = [moving_mask(outs[0].state_logits, valid) if msm else valid]
        residuals = [m[..., 0:2] - one.disp, m[..., 2:4] - two.disp, m[..., 2:4] - 2 * m[..., 0:2]]
        if len(outs) > 1:
            residuals.append(m[..., 0:2] + outs[1].motion[..., 0:2])
        parts += [np.abs(r) < beta for r in residuals]
        return np.concatenate([p.reshape(-1) for p in parts])

    return fn
