"""Two-layer convolutional motion predictor with manual backprop and Adam.

Layout: input ``(T_in, H, W)`` binary BEV frames -> 3x3 conv -> ReLU -> 3x3 conv
-> ReLU -> two 1x1 heads.  The motion head emits ``(dx, dy)`` at 0.2 s and at
0.4 s (four channels); the state head emits static/moving logits.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DatasetError, InvalidCacheError, ShapeError, TruncatedFileError, VersionError

MOTION_CHANNELS = 4
STATE_CHANNELS = 2


@dataclass(frozen=True)
class PredictorParams:
    conv1_w: np.ndarray  # (3, 3, T_in, F)
    conv1_b: np.ndarray  # (F,)
    conv2_w: np.ndarray  # (3, 3, F, F)
    conv2_b: np.ndarray  # (F,)
    motion_w: np.ndarray  # (F, 4)
    motion_b: np.ndarray  # (4,)
    state_w: np.ndarray  # (F, 2)
    state_b: np.ndarray  # (2,)

    @property
    def t_in(self) -> int:
        return self.conv1_w.shape[2]

    @property
    def hidden(self) -> int:
        return self.conv1_w.shape[3]

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, f.name) for f in fields(self)]

    @classmethod
    def names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray]) -> "PredictorParams":
        return cls(*[np.asarray(a, dtype=np.float64) for a in arrays])

    def map(self, fn, *others: "PredictorParams") -> "PredictorParams":
        return PredictorParams.from_arrays(
            [fn(a, *(o.arrays()[k] for o in others)) for k, a in enumerate(self.arrays())]
        )

    def zeros_like(self) -> "PredictorParams":
        return self.map(np.zeros_like)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    def with_flat(self, vec: np.ndarray) -> "PredictorParams":
        out, pos = [], 0
        for a in self.arrays():
            out.append(np.asarray(vec[pos : pos + a.size], dtype=np.float64).reshape(a.shape))
            pos += a.size
        return PredictorParams.from_arrays(out)


def init_params(t_in: int = 5, hidden: int = 16, seed: int = 0) -> PredictorParams:
    """He-normal weights (std ``sqrt(2 / fan_in)``), zero biases."""
    rng = np.random.default_rng(seed)

    def he(shape, fan_in):
        return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)

    return PredictorParams(
        conv1_w=he((3, 3, t_in, hidden), 9 * t_in),
        conv1_b=np.zeros(hidden),
        conv2_w=he((3, 3, hidden, hidden), 9 * hidden),
        conv2_b=np.zeros(hidden),
        motion_w=he((hidden, MOTION_CHANNELS), hidden),
        motion_b=np.zeros(MOTION_CHANNELS),
        state_w=he((hidden, STATE_CHANNELS), hidden),
        state_b=np.zeros(STATE_CHANNELS),
    )


def _im2col(x: np.ndarray) -> np.ndarray:
    """(H, W, C) -> (H*W, 9*C) patches of a zero-padded 3x3 neighbourhood."""
    H, W, C = x.shape
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(0, 1))  # (H, W, C, 3, 3)
    return np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(H * W, 9 * C)


def _col2im(cols: np.ndarray, H: int, W: int, C: int) -> np.ndarray:
    patches = cols.reshape(H, W, 3, 3, C)
    out = np.zeros((H + 2, W + 2, C))
    for di in range(3):
        for dj in range(3):
            out[di : di + H, dj : dj + W] += patches[:, :, di, dj]
    return out[1:-1, 1:-1]


@dataclass
class ForwardCache:
    params: PredictorParams
    shape: tuple[int, int]
    cols1: np.ndarray
    z1: np.ndarray
    cols2: np.ndarray
    z2: np.ndarray
    a2: np.ndarray

    def kink_signature(self) -> tuple[np.ndarray, np.ndarray]:
        return self.z1 > 0, self.z2 > 0


@dataclass(frozen=True)
class ForwardOutput:
    motion: np.ndarray  # (H, W, 4): dx, dy @ 0.2 s then dx, dy @ 0.4 s
    state_logits: np.ndarray  # (H, W, 2): static, moving
    cache: ForwardCache

    @property
    def one_step(self) -> np.ndarray:
        return self.motion[..., 0:2]

    @property
    def two_step(self) -> np.ndarray:
        return self.motion[..., 2:4]


def forward(x: np.ndarray, params: PredictorParams) -> ForwardOutput:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != params.t_in:
        raise ShapeError(f"expected input (T_in={params.t_in}, H, W), got {x.shape}")
    T, H, W = x.shape
    F = params.hidden
    cols1 = _im2col(x.transpose(1, 2, 0))
    z1 = cols1 @ params.conv1_w.reshape(9 * T, F) + params.conv1_b
    a1 = np.maximum(z1, 0.0)
    cols2 = _im2col(a1.reshape(H, W, F))
    z2 = cols2 @ params.conv2_w.reshape(9 * F, F) + params.conv2_b
    a2 = np.maximum(z2, 0.0)
    motion = a2 @ params.motion_w + params.motion_b
    state = a2 @ params.state_w + params.state_b
    cache = ForwardCache(params, (H, W), cols1, z1, cols2, z2, a2)
    return ForwardOutput(motion.reshape(H, W, MOTION_CHANNELS), state.reshape(H, W, STATE_CHANNELS), cache)


def backward(
    cache: ForwardCache,
    d_motion: np.ndarray | None,
    d_state: np.ndarray | None,
    params: PredictorParams | None = None,
    want_input_grad: bool = False,
):
    """Gradients of a scalar loss w.r.t. the parameters (and optionally the input).

    ``params``, if given, must be the object the cache was built from.
    """
    if params is not None and params is not cache.params:
        raise InvalidCacheError("cache was produced by different parameters")
    p = cache.params
    H, W = cache.shape
    F, T = p.hidden, p.t_in
    n = H * W
    dm = np.zeros((n, MOTION_CHANNELS)) if d_motion is None else np.asarray(d_motion).reshape(n, MOTION_CHANNELS)
    ds = np.zeros((n, STATE_CHANNELS)) if d_state is None else np.asarray(d_state).reshape(n, STATE_CHANNELS)

    g_motion_w = cache.a2.T @ dm
    g_motion_b = dm.sum(axis=0)
    g_state_w = cache.a2.T @ ds
    g_state_b = ds.sum(axis=0)
    dz2 = (dm @ p.motion_w.T + ds @ p.state_w.T) * (cache.z2 > 0)
    g_conv2_w = (cache.cols2.T @ dz2).reshape(3, 3, F, F)
    g_conv2_b = dz2.sum(axis=0)
    da1 = _col2im(dz2 @ p.conv2_w.reshape(9 * F, F).T, H, W, F).reshape(n, F)
    dz1 = da1 * (cache.z1 > 0)
    g_conv1_w = (cache.cols1.T @ dz1).reshape(3, 3, T, F)
    g_conv1_b = dz1.sum(axis=0)
    grads = PredictorParams(g_conv1_w, g_conv1_b, g_conv2_w, g_conv2_b, g_motion_w, g_motion_b, g_state_w, g_state_b)
    if not want_input_grad:
        return grads
    dx = _col2im(dz1 @ p.conv1_w.reshape(9 * T, F).T, H, W, T).transpose(2, 0, 1)
    return grads, dx


# -- gradient checking ---------------------------------------------------------

# loss_fn(outputs) -> (value, [(d_motion, d_state), ...]) with one entry per input.
LossFn = Callable[[list[ForwardOutput]], tuple[float, list[tuple[np.ndarray, np.ndarray]]]]


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    n_skipped: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.n_checked > 0 and self.max_rel_error < self.tolerance


def _analytic(params: PredictorParams, inputs, loss_fn: LossFn):
    outs = [forward(x, params) for x in inputs]
    value, out_grads = loss_fn(outs)
    total = params.zeros_like()
    for out, (dm, ds) in zip(outs, out_grads):
        total = total.map(np.add, backward(out.cache, dm, ds))
    return value, total, outs


def grad_check(
    params: PredictorParams,
    inputs,
    loss_fn: LossFn,
    step: float = 1e-4,
    tolerance: float = 1e-4,
    n_samples: int = 60,
    seed: int = 0,
    regime: Callable[[list[ForwardOutput]], np.ndarray] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients with central differences on sampled coordinates.

    A coordinate is skipped when the ``±step`` perturbation flips any ReLU, since
    central differences across a kink are meaningless.  ``regime`` extends the
    rule to kinks and switches inside the loss: it maps the outputs to an array
    (for example a supervision mask) and the coordinate is skipped if that
    array changes under the perturbation.
    """
    if isinstance(inputs, np.ndarray) and inputs.ndim == 3:
        inputs = [inputs]
    _, grads, base_outs = _analytic(params, inputs, loss_fn)
    base_sig = [o.cache.kink_signature() for o in base_outs]
    base_regime = None if regime is None else np.asarray(regime(base_outs))
    flat = params.flat()
    gflat = grads.flat()
    rng = np.random.default_rng(seed)
    # Every parameter block gets sampled.
    sizes = [a.size for a in params.arrays()]
    offsets = np.cumsum([0] + sizes[:-1])
    per_block = max(1, n_samples // len(sizes))
    picks = np.concatenate(
        [off + rng.choice(size, size=min(size, per_block), replace=False) for off, size in zip(offsets, sizes)]
    )

    def value_at(vec):
        p = params.with_flat(vec)
        outs = [forward(x, p) for x in inputs]
        sig = [o.cache.kink_signature() for o in outs]
        same = regime is None or np.array_equal(np.asarray(regime(outs)), base_regime)
        return loss_fn(outs)[0], sig, same

    worst, checked, skipped = 0.0, 0, 0
    for k in picks:
        hi, lo = flat.copy(), flat.copy()
        hi[k] += step
        lo[k] -= step
        f_hi, s_hi, r_hi = value_at(hi)
        f_lo, s_lo, r_lo = value_at(lo)
        crossed = any(
            not (np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1]) and np.array_equal(a[0], c[0]) and np.array_equal(a[1], c[1]))
            for a, b, c in zip(base_sig, s_hi, s_lo)
        )
        if crossed or not (r_hi and r_lo):
            skipped += 1
            continue
        numeric = (f_hi - f_lo) / (2 * step)
        analytic = gflat[k]
        denom = max(abs(numeric), abs(analytic), 1e-10)
        worst = max(worst, abs(numeric - analytic) / denom)
        checked += 1
    return GradCheckReport(worst, checked, skipped, tolerance)


# -- optimizer -----------------------------------------------------------------


@dataclass(frozen=True)
class OptimizerState:
    step: int
    m: PredictorParams
    v: PredictorParams
    learning_rate: float = 0.004
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    decay_factor: float = 0.5
    decay_every_epochs: int = 10

    @classmethod
    def create(cls, params: PredictorParams, **kw) -> "OptimizerState":
        return cls(0, params.zeros_like(), params.zeros_like(), **kw)

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.decay_factor ** (epoch // self.decay_every_epochs)


def adam_step(
    params: PredictorParams, grads: PredictorParams, state: OptimizerState, epoch: int = 0
) -> tuple[PredictorParams, OptimizerState]:
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    lr = state.lr_at(epoch)
    m = state.m.map(lambda m_, g: b1 * m_ + (1 - b1) * g, grads)
    v = state.v.map(lambda v_, g: b2 * v_ + (1 - b2) * g * g, grads)
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    new = params.map(lambda p, m_, v_: p - lr * (m_ / c1) / (np.sqrt(v_ / c2) + state.epsilon), m, v)
    return new, replace(state, step=t, m=m, v=v)


# -- checkpoint files ----------------------------------------------------------

CKPT_MAGIC = b"BEVMCKPT"
CKPT_VERSION = (1, 0)
_HEADER = struct.Struct("<8sHHIIII")


def save_checkpoint(path, params: PredictorParams, H: int, W: int) -> None:
    header = _HEADER.pack(CKPT_MAGIC, *CKPT_VERSION, params.t_in, params.hidden, H, W)
    payload = np.concatenate([a.ravel() for a in params.arrays()]).astype("<f4").tobytes()
    Path(path).write_bytes(header + payload)


def load_checkpoint(path) -> tuple[PredictorParams, dict]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise TruncatedFileError(f"checkpoint {path} is shorter than its header")
    magic, major, minor, t_in, hidden, H, W = _HEADER.unpack_from(raw)
    if magic != CKPT_MAGIC:
        raise DatasetError(f"{path} is not a checkpoint file")
    if major != CKPT_VERSION[0]:
        raise VersionError(f"checkpoint version {major}.{minor}, expected {CKPT_VERSION[0]}.x")
    template = init_params(t_in, hidden)
    count = template.size
    body = raw[_HEADER.size :]
    if len(body) != 4 * count:
        raise TruncatedFileError(f"checkpoint {path}: expected {4 * count} payload bytes, got {len(body)}")
    vec = np.frombuffer(body, dtype="<f4").astype(np.float64)
    return template.with_flat(vec), {"version": (major, minor), "t_in": t_in, "hidden": hidden, "H": H, "W": W}
