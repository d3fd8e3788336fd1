"""Sample construction, the self-supervised training loop and model evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .clustering import ClusterMap, bfs_clusters
from .errors import EmptyDatasetError, EmptyInputError
from .evaluation import EvalReport, cell_errors, divergence_values, group_means, interpolate_to_1s
from .geometry import GridSpec, PillarSet, bev_occupancy, sync_to_frame
from .ground import GroundParams, remove_ground
from .losses import LossInputs, LossReport, LossWeights, total_loss
from .model import OptimizerState, PredictorParams, adam_step, backward, forward
from .pseudo import MotionField, StateMap, generate_pseudo_motion, generate_two_step, pseudo_state_labels
from .synth import LabeledSequence
from .transport import TransportConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    learning_rate: float = 0.004
    decay_factor: float = 0.5
    decay_every_epochs: int = 10
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    msm_enabled: bool = True
    msm_warmup_epochs: int = 2
    two_step_enabled: bool = True
    backward_enabled: bool = True
    smoothness: str = "cluster"  # or "knn"
    knn_k: int = 8
    hidden: int = 16
    t_in: int = 5
    connectivity: int = 8
    state_threshold_mps: float = 0.2
    prewarp: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.smoothness not in ("cluster", "knn"):
            raise ValueError("smoothness must be 'cluster' or 'knn'")
        if self.t_in < 1 or self.hidden < 1:
            raise ValueError("t_in and hidden must be >= 1")


@dataclass
class Sample:
    """One anchor frame ``t`` with everything expressed in frame t's coordinates."""

    seq_index: int
    t: int
    fwd_input: np.ndarray  # (T_in, H, W) frames t-T_in+1 .. t
    bwd_input: np.ndarray | None  # (T_in, H, W) frames t+T_in-1 .. t
    src: PillarSet
    tgt1: PillarSet
    tgt2: PillarSet
    clusters: ClusterMap
    gt_02: MotionField
    gt_1s: MotionField
    gt_speed: np.ndarray
    step_seconds: float

    @property
    def valid(self) -> np.ndarray:
        return self.src.occupancy


def _non_ground_occupancy(seq: LabeledSequence, k: int, t: int, grid: GridSpec, ground: GroundParams, cache) -> np.ndarray:
    key = (k, t)
    if key not in cache:
        non_ground, _ = remove_ground(seq.frames[k], ground)
        synced = sync_to_frame(non_ground, seq.frames[t].pose)
        cache[key] = bev_occupancy(synced, grid)
    return cache[key]


def build_samples(
    seqs,
    grid: GridSpec | None = None,
    ground: GroundParams | None = None,
    t_in: int = 5,
    with_backward: bool = True,
    connectivity: int = 8,
) -> list[Sample]:
    """Cut every sequence into anchor frames with enough history and future.

    Needs ``t_in - 1`` past frames, and ``max(2, t_in - 1)`` future frames when
    the backward sequence is built (2 otherwise).
    """
    grid = grid or GridSpec()
    ground = ground or GroundParams()
    future = max(2, t_in - 1) if with_backward else 2
    samples = []
    for si, seq in enumerate(seqs):
        n = len(seq)
        if n < t_in + future:
            log.warning("sequence %d has %d frames; needs %d, skipped", si, n, t_in + future)
            continue
        cache: dict = {}
        for t in range(t_in - 1, n - future):
            occ = lambda k: _non_ground_occupancy(seq, k, t, grid, ground, cache)  # noqa: E731
            src = PillarSet.from_occupancy(occ(t), grid)
            tgt1 = PillarSet.from_occupancy(occ(t + 1), grid)
            tgt2 = PillarSet.from_occupancy(occ(t + 2), grid)
            if len(src) == 0 or len(tgt1) == 0 or len(tgt2) == 0:
                log.warning("sequence %d frame %d: empty pillar set, skipped", si, t)
                continue
            fwd = np.stack([occ(k) for k in range(t - t_in + 1, t + 1)]).astype(np.float64)
            bwd = None
            if with_backward:
                bwd = np.stack([occ(k) for k in range(t + t_in - 1, t - 1, -1)]).astype(np.float64)
            gt = seq.ground_truth(t)
            samples.append(
                Sample(si, t, fwd, bwd, src, tgt1, tgt2, bfs_clusters(src, connectivity),
                       gt.motion_02, gt.motion_1s, gt.speed, seq.spec.frame_period)
            )
    return samples


@dataclass
class PseudoLabels:
    one: MotionField
    two: MotionField
    state: StateMap


def make_pseudo_labels(
    sample: Sample,
    predicted: MotionField | None,
    transport: TransportConfig,
    two_step: bool = True,
    state_threshold_mps: float = 0.2,
) -> PseudoLabels:
    one = generate_pseudo_motion(sample.src, sample.tgt1, predicted, transport, step_seconds=sample.step_seconds)
    if two_step:
        two = generate_two_step(sample.src, sample.tgt2, predicted, transport, step_seconds=sample.step_seconds)
    else:
        two = one.scaled(2.0)
    state = pseudo_state_labels(one, sample.step_seconds, state_threshold_mps)
    return PseudoLabels(one, two, state)


@dataclass
class TrainResult:
    params: PredictorParams
    loss_curve: list  # mean total loss per epoch
    epoch_terms: list  # per epoch, mean of each LossReport term
    last_report: LossReport | None
    reports: list = field(default_factory=list)  # final-epoch LossReport per step


def _mean_terms(reports) -> dict:
    keys = ("total", "sup", "cluster", "back", "forward", "state")
    return {k: float(np.mean([getattr(r, k) for r in reports])) for k in keys}


def train(
    samples: list[Sample],
    params: PredictorParams,
    cfg: TrainConfig,
    transport: TransportConfig | None = None,
) -> TrainResult:
    """Self-supervised training; deterministic for a fixed config and seed."""
    if not samples:
        raise EmptyDatasetError("no usable samples to train on")
    transport = transport or TransportConfig()
    opt = OptimizerState.create(
        params,
        learning_rate=cfg.learning_rate,
        decay_factor=cfg.decay_factor,
        decay_every_epochs=cfg.decay_every_epochs,
    )
    rng = np.random.default_rng(cfg.seed)
    use_backward = cfg.backward_enabled and cfg.weights.beta > 0
    curve, terms, last, reports = [], [], None, []
    for epoch in range(cfg.epochs):
        msm = cfg.msm_enabled and epoch >= cfg.msm_warmup_epochs
        # Labels for the whole epoch come from the model as it stands at epoch start.
        labels = []
        for s in samples:
            predicted = None
            if cfg.prewarp and epoch > 0:
                out = forward(s.fwd_input, params)
                predicted = MotionField(out.one_step, s.valid, s.step_seconds).masked()
            try:
                labels.append(make_pseudo_labels(s, predicted, transport, cfg.two_step_enabled, cfg.state_threshold_mps))
            except EmptyInputError as exc:
                log.warning("sample %d/%d skipped: %s", s.seq_index, s.t, exc)
                labels.append(None)
        order = rng.permutation(len(samples))
        reports = []
        for i in order:
            s, lab = samples[i], labels[i]
            if lab is None:
                continue
            out = forward(s.fwd_input, params)
            out_bwd = forward(s.bwd_input, params) if use_backward and s.bwd_input is not None else None
            inp = LossInputs(
                valid=s.valid,
                pred_motion=out.motion,
                state_logits=out.state_logits,
                labels_one=lab.one,
                labels_two=lab.two,
                state_labels=lab.state,
                clusters=s.clusters,
                pred_motion_bwd=None if out_bwd is None else out_bwd.motion,
            )
            report, grads = total_loss(inp, cfg.weights, msm, cfg.smoothness, cfg.knn_k)
            g = backward(out.cache, grads.motion, grads.state, params)
            if out_bwd is not None and grads.motion_bwd is not None:
                g = g.map(np.add, backward(out_bwd.cache, grads.motion_bwd, None, params))
            params, opt = adam_step(params, g, opt, epoch)
            reports.append(report)
        if not reports:
            raise EmptyDatasetError("every sample was skipped")
        mean = _mean_terms(reports)
        curve.append(mean["total"])
        terms.append(mean)
        last = reports[-1]
        log.info("epoch %d lr=%.5f loss=%.5f", epoch, opt.lr_at(epoch), mean["total"])
    return TrainResult(params, curve, terms, last, reports)


def predict_fields(params: PredictorParams, sample: Sample):
    out = forward(sample.fwd_input, params)
    d02 = MotionField(out.one_step, sample.valid, sample.step_seconds).masked()
    d04 = MotionField(out.two_step, sample.valid, 2 * sample.step_seconds).masked()
    return d02, d04, out


def evaluate_model(params: PredictorParams | None, samples: list[Sample], oracle: bool = False) -> EvalReport:
    """Aggregate 1 s errors over samples; ``oracle`` predicts the ground truth itself."""
    errs, groups, divs, dgroups = [], [], [], []
    for s in samples:
        if oracle:
            pred = MotionField(s.gt_1s.disp, s.valid, 1.0).masked()
        else:
            d02, d04, _ = predict_fields(params, s)
            pred = interpolate_to_1s(d02, d04)
        e, g = cell_errors(pred, s.gt_1s, s.gt_speed)
        errs.append(e)
        groups.append(g)
        if not oracle and s.bwd_input is not None:
            bwd = forward(s.bwd_input, params)
            f = MotionField(d02.disp, s.valid, s.step_seconds)
            b = MotionField(bwd.one_step, s.valid, s.step_seconds).masked()
            v, dg = divergence_values(f, b, s.gt_speed)
            divs.append(v)
            dgroups.append(dg)
    if not errs:
        raise EmptyDatasetError("nothing to evaluate")
    report = EvalReport.from_errors(np.concatenate(errs), np.concatenate(groups))
    if divs:
        report.divergence = group_means(np.concatenate(divs), np.concatenate(dgroups))
    return report


def pseudo_label_recovery(samples: list[Sample], transport: TransportConfig | None = None) -> dict:
    """Endpoint error of zero-prewarp one-step pseudo labels against cell ground truth."""
    transport = transport or TransportConfig()
    errs = []
    for s in samples:
        lab = generate_pseudo_motion(s.src, s.tgt1, None, transport, step_seconds=s.step_seconds)
        cells = s.valid & s.gt_02.valid
        errs.append(np.linalg.norm(lab.disp[cells] - s.gt_02.disp[cells], axis=-1))
    e = np.concatenate(errs) if errs else np.zeros(0)
    return {
        "samples": len(samples),
        "cells": int(e.size),
        "epe_mean": float(e.mean()) if e.size else 0.0,
        "epe_max": float(e.max()) if e.size else 0.0,
        "exact_fraction": float(np.mean(e == 0.0)) if e.size else 1.0,
    }
