"""``bevmotion`` command-line interface.

Every command writes into a fresh run directory ``<out>/<config hash>-<UTC time>``
and prints ``run_dir=<path>`` on stdout.  Failures print one line on stderr::

    error kind=<kind> code=<exit code> message=<text>

Exit codes: 0 ok, 2 config error, 3 io error, 4 numeric failure, 5 format version
mismatch.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config, override
from .dataset import read_collection, write_collection
from .errors import BevMotionError, ConfigError, DatasetError
from .losses import LossWeights
from .model import init_params, load_checkpoint, save_checkpoint
from .pseudo import generate_pseudo_motion
from .synth import generate_collection
from .training import build_samples, evaluate_model, make_pseudo_labels, pseudo_label_recovery, train
from .transport import cost_matrix, sinkhorn

log = logging.getLogger("bevmotion")

ORACLE_CHECKPOINT = "oracle:gt"

# Loss-term on/off grid of the ablation table: (cluster, backward, forward).
ABLATION_ROWS = (
    ("a", False, False, False),
    ("b", True, False, False),
    ("c", False, True, False),
    ("d", True, True, False),
    ("e", True, False, True),
    ("f", False, False, True),
    ("g", False, True, True),
    ("h", True, True, True),
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"bad arguments: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="seed for scene generation and training")
    p.add_argument("--out", help="parent directory for run directories")
    p.add_argument("--weights", help="alpha,beta,gamma,sigma")
    p.add_argument("--no-msm", action="store_true", help="disable the moving-state mask")
    p.add_argument("--no-backward", action="store_true", help="drop the backward consistency term")
    p.add_argument("--no-forward", action="store_true", help="drop the forward consistency term")
    p.add_argument("--no-cluster", action="store_true", help="drop the cluster smoothness term")
    p.add_argument("--epsilon", type=float, help="absolute entropic regularization")
    p.add_argument("--epochs", type=int)
    p.add_argument("--dataset", help="dataset directory (default: generate from the scene config)")
    p.add_argument("--checkpoint", help=f"checkpoint file, or '{ORACLE_CHECKPOINT}' for a ground-truth predictor")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bevmotion", description="Self-supervised BEV motion prediction toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, text in (
        ("gen", "generate a synthetic dataset"),
        ("pseudo", "dump pseudo labels and their recovery statistics"),
        ("train", "train a predictor and report metrics"),
        ("eval", "evaluate a checkpoint"),
        ("ablate", "train the loss-term on/off grid"),
        ("bench", "time the transport solver and pseudo labelling"),
    ):
        _common(sub.add_parser(name, help=text))
    return parser


# -- configuration -------------------------------------------------------------


def _parse_weights(text: str) -> dict:
    try:
        values = [float(x) for x in text.split(",")]
    except ValueError as exc:
        raise ConfigError(f"--weights expects four numbers, got {text!r}") from exc
    if len(values) != 4:
        raise ConfigError(f"--weights expects alpha,beta,gamma,sigma, got {text!r}")
    return dict(zip(("alpha", "beta", "gamma", "sigma"), values))


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = override(cfg, "scene", seed=args.seed)
        cfg = override(cfg, "train", seed=args.seed)
    if args.weights:
        cfg = override(cfg, "weights", **_parse_weights(args.weights))
    flags = {"alpha": args.no_cluster, "beta": args.no_backward, "gamma": args.no_forward}
    cfg = override(cfg, "weights", **{k: 0.0 for k, off in flags.items() if off})
    if args.no_msm:
        cfg = override(cfg, "train", msm_enabled=False)
    cfg = override(cfg, "train", epochs=args.epochs)
    cfg = override(cfg, "transport", epsilon=args.epsilon)
    cfg = override(cfg, "paths", out=args.out, dataset=args.dataset, checkpoint=args.checkpoint)
    return cfg


def make_run_dir(cfg: RunConfig) -> Path:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    base = Path(cfg.paths.out) / f"{cfg.hash()[:12]}-{stamp}"
    run_dir, k = base, 1
    while run_dir.exists():
        run_dir = base.with_name(f"{base.name}-{k}")
        k += 1
    try:
        run_dir.mkdir(parents=True)
        (run_dir / "config.json").write_text(
            json.dumps({"config_hash": cfg.hash(), **cfg.to_dict()}, indent=2, sort_keys=True) + "\n"
        )
    except OSError as exc:
        raise DatasetError(f"cannot create run directory {run_dir}: {exc}") from exc
    return run_dir


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_kv(path: Path, cfg: RunConfig, values: dict) -> None:
    lines = [f"config_hash={cfg.hash()}"] + [f"{k}={_fmt(values[k])}" for k in sorted(values)]
    path.write_text("\n".join(lines) + "\n")


def write_text(path: Path, cfg: RunConfig, lines: list) -> None:
    path.write_text("\n".join([f"config_hash {cfg.hash()}"] + list(lines)) + "\n")


def load_sequences(cfg: RunConfig) -> list:
    if cfg.paths.dataset:
        return read_collection(cfg.paths.dataset)
    return generate_collection(cfg.scene, cfg.dataset.n_sequences, cfg.grid)


def load_samples(cfg: RunConfig, seqs=None) -> list:
    seqs = seqs if seqs is not None else load_sequences(cfg)
    grid = seqs[0].grid if cfg.paths.dataset else cfg.grid
    return build_samples(
        seqs, grid, cfg.ground, cfg.train.t_in, with_backward=True, connectivity=cfg.train.connectivity
    )


# -- commands ------------------------------------------------------------------


def cmd_gen(cfg: RunConfig, run_dir: Path) -> dict:
    seqs = generate_collection(cfg.scene, cfg.dataset.n_sequences, cfg.grid)
    root = write_collection(seqs, run_dir / "dataset")
    values = {"sequences": len(seqs), "frames": sum(len(s) for s in seqs), "dataset": str(root)}
    write_kv(run_dir / "gen.kv", cfg, values)
    return values


def cmd_pseudo(cfg: RunConfig, run_dir: Path) -> dict:
    samples = load_samples(cfg)
    stats = pseudo_label_recovery(samples, cfg.transport)
    dump = {}
    for k, s in enumerate(samples):
        lab = make_pseudo_labels(s, None, cfg.transport, cfg.train.two_step_enabled, cfg.train.state_threshold_mps)
        dump[f"s{k:03d}_one"] = lab.one.disp.astype(np.float32)
        dump[f"s{k:03d}_two"] = lab.two.disp.astype(np.float32)
        dump[f"s{k:03d}_valid"] = lab.one.valid
        dump[f"s{k:03d}_state"] = lab.state.labels
    np.savez_compressed(run_dir / "pseudo_labels.npz", **dump)
    write_kv(run_dir / "recovery.kv", cfg, stats)
    write_text(run_dir / "recovery.txt", cfg, [f"{k} {_fmt(v)}" for k, v in stats.items()])
    return stats


def _report_values(report, prefix="") -> dict:
    return {f"{prefix}{k}": v for k, v in report.key_values().items()}


def cmd_train(cfg: RunConfig, run_dir: Path) -> dict:
    samples = load_samples(cfg)
    params = init_params(cfg.train.t_in, cfg.train.hidden, cfg.train.seed)
    result = train(samples, params, cfg.train_config, cfg.transport)
    grid = samples[0].src.spec
    save_checkpoint(run_dir / "checkpoint.bin", result.params, grid.H, grid.W)
    report = evaluate_model(result.params, samples)
    values = _report_values(report)
    values.update({f"loss.epoch{e:03d}": v for e, v in enumerate(result.loss_curve)})
    values.update({f"last.{k}": v for k, v in result.last_report.as_dict().items()})
    values["samples"] = len(samples)
    write_kv(run_dir / "metrics.kv", cfg, values)
    curve = [f"epoch {e} " + " ".join(f"{k}={v:.6f}" for k, v in t.items()) for e, t in enumerate(result.epoch_terms)]
    write_text(run_dir / "loss_curve.txt", cfg, curve)
    write_text(run_dir / "metrics.txt", cfg, report.lines())
    return values


def cmd_eval(cfg: RunConfig, run_dir: Path) -> dict:
    if not cfg.paths.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    samples = load_samples(cfg)
    if cfg.paths.checkpoint == ORACLE_CHECKPOINT:
        report = evaluate_model(None, samples, oracle=True)
    else:
        params, header = load_checkpoint(cfg.paths.checkpoint)
        grid = samples[0].src.spec
        if (header["H"], header["W"], header["t_in"]) != (grid.H, grid.W, cfg.train.t_in):
            raise ConfigError(
                f"checkpoint is for a {header['H']}x{header['W']} grid with {header['t_in']} frames, "
                f"dataset needs {grid.H}x{grid.W} with {cfg.train.t_in}"
            )
        report = evaluate_model(params, samples)
    values = _report_values(report)
    write_kv(run_dir / "eval.kv", cfg, values)
    write_text(run_dir / "eval.txt", cfg, report.lines())
    return values


def ablation_weights(base: LossWeights, cluster: bool, back: bool, fwd: bool) -> LossWeights:
    """Row weights: switched-on terms keep the configured weight, the rest are zero."""
    return replace(
        base,
        alpha=base.alpha if cluster else 0.0,
        beta=base.beta if back else 0.0,
        gamma=base.gamma if fwd else 0.0,
    )


def cmd_ablate(cfg: RunConfig, run_dir: Path) -> dict:
    samples = load_samples(cfg)
    values, lines = {}, []
    header = f"{'row':<4}{'cluster':<9}{'back':<6}{'fwd':<5}{'static':>10}{'slow':>10}{'fast':>10}  decomposition"
    lines.append(header)
    for row, cluster, back, fwd in ABLATION_ROWS:
        weights = ablation_weights(cfg.weights, cluster, back, fwd)
        tcfg = replace(cfg.train, weights=weights)
        params = init_params(cfg.train.t_in, cfg.train.hidden, cfg.train.seed)
        result = train(samples, params, tcfg, cfg.transport)
        report = evaluate_model(result.params, samples)
        last = result.last_report
        gap = abs(last.total - last.recompose())
        means = [report.mean(g) for g in ("static", "slow", "fast")]
        cells = "".join(f"{'-' if m is None else f'{m:.4f}':>10}" for m in means)
        mark = lambda b: "x" if b else "."  # noqa: E731
        lines.append(
            f"{row:<4}{mark(cluster):<9}{mark(back):<6}{mark(fwd):<5}{cells}  "
            f"total={last.total:.6f} sup={last.sup:.6f} cluster={last.cluster:.6f} "
            f"back={last.back:.6f} forward={last.forward:.6f} state={last.state:.6f} gap={gap:.3e}"
        )
        values.update({f"{row}.{k}": v for k, v in report.key_values().items()})
        values.update({f"{row}.loss.{k}": v for k, v in last.as_dict().items()})
        values[f"{row}.loss.gap"] = gap
        values[f"{row}.terms"] = f"cluster={int(cluster)},back={int(back)},forward={int(fwd)}"
    values["rows"] = len(ABLATION_ROWS)
    write_kv(run_dir / "ablation.kv", cfg, values)
    write_text(run_dir / "ablation.txt", cfg, lines)
    return values


def cmd_bench(cfg: RunConfig, run_dir: Path) -> dict:
    rng = np.random.default_rng(cfg.scene.seed)
    values = {}
    for n in (100, 500, 1000):
        src = rng.uniform(-8, 8, (n, 2))
        tgt = src + rng.normal(0.0, 0.3, (n, 2))
        C = cost_matrix(src, tgt)
        solver = replace(cfg.transport, max_iters=100, marginal_tol=1e-300)
        t0 = time.perf_counter()
        plan = sinkhorn(C, solver)
        values[f"sinkhorn.{n}x{n}.seconds"] = time.perf_counter() - t0
        values[f"sinkhorn.{n}x{n}.iterations"] = plan.iterations_used
    samples = load_samples(cfg, generate_collection(cfg.scene, 1, cfg.grid))
    t0 = time.perf_counter()
    for s in samples:
        generate_pseudo_motion(s.src, s.tgt1, None, cfg.transport, step_seconds=s.step_seconds)
    elapsed = time.perf_counter() - t0
    values["pseudo.samples"] = len(samples)
    values["pseudo.seconds_per_sample"] = elapsed / max(len(samples), 1)
    values["pseudo.mean_pillars"] = float(np.mean([len(s.src) for s in samples])) if samples else 0.0
    write_kv(run_dir / "bench.kv", cfg, values)
    write_text(run_dir / "bench.txt", cfg, [f"{k} {_fmt(v)}" for k, v in sorted(values.items())])
    return values


COMMANDS = {
    "gen": cmd_gen,
    "pseudo": cmd_pseudo,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "bench": cmd_bench,
}


def _error_line(exc: BevMotionError) -> str:
    message = " ".join(str(exc).split())
    return f"error kind={exc.kind} code={exc.exit_code} message={message}"


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        cfg = resolve_config(args)
        run_dir = make_run_dir(cfg)
        values = COMMANDS[args.command](cfg, run_dir)
    except BevMotionError as exc:
        print(_error_line(exc), file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        print(_error_line(DatasetError(str(exc))), file=sys.stderr)
        return DatasetError.exit_code
    print(f"run_dir={run_dir}")
    print(f"config_hash={cfg.hash()}")
    for k in sorted(values):
        print(f"{k}={_fmt(values[k])}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
