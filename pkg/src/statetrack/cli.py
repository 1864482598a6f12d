"""Operator surface: train / track / bench / check subcommands.

Every run creates a fresh timestamped directory under --out, echoes the
effective configuration into it, and writes its delimited outputs and
figures there.  Exit codes: 0 success, 2 config error, 3 check failure,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path

import numpy as np

from .bench import fit_r2, run_bench, write_bench_csv
from .check import run_battery
from .checkpoint import load_params, restore_into, save_params
from .config import RunConfig, echo_text, load_run_config
from .errors import ConfigError, ContractError, NumericError
from .metrics import compute_metrics
from .model import Model, flatten_params
from .plotting import plot_cost_vs_k, plot_loss_curve, plot_success_curves
from .synth import generate_sequence
from .tracker import track_sequence, write_trace
from .train import train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CHECK = 3
EXIT_NUMERIC = 4


def make_run_dir(base: str, command: str) -> Path:
    root = Path(base)
    root.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    for suffix in range(1000):
        name = f"{command}-{stamp}" + (f"-{suffix}" if suffix else "")
        path = root / name
        try:
            path.mkdir()
            return path
        except FileExistsError:
            continue
    raise ConfigError(f"could not allocate a run directory under {base}")


def _parse_overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _load(args) -> RunConfig:
    overrides = _parse_overrides(args.set)
    for flag in ("seed", "update_interval", "steps", "eval_sequences"):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[flag] = str(value)
    return load_run_config(args.config, overrides)


def _prepare(args, command: str) -> tuple[RunConfig, Path]:
    cfg = _load(args)
    run_dir = make_run_dir(args.out, command)
    (run_dir / "config.txt").write_text(echo_text(cfg))
    print(f"run directory: {run_dir}")
    return cfg, run_dir


def cmd_train(args) -> int:
    cfg, run_dir = _prepare(args, "train")
    model = Model(cfg.model_config(), rng=np.random.default_rng(cfg.seed))
    history = train(model, cfg.train_config(), cfg.synth_config(),
                    log_every=args.log_every)
    save_params(run_dir / "checkpoint.smtk", flatten_params(model.params))
    with open(run_dir / "loss.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "lr_scale", "total", "focal", "l1", "giou"])
        for r in history:
            writer.writerow([r.step, f"{r.lr_scale:.6f}", f"{r.total:.6f}",
                             f"{r.focal:.6f}", f"{r.l1:.6f}", f"{r.giou:.6f}"])
    plot_loss_curve(history, run_dir / "loss.png")
    print(f"final loss {history[-1].total:.4f} over {len(history)} steps")
    print(f"checkpoint: {run_dir / 'checkpoint.smtk'}")
    return EXIT_OK


def cmd_track(args) -> int:
    cfg, run_dir = _prepare(args, "track")
    model = Model(cfg.model_config(), rng=np.random.default_rng(cfg.seed))
    if args.checkpoint:
        flat = flatten_params(model.params)
        restore_into(flat, load_params(args.checkpoint))
    settings = cfg.tracker_settings()

    metrics_rows = []
    overlap_lists = []
    labels = []
    for i in range(cfg.eval_sequences):
        seq_seed = 100_000 + 1000 * cfg.seed + i
        frames, boxes = generate_sequence(cfg.synth_config(seed=seq_seed))
        session = track_sequence(model, frames, boxes[0], settings)
        write_trace(run_dir / f"trace_{seq_seed}.csv", session.trace)
        preds = [r.box for r in session.trace]
        m = compute_metrics(preds, boxes[1:])
        metrics_rows.append([seq_seed, len(preds), f"{m.ao:.4f}",
                             f"{m.sr50:.4f}", f"{m.sr75:.4f}"])
        overlap_lists.append(m.overlaps)
        labels.append(str(seq_seed))
        print(f"sequence {seq_seed}: AO {m.ao:.3f}  SR50 {m.sr50:.3f}  "
              f"SR75 {m.sr75:.3f}")

    merged = np.concatenate(overlap_lists)
    aggregate = ["aggregate", int(sum(int(r[1]) for r in metrics_rows)),
                 f"{merged.mean():.4f}", f"{(merged > 0.5).mean():.4f}",
                 f"{(merged > 0.75).mean():.4f}"]
    with open(run_dir / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sequence", "frames", "ao", "sr50", "sr75"])
        writer.writerows(metrics_rows)
        writer.writerow(aggregate)
    plot_success_curves(overlap_lists, run_dir / "success_curves.png",
                        labels=labels if len(labels) <= 8 else None)
    print(f"aggregate AO {merged.mean():.4f} over {cfg.eval_sequences} sequences")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg, run_dir = _prepare(args, "bench")
    ks = list(range(1, cfg.bench_k_max + 1))
    rows = run_bench(cfg.model_config(), ks, repeats=cfg.bench_repeats,
                     seed=cfg.seed)
    write_bench_csv(run_dir / "bench.csv", rows)
    fits = {}
    fit_rows = []
    for variant, degree in (("sasm", 1), ("attention", 2)):
        sub = [r for r in rows if r.variant == variant]
        _, r2_time = fit_r2([r.k for r in sub], [r.wall_ns_mean for r in sub],
                            degree)
        _, r2_flops = fit_r2([r.k for r in sub], [r.flops for r in sub], degree)
        fits[variant] = (degree, r2_time)
        kind = "linear" if degree == 1 else "quadratic"
        fit_rows.append([variant, kind, f"{r2_time:.6f}", f"{r2_flops:.6f}"])
        print(f"{variant}: {kind} fit R2 wall-time {r2_time:.4f}, "
              f"flops {r2_flops:.6f}")
    with open(run_dir / "fits.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "fit", "r2_wall_time", "r2_flops"])
        writer.writerows(fit_rows)
    plot_cost_vs_k(rows, fits, run_dir / "cost_vs_k.png")
    return EXIT_OK


def cmd_check(args) -> int:
    cfg = _load(args)
    lines = []

    def echo(msg):
        lines.append(msg)
        print(msg)

    mutate = None
    if args.inject_grad_fault:
        def mutate(grads):
            grads["block0.scan_f.a"] *= -1

    results = run_battery(grad_seeds=args.grad_seeds, grad_mutate=mutate,
                          echo=echo)
    passed = all(r.passed for r in results)
    echo(f"{sum(r.passed for r in results)}/{len(results)} checks passed")
    if args.out:
        run_dir = make_run_dir(args.out, "check")
        (run_dir / "config.txt").write_text(echo_text(cfg))
        (run_dir / "report.txt").write_text("\n".join(lines) + "\n")
        print(f"report: {run_dir / 'report.txt'}")
    return EXIT_OK if passed else EXIT_CHECK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="statetrack",
        description="state-propagating tracker: train, track, bench, check")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default="runs"):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--seed", type=int, help="override the run seed")
        if out_default is not None:
            p.add_argument("--out", default=out_default,
                           help="directory that receives run folders")

    p_train = sub.add_parser("train", help="train on synthetic sequences")
    common(p_train)
    p_train.add_argument("--steps", type=int, help="override training steps")
    p_train.add_argument("--log-every", type=int, default=50)
    p_train.set_defaults(fn=cmd_train)

    p_track = sub.add_parser("track", help="run tracking sessions")
    common(p_track)
    p_track.add_argument("--checkpoint", help="checkpoint file to load")
    p_track.add_argument("--update-interval", dest="update_interval", type=int,
                         help="template update period (frames)")
    p_track.add_argument("--sequences", dest="eval_sequences", type=int,
                         help="number of synthetic sequences")
    p_track.set_defaults(fn=cmd_track)

    p_bench = sub.add_parser("bench", help="complexity benchmark")
    common(p_bench)
    p_bench.set_defaults(fn=cmd_bench)

    p_check = sub.add_parser("check", help="run the invariant battery")
    common(p_check, out_default=None)
    p_check.add_argument("--out", default=None,
                         help="also write the report into a run folder")
    p_check.add_argument("--grad-seeds", type=int, default=3)
    p_check.add_argument("--inject-grad-fault", action="store_true",
                         help="flip one gradient sign (self-test)")
    p_check.set_defaults(fn=cmd_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
