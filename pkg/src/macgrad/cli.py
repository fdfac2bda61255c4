"""Command-line front door: train, spectra, convlab, compare.

Exit codes: 0 on success, 2 for configuration errors, 3 for numerical
failures (non-finite loss or unsolvable preconditioner).
"""

from __future__ import annotations

import os

# Honor the thread cap before any BLAS-backed import happens.
_threads = os.environ.get("MACGRAD_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import json
import sys
from pathlib import Path

import yaml

from . import convergence, spectra
from .config import RunConfig, load_config
from .curvature import CurvatureOptimizer, make_optimizer
from .data_io import make_dataset_from_config, load_checkpoint, read_metrics
from .errors import CheckpointError, ConfigError, NumericalFailure, ParseError
from .nn import Attention, build_model
from .trainer import train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="macgrad")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one training experiment")
    p_train.add_argument("--config", required=True, help="YAML run configuration")
    p_train.add_argument("--seed", type=int, default=None, help="override config seed")
    p_train.add_argument("--out", default=None, help="override output directory")
    p_train.add_argument("--optimizer", default=None, help="override optimizer name")
    p_train.add_argument("--epochs", type=int, default=None, help="override epoch count")

    p_spec = sub.add_parser("spectra", help="eigenspectrum report for a checkpoint")
    p_spec.add_argument("--checkpoint", required=True)
    p_spec.add_argument("--batch-source", required=True,
                        help="YAML file with a dataset block used to draw the batch")
    p_spec.add_argument("--batch-size", type=int, default=512)
    p_spec.add_argument("--top-k", type=int, default=20)
    p_spec.add_argument("--out", required=True, help="JSONL report destination")

    p_conv = sub.add_parser("convlab", help="two-layer ReLU contraction harness")
    p_conv.add_argument("--m", type=int, default=4096)
    p_conv.add_argument("--n", type=int, default=32)
    p_conv.add_argument("--d", type=int, default=10)
    p_conv.add_argument("--rho", type=float, default=0.5)
    p_conv.add_argument("--eta", type=float, default=None,
                        help="explicit step size; defaults to the theorem scaling")
    p_conv.add_argument("--eta-mult", type=float, default=0.1,
                        help="multiplier inside the step-size scaling rule")
    p_conv.add_argument("--iters", type=int, default=200)
    p_conv.add_argument("--seeds", type=int, default=5)
    p_conv.add_argument("--mc-samples", type=int, default=100_000)
    p_conv.add_argument("--out", required=True, help="JSONL trace destination")

    p_cmp = sub.add_parser("compare", help="tabulate finished runs")
    p_cmp.add_argument("run_dirs", nargs="+")
    return parser


def cmd_train(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.epochs is not None:
        config.epochs = args.epochs
    if args.optimizer is not None:
        raw = config.to_dict()
        raw["optimizer"] = {"name": args.optimizer}
        config = RunConfig.from_dict(raw)
    out_dir = Path(args.out or config.out_dir or "run")
    result = train(config, out_dir)

    summary = {
        "optimizer": config.optimizer.name,
        "seed": config.seed,
        "steps": result.steps,
        "final_loss": result.final_loss,
        "final_acc": result.final_acc,
        "wall_seconds": result.wall_seconds,
        "peak_state_bytes": result.peak_state_bytes,
    }
    with open(out_dir / "summary.json", "w", encoding="utf-8") as f:
        json.dump(summary, f, sort_keys=True, indent=2)

    loss = "n/a" if result.final_loss is None else f"{result.final_loss:.6f}"
    acc = "n/a" if result.final_acc is None else f"{result.final_acc:.4f}"
    print(f"{'optimizer':>16}  {'final_loss':>12}  {'test_acc':>9}  "
          f"{'wall_s':>8}  {'state_bytes':>12}")
    print(f"{config.optimizer.name:>16}  {loss:>12}  {acc:>9}  "
          f"{result.wall_seconds:>8.2f}  {result.peak_state_bytes:>12}")
    return EXIT_OK


def cmd_spectra(args) -> int:
    meta, params, _ = load_checkpoint(args.checkpoint)
    model = build_model(meta["model"], seed=0)
    for key, value in params.items():
        model.set_param(key, value)

    with open(args.batch_source, "r", encoding="utf-8") as f:
        source = yaml.safe_load(f)
    if isinstance(source, dict) and "dataset" in source:
        source = source["dataset"]
    ds = make_dataset_from_config(source)
    xb = ds.x[: args.batch_size]
    yb = ds.y[: args.batch_size]

    logits = model.forward(xb, capture=True)
    model.backward(logits, yb, meta.get("loss", "cross_entropy"))

    out_path = Path(args.out)
    out_path.unlink(missing_ok=True)
    reports: list = []
    for i, layer in model.trainable_layers():
        stats = layer.stats
        if isinstance(layer, Attention):
            t_mean = stats.t_heads.mean(axis=(0, 1))
            report = spectra.attention_spectrum(t_mean, k=args.top_k)
            report["layer"] = f"{i}.attention_scores"
            reports.append(report)
        elif stats.a_rows is not None and stats.p_rows is not None:
            reports.append(spectra.layer_report(str(i), stats.a_rows, stats.p_rows, args.top_k))
    spectra.write_reports(out_path, reports)
    print(f"wrote {len(reports)} report lines to {out_path}")
    return EXIT_OK


def cmd_convlab(args) -> int:
    out_path = Path(args.out)
    out_path.unlink(missing_ok=True)
    failures = 0
    for seed in range(args.seeds):
        trace = convergence.run_harness(
            m=args.m, n=args.n, d=args.d, rho=args.rho, iters=args.iters, seed=seed,
            mc_samples=args.mc_samples, eta_multiplier=args.eta_mult, eta=args.eta,
        )
        convergence.trace_to_jsonl(trace, seed, out_path)
        report = convergence.verify_theorem1(trace)
        status = "ok" if not report["violated"] else f"violated={report['violated']}"
        print(
            f"seed {seed}: contraction {report['contraction_frac']:.3f}, "
            f"monotone {report['monotone_frac']:.3f}, "
            f"drift {report['weight_drift_max']:.3f}/{report['weight_drift_bound']:.3f}, "
            f"C {report['condition2_c_max']:.4f} [{status}]"
        )
        failures += bool(report["violated"])
    print(f"{args.seeds - failures}/{args.seeds} seeds satisfied all checks")
    return EXIT_OK


def cmd_compare(args) -> int:
    rows = []
    for run_dir in args.run_dirs:
        summary_path = Path(run_dir) / "summary.json"
        if not summary_path.exists():
            raise ConfigError(f"no summary.json in {run_dir}; run may be unfinished")
        with open(summary_path, "r", encoding="utf-8") as f:
            summary = json.load(f)
        summary["dir"] = str(run_dir)
        rows.append(summary)
    base_wall = rows[0]["wall_seconds"] or 1e-12
    print(f"{'run':<28} {'optim':>6} {'final_loss':>12} {'test_acc':>9} "
          f"{'rel_time':>9} {'state_bytes':>12}")
    for row in rows:
        loss = "n/a" if row["final_loss"] is None else f"{row['final_loss']:.6f}"
        acc = "n/a" if row["final_acc"] is None else f"{row['final_acc']:.4f}"
        print(f"{Path(row['dir']).name:<28} {row['optimizer']:>6} {loss:>12} {acc:>9} "
              f"{row['wall_seconds'] / base_wall:>9.2f} {row['peak_state_bytes']:>12}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {
        "train": cmd_train,
        "spectra": cmd_spectra,
        "convlab": cmd_convlab,
        "compare": cmd_compare,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, ParseError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as exc:
        print(f"numeric failure at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
