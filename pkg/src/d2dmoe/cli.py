"""Command-line front end.

Every subcommand is spec-driven: --spec points at an ExperimentSpec JSON
file, --out overrides its output directory, --seed narrows the run to one
seed (default: every seed the spec lists).  Stage subcommands execute the
pipeline up to and including that stage, resuming from whatever stage
checkpoints already exist.

Only the standard library is imported at module level: --threads must pin
the BLAS pool sizes through environment variables before numpy loads.

Exit codes: 0 success, 2 validation error, 3 numeric failure, 4 bad file
format.
"""

from __future__ import annotations

import argparse
import csv as csv_mod
import json
import os
import sys
from pathlib import Path

STAGE_COMMANDS = {
    "train": "train",
    "sparsify": "sparsify",
    "relufy": "relufy",
    "replace-mha": "replace_mha",
    "cluster": "cluster",
    "train-routers": "routers",
    "convert": "convert",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="d2dmoe", description=__doc__.split("\n")[0])
    parser.add_argument("--spec", type=Path, help="ExperimentSpec JSON file")
    parser.add_argument("--out", type=Path, help="output directory (overrides spec.out_dir)")
    parser.add_argument("--seed", type=int, help="run a single seed instead of every spec seed")
    parser.add_argument("--threads", type=int, help="BLAS/OpenMP thread count")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", help="generate the spec's dataset")
    for name in STAGE_COMMANDS:
        sub.add_parser(name, help=f"run the pipeline through the {name} stage")
    sub.add_parser("sweep", help="evaluate the policy grid on the converted checkpoint")
    sub.add_parser("compare", help="run every compare.methods entry and merge the curves")
    sub.add_parser("granularity", help="sweep expert sizes per the spec's granularity field")

    stats = sub.add_parser("stats", help="activation sparsity histograms for a checkpoint")
    stats.add_argument("--ckpt", type=Path, required=True)
    stats.add_argument("--csv", type=Path, help="output CSV (default <out>/stats.csv)")

    plot = sub.add_parser("plot", help="render a sweep CSV as an SVG line chart")
    plot.add_argument("--csv", type=Path, required=True)
    plot.add_argument("--svg", type=Path, required=True)
    plot.add_argument("--x", default="analytic_flops")
    plot.add_argument("--y", default="metric")
    plot.add_argument("--group", default="policy_kind",
                      help="column whose values become separate lines ('' for one line)")
    return parser


def _need_spec(args) -> "object":
    from .errors import ValidationError
    from .pipeline import ExperimentSpec

    if args.spec is None:
        raise ValidationError(f"command {args.command!r} needs --spec")
    return ExperimentSpec.from_json(args.spec, out_dir=args.out)


def _seeds(spec, args) -> list[int]:
    return [args.seed] if args.seed is not None else list(spec.seeds)


def _cmd_gen_data(args) -> None:
    from .pipeline import ensure_dataset

    spec = _need_spec(args)
    ds = ensure_dataset(spec)
    print(f"dataset {spec.task} at {spec.out_dir / 'dataset'} hash={ds.content_hash[:12]}")


def _cmd_stage(args, stage: str) -> None:
    from .pipeline import run_pipeline

    spec = _need_spec(args)
    for seed in _seeds(spec, args):
        result = run_pipeline(spec, seed, upto=stage)
        log = result.logs[stage]
        tokens = log.get("tokens_consumed", "-")
        print(f"seed {seed}: {stage} done (tokens={tokens}) -> {result.run_dir / (stage + '.ckpt')}")


def _cmd_sweep(args) -> None:
    from .pipeline import sweep_pipeline

    spec = _need_spec(args)
    for seed in _seeds(spec, args):
        rows = sweep_pipeline(spec, seed)
        print(f"seed {seed}: {len(rows)} sweep points -> "
              f"{spec.out_dir / f'seed{seed}' / 'sweep.csv'}")


def _cmd_compare(args) -> None:
    from .pipeline import compare_methods

    spec = _need_spec(args)
    for seed in _seeds(spec, args):
        rows = compare_methods(spec, seed)
        print(f"seed {seed}: {len(rows)} rows -> {spec.out_dir / f'seed{seed}' / 'compare.csv'}")


def _cmd_granularity(args) -> None:
    from .pipeline import run_granularity

    spec = _need_spec(args)
    for seed in _seeds(spec, args):
        rows = run_granularity(spec, seed)
        print(f"seed {seed}: {len(rows)} rows -> {spec.out_dir / f'seed{seed}' / 'granularity.csv'}")


def _cmd_stats(args) -> None:
    from .checkpoint import load_checkpoint
    from .pipeline import ensure_dataset
    from .sparsity import activation_stats, write_histogram_csv

    spec = _need_spec(args)
    model = load_checkpoint(args.ckpt)
    stats = activation_stats(model, ensure_dataset(spec))
    out = args.csv if args.csv is not None else spec.out_dir / "stats.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_histogram_csv(stats, out)
    hidden = model.config.hidden_dim
    for layer, row in stats.summary().items():
        print(f"layer {layer}: mean nonzero {row['mean']:.1f}/{hidden} "
              f"({row['mean'] / hidden:.3f}) over {row['tokens']} tokens")
    print(f"histograms -> {out}")


def _cmd_plot(args) -> None:
    import matplotlib

    matplotlib.use("Agg")
    # without a fixed hashsalt the SVG element ids are random per process,
    # which would break byte-for-byte reproducibility of the artifacts
    matplotlib.rcParams["svg.hashsalt"] = "d2dmoe"
    import matplotlib.pyplot as plt

    from .errors import FormatError, ValidationError

    with open(args.csv, newline="") as f:
        rows = list(csv_mod.DictReader(f))
    if not rows:
        raise FormatError(f"{args.csv}: empty CSV")
    for col in (args.x, args.y):
        if col not in rows[0]:
            raise ValidationError(f"{args.csv}: no column {col!r}; have {sorted(rows[0])}")

    groups: dict[str, list[tuple[float, float]]] = {}
    for row in rows:
        key = row.get(args.group, "") if args.group else ""
        try:
            groups.setdefault(key, []).append((float(row[args.x]), float(row[args.y])))
        except ValueError:
            continue  # non-numeric cell (e.g. blank tau on top-k rows)
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in sorted(groups):
        pts = sorted(groups[key])
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o",
                label=key if key else None)
    ax.set_xlabel(args.x)
    ax.set_ylabel(args.y)
    if any(groups):
        ax.legend()
    fig.tight_layout()
    args.svg.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(args.svg, format="svg", metadata={"Date": None})
    print(f"plot -> {args.svg}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                    "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
            os.environ[var] = str(args.threads)

    from .errors import FormatError, NumericError, ValidationError

    try:
        if args.command == "gen-data":
            _cmd_gen_data(args)
        elif args.command in STAGE_COMMANDS:
            _cmd_stage(args, STAGE_COMMANDS[args.command])
        elif args.command == "sweep":
            _cmd_sweep(args)
        elif args.command == "compare":
            _cmd_compare(args)
        elif args.command == "granularity":
            _cmd_granularity(args)
        elif args.command == "stats":
            _cmd_stats(args)
        elif args.command == "plot":
            _cmd_plot(args)
        else:  # pragma: no cover - argparse enforces the choices
            raise ValidationError(f"unknown command {args.command!r}")
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except FormatError as e:
        print(f"format error: {e}", file=sys.stderr)
        return 4
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except json.JSONDecodeError as e:
        print(f"format error: {args.spec}: {e}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
