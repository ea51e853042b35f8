"""Command-line entry point: generate data, run experiments, compare results.

Subcommands: generate / run / report / list-methods. Flags override config
keys with precedence flag > config file > built-in default. Every failure
class maps to a distinct exit code (see EXIT_CODES).
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from contseg import __version__
from contseg.config import ExperimentConfig, build_datasets, build_sequence, load_config
from contseg.errors import (
    ConfigError,
    ContsegError,
    DataLayoutError,
    InfeasibleSplitError,
    ReportError,
    TrainingDivergedError,
)
from contseg.evaluation import (
    ResultsMatrix,
    build_report,
    comparison_report,
    render_comparison_figure,
)
from contseg.taskbench.io import ensure_empty_dir, save_dataset, write_manifest
from contseg.trainer import METHODS, NON_INCREMENTAL, run_sequence

OUT_ROOT_ENV = "CONTSEG_OUT_ROOT"

EXIT_CODES = (
    (ConfigError, 2),
    (InfeasibleSplitError, 4),
    (DataLayoutError, 3),
    (TrainingDivergedError, 5),
    (ReportError, 6),
)


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "method", None) is not None:
        cfg.method.method = args.method
        cfg.method.__post_init__()
    if getattr(args, "out", None) is not None:
        cfg.out_dir = args.out
    return cfg


def _resolve_out_dir(cfg: ExperimentConfig) -> Path:
    if cfg.out_dir:
        return Path(cfg.out_dir)
    root = Path(os.environ.get(OUT_ROOT_ENV, "runs"))
    method = cfg.method.method.lower().replace("+", "_")
    return root / f"{cfg.name}-{method}-seed{cfg.seed}"


def cmd_generate(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    out = _resolve_out_dir(cfg)
    ensure_empty_dir(out, force=args.force)
    datasets = build_datasets(cfg)
    for d in datasets:
        save_dataset(d, out / (d.domain_tag or "data"), split="train")
    sequence = build_sequence(cfg)
    write_manifest(sequence, out / "split_manifest.txt")
    print(f"wrote {sum(len(d) for d in datasets)} samples across "
          f"{len(datasets)} domain(s) to {out}")
    print(f"split manifest: {out / 'split_manifest.txt'}")
    return 0


def cmd_run(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    out = _resolve_out_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    sequence = build_sequence(cfg)
    result = run_sequence(
        sequence, cfg.method, capacity=cfg.capacity, seed=cfg.seed, out_dir=out
    )
    text = build_report(result.matrix, out_dir=out / "report", figures=True)
    print(text)
    print(f"results: {out / 'results.json'}")
    print(f"report:  {out / 'report'}")
    return 0


def cmd_report(args) -> int:
    matrices = []
    for d in args.results_dirs:
        path = Path(d) / "results.json"
        if not path.exists():
            raise ReportError(f"{d} contains no results.json")
        matrices.append(ResultsMatrix.load(path))
    out_dir = Path(args.out) if args.out else None
    text = comparison_report(matrices, out_dir=out_dir)
    if out_dir is not None:
        render_comparison_figure(matrices, out_dir)
    print(text)
    return 0


def cmd_list_methods(args) -> int:
    for m in METHODS:
        print(m)
    print(NON_INCREMENTAL)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="contseg",
        description="Continual-learning toolkit for semantic segmentation.",
        epilog=(
            "Flag precedence: flag > config file > default. "
            f"Set {OUT_ROOT_ENV} to change the default output root (./runs). "
            "Exit codes: 0 ok, 1 unexpected, 2 config, 3 data layout, "
            "4 infeasible split, 5 training diverged, 6 report."
        ),
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate", help="write a synthetic dataset to disk")
    p_gen.add_argument("--config", required=True, help="experiment config (YAML)")
    p_gen.add_argument("--seed", type=int, help="override experiment.seed")
    p_gen.add_argument("--out", help="override output directory")
    p_gen.add_argument("--force", action="store_true",
                       help="allow writing into a non-empty directory")
    p_gen.set_defaults(fn=cmd_generate)

    p_run = sub.add_parser("run", help="train a method over a task sequence")
    p_run.add_argument("--config", required=True, help="experiment config (YAML)")
    p_run.add_argument("--seed", type=int, help="override experiment.seed")
    p_run.add_argument("--method", choices=list(METHODS) + [NON_INCREMENTAL],
                       help="override method.name")
    p_run.add_argument("--out", help="override output directory")
    p_run.set_defaults(fn=cmd_run)

    p_rep = sub.add_parser("report", help="merge results dirs into one comparison")
    p_rep.add_argument("results_dirs", nargs="+", help="run output directories")
    p_rep.add_argument("--out", help="write comparison files here")
    p_rep.set_defaults(fn=cmd_report)

    p_list = sub.add_parser("list-methods", help="print the method catalog")
    p_list.set_defaults(fn=cmd_list_methods)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ContsegError as e:
        print(f"error: {e}", file=sys.stderr)
        for klass, code in EXIT_CODES:
            if isinstance(e, klass):
                return code
        return 1
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"unexpected error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
