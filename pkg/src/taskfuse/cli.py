"""Command-line entry points for the training pipeline."""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config
from .params import CheckpointError, load_snapshot

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3


def _load_cfg(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    for name in ("seed", "epochs", "out_root"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if getattr(args, "tasks", None):
        overrides["tasks"] = tuple(args.tasks.split(","))
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    return cfg


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML experiment config")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out-root", dest="out_root", help="override the output root")


def _cmd_pretrain(args) -> int:
    from .harness import run_pretrain

    cfg = _load_cfg(args)
    artifacts = run_pretrain(cfg, overwrite=args.overwrite)
    print(f"run directory: {artifacts.run_dir}")
    print(f"fused checkpoint: {artifacts.fused_id}")
    print(f"ledger: {artifacts.ledger_path}")
    print(f"impact trace: {artifacts.impact_path}")
    return EXIT_OK


def _cmd_transfer(args) -> int:
    from .harness import run_transfer

    cfg = _load_cfg(args)
    artifacts = run_transfer(cfg, run_dir=args.run)
    print(f"student checkpoint: {artifacts.checkpoint_ids[-1]}")
    print(f"report: {artifacts.report_paths['transfer']}")
    print(Path(artifacts.report_paths["transfer"]).read_text().rstrip())
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .harness import run_eval

    cfg = _load_cfg(args)
    probe_acc, report = run_eval(cfg, run_dir=args.run, with_dec=not args.no_cluster,
                                 retrieval_grid=args.grid)
    print(f"probe accuracy: {probe_acc:.4f}")
    if report is not None:
        print(f"nmi: {report.nmi:.4f}  ari: {report.ari:.4f}  "
              f"recall@k: {report.recall_at_k:.4f}")
    return EXIT_OK


def _cmd_cluster(args) -> int:
    from .harness import run_eval

    cfg = _load_cfg(args)
    _, report = run_eval(cfg, run_dir=args.run, with_dec=True)
    print(f"nmi: {report.nmi:.4f}  ari: {report.ari:.4f}  "
          f"recall@k: {report.recall_at_k:.4f}")
    return EXIT_OK


def _cmd_plot(args) -> int:
    from .harness import plot_impact

    variation = plot_impact(args.trace, args.out)
    for epoch, cv in variation.items():
        print(f"epoch {epoch}: cv={cv:.4f}")
    return EXIT_OK


def _cmd_inspect(args) -> int:
    params, meta = load_snapshot(args.id, args.dir)
    print(f"snapshot {args.id}: arch {params.arch_id}, epoch {meta.epoch}, "
          f"seed {meta.seed}, task order {','.join(meta.task_order)}")
    print(f"{len(params.entries)} tensors, {params.element_count()} elements")
    for name, arr in params.entries.items():
        print(f"  {name}: shape {tuple(arr.shape)} dtype {arr.dtype}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="taskfuse",
        description="Multi-task self-supervised pretraining with weight-space "
                    "task fusion, knowledge transfer, and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="multi-task pretraining run")
    _add_common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--tasks", help="comma-separated subset of r,s,c,j")
    p.add_argument("--overwrite", action="store_true",
                   help="replace an existing run directory")
    p.set_defaults(fn=_cmd_pretrain)

    p = sub.add_parser("transfer", help="train the student from a fused encoder")
    _add_common(p)
    p.add_argument("--run", help="run directory (default: derived from config)")
    p.set_defaults(fn=_cmd_transfer)

    p = sub.add_parser("eval", help="probe accuracy and clustering metrics")
    _add_common(p)
    p.add_argument("--run", help="run directory (default: derived from config)")
    p.add_argument("--no-cluster", action="store_true")
    p.add_argument("--grid", action="store_true", help="save a retrieval grid image")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("cluster", help="clustering metrics only")
    _add_common(p)
    p.add_argument("--run", help="run directory (default: derived from config)")
    p.set_defaults(fn=_cmd_cluster)

    p = sub.add_parser("plot", help="plot the per-task impact trace")
    p.add_argument("--trace", required=True, help="impact.tsv path")
    p.add_argument("--out", help="output image path")
    p.set_defaults(fn=_cmd_plot)

    p = sub.add_parser("inspect-checkpoint", help="print a snapshot summary")
    p.add_argument("--dir", required=True, help="checkpoint directory")
    p.add_argument("--id", required=True, help="snapshot id")
    p.set_defaults(fn=_cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, FileNotFoundError) as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
