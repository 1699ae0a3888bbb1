"""Command-line surface: `tunnelscope <kind> [--config ...] [--set k=v ...]`.

Each subcommand runs one experiment and writes report.json plus CSVs (and
checkpoint containers where the run trains a backbone) into the output
directory. The tunnel boundary summary is printed to stdout.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

from . import analysis, reports
from .config import KINDS, RunConfig, apply_overrides, config_to_dict, default_config, load_config

_ENV_OUT = "TUNNELSCOPE_OUT"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tunnelscope",
        description="Train small classifiers and measure the extractor/tunnel split.",
    )
    sub = parser.add_subparsers(dest="kind", required=True)
    for kind in KINDS:
        p = sub.add_parser(kind, help=f"run the {kind} experiment")
        p.add_argument("--config", help="JSON config file (defaults are used when omitted)")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="dotted-key config override")
        p.add_argument("--out", help=f"output directory (or ${_ENV_OUT})")
        p.add_argument("--seed", type=int, help="master seed offset")
        p.add_argument("--threads", type=int, help="worker threads (default 1)")
    return parser


def _resolve_config(args) -> RunConfig:
    if args.config:
        cfg = load_config(args.config)
        if cfg.kind != args.kind:
            cfg = replace(cfg, kind=args.kind)
    else:
        cfg = default_config(args.kind)
    if args.overrides:
        cfg = apply_overrides(cfg, args.overrides)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.threads is not None:
        cfg = replace(cfg, threads=args.threads)
    out = args.out or cfg.out_dir or os.environ.get(_ENV_OUT)
    if not out:
        raise ValueError(f"no output directory: pass --out or set ${_ENV_OUT}")
    return replace(cfg, out_dir=out)


def _summary_lines(kind: str, report) -> list[str]:
    if kind in ("tunnel", "metrics"):
        tr = report if kind == "tunnel" else None
        if tr is not None:
            return [
                f"reference accuracy {tr.reference_accuracy:.4f}",
                f"tunnel starts at layer {tr.tunnel_start_95} (95% threshold)"
                f" / {tr.tunnel_start_98} (98% threshold) of {tr.num_layers} layers",
            ]
        return [f"reference accuracy {report.reference_accuracy:.4f}"]
    if kind == "ood":
        tr = report.id_report
        return [
            f"reference accuracy {tr.reference_accuracy:.4f}",
            f"tunnel starts at layer {tr.tunnel_start_95} (95% threshold)",
            f"best OOD probe layer: {report.ood_best_layer}",
        ]
    if kind == "stitch":
        return [f"split layer {report.split_layer}; "
                f"task accuracies {[round(a, 4) for a in report.task_accuracies]}"]
    if kind == "develop":
        return [f"{len(report.checkpoint_epochs)} checkpoints, "
                f"{len(report.rank_steps)} rank captures"]
    if kind == "sweep":
        return [f"{len(report.cells)} cells; tunnel_start_95 = "
                + ", ".join(f"(d{c.depth},w{c.width},c{c.num_classes})->{c.tunnel_start_95}"
                            for c in report.cells)]
    if kind == "shorter":
        return [f"depth {r.depth}: forgetting {r.forgetting:.4f}" for r in report.rows]
    return []


def run(cfg: RunConfig) -> int:
    """Execute one experiment and write its outputs. Returns an exit code."""
    kind = cfg.kind
    checkpoints: dict[str, object] = {}
    if kind == "tunnel":
        artifacts = analysis._tunnel_artifacts(cfg)
        report = artifacts.report
        checkpoints["checkpoint_initial.tnlc"] = artifacts.checkpoints[0].parameters
        checkpoints["checkpoint_final.tnlc"] = artifacts.checkpoints[-1].parameters
    elif kind == "ood":
        ood_artifacts = analysis._ood_artifacts(cfg)
        report = ood_artifacts.report
        checkpoints["checkpoint_initial.tnlc"] = ood_artifacts.checkpoints[0].parameters
        checkpoints["checkpoint_final.tnlc"] = ood_artifacts.checkpoints[-1].parameters
    elif kind == "stitch":
        report = analysis.run_stitch_experiment(cfg)
    elif kind == "develop":
        report = analysis.run_development_experiment(cfg)
    elif kind == "sweep":
        report = analysis.run_capacity_sweep(cfg)
    elif kind == "shorter":
        report = analysis.run_shorter_network_experiment(cfg)
    elif kind == "metrics":
        report = analysis.run_metrics_experiment(cfg)
    else:
        raise ValueError(f"unknown kind {kind!r}")
    path = reports.write_run(cfg.out_dir, kind, config_to_dict(cfg), report,
                             checkpoints=checkpoints or None)
    for line in _summary_lines(kind, report):
        print(line)
    print(f"report written to {path}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        return run(cfg)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
