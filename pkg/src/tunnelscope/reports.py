"""Report serialization: one JSON document per run plus plot-ready CSVs.

report.json is written last via a temp-file rename, so it only ever appears
complete, and it carries a manifest naming every file the run emitted.
No timestamps or environment data are embedded: identical configs produce
byte-identical reports.
"""

from __future__ import annotations

import json
import os
import tempfile

from .analysis import (CapacityReport, DevelopmentReport, MetricsReport,
                       OodReport, ShorterReport, StitchReport, TunnelReport,
                       SCHEMA_VERSION)
from .nn import save_checkpoint
from .probes import ProbeCurve

REPORT_NAME = "report.json"


def _atomic_write(path: str, payload: bytes) -> None:
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def curve_csv(values, std=None) -> str:
    lines = ["layer,value,std"]
    std = std if std is not None else [0.0] * len(values)
    for i, (v, s) in enumerate(zip(values, std)):
        lines.append(f"{i},{v!r},{s!r}")
    return "\n".join(lines) + "\n"


def variance_csv(variances) -> str:
    # two-valued curve: intra and inter do not fit the layer,value,std scheme
    lines = ["layer,intra,inter"]
    for i, v in enumerate(variances):
        lines.append(f"{i},{v.intra!r},{v.inter!r}")
    return "\n".join(lines) + "\n"


def matrix_csv(rows, row_label: str) -> str:
    lines = [f"{row_label},layer,value"]
    for r, row in enumerate(rows):
        for layer, v in enumerate(row):
            lines.append(f"{r},{layer},{v!r}")
    return "\n".join(lines) + "\n"


def _probe_csvs(curve: ProbeCurve, prefix: str = "probe") -> dict[str, str]:
    return {f"{prefix}_curve.csv": curve_csv(curve.mean, curve.std)}


def render_outputs(report) -> tuple[dict, dict[str, str]]:
    """(results dict, {csv filename: text}) for any report type."""
    results = report.to_dict()
    csvs: dict[str, str] = {}
    if isinstance(report, TunnelReport):
        csvs.update(_probe_csvs(report.probe_curve))
        csvs["rank_curve.csv"] = curve_csv(report.rank_curve)
        csvs["variance_curve.csv"] = variance_csv(report.variance_curve)
    elif isinstance(report, OodReport):
        csvs.update(_probe_csvs(report.id_report.probe_curve))
        csvs["rank_curve.csv"] = curve_csv(report.id_report.rank_curve)
        csvs["variance_curve.csv"] = variance_csv(report.id_report.variance_curve)
        csvs.update(_probe_csvs(report.ood_probe_curve, prefix="ood_probe"))
        csvs["ood_rank_curve.csv"] = curve_csv(report.ood_rank_curve)
    elif isinstance(report, StitchReport):
        lines = ["combination,task,accuracy"]
        for key in sorted(report.grid):
            combo, task = key.split("@")
            lines.append(f"{combo},{task},{report.grid[key]!r}")
        csvs["stitch_grid.csv"] = "\n".join(lines) + "\n"
        lines = ["direction,x,task,accuracy"]
        for direction, rows in report.sweeps.items():
            for row in rows:
                for task in (0, 1):
                    lines.append(f"{direction},{row['x']},task{task},{row[f'task{task}']!r}")
        csvs["substitution_sweep.csv"] = "\n".join(lines) + "\n"
    elif isinstance(report, DevelopmentReport):
        csvs["weight_change.csv"] = matrix_csv(report.weight_change, "pair")
        csvs["rank_evolution.csv"] = matrix_csv(report.rank_evolution, "row")
    elif isinstance(report, CapacityReport):
        lines = ["depth,width,num_classes,tunnel_start_95,tunnel_start_98,reference_accuracy"]
        for c in report.cells:
            lines.append(f"{c.depth},{c.width},{c.num_classes},"
                         f"{c.tunnel_start_95},{c.tunnel_start_98},{c.reference_accuracy!r}")
        csvs["sweep_cells.csv"] = "\n".join(lines) + "\n"
    elif isinstance(report, ShorterReport):
        lines = ["depth,task1_accuracy,task2_accuracy,task1_after_task2,forgetting"]
        for r in report.rows:
            lines.append(f"{r.depth},{r.task1_accuracy!r},{r.task2_accuracy!r},"
                         f"{r.task1_after_task2!r},{r.forgetting!r}")
        csvs["shorter_networks.csv"] = "\n".join(lines) + "\n"
    elif isinstance(report, MetricsReport):
        csvs["cka_matrix.csv"] = matrix_csv(
            [["nan" if v is None else v for v in row] for row in report.cka], "layer_i")
        if report.drift is not None:
            csvs["l1_drift.csv"] = curve_csv(report.drift)
        csvs["rank_curve.csv"] = curve_csv(report.rank_curve)
        csvs["variance_curve.csv"] = variance_csv(report.variance_curve)
    else:
        raise TypeError(f"unknown report type {type(report).__name__}")
    return results, csvs


def write_run(out_dir: str, kind: str, config: dict, report,
              checkpoints: dict[str, object] | None = None) -> str:
    """Write CSVs, checkpoint containers, then report.json (atomically last).

    Returns the report path. `checkpoints` maps filename -> parameter list.
    """
    os.makedirs(out_dir, exist_ok=True)
    results, csvs = render_outputs(report)
    manifest = [REPORT_NAME] + sorted(csvs) + sorted(checkpoints or {})
    for name, text in csvs.items():
        _atomic_write(os.path.join(out_dir, name), text.encode("utf-8"))
    for name, params in (checkpoints or {}).items():
        save_checkpoint(os.path.join(out_dir, name), params)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "kind": kind,
        "config": config,
        "results": results,
        "manifest": manifest,
    }
    payload = json.dumps(doc, sort_keys=True, indent=2, allow_nan=False) + "\n"
    report_path = os.path.join(out_dir, REPORT_NAME)
    _atomic_write(report_path, payload.encode("utf-8"))
    return report_path
