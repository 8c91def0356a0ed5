"""Report bundle: per-pair CSV, aggregate table, JSON summary and figures."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import plotting
from .errors import ParameterError, PartialOutputError
from .metrics import INFINITE, MetricsReport

REPORT_SCHEMA = "selenorm.report/1"
METRIC_KEYS = ("psnr_db", "ssim", "rmse", "hist_intersection", "hist_emd", "seam_energy")


@dataclass
class ReportBundle:
    out_dir: Path
    metrics_csv: Path
    aggregate_csv: Path
    summary_json: Path
    figures: list = field(default_factory=list)

    def files(self) -> list[Path]:
        return [self.metrics_csv, self.aggregate_csv, self.summary_json, *self.figures]


def aggregate(reports: list[MetricsReport]) -> dict:
    out = {}
    for key in METRIC_KEYS:
        vals = np.array([getattr(r, key) for r in reports], dtype=np.float64)
        # spread is undefined once a perfect-match pair (infinite PSNR) is present
        std = float(vals.std()) if np.all(np.isfinite(vals)) else math.nan
        out[key] = {"mean": float(vals.mean()), "std": std}
    out["n"] = len(reports)
    return out


def _json_safe(obj):
    if isinstance(obj, float) and math.isinf(obj):
        return INFINITE
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def write_metrics_csv(path, runs) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MetricsReport.FIELDS)
        writer.writeheader()
        for label, reports in runs:
            for r in reports:
                writer.writerow({**r.row(), "method": label})


def read_metrics_csv(path) -> list[tuple[str, list[MetricsReport]]]:
    runs: dict[str, list[MetricsReport]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            psnr = math.inf if row["psnr_db"] == INFINITE else float(row["psnr_db"])
            runs.setdefault(row["method"], []).append(
                MetricsReport(
                    row["pair_id"],
                    row["method"],
                    psnr,
                    *(float(row[k]) for k in METRIC_KEYS[1:]),
                )
            )
    return list(runs.items())


def make_report(runs, out_dir, scenes: dict | None = None, header: dict | None = None, history=None) -> ReportBundle:
    """Write the report bundle for ``runs`` (list of ``(method_label, [MetricsReport])``).

    ``scenes`` maps pair id to ``{label: raster}``; each scene gets a histogram
    overlay and an image strip in that label order. ``header`` lands verbatim
    in the JSON summary (configs, inference overlap and so on).
    """
    runs = [(label, list(reports)) for label, reports in runs]
    if not runs or not any(reports for _, reports in runs):
        raise ParameterError("report needs at least one method with at least one pair")
    out = Path(out_dir)
    fig_dir = out / "figures"
    written: list[Path] = []
    try:
        fig_dir.mkdir(parents=True, exist_ok=True)
        bundle = ReportBundle(out, out / "metrics.csv", out / "aggregate.csv", out / "summary.json")
        write_metrics_csv(bundle.metrics_csv, runs)
        written.append(bundle.metrics_csv)

        aggregates = {label: aggregate(reports) for label, reports in runs if reports}
        with open(bundle.aggregate_csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["method", "n"] + [f"{k}_{s}" for k in METRIC_KEYS for s in ("mean", "std")])
            for label, agg in aggregates.items():
                writer.writerow(
                    [label, agg["n"]] + [repr(agg[k][s]) for k in METRIC_KEYS for s in ("mean", "std")]
                )
        written.append(bundle.aggregate_csv)

        summary = {
            "schema": REPORT_SCHEMA,
            "header": header or {},
            "aggregates": aggregates,
            "pairs": [r.to_dict() | {"method_label": label} for label, reports in runs for r in reports],
        }
        bundle.summary_json.write_text(json.dumps(_json_safe(summary), indent=2, sort_keys=True))
        written.append(bundle.summary_json)

        if len(aggregates) > 1:
            path = fig_dir / "psnr_by_method.png"
            plotting.metric_bars(path, aggregates, "psnr_db")
            bundle.figures.append(path)
            written.append(path)
        if history:
            path = fig_dir / "loss_history.png"
            plotting.loss_curves(path, history)
            bundle.figures.append(path)
            written.append(path)
        for pair_id, images in (scenes or {}).items():
            images = {k: np.asarray(v.values if hasattr(v, "values") else v) for k, v in images.items()}
            hist_path = fig_dir / f"histogram_{pair_id}.png"
            plotting.histogram_overlay(hist_path, images, title=pair_id)
            bundle.figures.append(hist_path)
            written.append(hist_path)
            strip_path = fig_dir / f"strip_{pair_id}.png"
            plotting.image_strip(strip_path, images, title=pair_id)
            bundle.figures.append(strip_path)
            written.append(strip_path)
    except OSError as exc:
        raise PartialOutputError(
            f"report writing failed: {exc}; written so far: {[str(p) for p in written]}",
            written=written,
        ) from exc
    return bundle
