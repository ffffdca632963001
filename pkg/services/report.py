"""
Report Service for the DeeR toolkit.
Merges evaluation runs into the budget/performance curve, per-run exit
histograms and a Markdown summary.
"""

import asyncio
import logging
from pathlib import Path
from typing import List, Optional, Sequence

import storage
from models import EvalMetrics
from services import csv_service

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.json"
CURVE_FILE = "curve.csv"
HISTOGRAM_FILE = "exit_histograms.csv"
MARKDOWN_FILE = "report.md"
MERGED_FILE = "report.json"


def metrics_path(path) -> Path:
    path = Path(path)
    return path / METRICS_FILE if path.is_dir() else path


async def load_metrics(paths: Sequence) -> List[EvalMetrics]:
    """Metrics of each run; a directory stands for its metrics.json."""
    runs = []
    for raw in paths:
        path = metrics_path(raw)
        data = await storage.load_json(path)
        if not data:
            logger.warning(f"No metrics found at {path}, skipping")
            continue
        metrics = EvalMetrics.from_dict(data)
        if not metrics.label:
            metrics.label = path.parent.name
        runs.append(metrics)
    return runs


def render_markdown(runs: List[EvalMetrics]) -> str:
    curve = csv_service.curve_frame(runs).copy()
    curve["avg_gflops"] = curve["avg_flops"] / 1e9
    curve["mem_gb"] = curve["mem"] / 1e9
    columns = ["label", "avg_gflops", "peak_flops", "mem_gb", "avg_len"] + [c for c in curve.columns if c.startswith("succ_")]
    lines = [
        "# Budget / performance",
        "",
        curve[columns].to_markdown(index=False, floatfmt=".4g"),
        "",
        "# Exit histograms",
        "",
    ]
    histograms = csv_service.histogram_frame(runs)
    for label, group in histograms.groupby("label", sort=False):
        lines.append(f"## {label}")
        lines.append("")
        lines.append(group[["exit", "count", "fraction"]].to_markdown(index=False, floatfmt=".3f"))
        lines.append("")
    timing = [f"- {m.label}: {m.ns_per_action / 1e6:.3f} ms per action over {m.n_steps} steps" for m in runs]
    if timing:
        lines.extend(["# Inference time", ""] + timing + [""])
    return "\n".join(lines)


async def write_report(runs: List[EvalMetrics], out_dir) -> Optional[Path]:
    """Write curve CSV, histogram CSV, merged JSON and Markdown under ``out_dir``."""
    if not runs:
        logger.error("No runs to report")
        return None
    out = Path(out_dir)
    storage.ensure_written(await csv_service.write_curve(runs, out / CURVE_FILE), out / CURVE_FILE)
    storage.ensure_written(await csv_service.write_histograms(runs, out / HISTOGRAM_FILE), out / HISTOGRAM_FILE)
    storage.ensure_written(await storage.save_json(out / MERGED_FILE, [m.to_dict() for m in runs]), out / MERGED_FILE)

    text = render_markdown(runs)

    def _write():
        out.mkdir(parents=True, exist_ok=True)
        (out / MARKDOWN_FILE).write_text(text, encoding="utf-8")

    await asyncio.to_thread(_write)
    logger.info(f"Report for {len(runs)} runs written to {out}")
    return out / MARKDOWN_FILE
