"""
CSV Service for the DeeR toolkit.
Handles creation and parsing of every tabular artifact: training logs,
calibration-delta dumps, search logs, budget/performance curves and exit
histograms.
"""

import asyncio
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from models import CHAIN_LENGTH, EvalMetrics

logger = logging.getLogger(__name__)

TRAIN_LOG_COLUMNS = ["epoch", "phase", "step", "loss_total", "loss_seq", "loss_aux", "grad_norm"]
DELTA_COLUMNS = ["sample_id", "exit", "delta"]
CURVE_COLUMNS = ["label", "avg_flops", "peak_flops", "mem", "avg_len"] + [f"succ_{i}" for i in range(1, CHAIN_LENGTH + 1)]


def bo_log_columns(n_eta: int) -> List[str]:
    return ["eval"] + [f"eta_{i}" for i in range(1, n_eta + 1)] + ["scc", "avg_flops", "peak_flops", "mem", "f_obj", "feasible"]


async def _write(df: pd.DataFrame, path) -> bool:
    path = Path(path)

    def _to_csv():
        path.parent.mkdir(parents=True, exist_ok=True)
        df.to_csv(path, index=False, encoding="utf-8")

    try:
        await asyncio.to_thread(_to_csv)
        return True
    except OSError as e:
        logger.error(f"Error writing CSV {path}: {e}")
        return False


async def write_frame(rows: List[Dict], path, columns: Optional[Sequence[str]] = None) -> bool:
    """Write a list of records as CSV (header only when empty)."""
    df = pd.DataFrame(rows, columns=list(columns) if columns else None)
    return await _write(df, path)


async def read_frame(path) -> Optional[pd.DataFrame]:
    try:
        return await asyncio.to_thread(pd.read_csv, Path(path), float_precision="round_trip")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        logger.error(f"Error reading CSV {path}: {e}")
        return None


async def write_training_log(rows: List[Dict], path) -> bool:
    return await write_frame(rows, path, TRAIN_LOG_COLUMNS)


async def write_deltas(deltas: np.ndarray, path) -> bool:
    """
    Dump calibration deltas in long form: one row per (sample, exit).

    Args:
        deltas: (S, n) array, column j holding exit j+1
    """
    s, n = deltas.shape
    df = pd.DataFrame({
        "sample_id": np.repeat(np.arange(s), n),
        "exit": np.tile(np.arange(1, n + 1), s),
        "delta": deltas.reshape(-1),
    })
    ok = await _write(df[DELTA_COLUMNS], path)
    if ok:
        logger.info(f"Wrote {s} calibration samples x {n} exits to {path}")
    return ok


async def read_deltas(path) -> Optional[np.ndarray]:
    """Inverse of write_deltas: (S, n) array ordered by sample id and exit."""
    df = await read_frame(path)
    if df is None:
        return None
    missing = set(DELTA_COLUMNS) - set(df.columns)
    if missing:
        logger.error(f"Delta dump {path} lacks columns {sorted(missing)}")
        return None
    table = df.pivot(index="sample_id", columns="exit", values="delta").sort_index().sort_index(axis=1)
    return table.to_numpy(dtype=np.float64)


async def write_bo_log(rows: List[Dict], n_eta: int, path) -> bool:
    return await write_frame(rows, path, bo_log_columns(n_eta))


def curve_frame(metrics: List[EvalMetrics]) -> pd.DataFrame:
    """Budget/performance curve, one row per run, sorted by average FLOPs."""
    records = []
    for m in metrics:
        record = {"label": m.label, "avg_flops": m.mean_flops, "peak_flops": m.peak_flops, "mem": m.mem, "avg_len": m.avg_len}
        record.update({f"succ_{i + 1}": v for i, v in enumerate(m.succ)})
        records.append(record)
    df = pd.DataFrame(records, columns=CURVE_COLUMNS)
    return df.sort_values("avg_flops", kind="mergesort").reset_index(drop=True)


def histogram_frame(metrics: List[EvalMetrics]) -> pd.DataFrame:
    records = []
    for m in metrics:
        total = sum(m.exit_histogram.values()) or 1
        for exit_index, count in sorted(m.exit_histogram.items()):
            records.append({"label": m.label, "exit": exit_index, "count": count, "fraction": count / total})
    return pd.DataFrame(records, columns=["label", "exit", "count", "fraction"])


async def write_curve(metrics: List[EvalMetrics], path) -> bool:
    return await _write(curve_frame(metrics), path)


async def write_histograms(metrics: List[EvalMetrics], path) -> bool:
    return await _write(histogram_frame(metrics), path)
