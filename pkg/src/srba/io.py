"""Trace CSV files and seed aggregation for plotting."""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .errors import ConfigurationError
from .solver import TraceRecord

TRACE_COLUMNS = (
    "t", "k", "oracle_total", "oracle_grad_F", "oracle_grad1_G", "oracle_hvp", "oracle_jvp",
    "h", "grad_h_sq", "subopt", "wall_ms",
)

X_AXES = {"iterations": None, "oracle_calls": "oracle_total", "wall_ms": "wall_ms"}


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def trace_to_csv(trace: Iterable[TraceRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(TRACE_COLUMNS)
    for rec in trace:
        w.writerow([_fmt(getattr(rec, c)) for c in TRACE_COLUMNS])
    return buf.getvalue()


def write_trace_csv(trace, path) -> None:
    Path(path).write_bytes(trace_to_csv(trace).encode("utf-8"))


def read_trace_csv(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != TRACE_COLUMNS:
            raise ConfigurationError(f"{path}: unexpected trace header {reader.fieldnames}")
        rows = []
        for row in reader:
            vals = {}
            for c in TRACE_COLUMNS:
                raw = row[c]
                if raw == "":
                    vals[c] = None
                elif c in ("t", "k") or c.startswith("oracle_"):
                    vals[c] = int(raw)
                else:
                    vals[c] = float(raw)
            rows.append(TraceRecord(**vals))
    return rows


def _series(rows, metric: str, x_axis: str):
    key = X_AXES[x_axis]
    xs, ys = [], []
    for idx, r in enumerate(rows):
        y = getattr(r, metric)
        x = idx if key is None else getattr(r, key)
        if y is None or x is None:
            continue
        xs.append(float(x))
        ys.append(float(y))
    return np.asarray(xs), np.asarray(ys)


def aggregate(runs: list, metric: str = "subopt", x_axis: str = "oracle_calls",
              grid: Optional[np.ndarray] = None, lo: float = 20.0, hi: float = 80.0) -> dict:
    """Median and percentile band of ``metric`` across runs.

    Each run is evaluated on a common x grid by carrying its last observed
    value forward (step interpolation); grid points before a run's first
    observation or past its last are left out for that run.
    """
    if metric not in TRACE_COLUMNS:
        raise ConfigurationError(f"unknown metric {metric!r}")
    if x_axis not in X_AXES:
        raise ConfigurationError(f"x axis must be one of {sorted(X_AXES)}, got {x_axis!r}")
    if not runs:
        raise ConfigurationError("no runs to aggregate")
    series = [_series(r, metric, x_axis) for r in runs]
    if grid is None:
        grid = np.unique(np.concatenate([s[0] for s in series]))
    med, p_lo, p_hi, count = [], [], [], []
    for g in grid:
        vals = []
        for xs, ys in series:
            if xs.size == 0 or g < xs[0] or g > xs[-1]:
                continue
            vals.append(ys[np.searchsorted(xs, g, side="right") - 1])
        count.append(len(vals))
        if vals:
            med.append(float(np.median(vals)))
            p_lo.append(float(np.percentile(vals, lo)))
            p_hi.append(float(np.percentile(vals, hi)))
        else:
            med.append(math.nan)
            p_lo.append(math.nan)
            p_hi.append(math.nan)
    return {"x": np.asarray(grid, dtype=float), "median": np.asarray(med),
            "p_lo": np.asarray(p_lo), "p_hi": np.asarray(p_hi), "n_runs": np.asarray(count)}


def aggregate_to_csv(agg: dict, x_axis: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow([x_axis, "median", "p20", "p80", "n_runs"])
    for row in zip(agg["x"], agg["median"], agg["p_lo"], agg["p_hi"], agg["n_runs"]):
        x, med, a, b, cnt = row
        if math.isnan(med):
            continue
        w.writerow([repr(float(x)), repr(float(med)), repr(float(a)), repr(float(b)), int(cnt)])
    return buf.getvalue()
