"""Accuracy and uncertainty metrics for predicted profiles."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data_model import UqPrediction
from .errors import DegenerateVarianceError, InsufficientDataError, ValidationError
from .preprocess import savgol_smooth


@dataclass(frozen=True)
class BoxStats:
    median: float
    q1: float
    q3: float
    whisker_low: float
    whisker_high: float
    mean: float
    outliers: tuple[float, ...]

    def as_dict(self) -> dict:
        d = asdict(self)
        d["outliers"] = list(self.outliers)
        return d


def nrmse(predicted, measured) -> float:
    """Root-mean-squared error as a percentage of the measured range.

    NaN entries in ``measured`` mark missing points and are skipped.
    """
    p = np.asarray(predicted, dtype=float).reshape(-1)
    m = np.asarray(measured, dtype=float).reshape(-1)
    if p.shape != m.shape:
        raise ValidationError("predicted and measured differ in length")
    present = np.isfinite(m)
    if present.sum() < 2:
        raise InsufficientDataError("need at least two measured points")
    mp, pp = m[present], p[present]
    span = float(mp.max() - mp.min())
    if not span > 0:
        raise DegenerateVarianceError("measured profile has zero range")
    return 100.0 * float(np.sqrt(np.mean((pp - mp) ** 2))) / span


def region_nrmse(predicted, measured, region) -> float:
    """RMSE over the points in ``region`` (bool mask or index array),
    normalized by the range of the whole measured profile."""
    p = np.asarray(predicted, dtype=float).reshape(-1)
    m = np.asarray(measured, dtype=float).reshape(-1)
    present = np.isfinite(m)
    span = float(m[present].max() - m[present].min())
    if not span > 0:
        raise DegenerateVarianceError("measured profile has zero range")
    sel = np.zeros(len(m), dtype=bool)
    sel[region] = True
    sel &= present
    if not sel.any():
        raise InsufficientDataError("no measured points in region")
    return 100.0 * float(np.sqrt(np.mean((p[sel] - m[sel]) ** 2))) / span


def box_stats(values) -> BoxStats:
    """Tukey box statistics; quartiles interpolate linearly between order statistics."""
    v = np.asarray(values, dtype=float).reshape(-1)
    if v.size == 0:
        raise InsufficientDataError("box_stats needs at least one value")
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = v[(v >= lo_fence) & (v <= hi_fence)]
    outliers = tuple(float(x) for x in np.sort(v[(v < lo_fence) | (v > hi_fence)]))
    return BoxStats(
        median=float(med),
        q1=float(q1),
        q3=float(q3),
        whisker_low=float(inside.min()),
        whisker_high=float(inside.max()),
        mean=float(v.mean()),
        outliers=outliers,
    )


def noise_floor_nrmse(raw, smoothed_reference) -> float:
    """NRMSE of the raw profile against its smoothed (noise-free) estimate."""
    return nrmse(raw, smoothed_reference)


def noise_floor_from_raw(raw_present, window: int = 11, polyorder: int = 3) -> float:
    """Smooth the present points of a profile and return its noise-floor NRMSE."""
    raw_present = np.asarray(raw_present, dtype=float)
    return noise_floor_nrmse(raw_present, savgol_smooth(raw_present, window, polyorder))


def ci_coverage(predictions: Sequence[UqPrediction], truth) -> float:
    """Fraction of truth values inside the 95% intervals (NaN truth skipped)."""
    t = np.asarray(truth, dtype=float).reshape(-1)
    if len(predictions) != len(t):
        raise ValidationError("predictions and truth are not aligned")
    lo = np.array([p.ci95_low for p in predictions])
    hi = np.array([p.ci95_high for p in predictions])
    ok = np.isfinite(t)
    if not ok.any():
        return float("nan")
    inside = (t[ok] >= lo[ok]) & (t[ok] <= hi[ok])
    return float(inside.mean())


def coverage_from_arrays(mean, std, truth, z: float = 1.96) -> float:
    mean, std, t = (np.asarray(a, dtype=float).reshape(-1) for a in (mean, std, truth))
    ok = np.isfinite(t)
    inside = np.abs(t[ok] - mean[ok]) <= z * std[ok]
    return float(inside.mean())


def write_rows_csv(rows: list[dict], path, columns: Sequence[str] | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
