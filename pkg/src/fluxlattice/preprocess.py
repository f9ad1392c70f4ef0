"""Profile preprocessing: decay correction, z-scoring, smoothing, gap filling.

Clustering consumes the full chain and gets complete 180-point shape
vectors. Regression consumes decay-corrected, z-scored raw points only
(:func:`regression_points`).
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime
from typing import Sequence

import numpy as np
from scipy.signal import savgol_filter

from .data_model import AXIAL_GRID_SIZE, CycleDataset, FluxProfile
from .errors import ConfigError, DegenerateVarianceError, InsufficientDataError, ValidationError

CU64_HALF_LIFE_H = 12.7


@dataclass(frozen=True)
class PreprocessConfig:
    half_life: float = CU64_HALF_LIFE_H
    sg_window: int = 11
    sg_polyorder: int = 3
    normalize: bool = True

    def __post_init__(self):
        if not self.half_life > 0:
            raise ConfigError("half_life must be positive")
        _check_savgol(self.sg_window, self.sg_polyorder)


def _check_savgol(window, polyorder):
    if window < 3 or window % 2 == 0:
        raise ConfigError(f"Savitzky-Golay window must be odd and >= 3, got {window}")
    if not 0 <= polyorder < window:
        raise ConfigError(f"polyorder must be in [0, window), got {polyorder}")


def decay_correct(
    profiles: Sequence[FluxProfile],
    reference_time: datetime,
    half_life: float = CU64_HALF_LIFE_H,
) -> list[FluxProfile]:
    """Scale counts back to ``reference_time`` assuming exponential decay."""
    if not half_life > 0:
        raise ConfigError("half_life must be positive")
    out = []
    for p in profiles:
        dt_h = (p.scan_start_time - reference_time).total_seconds() / 3600.0
        if dt_h < 0:
            raise ValidationError(
                f"profile {p.key} was scanned before the reference time"
            )
        out.append(p.replace(counts=p.counts * 2.0 ** (dt_h / half_life)))
    return out


def decay_correct_dataset(dataset: CycleDataset, half_life: float = CU64_HALF_LIFE_H) -> CycleDataset:
    """Per cycle, decay every wire back to that cycle's first scan start."""
    refs: dict[str, datetime] = {}
    for p in dataset.profiles:
        t = refs.get(p.cycle_id)
        if t is None or p.scan_start_time < t:
            refs[p.cycle_id] = p.scan_start_time
    corrected = [
        decay_correct([p], refs[p.cycle_id], half_life)[0] for p in dataset.profiles
    ]
    return CycleDataset(corrected, dataset.split)


def zscore_stats(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        raise InsufficientDataError("z-score needs at least 2 values")
    mean = float(v.mean())
    std = float(v.std())
    if not std > 0:
        raise DegenerateVarianceError("cannot z-score a constant sequence")
    return mean, std


def zscore(values) -> np.ndarray:
    """Standardize to zero mean and unit population standard deviation."""
    mean, std = zscore_stats(values)
    return (np.asarray(values, dtype=float) - mean) / std


def savgol_smooth(values, window: int = 11, polyorder: int = 3) -> np.ndarray:
    """Savitzky-Golay smoothing that keeps the sequence length.

    Edges use a polynomial fitted to the first/last full window, evaluated
    at the edge offsets, rather than padding.
    """
    _check_savgol(window, polyorder)
    v = np.asarray(values, dtype=float)
    if v.ndim != 1:
        raise ValidationError("savgol_smooth expects a 1-D sequence")
    if v.size < window:
        raise ConfigError(f"window {window} longer than sequence ({v.size})")
    return savgol_filter(v, window, polyorder, mode="interp")


def fill_missing(profile: FluxProfile, grid_size: int = AXIAL_GRID_SIZE) -> FluxProfile:
    """Complete a profile on ``range(grid_size)`` by linear inter/extrapolation."""
    idx = profile.axial_index
    val = profile.counts
    if idx.size < 2:
        raise InsufficientDataError(f"profile {profile.key} has fewer than 2 points")
    full = np.empty(grid_size)
    grid = np.arange(grid_size)
    full[:] = np.interp(grid, idx, val)
    lo, hi = idx[0], idx[-1]
    if lo > 0:
        slope = (val[1] - val[0]) / (idx[1] - idx[0])
        full[:lo] = val[0] + slope * (grid[:lo] - lo)
    if hi < grid_size - 1:
        slope = (val[-1] - val[-2]) / (idx[-1] - idx[-2])
        full[hi + 1:] = val[-1] + slope * (grid[hi + 1:] - hi)
    full[idx] = val
    return profile.replace(axial_index=grid, counts=full, axial_grid_size=grid_size)


def normalize_profile(profile: FluxProfile) -> tuple[FluxProfile, float, float]:
    """Z-score one profile's present counts; returns (profile, mean, scale)."""
    mean, scale = zscore_stats(profile.counts)
    return profile.replace(counts=(profile.counts - mean) / scale, normalized=True), mean, scale


def shape_vector(profile: FluxProfile, config: PreprocessConfig) -> np.ndarray:
    """Z-score, smooth the present points, then fill gaps (already decay-corrected)."""
    p = profile
    if config.normalize:
        p, _, _ = normalize_profile(p)
    smoothed = savgol_smooth(p.counts, config.sg_window, config.sg_polyorder)
    p = p.replace(counts=smoothed, normalized=True)
    return fill_missing(p, p.axial_grid_size).counts.copy()


def preprocess_for_clustering(
    dataset: CycleDataset,
    config: PreprocessConfig | None = None,
    assembly_id: str | None = None,
    split: str | None = None,
) -> tuple[np.ndarray, list[tuple[str, str]]]:
    """Shape matrix (one complete row per profile) and the row keys.

    Rows follow the dataset's assembly then historical cycle order.
    """
    config = config or PreprocessConfig()
    if len(dataset) == 0:
        raise InsufficientDataError("dataset is empty")
    corrected = decay_correct_dataset(dataset, config.half_life)
    assemblies = [assembly_id] if assembly_id is not None else corrected.assemblies
    rows, keys = [], []
    for asm in assemblies:
        for p in corrected.for_assembly(asm, split):
            rows.append(shape_vector(p, config))
            keys.append(p.key)
    if not rows:
        raise InsufficientDataError("no profiles selected")
    return np.vstack(rows), keys


@dataclass(frozen=True)
class RegressionPoints:
    """Flattened regression data for a set of profiles.

    ``bank`` and ``axial`` are raw (unscaled) inputs; ``y`` and ``noise_sd``
    are in each profile's own z-units.
    """

    bank: np.ndarray
    axial: np.ndarray
    y: np.ndarray
    noise_sd: np.ndarray
    profile: np.ndarray  # row -> profile ordinal

    def __len__(self):
        return len(self.y)


def profile_targets(profile: FluxProfile) -> tuple[np.ndarray, np.ndarray, float, float]:
    """Z-scored counts and point-wise noise for an already decay-corrected profile."""
    mean, scale = zscore_stats(profile.counts)
    y = (profile.counts - mean) / scale
    noise = np.sqrt(np.clip(profile.counts, 0.0, None)) / scale
    return y, noise, mean, scale


def regression_points(profiles: Sequence[FluxProfile]) -> RegressionPoints:
    """Stack decay-corrected profiles into (bank, axial) -> z-count rows."""
    bank, axial, y, noise, owner = [], [], [], [], []
    for n, p in enumerate(profiles):
        yy, ss, _, _ = profile_targets(p)
        bank.append(np.full(len(yy), p.bank_position))
        axial.append(p.axial_index.astype(float))
        y.append(yy)
        noise.append(ss)
        owner.append(np.full(len(yy), n))
    if not profiles:
        empty = np.empty(0)
        return RegressionPoints(empty, empty, empty, empty, np.empty(0, dtype=int))
    return RegressionPoints(
        np.concatenate(bank),
        np.concatenate(axial),
        np.concatenate(y),
        np.concatenate(noise),
        np.concatenate(owner),
    )
