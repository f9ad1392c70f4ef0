"""Seeded synthetic stand-in for a multi-cycle copper-wire campaign.

Each assembly draws a shape family per cycle:

* family 0 - chopped cosine, tilted linearly by the bank position
* family 1 - family 0 plus a Gaussian peak near the top of the grid
  (coupling-piece peak)
* family 2 - family 0 shifted axially (misplaced wire); used for single
  outliers

Counts are decayed to each wire's scan time, noised, and thinned by random
missing points. Ground-truth families and noise-free profiles are kept so
clustering and regression can be scored.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Mapping

import numpy as np

from .data_model import (
    AXIAL_GRID_SIZE,
    Clustering,
    CycleDataset,
    FluxProfile,
    IngestConfig,
    assign_split,
    canonical_labels,
)
from .errors import ConfigError
from .preprocess import CU64_HALF_LIFE_H

N_FAMILIES = 3


@dataclass(frozen=True)
class AssemblySpec:
    assembly_id: str
    fractions: tuple[float, ...] = (0.62, 0.38)
    outlier: bool = False

    def __post_init__(self):
        object.__setattr__(self, "fractions", tuple(float(f) for f in self.fractions))
        if not 1 <= len(self.fractions) <= 2:
            raise ConfigError("an assembly mixes one or two regular shape families")
        if abs(sum(self.fractions) - 1.0) > 1e-9 or min(self.fractions) < 0:
            raise ConfigError(f"{self.assembly_id}: mixing fractions must sum to 1")


DEFAULT_ASSEMBLIES = (
    AssemblySpec("C5", (0.62, 0.38)),
    AssemblySpec("E7", (0.69, 0.31)),
)


@dataclass(frozen=True)
class SynthConfig:
    n_cycles: int = 100
    assemblies: tuple[AssemblySpec, ...] = DEFAULT_ASSEMBLIES
    base_intensity: float = 400.0
    end_ratio: float = 0.3  # cosine value at the grid ends
    tilt: float = 0.3
    bump_amplitude: float = 300.0
    bump_center: float = 0.9
    bump_width: float = 0.04
    outlier_shift: float = 0.08
    missing_rate: float = 0.05
    bank_range: tuple[float, float] = (0.0, 1.0)
    noise_model: str = "poisson"
    noise_sigma: float = 0.0
    half_life: float = CU64_HALF_LIFE_H
    wire_interval_min: float = 15.0
    n_predict: int = 10
    axial_grid_size: int = AXIAL_GRID_SIZE
    start_time: datetime = datetime(2009, 10, 1, 8, 0, 0)
    cycle_days: float = 28.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "assemblies", tuple(self.assemblies))
        object.__setattr__(self, "bank_range", tuple(float(b) for b in self.bank_range))
        if self.n_cycles < 1:
            raise ConfigError("n_cycles must be >= 1")
        if not self.assemblies:
            raise ConfigError("at least one assembly")
        if len({a.assembly_id for a in self.assemblies}) != len(self.assemblies):
            raise ConfigError("assembly ids must be unique")
        if not 0.8 <= self.bump_center <= 1.0:
            raise ConfigError("bump_center must lie in the upper 20% of the grid")
        if not self.bump_width > 0 or not self.base_intensity > 0:
            raise ConfigError("bump_width and base_intensity must be positive")
        if not 0 <= self.missing_rate < 1:
            raise ConfigError("missing_rate must lie in [0, 1)")
        lo, hi = self.bank_range
        if not 0 <= lo <= hi <= 1:
            raise ConfigError("bank_range must be a sub-interval of [0, 1]")
        if self.noise_model not in ("poisson", "gaussian"):
            raise ConfigError("noise_model is 'poisson' or 'gaussian'")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")
        if not 0 < self.end_ratio < 1:
            raise ConfigError("end_ratio must lie in (0, 1)")
        if not 0 <= self.n_predict < self.n_cycles:
            raise ConfigError("n_predict must be smaller than n_cycles")


def axial_positions(n: int = AXIAL_GRID_SIZE) -> np.ndarray:
    """Cell-centred positions in (0, 1)."""
    return (np.arange(n) + 0.5) / n


def _base(bank, z, cfg: SynthConfig):
    c = 2.0 * np.arccos(cfg.end_ratio) / np.pi
    cosine = np.cos(np.pi * c * (z - 0.5))
    return cfg.base_intensity * cosine * (1.0 + cfg.tilt * (bank - 0.5) * (2.0 * z - 1.0))


def bump(z, cfg: SynthConfig):
    return cfg.bump_amplitude * np.exp(-0.5 * ((z - cfg.bump_center) / cfg.bump_width) ** 2)


def truth_shape(family: int, bank_position: float, axial, config: SynthConfig | None = None):
    """Noise-free intensity of a shape family at axial position(s) in [0, 1]."""
    cfg = config or SynthConfig()
    z = np.asarray(axial, dtype=float)
    if np.any((z < 0) | (z > 1)):
        raise ConfigError("axial position outside [0, 1]")
    if family == 0:
        out = _base(bank_position, z, cfg)
    elif family == 1:
        out = _base(bank_position, z, cfg) + bump(z, cfg)
    elif family == 2:
        out = _base(bank_position, z - cfg.outlier_shift, cfg)
    else:
        raise ConfigError(f"unknown shape family {family}")
    return float(out) if np.ndim(out) == 0 else out


def stratified_counts(fractions, n: int) -> list[int]:
    """Largest-remainder rounding of ``fractions * n``."""
    raw = np.asarray(fractions, dtype=float) * n
    counts = np.floor(raw).astype(int)
    rem = n - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:rem]] += 1
    return counts.tolist()


@dataclass
class SynthResult:
    dataset: CycleDataset
    families: dict[tuple[str, str], int]
    truth: dict[tuple[str, str], np.ndarray]  # noise-free, at the cycle reference time
    decay: dict[tuple[str, str], float] = field(default_factory=dict)  # raw = truth * decay

    def ground_truth(self) -> dict[str, Clustering]:
        out = {}
        for asm in self.dataset.assemblies:
            profs = self.dataset.for_assembly(asm)
            keys = [p.cycle_id for p in profs]
            fam = [self.families[p.key] for p in profs]
            out[asm] = Clustering(keys, canonical_labels(fam), "ground_truth")
        return out

    def truth_measured(self, key) -> np.ndarray:
        return self.truth[key] * self.decay[key]


def generate(config: SynthConfig | None = None) -> SynthResult:
    cfg = config or SynthConfig()
    streams = np.random.SeedSequence(cfg.seed).spawn(cfg.n_cycles + 1)
    assign_rng = np.random.default_rng(streams[0])
    family_of: dict[str, list[int]] = {}
    for spec in cfg.assemblies:
        counts = stratified_counts(spec.fractions, cfg.n_cycles)
        if spec.outlier:
            counts[int(np.argmax(counts))] -= 1
        fams = []
        for f, cnt in enumerate(counts):
            fams += [f] * cnt
        if spec.outlier:
            fams.append(2)
        family_of[spec.assembly_id] = assign_rng.permutation(fams).tolist()

    grid = axial_positions(cfg.axial_grid_size)
    lo, hi = cfg.bank_range
    profiles, families, truth, decay = [], {}, {}, {}
    cycle_ids = [f"cyc{c + 1:03d}" for c in range(cfg.n_cycles)]
    for c, cyc in enumerate(cycle_ids):
        rng = np.random.default_rng(streams[c + 1])
        bank = float(rng.uniform(lo, hi))
        start = cfg.start_time + timedelta(days=cfg.cycle_days * c)
        for a, spec in enumerate(cfg.assemblies):
            fam = family_of[spec.assembly_id][c]
            offset_min = 0.0 if a == 0 else a * cfg.wire_interval_min + float(rng.uniform(0, 5))
            # whole seconds so timestamps round-trip through ISO text exactly
            stamp = start + timedelta(seconds=round(offset_min * 60.0))
            dt_h = (stamp - start).total_seconds() / 3600.0
            factor = 2.0 ** (-dt_h / cfg.half_life)
            clean = truth_shape(fam, bank, grid, cfg)
            mean_counts = clean * factor
            if cfg.noise_model == "poisson":
                counts = rng.poisson(mean_counts).astype(float)
            else:
                counts = mean_counts + cfg.noise_sigma * rng.standard_normal(len(grid))
                counts = np.maximum(counts, 0.0)
            keep = rng.random(len(grid)) >= cfg.missing_rate
            if keep.sum() < 2:
                keep[:] = True
            idx = np.flatnonzero(keep)
            key = (cyc, spec.assembly_id)
            profiles.append(
                FluxProfile(cyc, spec.assembly_id, bank, stamp, idx, counts[idx],
                            axial_grid_size=cfg.axial_grid_size)
            )
            families[key] = fam
            truth[key] = clean
            decay[key] = factor
    split = assign_split(cycle_ids, IngestConfig(n_predict=cfg.n_predict))
    return SynthResult(CycleDataset(profiles, split), families, truth, decay)


def write_ground_truth(result: SynthResult, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cycle_id", "assembly_id", "family"])
        for p in result.dataset.profiles:
            w.writerow([p.cycle_id, p.assembly_id, result.families[p.key]])


def read_ground_truth(path) -> dict[tuple[str, str], int]:
    with open(path, newline="", encoding="utf-8") as fh:
        return {(r["cycle_id"], r["assembly_id"]): int(r["family"]) for r in csv.DictReader(fh)}


def write_truth_profiles(result: SynthResult, path) -> None:
    """Noise-free profiles in the decay-corrected frame, one row per point."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cycle_id", "assembly_id", "axial_index", "intensity"])
        for p in result.dataset.profiles:
            for i, v in enumerate(result.truth[p.key].tolist()):
                w.writerow([p.cycle_id, p.assembly_id, i, repr(v)])


def read_truth_profiles(path, grid_size: int = AXIAL_GRID_SIZE) -> dict[tuple[str, str], np.ndarray]:
    out: dict[tuple[str, str], np.ndarray] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            key = (r["cycle_id"], r["assembly_id"])
            arr = out.setdefault(key, np.full(grid_size, np.nan))
            arr[int(r["axial_index"])] = float(r["intensity"])
    return out


def config_from_mapping(m: Mapping) -> SynthConfig:
    """Build a config from plain data (e.g. parsed YAML)."""
    m = dict(m)
    if "assemblies" in m:
        m["assemblies"] = tuple(
            a if isinstance(a, AssemblySpec) else AssemblySpec(
                a["assembly_id"], tuple(a.get("fractions", (0.62, 0.38))), bool(a.get("outlier", False))
            )
            for a in m["assemblies"]
        )
    if "start_time" in m and isinstance(m["start_time"], str):
        m["start_time"] = datetime.fromisoformat(m["start_time"])
    if "bank_range" in m:
        m["bank_range"] = tuple(m["bank_range"])
    return SynthConfig(**m)
