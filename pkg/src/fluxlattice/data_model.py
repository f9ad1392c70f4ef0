"""Domain types and CSV ingestion for axial flux-profile campaigns.

One CSV row is one measured point::

    cycle_id,assembly_id,bank_position,scan_start_time,axial_index,count

Rows sharing ``(cycle_id, assembly_id)`` form one :class:`FluxProfile`.
The train/predict split is not part of the row schema; it is stored in a
``<name>.split.csv`` sidecar (``cycle_id,split``) when present, otherwise
derived from :class:`IngestConfig`.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import IntegrityError, ParseError, ValidationError

AXIAL_GRID_SIZE = 180
CSV_COLUMNS = (
    "cycle_id",
    "assembly_id",
    "bank_position",
    "scan_start_time",
    "axial_index",
    "count",
)
SPLIT_COLUMNS = ("cycle_id", "split")
TRAIN, PREDICT = "train", "predict"
CLUSTER_METHODS = ("kmeans", "affinity_propagation", "ground_truth")
Z95 = 1.96


def _frozen(a, dtype) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True).reshape(-1)
    arr.setflags(write=False)
    return arr


def parse_timestamp(text: str) -> datetime:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    return datetime.fromisoformat(text)


@dataclass(frozen=True, eq=False)
class FluxProfile:
    """One wire scan of one assembly in one cycle.

    ``axial_index`` and ``counts`` are parallel read-only arrays; points
    that were not measured are simply absent.
    """

    cycle_id: str
    assembly_id: str
    bank_position: float
    scan_start_time: datetime
    axial_index: np.ndarray
    counts: np.ndarray
    normalized: bool = False
    axial_grid_size: int = AXIAL_GRID_SIZE

    def __post_init__(self):
        idx = _frozen(self.axial_index, np.int64)
        cnt = _frozen(self.counts, np.float64)
        object.__setattr__(self, "axial_index", idx)
        object.__setattr__(self, "counts", cnt)
        object.__setattr__(self, "bank_position", float(self.bank_position))
        if idx.shape != cnt.shape:
            raise ValidationError("axial_index and counts differ in length")
        if len(idx) > self.axial_grid_size:
            raise ValidationError("more points than the axial grid holds")
        if len(idx) and (idx[0] < 0 or idx[-1] >= self.axial_grid_size):
            raise ValidationError(
                f"axial index outside [0, {self.axial_grid_size})"
            )
        if np.any(np.diff(idx) <= 0):
            raise ValidationError("axial indices must be strictly increasing")
        if not np.all(np.isfinite(cnt)):
            raise ValidationError("non-finite count")
        if not self.normalized and np.any(cnt < 0):
            raise ValidationError(
                f"negative count in profile {self.key}"
            )

    @property
    def key(self) -> tuple[str, str]:
        return (self.cycle_id, self.assembly_id)

    def dense(self) -> np.ndarray:
        """Counts on the full grid, NaN where a point is missing."""
        out = np.full(self.axial_grid_size, np.nan)
        out[self.axial_index] = self.counts
        return out

    def replace(self, **changes) -> "FluxProfile":
        fields = {
            "cycle_id": self.cycle_id,
            "assembly_id": self.assembly_id,
            "bank_position": self.bank_position,
            "scan_start_time": self.scan_start_time,
            "axial_index": self.axial_index,
            "counts": self.counts,
            "normalized": self.normalized,
            "axial_grid_size": self.axial_grid_size,
        }
        fields.update(changes)
        return FluxProfile(**fields)

    def __eq__(self, other):
        if not isinstance(other, FluxProfile):
            return NotImplemented
        return (
            self.key == other.key
            and self.bank_position == other.bank_position
            and self.scan_start_time == other.scan_start_time
            and self.normalized == other.normalized
            and self.axial_grid_size == other.axial_grid_size
            and np.array_equal(self.axial_index, other.axial_index)
            and np.array_equal(self.counts, other.counts)
        )

    __hash__ = None


@dataclass(frozen=True)
class CycleDataset:
    profiles: tuple[FluxProfile, ...]
    split: Mapping[str, str]

    def __post_init__(self):
        object.__setattr__(self, "profiles", tuple(self.profiles))
        object.__setattr__(self, "split", dict(self.split))
        seen = set()
        for p in self.profiles:
            if p.key in seen:
                raise IntegrityError(f"duplicate profile {p.key}")
            seen.add(p.key)
            if p.cycle_id not in self.split:
                raise ValidationError(f"cycle {p.cycle_id!r} missing from split")
        for cyc, tag in self.split.items():
            if tag not in (TRAIN, PREDICT):
                raise ValidationError(f"cycle {cyc!r}: unknown split {tag!r}")

    def __len__(self):
        return len(self.profiles)

    @property
    def assemblies(self) -> list[str]:
        return sorted({p.assembly_id for p in self.profiles})

    def cycles(self) -> list[str]:
        """Cycle ids in historical order (earliest scan first)."""
        first: dict[str, datetime] = {}
        for p in self.profiles:
            t = first.get(p.cycle_id)
            if t is None or p.scan_start_time < t:
                first[p.cycle_id] = p.scan_start_time
        return sorted(first, key=lambda c: (first[c], c))

    def for_assembly(self, assembly_id: str, split: str | None = None) -> list[FluxProfile]:
        order = {c: i for i, c in enumerate(self.cycles())}
        out = [
            p
            for p in self.profiles
            if p.assembly_id == assembly_id
            and (split is None or self.split[p.cycle_id] == split)
        ]
        return sorted(out, key=lambda p: order[p.cycle_id])

    def get(self, cycle_id: str, assembly_id: str) -> FluxProfile:
        for p in self.profiles:
            if p.key == (cycle_id, assembly_id):
                return p
        raise KeyError((cycle_id, assembly_id))


@dataclass(frozen=True, eq=False)
class Clustering:
    """A partition of profile keys into clusters ``0..k-1``."""

    keys: tuple[str, ...]
    labels: np.ndarray
    method: str
    representatives: np.ndarray | None = None

    def __post_init__(self):
        keys = tuple(str(k) for k in self.keys)
        labels = _frozen(self.labels, np.int64)
        object.__setattr__(self, "keys", keys)
        object.__setattr__(self, "labels", labels)
        if self.method not in CLUSTER_METHODS:
            raise ValidationError(f"unknown clustering method {self.method!r}")
        if len(keys) != len(labels):
            raise ValidationError("keys and labels differ in length")
        if len(set(keys)) != len(keys):
            raise ValidationError("each profile key must appear exactly once")
        if len(labels):
            present = np.unique(labels)
            if present[0] != 0 or not np.array_equal(present, np.arange(len(present))):
                raise ValidationError("cluster indices must be 0..k-1, all non-empty")
        if self.representatives is not None:
            reps = np.array(self.representatives, dtype=float, copy=True)
            if reps.ndim != 2 or reps.shape[0] != self.k:
                raise ValidationError("one representative row per cluster required")
            reps.setflags(write=False)
            object.__setattr__(self, "representatives", reps)

    @property
    def k(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    @property
    def sizes(self) -> list[int]:
        return np.bincount(self.labels, minlength=self.k).tolist()

    def label_of(self, key: str) -> int:
        return int(self.labels[self.keys.index(key)])

    def members(self, cluster: int) -> list[str]:
        return [k for k, l in zip(self.keys, self.labels) if l == cluster]

    def restrict(self, keys: Iterable[str]) -> "Clustering":
        """Sub-partition on ``keys`` with labels renumbered by first appearance."""
        pos = {k: i for i, k in enumerate(self.keys)}
        keys = list(keys)
        raw = np.array([self.labels[pos[k]] for k in keys], dtype=np.int64)
        return Clustering(keys, canonical_labels(raw), self.method)

    def __eq__(self, other):
        if not isinstance(other, Clustering):
            return NotImplemented
        reps_equal = (self.representatives is None and other.representatives is None) or (
            self.representatives is not None
            and other.representatives is not None
            and np.array_equal(self.representatives, other.representatives)
        )
        return (
            self.keys == other.keys
            and self.method == other.method
            and np.array_equal(self.labels, other.labels)
            and reps_equal
        )

    __hash__ = None


def canonical_labels(labels) -> np.ndarray:
    """Renumber labels ``0..k-1`` in order of first appearance."""
    labels = np.asarray(labels)
    mapping: dict = {}
    out = np.empty(len(labels), dtype=np.int64)
    for i, l in enumerate(labels.tolist()):
        out[i] = mapping.setdefault(l, len(mapping))
    return out


@dataclass(frozen=True)
class UqPrediction:
    bank_position: float
    axial_location: float
    mean: float
    std: float
    model_tag: str
    ci95_low: float = field(init=False)
    ci95_high: float = field(init=False)

    def __post_init__(self):
        if not (self.std >= 0):
            raise ValidationError("std must be non-negative")
        half = Z95 * self.std
        object.__setattr__(self, "ci95_low", self.mean - half)
        object.__setattr__(self, "ci95_high", self.mean + half)

    @property
    def query(self) -> tuple[float, float]:
        return (self.bank_position, self.axial_location)


@dataclass(frozen=True)
class IngestConfig:
    """How a flat CSV becomes a :class:`CycleDataset`.

    If ``predict_cycles`` is given those cycles are held out; otherwise the
    last ``n_predict`` cycles in historical order are. A split sidecar next
    to the CSV takes precedence over both.
    """

    n_predict: int = 10
    predict_cycles: tuple[str, ...] | None = None
    axial_grid_size: int = AXIAL_GRID_SIZE
    use_split_sidecar: bool = True


def split_sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".split.csv")


def assign_split(cycles: Sequence[str], config: IngestConfig) -> dict[str, str]:
    if config.predict_cycles is not None:
        held = set(config.predict_cycles)
    else:
        n = max(0, min(config.n_predict, len(cycles)))
        held = set(cycles[len(cycles) - n:])
    return {c: PREDICT if c in held else TRAIN for c in cycles}


def _read_split(path: Path) -> dict[str, str]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != SPLIT_COLUMNS:
            raise ParseError(f"split sidecar header must be {','.join(SPLIT_COLUMNS)}", 1)
        out = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise ParseError("expected 2 fields", lineno)
            out[row[0]] = row[1]
        return out


def load_dataset(path, schema: IngestConfig | None = None) -> CycleDataset:
    """Read a point-per-row CSV into a validated :class:`CycleDataset`."""
    schema = schema or IngestConfig()
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    groups: dict[tuple[str, str], dict] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_COLUMNS:
            raise ParseError(f"header must be {','.join(CSV_COLUMNS)}", 1)
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(CSV_COLUMNS):
                raise ParseError(f"expected {len(CSV_COLUMNS)} fields, got {len(row)}", lineno)
            cyc, asm, bank_s, time_s, idx_s, cnt_s = (f.strip() for f in row)
            try:
                bank = float(bank_s)
                stamp = parse_timestamp(time_s)
                idx = int(idx_s)
                cnt = float(cnt_s)
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
            if not cyc or not asm:
                raise ParseError("empty cycle_id or assembly_id", lineno)
            if not (math.isfinite(bank) and math.isfinite(cnt)):
                raise ParseError("non-finite number", lineno)
            if cnt < 0:
                raise ValidationError(f"line {lineno}: negative count {cnt}")
            if not 0 <= idx < schema.axial_grid_size:
                raise ValidationError(f"line {lineno}: axial_index {idx} out of range")
            g = groups.get((cyc, asm))
            if g is None:
                g = groups[(cyc, asm)] = {"bank": bank, "time": stamp, "points": {}}
            elif g["bank"] != bank or g["time"] != stamp:
                raise ValidationError(
                    f"line {lineno}: bank_position/scan_start_time differ within profile {(cyc, asm)}"
                )
            if idx in g["points"]:
                raise IntegrityError(
                    f"line {lineno}: duplicate point {(cyc, asm, idx)}"
                )
            g["points"][idx] = cnt

    profiles = []
    for (cyc, asm), g in groups.items():
        idx = sorted(g["points"])
        profiles.append(
            FluxProfile(
                cycle_id=cyc,
                assembly_id=asm,
                bank_position=g["bank"],
                scan_start_time=g["time"],
                axial_index=idx,
                counts=[g["points"][i] for i in idx],
                axial_grid_size=schema.axial_grid_size,
            )
        )
    sidecar = split_sidecar_path(path)
    if schema.use_split_sidecar and sidecar.exists():
        split = _read_split(sidecar)
    else:
        probe = CycleDataset(profiles, {p.cycle_id: TRAIN for p in profiles})
        split = assign_split(probe.cycles(), schema)
    return CycleDataset(profiles, split)


def save_dataset(dataset: CycleDataset, path, write_split: bool = True) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for p in dataset.profiles:
            stamp = p.scan_start_time.isoformat()
            for i, c in zip(p.axial_index.tolist(), p.counts.tolist()):
                w.writerow([p.cycle_id, p.assembly_id, repr(p.bank_position), stamp, i, repr(c)])
    if write_split:
        with open(split_sidecar_path(path), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SPLIT_COLUMNS)
            for cyc in sorted(dataset.split):
                w.writerow([cyc, dataset.split[cyc]])
