"""End-to-end study: synth -> preprocess -> cluster -> train -> predict ->
evaluate -> report.

Every stage reads its inputs from, and writes its outputs under, one run
directory. Each stage checks that its upstream files exist and raises
:class:`StageDependencyError` naming the first missing one. After every
stage ``manifest.txt`` is rewritten with the run configuration and a
SHA-256 per artifact; wall-clock timings live in ``timings.json``, which is
listed as volatile and never hashed.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml

from . import cluster as clus
from . import evalmetrics, gp, mcdnn, preprocess, simindex, synthgen
from .data_model import (
    PREDICT,
    TRAIN,
    AXIAL_GRID_SIZE,
    Clustering,
    IngestConfig,
    load_dataset,
    save_dataset,
)
from .errors import ConfigError, RoutingError, StageDependencyError
from .persistence import load_model, save_model

log = logging.getLogger(__name__)

STAGES = ("synth", "preprocess", "cluster", "train", "predict", "evaluate", "report")
ROUTING_NOTE = (
    "held-out profiles are routed to the cluster whose representative "
    "(k-means centroid or AP exemplar) is nearest in Euclidean distance "
    "to the profile's preprocessed shape vector"
)


@dataclass(frozen=True)
class GpSettings:
    sigma_f: float = 1.0
    length_scale: float = 0.3
    jitter: float = gp.JITTER_FLOOR
    axial_stride: int = 3

    def hyperparams(self) -> gp.GpHyperparams:
        return gp.GpHyperparams(self.sigma_f, self.length_scale, self.jitter)


@dataclass(frozen=True)
class ApSettings:
    preference: float | None = None
    preference_min_factor: float | None = 3.0
    damping: float = 0.9
    max_iter: int = 1000
    convergence_iter: int = 15

    def resolve(self, similarity) -> clus.ApConfig:
        if self.preference is not None:
            pref = float(self.preference)
        elif self.preference_min_factor is not None:
            s = np.asarray(similarity)
            off = s[~np.eye(len(s), dtype=bool)]
            pref = float(self.preference_min_factor * off.min()) if off.size else 0.0
        else:
            pref = None
        return clus.ApConfig(pref, self.damping, self.max_iter, self.convergence_iter)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    synth: synthgen.SynthConfig = field(default_factory=synthgen.SynthConfig)
    split: IngestConfig = field(default_factory=IngestConfig)
    preprocess: preprocess.PreprocessConfig = field(default_factory=preprocess.PreprocessConfig)
    kmeans: clus.KMeansConfig = field(default_factory=clus.KMeansConfig)
    ap: ApSettings = field(default_factory=ApSettings)
    cluster_method: str = "kmeans"
    gp: GpSettings = field(default_factory=GpSettings)
    mlp: mcdnn.MlpConfig = field(default_factory=mcdnn.MlpConfig)
    bump_fraction: float = 0.2
    mean_kind: str = "arithmetic"
    data_dir: str = "data"
    models_dir: str = "models"
    reports_dir: str = "reports"

    def __post_init__(self):
        if self.cluster_method not in ("kmeans", "affinity_propagation"):
            raise ConfigError("cluster.method is 'kmeans' or 'affinity_propagation'")
        if not 0 < self.bump_fraction <= 1:
            raise ConfigError("evaluate.bump_fraction must lie in (0, 1]")
        if self.gp.axial_stride < 1:
            raise ConfigError("gp.axial_stride must be >= 1")
        if self.mean_kind not in simindex.MEANS:
            raise ConfigError(f"mean_kind must be one of {simindex.MEANS}")

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(
            self,
            seed=seed,
            synth=replace(self.synth, seed=seed),
            kmeans=replace(self.kmeans, seed=seed),
            mlp=replace(self.mlp, seed=seed),
        )

    def as_dict(self) -> dict:
        d = asdict(self)
        d["synth"]["start_time"] = self.synth.start_time.isoformat()
        return d


def _section(cls, data: Mapping | None, **extra):
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    data.update(extra)
    return cls(**data)


def config_from_mapping(m: Mapping[str, Any]) -> RunConfig:
    """Build a :class:`RunConfig` from the documented YAML structure."""
    m = dict(m or {})
    allowed = {"seed", "paths", "synth", "split", "preprocess", "kmeans", "ap", "cluster",
               "gp", "mlp", "evaluate"}
    unknown = set(m) - allowed
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    seed = int(m.get("seed", 0))
    paths = dict(m.get("paths") or {})
    synth_map = dict(m.get("synth") or {})
    synth_map.setdefault("seed", seed)
    split = dict(m.get("split") or {})
    if "predict_cycles" in split and split["predict_cycles"] is not None:
        split["predict_cycles"] = tuple(split["predict_cycles"])
    kmeans_map = dict(m.get("kmeans") or {})
    kmeans_map.setdefault("seed", seed)
    mlp_map = dict(m.get("mlp") or {})
    mlp_map.setdefault("seed", seed)
    if "hidden_sizes" in mlp_map:
        mlp_map["hidden_sizes"] = tuple(mlp_map["hidden_sizes"])
    cluster_map = dict(m.get("cluster") or {})
    evaluate_map = dict(m.get("evaluate") or {})
    try:
        return RunConfig(
            seed=seed,
            synth=synthgen.config_from_mapping(synth_map),
            split=_section(IngestConfig, split),
            preprocess=_section(preprocess.PreprocessConfig, m.get("preprocess")),
            kmeans=_section(clus.KMeansConfig, kmeans_map),
            ap=_section(ApSettings, m.get("ap")),
            cluster_method=cluster_map.pop("method", "kmeans"),
            gp=_section(GpSettings, m.get("gp")),
            mlp=_section(mcdnn.MlpConfig, mlp_map),
            bump_fraction=float(evaluate_map.pop("bump_fraction", 0.2)),
            mean_kind=cluster_map.pop("mean_kind", "arithmetic"),
            data_dir=paths.get("data", "data"),
            models_dir=paths.get("models", "models"),
            reports_dir=paths.get("reports", "reports"),
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return config_from_mapping(yaml.safe_load(fh) or {})


def derive_seed(seed: int, *parts) -> int:
    """Stable 63-bit seed for a named task, independent of scheduling order."""
    text = "/".join([str(seed), *map(str, parts)])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little") >> 1


# ---------------------------------------------------------------- layout


class Run:
    """Paths of one run directory."""

    def __init__(self, out, config: RunConfig):
        self.root = Path(out)
        self.config = config
        self.data = self.root / config.data_dir
        self.models = self.root / config.models_dir
        self.reports = self.root / config.reports_dir

    @property
    def dataset_csv(self):
        return self.data / "dataset.csv"

    @property
    def ground_truth_csv(self):
        return self.data / "ground_truth.csv"

    @property
    def truth_csv(self):
        return self.data / "truth_profiles.csv"

    def shapes_csv(self, asm):
        return self.reports / "preprocess" / f"shapes_{asm}.csv"

    def cluster_json(self, asm):
        return self.reports / "cluster" / f"{asm}.json"

    def model_path(self, asm, kind, scope):
        return self.models / asm / f"{kind}_{scope}.flm"

    @property
    def train_index(self):
        return self.models / "index.json"

    @property
    def predictions_csv(self):
        return self.reports / "predict" / "predictions.csv"

    @property
    def routing_csv(self):
        return self.reports / "predict" / "routing.csv"

    @property
    def nrmse_csv(self):
        return self.reports / "evaluate" / "nrmse.csv"

    @property
    def evaluation_json(self):
        return self.reports / "evaluate" / "summary.json"

    @property
    def timings_json(self):
        return self.root / "timings.json"

    @property
    def manifest(self):
        return self.root / "manifest.txt"


def _require(*paths):
    for p in paths:
        if not Path(p).exists():
            raise StageDependencyError(p)


def _write_json(obj, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o).__name__)


def _record_timing(run: Run, section: str, values: dict):
    data = {}
    if run.timings_json.exists():
        data = json.loads(run.timings_json.read_text())
    data[section] = values
    _write_json(data, run.timings_json)


def write_manifest(run: Run) -> Path:
    """Key/value header plus ``artifact <path> sha256:<hex>`` per output file."""
    cfg_text = json.dumps(run.config.as_dict(), sort_keys=True, default=str)
    lines = [
        "format = fluxlattice-manifest 1",
        f"seed = {run.config.seed}",
        f"config_sha256 = {hashlib.sha256(cfg_text.encode()).hexdigest()}",
        f"routing = {ROUTING_NOTE}",
    ]
    for p in sorted(run.root.rglob("*")):
        if not p.is_file() or p == run.manifest:
            continue
        rel = p.relative_to(run.root).as_posix()
        if p == run.timings_json:
            lines.append(f"volatile {rel}")
            continue
        digest = hashlib.sha256(p.read_bytes()).hexdigest()
        lines.append(f"artifact {rel} sha256:{digest}")
    run.manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return run.manifest


def read_manifest(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.startswith("artifact "):
            _, rel, digest = line.split(" ", 2)
            out[rel] = digest
    return out


# ---------------------------------------------------------------- stages


def cmd_synth(run: Run) -> dict:
    result = synthgen.generate(run.config.synth)
    ds = result.dataset
    if run.config.split.predict_cycles is not None or run.config.split.n_predict != run.config.synth.n_predict:
        from .data_model import CycleDataset, assign_split
        ds = CycleDataset(ds.profiles, assign_split(ds.cycles(), run.config.split))
    save_dataset(ds, run.dataset_csv)
    synthgen.write_ground_truth(result, run.ground_truth_csv)
    synthgen.write_truth_profiles(result, run.truth_csv)
    return {"profiles": len(ds), "assemblies": ds.assemblies}


def _load(run: Run):
    _require(run.dataset_csv)
    return load_dataset(run.dataset_csv, run.config.split)


def cmd_preprocess(run: Run) -> dict:
    ds = _load(run)
    corrected = preprocess.decay_correct_dataset(ds, run.config.preprocess.half_life)
    written = {}
    for asm in corrected.assemblies:
        path = run.shapes_csv(asm)
        path.parent.mkdir(parents=True, exist_ok=True)
        profs = corrected.for_assembly(asm)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["cycle_id", "split", *(f"s{i:03d}" for i in range(AXIAL_GRID_SIZE))])
            for p in profs:
                vec = preprocess.shape_vector(p, run.config.preprocess)
                w.writerow([p.cycle_id, ds.split[p.cycle_id], *(repr(float(v)) for v in vec)])
        written[asm] = len(profs)
    return {"shapes": written}


def read_shapes(path) -> tuple[list[str], list[str], np.ndarray]:
    _require(path)
    cycles, splits, rows = [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            cycles.append(row[0])
            splits.append(row[1])
            rows.append([float(v) for v in row[2:]])
    return cycles, splits, np.array(rows)


def _clustering_to_json(c: Clustering) -> dict:
    return {
        "keys": list(c.keys),
        "labels": c.labels.tolist(),
        "method": c.method,
        "representatives": None if c.representatives is None else c.representatives.tolist(),
    }


def clustering_from_json(d: Mapping) -> Clustering:
    reps = d.get("representatives")
    return Clustering(d["keys"], d["labels"], d["method"], None if reps is None else np.array(reps))


def cmd_cluster(run: Run) -> dict:
    ds = _load(run)
    cfg = run.config
    truth = synthgen.read_ground_truth(run.ground_truth_csv) if run.ground_truth_csv.exists() else None
    summary = {}
    primary = {}
    for asm in ds.assemblies:
        cycles, splits, shapes = read_shapes(run.shapes_csv(asm))
        sel = [i for i, s in enumerate(splits) if s == TRAIN]
        keys = [cycles[i] for i in sel]
        x = shapes[sel]
        ap_cfg = cfg.ap.resolve(clus.similarity_matrix(x))
        c_km, c_ap, report = clus.cluster_protocol(x, cfg.kmeans, ap_cfg, keys, cfg.mean_kind)
        report["ap_preference"] = ap_cfg.preference
        if truth is not None:
            from .data_model import canonical_labels
            gt = Clustering(keys, canonical_labels([truth[(k, asm)] for k in keys]), "ground_truth")
            report["vs_ground_truth"] = {
                "kmeans": simindex.agreement(c_km, gt, cfg.mean_kind),
                "affinity_propagation": simindex.agreement(c_ap, gt, cfg.mean_kind),
            }
        chosen = c_km if cfg.cluster_method == "kmeans" else c_ap
        primary[asm] = chosen
        _write_json(
            {
                "assembly_id": asm,
                "method": cfg.cluster_method,
                "kmeans": _clustering_to_json(c_km),
                "affinity_propagation": _clustering_to_json(c_ap),
                "report": report,
            },
            run.cluster_json(asm),
        )
        summary[asm] = {
            "k": report["k"],
            "sizes": report["sizes"],
            "scores": report["scores"],
            **({"vs_ground_truth": report["vs_ground_truth"]} if "vs_ground_truth" in report else {}),
        }
    if len(primary) >= 2:
        agree = simindex.cross_assembly_agreement(primary, cfg.mean_kind)
        for index in ("ARI", "NMI", "AMI"):
            simindex.write_agreement_csv(agree, index, run.reports / "cluster" / f"agreement_{index}.csv")
    _write_json(summary, run.reports / "cluster" / "summary.json")
    return summary


def load_primary_clustering(run: Run, asm: str) -> Clustering:
    _require(run.cluster_json(asm))
    d = json.loads(run.cluster_json(asm).read_text())
    return clustering_from_json(d[d["method"]])


# ---- training


def _axial_noise_profile(pts: preprocess.RegressionPoints, grid=AXIAL_GRID_SIZE) -> list[float]:
    out = np.full(grid, np.nan)
    idx = pts.axial.astype(int)
    for i in np.unique(idx):
        out[i] = float(np.median(pts.noise_sd[idx == i]))
    present = np.isfinite(out)
    if not present.any():
        return [0.0] * grid
    out[~present] = np.interp(np.flatnonzero(~present), np.flatnonzero(present), out[present])
    return out.tolist()


def _scaled_inputs(pts: preprocess.RegressionPoints):
    raw = np.column_stack([pts.bank, pts.axial])
    mu = raw.mean(axis=0)
    sd = raw.std(axis=0)
    sd[sd == 0] = 1.0
    return (raw - mu) / sd, mu, sd


def _fit_pair(profiles, cfg: RunConfig, asm: str, scope: str, seed: int):
    pts = preprocess.regression_points(profiles)
    X, mu, sd = _scaled_inputs(pts)
    meta = {
        "assembly_id": asm,
        "scope": scope,
        "input_mean": mu.tolist(),
        "input_std": sd.tolist(),
        "axial_noise": _axial_noise_profile(pts),
        "n_profiles": len(profiles),
        "cycles": sorted({p.cycle_id for p in profiles}),
    }
    sel = (pts.axial.astype(int) % cfg.gp.axial_stride) == 0
    t0 = time.perf_counter()
    gmodel = gp.gp_fit(X[sel], pts.y[sel], pts.noise_sd[sel], cfg.gp.hyperparams(),
                       model_tag=f"gp/{asm}/{scope}", meta=meta)
    gp_time = time.perf_counter() - t0
    mlp_cfg = replace(cfg.mlp, seed=derive_seed(seed, "mlp", asm, scope))
    mmodel, hist = mcdnn.train(X, pts.y, mlp_cfg, model_tag=f"mlp/{asm}/{scope}")
    mmodel.meta = dict(meta, split_sizes=list(hist.split_sizes), test_mse=hist.test_mse)
    return gmodel, mmodel, hist, gp_time


def _train_assembly(args):
    run_root, cfg, asm = args
    run = Run(run_root, cfg)
    ds = preprocess.decay_correct_dataset(_load(run), cfg.preprocess.half_life)
    clustering = load_primary_clustering(run, asm)
    train_profiles = ds.for_assembly(asm, TRAIN)
    by_cycle = {p.cycle_id: p for p in train_profiles}
    scopes = {"pooled": train_profiles}
    for c in range(clustering.k):
        scopes[f"c{c}"] = [by_cycle[k] for k in clustering.members(c)]
    info = {"gp_fit_seconds": {}, "models": {}}
    for scope, profs in scopes.items():
        gmodel, mmodel, hist, gp_time = _fit_pair(profs, cfg, asm, scope, cfg.seed)
        save_model(gmodel, run.model_path(asm, "gp", scope))
        save_model(mmodel, run.model_path(asm, "mlp", scope))
        evalmetrics.write_rows_csv(hist.to_rows(), run.models / asm / f"mlp_{scope}_history.csv",
                                   ["epoch", "train_loss", "val_loss"])
        info["gp_fit_seconds"][scope] = gp_time
        info["models"][scope] = {"n_profiles": len(profs), "gp_points": gmodel.n_train,
                                 "mlp_points": int(sum(hist.split_sizes))}
    return asm, info


def _map(fn, items, jobs):
    if jobs and jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(fn, items))
    return [fn(i) for i in items]


def cmd_train(run: Run, jobs: int = 1) -> dict:
    ds = _load(run)
    for asm in ds.assemblies:
        _require(run.cluster_json(asm))
    results = _map(_train_assembly, [(str(run.root), run.config, asm) for asm in ds.assemblies], jobs)
    index = {asm: {"scopes": sorted(info["models"]), "models": info["models"]} for asm, info in results}
    _write_json(index, run.train_index)
    _record_timing(run, "train", {asm: info["gp_fit_seconds"] for asm, info in results})
    return index


# ---- prediction


def route(shape, clustering: Clustering) -> tuple[int, np.ndarray]:
    """Nearest representative (lowest index on ties)."""
    reps = clustering.representatives
    shape = np.asarray(shape, dtype=float)
    if reps is None or len(reps) == 0:
        raise RoutingError("clustering has no representatives")
    if shape.size == 0 or not np.all(np.isfinite(shape)):
        raise RoutingError("cannot route an empty or non-finite profile")
    d = np.sqrt(((reps - shape[None, :]) ** 2).sum(axis=1))
    return int(np.argmin(d)), d


def _query(model_meta, bank, grid=AXIAL_GRID_SIZE):
    raw = np.column_stack([np.full(grid, bank), np.arange(grid, dtype=float)])
    return (raw - np.asarray(model_meta["input_mean"])) / np.asarray(model_meta["input_std"])


def _predict_assembly(args):
    run_root, cfg, asm = args
    run = Run(run_root, cfg)
    ds = _load(run)
    clustering = load_primary_clustering(run, asm)
    cycles, splits, shapes = read_shapes(run.shapes_csv(asm))
    shape_of = dict(zip(cycles, shapes))
    held = ds.for_assembly(asm, PREDICT)
    models = {}
    for scope in ["pooled"] + [f"c{c}" for c in range(clustering.k)]:
        for kind in ("gp", "mlp"):
            _require(run.model_path(asm, kind, scope))
            models[(kind, scope)] = load_model(run.model_path(asm, kind, scope))
    rows, routing = [], []
    gp_predict_seconds = {"pooled": 0.0, "clustered": 0.0}
    for p in held:
        c, dists = route(shape_of[p.cycle_id], clustering)
        routing.append({"assembly_id": asm, "cycle_id": p.cycle_id, "cluster": c,
                        **{f"dist_c{j}": float(d) for j, d in enumerate(dists)}})
        for scope_label, scope in (("pooled", "pooled"), ("clustered", f"c{c}")):
            g = models[("gp", scope)]
            X = _query(g.meta, p.bank_position)
            t0 = time.perf_counter()
            mean, var = gp.gp_predict_var(g, X, include_noise=True, noise_sd_star=np.asarray(g.meta["axial_noise"]))
            gp_predict_seconds[scope_label] += time.perf_counter() - t0
            _, var_f = gp.gp_predict_var(g, X)
            m = models[("mlp", scope)]
            Xm = _query(m.meta, p.bank_position)
            mc_seed = derive_seed(cfg.seed, "mc", asm, p.cycle_id, scope)
            m_mean, m_std = mcdnn.mc_predict_batch(m, Xm, cfg.mlp.mc_passes, mc_seed)
            for kind, mu, sd, sd_f in (("gp", mean, np.sqrt(var), np.sqrt(var_f)), ("mlp", m_mean, m_std, m_std)):
                for i in range(AXIAL_GRID_SIZE):
                    rows.append({
                        "assembly_id": asm, "cycle_id": p.cycle_id, "model": kind, "scope": scope_label,
                        "cluster": c if scope_label == "clustered" else -1, "axial_index": i,
                        "mean": float(mu[i]), "std": float(sd[i]), "std_latent": float(sd_f[i]),
                        "ci95_low": float(mu[i] - 1.96 * sd[i]), "ci95_high": float(mu[i] + 1.96 * sd[i]),
                    })
    return asm, rows, routing, gp_predict_seconds


PREDICTION_COLUMNS = ["assembly_id", "cycle_id", "model", "scope", "cluster", "axial_index",
                      "mean", "std", "std_latent", "ci95_low", "ci95_high"]


def cmd_predict(run: Run, jobs: int = 1) -> dict:
    ds = _load(run)
    _require(run.train_index)
    results = _map(_predict_assembly, [(str(run.root), run.config, asm) for asm in ds.assemblies], jobs)
    rows, routing, timing = [], [], {}
    for asm, r, rt, t in results:
        rows += r
        routing += rt
        timing[asm] = t
    evalmetrics.write_rows_csv(rows, run.predictions_csv, PREDICTION_COLUMNS)
    cols = ["assembly_id", "cycle_id", "cluster"] + sorted({k for r in routing for k in r if k.startswith("dist_")})
    evalmetrics.write_rows_csv(routing, run.routing_csv, cols)
    _record_timing(run, "predict_gp", timing)
    return {"predictions": len(rows), "routed": len(routing)}


def read_predictions(path) -> dict:
    """``{(asm, cycle, model, scope): {"mean","std","std_latent","lo","hi","cluster"}}``."""
    _require(path)
    acc: dict = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            key = (r["assembly_id"], r["cycle_id"], r["model"], r["scope"])
            d = acc.setdefault(key, {n: np.full(AXIAL_GRID_SIZE, np.nan)
                                     for n in ("mean", "std", "std_latent", "ci95_low", "ci95_high")})
            d["cluster"] = int(r["cluster"])
            i = int(r["axial_index"])
            for n in ("mean", "std", "std_latent", "ci95_low", "ci95_high"):
                d[n][i] = float(r[n])
    return acc


# ---- evaluation


def held_out_targets(run: Run):
    """Measured (z-scored, NaN-gapped) and, if available, truth profiles per held-out key."""
    ds = preprocess.decay_correct_dataset(_load(run), run.config.preprocess.half_life)
    truth_raw = synthgen.read_truth_profiles(run.truth_csv) if run.truth_csv.exists() else {}
    out = {}
    for asm in ds.assemblies:
        for p in ds.for_assembly(asm, PREDICT):
            y, _, mean, scale = preprocess.profile_targets(p)
            meas = np.full(AXIAL_GRID_SIZE, np.nan)
            meas[p.axial_index] = y
            truth = None
            if p.key in truth_raw:
                truth = (truth_raw[p.key] - mean) / scale
            floor = evalmetrics.noise_floor_from_raw(y, run.config.preprocess.sg_window, run.config.preprocess.sg_polyorder)
            out[(asm, p.cycle_id)] = {"measured": meas, "truth": truth, "noise_floor": floor}
    return out


def cmd_evaluate(run: Run) -> dict:
    preds = read_predictions(run.predictions_csv)
    targets = held_out_targets(run)
    n_bump = int(round(run.config.bump_fraction * AXIAL_GRID_SIZE))
    bump = np.arange(AXIAL_GRID_SIZE - n_bump, AXIAL_GRID_SIZE)
    rows = []
    for (asm, cyc), tgt in sorted(targets.items()):
        for model in ("gp", "mlp"):
            for scope in ("pooled", "clustered"):
                pr = preds.get((asm, cyc, model, scope))
                if pr is None:
                    raise StageDependencyError(f"{run.predictions_csv} [{asm} {cyc} {model} {scope}]")
                row = {
                    "assembly_id": asm, "cycle_id": cyc, "model": model, "scope": scope,
                    "cluster": pr["cluster"],
                    "nrmse": evalmetrics.nrmse(pr["mean"], tgt["measured"]),
                    "bump_nrmse": evalmetrics.region_nrmse(pr["mean"], tgt["measured"], bump),
                    "noise_floor": tgt["noise_floor"],
                    "mean_std": float(np.mean(pr["std"])),
                    "coverage_truth": float("nan"),
                    "coverage_measured": evalmetrics.coverage_from_arrays(pr["mean"], pr["std"], tgt["measured"]),
                }
                if tgt["truth"] is not None:
                    row["coverage_truth"] = evalmetrics.coverage_from_arrays(pr["mean"], pr["std"], tgt["truth"])
                rows.append(row)
    evalmetrics.write_rows_csv(rows, run.nrmse_csv)
    summary = summarize_evaluation(rows)
    _write_json(summary, run.evaluation_json)
    box = {
        f"{model}/{scope}/{asm}": evalmetrics.box_stats(
            [r["nrmse"] for r in rows if r["model"] == model and r["scope"] == scope and r["assembly_id"] == asm]
        ).as_dict()
        for model in ("gp", "mlp") for scope in ("pooled", "clustered")
        for asm in sorted({r["assembly_id"] for r in rows})
    }
    box.update({
        f"noise_floor/{asm}": evalmetrics.box_stats(
            [r["noise_floor"] for r in rows if r["assembly_id"] == asm and r["model"] == "gp" and r["scope"] == "pooled"]
        ).as_dict()
        for asm in sorted({r["assembly_id"] for r in rows})
    })
    _write_json(box, run.reports / "evaluate" / "box_stats.json")
    return summary


def summarize_evaluation(rows: list[dict]) -> dict:
    """Pooled-vs-clustered comparison per model.

    A cycle counts as improved when its NRMSE averaged over assemblies is
    lower for the clustered models. Bump reduction compares the mean
    bump-region NRMSE over all held-out profiles.
    """
    out = {}
    cycles = sorted({r["cycle_id"] for r in rows})
    for model in ("gp", "mlp"):
        sel = {s: [r for r in rows if r["model"] == model and r["scope"] == s] for s in ("pooled", "clustered")}
        per_cycle = {}
        for s, rs in sel.items():
            per_cycle[s] = {c: float(np.mean([r["nrmse"] for r in rs if r["cycle_id"] == c])) for c in cycles}
        improved = [c for c in cycles if per_cycle["clustered"][c] < per_cycle["pooled"][c]]
        pair_improved = sum(
            1 for a, b in zip(sel["pooled"], sel["clustered"]) if b["nrmse"] < a["nrmse"]
        )
        bump_p = float(np.mean([r["bump_nrmse"] for r in sel["pooled"]]))
        bump_c = float(np.mean([r["bump_nrmse"] for r in sel["clustered"]]))
        out[model] = {
            "mean_nrmse": {s: float(np.mean([r["nrmse"] for r in rs])) for s, rs in sel.items()},
            "per_cycle_nrmse": per_cycle,
            "fraction_cycles_improved": len(improved) / len(cycles) if cycles else float("nan"),
            "fraction_profiles_improved": pair_improved / len(sel["pooled"]) if sel["pooled"] else float("nan"),
            "bump_nrmse": {"pooled": bump_p, "clustered": bump_c},
            "bump_reduction": 1.0 - bump_c / bump_p if bump_p > 0 else float("nan"),
            "coverage_truth": {s: float(np.nanmean([r["coverage_truth"] for r in rs])) if rs else float("nan")
                               for s, rs in sel.items()},
            "mean_std": {s: float(np.mean([r["mean_std"] for r in rs])) for s, rs in sel.items()},
        }
    floors = [r["noise_floor"] for r in rows if r["model"] == "gp" and r["scope"] == "pooled"]
    out["noise_floor"] = {"mean": float(np.mean(floors)), "min": float(np.min(floors)), "max": float(np.max(floors))}
    out["routing"] = ROUTING_NOTE
    return out


def gp_speedup(run: Run) -> dict:
    """Pooled / clustered GP wall time (fit + held-out prediction) per assembly."""
    _require(run.timings_json)
    t = json.loads(run.timings_json.read_text())
    out = {}
    for asm, fits in t["train"].items():
        pooled = fits["pooled"] + t["predict_gp"][asm]["pooled"]
        clustered = sum(v for k, v in fits.items() if k != "pooled") + t["predict_gp"][asm]["clustered"]
        out[asm] = {"pooled_s": pooled, "clustered_s": clustered, "ratio": pooled / clustered}
    total_p = sum(v["pooled_s"] for v in out.values())
    total_c = sum(v["clustered_s"] for v in out.values())
    out["total"] = {"pooled_s": total_p, "clustered_s": total_c, "ratio": total_p / total_c}
    return out


# ---- report


def cmd_report(run: Run) -> dict:
    _require(run.evaluation_json, run.nrmse_csv)
    preds = read_predictions(run.predictions_csv)
    targets = held_out_targets(run)
    rows = []
    for (asm, cyc), tgt in sorted(targets.items()):
        for i in range(AXIAL_GRID_SIZE):
            row = {"assembly_id": asm, "cycle_id": cyc, "axial_index": i,
                   "measured": float(tgt["measured"][i]),
                   "truth": float(tgt["truth"][i]) if tgt["truth"] is not None else float("nan")}
            for model in ("gp", "mlp"):
                for scope in ("pooled", "clustered"):
                    pr = preds[(asm, cyc, model, scope)]
                    tag = f"{model}_{scope}"
                    row[f"{tag}_mean"] = float(pr["mean"][i])
                    row[f"{tag}_ci95_low"] = float(pr["ci95_low"][i])
                    row[f"{tag}_ci95_high"] = float(pr["ci95_high"][i])
            rows.append(row)
    evalmetrics.write_rows_csv(rows, run.reports / "report" / "profiles.csv")
    box = json.loads((run.reports / "evaluate" / "box_stats.json").read_text())
    box_rows = [{"group": g, **{k: v for k, v in b.items() if k != "outliers"},
                 "outliers": ";".join(repr(o) for o in b["outliers"])} for g, b in sorted(box.items())]
    evalmetrics.write_rows_csv(box_rows, run.reports / "report" / "box_stats.csv")
    summary = json.loads(run.evaluation_json.read_text())
    cluster_summary = json.loads((run.reports / "cluster" / "summary.json").read_text())
    report = {"clustering": cluster_summary, "evaluation": summary, "routing": ROUTING_NOTE}
    _write_json(report, run.reports / "report" / "summary.json")
    if run.timings_json.exists():
        _record_timing(run, "gp_speedup", gp_speedup(run))
    return report


def run_stage(stage: str, run: Run, jobs: int = 1) -> dict:
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}")
    run.root.mkdir(parents=True, exist_ok=True)
    fn = {
        "synth": cmd_synth,
        "preprocess": cmd_preprocess,
        "cluster": cmd_cluster,
        "train": lambda r: cmd_train(r, jobs),
        "predict": lambda r: cmd_predict(r, jobs),
        "evaluate": cmd_evaluate,
        "report": cmd_report,
    }[stage]
    t0 = time.perf_counter()
    result = fn(run)
    log.info("stage %s finished in %.1fs", stage, time.perf_counter() - t0)
    write_manifest(run)
    return result


def run_all(run: Run, jobs: int = 1) -> dict:
    out = {}
    for stage in STAGES:
        out[stage] = run_stage(stage, run, jobs)
    return out
