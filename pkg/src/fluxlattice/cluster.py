"""Partitional clustering of shape vectors: k-means and Affinity Propagation."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .data_model import Clustering, canonical_labels
from .errors import ConfigError, ValidationError
from . import simindex


@dataclass(frozen=True)
class KMeansConfig:
    k: int = 2
    restarts: int = 20
    max_iter: int = 300
    tol: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.restarts < 1:
            raise ConfigError("restarts must be >= 1")
        if self.max_iter < 1:
            raise ConfigError("max_iter must be >= 1")
        if not self.tol > 0:
            raise ConfigError("tol must be positive")


@dataclass(frozen=True)
class ApConfig:
    preference: float | None = None  # None: median off-diagonal similarity
    damping: float = 0.9
    max_iter: int = 1000
    convergence_iter: int = 15
    tie_break_seed: int | None = 0  # None disables the tie-breaking perturbation

    def __post_init__(self):
        if not 0.5 <= self.damping < 1:
            raise ConfigError("damping must lie in [0.5, 1)")
        if self.max_iter < 1 or self.convergence_iter < 1:
            raise ConfigError("max_iter and convergence_iter must be >= 1")


@dataclass(frozen=True)
class KMeansResult:
    clustering: Clustering
    inertia: float
    n_iter: int
    inertia_history: tuple[float, ...] = field(repr=False)


@dataclass(frozen=True)
class ApResult:
    clustering: Clustering
    exemplars: tuple[int, ...]
    converged: bool
    n_iter: int


def _check_points(points) -> np.ndarray:
    x = np.asarray(points, dtype=float)
    if x.ndim != 2:
        raise ValidationError("points must be an N x D matrix")
    if not np.all(np.isfinite(x)):
        raise ValidationError("points contain non-finite entries")
    return x


def _keys(keys, n) -> tuple[str, ...]:
    if keys is None:
        return tuple(str(i) for i in range(n))
    keys = tuple(str(k) for k in keys)
    if len(keys) != n:
        raise ValidationError("one key per point required")
    return keys


def _sq_dist(x, c) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeanspp(x, k, rng) -> np.ndarray:
    n = len(x)
    chosen = [int(rng.integers(n))]
    d2 = ((x - x[chosen[0]]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            # all remaining points coincide with a centroid
            free = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(free))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((x - x[nxt]) ** 2).sum(1))
    return x[chosen].copy()


def _repair_empty(x, labels, d_own, k):
    """Move the farthest point of a multi-member cluster into each empty cluster."""
    counts = np.bincount(labels, minlength=k)
    for empty in np.flatnonzero(counts == 0):
        movable = counts[labels] > 1
        cand = np.where(movable, d_own, -np.inf)
        i = int(np.argmax(cand))
        counts[labels[i]] -= 1
        labels[i] = empty
        counts[empty] = 1
        d_own[i] = 0.0
    return labels


def _lloyd(x, centroids, max_iter, tol):
    k = len(centroids)
    history = []
    n_iter = 0
    labels = None
    for n_iter in range(1, max_iter + 1):
        d = _sq_dist(x, centroids)
        labels = np.argmin(d, axis=1)  # ties -> lowest cluster index
        d_own = d[np.arange(len(x)), labels]
        labels = _repair_empty(x, labels, d_own, k)
        new = np.vstack([x[labels == j].mean(0) for j in range(k)])
        history.append(float(((x - new[labels]) ** 2).sum()))
        shift = float(np.sqrt(((new - centroids) ** 2).sum()))
        centroids = new
        if shift <= tol:
            break
    return labels, centroids, history, n_iter


def kmeans_fit(points, config: KMeansConfig, keys: Sequence[str] | None = None) -> KMeansResult:
    """k-means with k-means++ seeding; the restart with least inertia wins.

    Each restart draws from its own stream spawned from ``config.seed``.
    """
    x = _check_points(points)
    n = len(x)
    if config.k > n:
        raise ConfigError(f"k={config.k} exceeds the number of points ({n})")
    streams = np.random.SeedSequence(config.seed).spawn(config.restarts)
    best = None
    for ss in streams:
        rng = np.random.default_rng(ss)
        init = _kmeanspp(x, config.k, rng)
        labels, cents, hist, it = _lloyd(x, init, config.max_iter, config.tol)
        inertia = hist[-1]
        if best is None or inertia < best[0]:
            best = (inertia, labels, cents, hist, it)
    inertia, labels, cents, hist, it = best
    canon = canonical_labels(labels)
    order = [int(labels[np.flatnonzero(canon == j)[0]]) for j in range(config.k)]
    clustering = Clustering(_keys(keys, n), canon, "kmeans", cents[order])
    return KMeansResult(clustering, float(inertia), it, tuple(hist))


def similarity_matrix(points) -> np.ndarray:
    """Negative squared Euclidean distances, zero diagonal."""
    x = _check_points(points)
    if len(x) <= 512:
        # per-pair differences; the expanded dot-product form leaves rounding residue
        diff = x[:, None, :] - x[None, :, :]
        s = -(diff * diff).sum(-1)
    else:
        s = -_sq_dist(x, x)
    np.fill_diagonal(s, 0.0)
    return s


def median_preference(similarity) -> float:
    s = np.asarray(similarity, dtype=float)
    n = len(s)
    if n < 2:
        return 0.0
    off = s[~np.eye(n, dtype=bool)]
    return float(np.median(off))


def ap_fit(
    similarity,
    config: ApConfig | None = None,
    keys: Sequence[str] | None = None,
    points=None,
) -> ApResult:
    """Affinity Propagation by damped responsibility/availability messages.

    The diagonal of ``similarity`` is replaced by the preference. Stops once
    the exemplar set is unchanged for ``convergence_iter`` iterations.
    """
    config = config or ApConfig()
    s = np.array(similarity, dtype=float, copy=True)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValidationError("similarity must be a square matrix")
    if not np.all(np.isfinite(s)):
        raise ValidationError("similarity contains non-finite entries")
    n = len(s)
    if n == 0:
        raise ValidationError("empty similarity matrix")
    pref = config.preference if config.preference is not None else median_preference(s)
    np.fill_diagonal(s, pref)
    if config.tie_break_seed is not None:
        # symmetric inputs (e.g. two mutually closest points) make the messages
        # oscillate forever; a perturbation at rounding level picks a side
        rng = np.random.default_rng(config.tie_break_seed)
        eps, tiny = np.finfo(float).eps, np.finfo(float).tiny
        s = s + (eps * s + tiny * 100) * rng.standard_normal(s.shape)
    if n == 1:
        reps = None if points is None else np.asarray(points, dtype=float)[[0]]
        return ApResult(Clustering(_keys(keys, 1), [0], "affinity_propagation", reps), (0,), True, 0)

    lam = config.damping
    r = np.zeros((n, n))
    a = np.zeros((n, n))
    rows = np.arange(n)
    last = None
    last_nonempty = None
    stable = 0
    converged = False
    it = 0
    for it in range(1, config.max_iter + 1):
        # responsibilities
        as_ = a + s
        first_idx = np.argmax(as_, axis=1)
        first = as_[rows, first_idx]
        as_[rows, first_idx] = -np.inf
        second = as_.max(axis=1)
        r_new = s - first[:, None]
        r_new[rows, first_idx] = s[rows, first_idx] - second
        r = lam * r + (1 - lam) * r_new
        # availabilities
        rp = np.maximum(r, 0.0)
        rp[rows, rows] = r[rows, rows]
        col = rp.sum(axis=0)
        a_new = col[None, :] - rp
        diag = a_new[rows, rows].copy()
        a_new = np.minimum(a_new, 0.0)
        a_new[rows, rows] = diag
        a = lam * a + (1 - lam) * a_new

        ex = np.flatnonzero(np.diag(a) + np.diag(r) > 0)
        key = tuple(ex.tolist())
        if ex.size:
            last_nonempty = ex
        if key == last:
            stable += 1
        else:
            stable = 1
            last = key
        if stable >= config.convergence_iter and ex.size:
            converged = True
            break

    if last_nonempty is None:
        last_nonempty = np.array([int(np.argmax(np.diag(a) + np.diag(r)))])
    exemplars = last_nonempty
    raw = exemplars[np.argmax(s[:, exemplars], axis=1)]  # ties -> lowest exemplar
    raw[exemplars] = exemplars
    canon = canonical_labels(raw)
    ex_order = [int(raw[np.flatnonzero(canon == j)[0]]) for j in range(canon.max() + 1)]
    reps = None if points is None else np.asarray(points, dtype=float)[ex_order]
    clustering = Clustering(_keys(keys, n), canon, "affinity_propagation", reps)
    return ApResult(clustering, tuple(ex_order), converged, it)


def sizes_string(clustering: Clustering) -> str:
    """Cluster sizes largest first, e.g. ``"62+38"``."""
    return "+".join(str(s) for s in sorted(clustering.sizes, reverse=True))


def ap_for_k(similarity, k: int, config: ApConfig | None = None, keys=None, points=None,
             lo: float | None = None, hi: float = 0.0, max_steps: int = 40) -> ApResult:
    """Bisect the preference until AP yields ``k`` clusters.

    More negative preferences give fewer exemplars. Returns the last fit
    when ``k`` cannot be hit exactly.
    """
    config = config or ApConfig()
    s = np.asarray(similarity, dtype=float)
    if lo is None:
        off = s[~np.eye(len(s), dtype=bool)]
        lo = float(off.min()) * 2.0 if off.size else -1.0
    result = None
    for _ in range(max_steps):
        mid = 0.5 * (lo + hi)
        cfg = replace(config, preference=mid)
        result = ap_fit(s, cfg, keys, points)
        got = result.clustering.k
        if got == k:
            return result
        if got > k:
            hi = mid
        else:
            lo = mid
    return result


def cluster_protocol(
    shapes,
    kmeans_cfg: KMeansConfig,
    ap_cfg: ApConfig,
    keys: Sequence[str] | None = None,
    mean_kind: str = "arithmetic",
) -> tuple[Clustering, Clustering, dict]:
    """Cluster with both methods and score their agreement.

    The report carries cluster counts, size strings, ARI/AMI/NMI between the
    two partitions, and per-method labels in the given (historical) order.
    """
    x = _check_points(shapes)
    km = kmeans_fit(x, kmeans_cfg, keys)
    ap = ap_fit(similarity_matrix(x), ap_cfg, keys, points=x)
    c_km, c_ap = km.clustering, ap.clustering
    if len(x) >= 2:
        scores = simindex.agreement(c_km, c_ap, mean_kind)
    else:
        scores = {"ARI": 1.0, "AMI": 1.0, "NMI": 1.0}
    report = {
        "keys": list(c_km.keys),
        "k": {"kmeans": c_km.k, "affinity_propagation": c_ap.k},
        "sizes": {"kmeans": sizes_string(c_km), "affinity_propagation": sizes_string(c_ap)},
        "scores": scores,
        "labels": {
            "kmeans": c_km.labels.tolist(),
            "affinity_propagation": c_ap.labels.tolist(),
        },
        "kmeans_inertia": km.inertia,
        "ap_converged": ap.converged,
        "ap_exemplars": [c_km.keys[i] for i in ap.exemplars],
    }
    return c_km, c_ap, report
