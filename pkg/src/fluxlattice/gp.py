"""Exact Gaussian Process regression with point-wise (heteroscedastic) noise.

Zero prior mean, squared-exponential kernel with one length scale shared by
all input features. Observation noise enters only on the training diagonal
(and optionally on the query diagonal for noisy predictions).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular

from .data_model import UqPrediction
from .errors import ConditioningError, ConfigError, ValidationError

JITTER_CEILING = 1e-6
JITTER_FLOOR = 1e-10


@dataclass(frozen=True)
class GpHyperparams:
    sigma_f: float = 1.0
    length_scale: float = 0.3
    jitter: float = JITTER_FLOOR

    def __post_init__(self):
        if not self.sigma_f > 0 or not self.length_scale > 0:
            raise ConfigError("sigma_f and length_scale must be positive")
        if not self.jitter >= 0:
            raise ConfigError("jitter must be non-negative")


@dataclass(frozen=True, eq=False)
class GpModel:
    X_train: np.ndarray
    y_train: np.ndarray
    noise_sd: np.ndarray
    hyperparams: GpHyperparams
    chol: np.ndarray
    alpha: np.ndarray
    jitter_used: float = 0.0
    model_tag: str = "gp"
    meta: dict = field(default_factory=dict)

    @property
    def n_train(self) -> int:
        return len(self.y_train)


def sq_dists(a, b) -> np.ndarray:
    # per-feature differences: exact zeros for coincident rows (few features here)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    d = np.zeros((len(a), len(b)))
    for f in range(a.shape[1]):
        diff = np.subtract.outer(a[:, f], b[:, f])
        diff *= diff
        d += diff
    return d


def kernel(x_i, x_j, hp: GpHyperparams) -> float:
    """Squared-exponential covariance between two input points (no noise term)."""
    d = np.asarray(x_i, dtype=float) - np.asarray(x_j, dtype=float)
    return float(hp.sigma_f**2 * np.exp(-float(d @ d) / (2.0 * hp.length_scale**2)))


def kernel_matrix(A, B, hp: GpHyperparams) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    return hp.sigma_f**2 * np.exp(-sq_dists(A, B) / (2.0 * hp.length_scale**2))


def _as_inputs(X, name="X") -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1 and X.size == 0:
        X = X.reshape(0, 2)
    if X.ndim != 2:
        raise ValidationError(f"{name} must be a 2-D matrix")
    if not np.all(np.isfinite(X)):
        raise ValidationError(f"{name} has non-finite entries")
    return X


def _jitter_ladder(start: float):
    if start == 0.0:
        # exact mode: no regularization is ever added
        yield 0.0
        return
    j = start
    while j <= JITTER_CEILING * (1 + 1e-9):
        yield j
        j *= 10.0


def gp_fit(X, y, noise_sd, hp: GpHyperparams | None = None, model_tag: str = "gp",
           meta: dict | None = None) -> GpModel:
    """Factorize ``K + diag(noise_sd**2) + jitter*I`` and solve for the weights.

    A positive ``hp.jitter`` is escalated by factors of ten up to 1e-6 when
    the factorization fails; ``jitter=0`` disables escalation.
    """
    hp = hp or GpHyperparams()
    X = _as_inputs(X)
    y = np.asarray(y, dtype=float).reshape(-1)
    noise_sd = np.asarray(noise_sd, dtype=float).reshape(-1)
    n = len(X)
    if len(y) != n or len(noise_sd) != n:
        raise ValidationError("X, y and noise_sd must have the same length")
    if np.any(noise_sd < 0) or not np.all(np.isfinite(noise_sd)):
        raise ValidationError("noise_sd must be finite and non-negative")
    if not np.all(np.isfinite(y)):
        raise ValidationError("y has non-finite entries")
    K = kernel_matrix(X, X, hp) if n else np.zeros((0, 0))
    base = K + np.diag(noise_sd**2)
    L = None
    used = hp.jitter
    for used in _jitter_ladder(hp.jitter):
        try:
            L = cholesky(base + used * np.eye(n), lower=True, check_finite=False) if n else np.zeros((0, 0))
        except LinAlgError:
            continue
        if n and not np.all(np.diag(L) > 0):
            L = None
            continue
        break
    if L is None:
        raise ConditioningError(
            f"covariance not positive definite (jitter up to {used:g})"
        )
    alpha = cho_solve((L, True), y, check_finite=False) if n else np.zeros(0)
    return GpModel(X, y, noise_sd, hp, L, alpha, float(used), model_tag, dict(meta or {}))


def gp_predict(model: GpModel, X_star, include_noise: bool = False, noise_sd_star=None):
    """Posterior mean and covariance at ``X_star``.

    With ``include_noise`` the query noise ``noise_sd_star**2`` is added to
    the covariance diagonal (noisy-observation predictive).
    """
    X_star = _as_inputs(X_star, "X_star")
    m = len(X_star)
    d = model.X_train.shape[1] if model.n_train else X_star.shape[1]
    if m and X_star.shape[1] != d:
        raise ValidationError(f"X_star must have {d} columns")
    if m == 0:
        return np.zeros(0), np.zeros((0, 0))
    hp = model.hyperparams
    Kss = kernel_matrix(X_star, X_star, hp)
    if model.n_train:
        Ks = kernel_matrix(model.X_train, X_star, hp)
        mean = Ks.T @ model.alpha
        v = solve_triangular(model.chol, Ks, lower=True, check_finite=False)
        cov = Kss - v.T @ v
    else:
        mean = np.zeros(m)
        cov = Kss.copy()
    cov = 0.5 * (cov + cov.T)
    if include_noise:
        if noise_sd_star is None:
            raise ValidationError("noise_sd_star required when include_noise is set")
        ns = np.broadcast_to(np.asarray(noise_sd_star, dtype=float), (m,))
        cov = cov + np.diag(ns**2)
    idx = np.arange(m)
    cov[idx, idx] = np.maximum(cov[idx, idx], 0.0)
    return mean, cov


def gp_predict_var(model: GpModel, X_star, include_noise=False, noise_sd_star=None):
    """Mean and marginal variance only; avoids the M x M covariance."""
    X_star = _as_inputs(X_star, "X_star")
    m = len(X_star)
    if m == 0:
        return np.zeros(0), np.zeros(0)
    hp = model.hyperparams
    prior = np.full(m, hp.sigma_f**2)
    if model.n_train:
        Ks = kernel_matrix(model.X_train, X_star, hp)
        mean = Ks.T @ model.alpha
        v = solve_triangular(model.chol, Ks, lower=True, check_finite=False)
        var = prior - (v * v).sum(0)
    else:
        mean, var = np.zeros(m), prior
    if include_noise:
        if noise_sd_star is None:
            raise ValidationError("noise_sd_star required when include_noise is set")
        var = var + np.broadcast_to(np.asarray(noise_sd_star, dtype=float), (m,)) ** 2
    return mean, np.maximum(var, 0.0)


def gp_predict_profile(model: GpModel, bank_position: float, axial_grid,
                       include_noise: bool = False, noise_sd_star=None) -> list[UqPrediction]:
    """Predict one profile: fixed (scaled) bank position over a scaled axial grid."""
    axial_grid = np.asarray(axial_grid, dtype=float).reshape(-1)
    X = np.column_stack([np.full(len(axial_grid), float(bank_position)), axial_grid])
    mean, var = gp_predict_var(model, X, include_noise, noise_sd_star)
    std = np.sqrt(var)
    return [
        UqPrediction(float(bank_position), float(a), float(mu), float(sd), model.model_tag)
        for a, mu, sd in zip(axial_grid, mean, std)
    ]


def grid_search(fit_data, val_data, sigma_fs, length_scales, score, jitter=JITTER_FLOOR):
    """Pick (sigma_f, length_scale) minimizing ``score(mean, y_val)``.

    ``fit_data`` is ``(X, y, noise_sd)``, ``val_data`` is ``(X, y)``.
    Returns ``(best_hp, table)`` where table rows are ``(sigma_f, l, score)``.
    """
    X, y, s = fit_data
    Xv, yv = val_data
    table = []
    best = None
    for sf, ls in itertools.product(sigma_fs, length_scales):
        hp = GpHyperparams(sf, ls, jitter)
        model = gp_fit(X, y, s, hp)
        mean, _ = gp_predict_var(model, Xv)
        val = float(score(mean, yv))
        table.append((sf, ls, val))
        if best is None or val < best[1]:
            best = (hp, val)
    return best[0], table
