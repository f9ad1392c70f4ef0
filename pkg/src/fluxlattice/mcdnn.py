"""Feed-forward regression network with Monte Carlo dropout.

Two scaled inputs (bank position, axial location), ReLU hidden layers, one
linear output. Dropout is inverted: kept hidden activations are scaled by
``1/(1-p)`` whenever a mask source is supplied, so a pass without a mask
source (or with ``p = 0``) is the plain deterministic network.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .data_model import UqPrediction
from .errors import ConfigError, InsufficientDataError, TrainingError

log = logging.getLogger(__name__)

TRAIN_FRACTION = 0.8075
TEST_FRACTION = 0.05
VAL_FRACTION = 0.1425


@dataclass(frozen=True)
class MlpConfig:
    hidden_sizes: tuple[int, ...] = (64, 64, 64)
    dropout_p: float = 0.1
    weight_decay: float = 1e-5
    learning_rate: float = 1e-3
    epochs: int = 200
    batch_size: int = 64
    seed: int = 0
    mc_passes: int = 2000

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if not self.hidden_sizes or min(self.hidden_sizes) < 1:
            raise ConfigError("at least one hidden layer with >= 1 unit")
        if not 0 <= self.dropout_p < 1:
            raise ConfigError("dropout_p must lie in [0, 1)")
        if self.weight_decay < 0 or not self.learning_rate > 0:
            raise ConfigError("weight_decay >= 0 and learning_rate > 0 required")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.mc_passes < 2:
            raise ConfigError("mc_passes must be >= 2")


@dataclass(eq=False)
class MlpModel:
    weights: list[np.ndarray]  # W_l has shape (fan_in, fan_out)
    biases: list[np.ndarray]
    config: MlpConfig
    model_tag: str = "mlp"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        dims = [2] + list(self.config.hidden_sizes) + [1]
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ConfigError("layer count does not match hidden_sizes")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (dims[l], dims[l + 1]) or b.shape != (dims[l + 1],):
                raise ConfigError(f"layer {l} has shape {W.shape}/{b.shape}")

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self) -> "MlpModel":
        return MlpModel([W.copy() for W in self.weights], [b.copy() for b in self.biases],
                        self.config, self.model_tag, dict(self.meta))


@dataclass
class TrainingHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    test_mse: float = float("nan")
    split_sizes: tuple[int, int, int] = (0, 0, 0)  # train, validation, test

    def to_rows(self):
        return [
            {"epoch": i + 1, "train_loss": t, "val_loss": v}
            for i, (t, v) in enumerate(zip(self.train_loss, self.val_loss))
        ]


def init_model(config: MlpConfig, rng: np.random.Generator | None = None) -> MlpModel:
    """He-scaled Gaussian weights, zero biases."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    dims = [2] + list(config.hidden_sizes) + [1]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(weights, biases, config)


def make_masks(model: MlpModel, n_rows: int, rng: np.random.Generator) -> list[np.ndarray]:
    p = model.config.dropout_p
    keep = 1.0 - p
    return [
        (rng.random((n_rows, h)) < keep) / keep
        for h in model.config.hidden_sizes
    ]


def _forward(model: MlpModel, X, masks):
    """Returns output vector and per-layer caches for backprop."""
    h = np.atleast_2d(np.asarray(X, dtype=float))
    inputs, pre = [h], []
    n_hidden = len(model.config.hidden_sizes)
    for l in range(n_hidden):
        z = h @ model.weights[l] + model.biases[l]
        h = np.maximum(z, 0.0)
        if masks is not None:
            h = h * masks[l]
        pre.append(z)
        inputs.append(h)
    out = h @ model.weights[-1] + model.biases[-1]
    return out[:, 0], (inputs, pre)


def forward(model: MlpModel, x, mask_source=None):
    """Network output for one input (scalar) or a batch (vector).

    ``mask_source`` is a numpy Generator, a precomputed list of masks, or
    None for the deterministic pass.
    """
    X = np.asarray(x, dtype=float)
    single = X.ndim == 1
    X2 = np.atleast_2d(X)
    if mask_source is None:
        masks = None
    elif isinstance(mask_source, np.random.Generator):
        masks = make_masks(model, len(X2), mask_source)
    else:
        masks = mask_source
    out, _ = _forward(model, X2, masks)
    return float(out[0]) if single else out


def regularization(model: MlpModel) -> float:
    p = model.config.dropout_p
    lam = model.config.weight_decay
    return lam * sum(p * float((W * W).sum()) + float((b * b).sum())
                     for W, b in zip(model.weights, model.biases))


def loss(model: MlpModel, X, y, masks=None) -> float:
    """Mean squared error plus lambda * sum(p*|W|^2 + |b|^2) over all layers."""
    pred, _ = _forward(model, X, masks)
    y = np.asarray(y, dtype=float).reshape(-1)
    return float(np.mean((pred - y) ** 2)) + regularization(model)


def loss_and_grads(model: MlpModel, X, y, masks=None):
    """Loss and gradients ordered like ``model.params`` (W1, b1, W2, b2, ...)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    pred, (inputs, pre) = _forward(model, X, masks)
    n = len(y)
    resid = pred - y
    value = float(np.mean(resid**2)) + regularization(model)
    p = model.config.dropout_p
    lam = model.config.weight_decay

    n_layers = len(model.weights)
    gW = [None] * n_layers
    gb = [None] * n_layers
    delta = (2.0 / n) * resid[:, None]
    for l in range(n_layers - 1, -1, -1):
        gW[l] = inputs[l].T @ delta + 2.0 * lam * p * model.weights[l]
        gb[l] = delta.sum(0) + 2.0 * lam * model.biases[l]
        if l == 0:
            break
        delta = delta @ model.weights[l].T
        if masks is not None:
            delta = delta * masks[l - 1]
        delta = delta * (pre[l - 1] > 0)
    grads = []
    for a, b in zip(gW, gb):
        grads += [a, b]
    return value, grads


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1 - b1**self.t
        corr2 = 1 - b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)


def split_sizes(n: int) -> tuple[int, int, int]:
    """(train, validation, test): test and validation floored, rest trains."""
    # integer arithmetic: 0.1425 * 400 is 56.999... in floating point
    n_test = n * round(TEST_FRACTION * 10000) // 10000
    n_val = n * round(VAL_FRACTION * 10000) // 10000
    return n - n_test - n_val, n_val, n_test


def train(X, y, config: MlpConfig, model_tag: str = "mlp") -> tuple[MlpModel, TrainingHistory]:
    """Fit on a seeded random train/validation/test split with Adam.

    Deterministic given ``config.seed``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    if len(X) != len(y):
        raise ConfigError("X and y differ in length")
    n_tr, n_val, n_te = split_sizes(len(y))
    if n_tr < config.batch_size:
        raise InsufficientDataError(
            f"{n_tr} training points after split, batch_size is {config.batch_size}"
        )
    ss_init, ss_split, ss_train = np.random.SeedSequence(config.seed).spawn(3)
    order = np.random.default_rng(ss_split).permutation(len(y))
    te, va, tr = order[:n_te], order[n_te:n_te + n_val], order[n_te + n_val:]
    model = init_model(config, np.random.default_rng(ss_init))
    model.model_tag = model_tag
    rng = np.random.default_rng(ss_train)
    params = model.params
    opt = Adam(params, lr=config.learning_rate)
    hist = TrainingHistory(split_sizes=(n_tr, n_val, n_te))
    Xtr, ytr = X[tr], y[tr]
    use_dropout = config.dropout_p > 0
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(n_tr)
        total = 0.0
        for start in range(0, n_tr, config.batch_size):
            idx = perm[start:start + config.batch_size]
            masks = make_masks(model, len(idx), rng) if use_dropout else None
            value, grads = loss_and_grads(model, Xtr[idx], ytr[idx], masks)
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            opt.step(params, grads)
            total += value * len(idx)
        hist.train_loss.append(total / n_tr)
        if n_val:
            val = float(np.mean((forward(model, X[va]) - y[va]) ** 2))
        else:
            val = float("nan")
        if n_val and not np.isfinite(val):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        hist.val_loss.append(val)
    if n_te:
        hist.test_mse = float(np.mean((forward(model, X[te]) - y[te]) ** 2))
    log.debug("trained %s: final train %.4g val %.4g", model_tag, hist.train_loss[-1], hist.val_loss[-1])
    return model, hist


def mc_summary(samples) -> tuple[np.ndarray, np.ndarray]:
    """Mean and (T-1)-normalized standard deviation over axis 0."""
    s = np.asarray(samples, dtype=float)
    if s.shape[0] < 2:
        raise ConfigError("need at least two passes")
    mean = s.mean(axis=0)
    var = ((s - mean) ** 2).sum(axis=0) / (s.shape[0] - 1)
    constant = np.all(s == s[0], axis=0)
    mean = np.where(constant, s[0], mean)
    var = np.where(constant, 0.0, var)
    return mean, np.sqrt(var)


def mc_samples(model: MlpModel, X, T: int, seed: int, chunk: int = 100) -> np.ndarray:
    """Raw ``T x M`` stochastic outputs; pass ``t`` draws masks from stream (seed, t)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    m = len(X)
    out = np.empty((T, m))
    for start in range(0, T, chunk):
        stop = min(T, start + chunk)
        per_pass = [make_masks(model, m, np.random.default_rng([seed, t])) for t in range(start, stop)]
        masks = [np.concatenate([pm[l] for pm in per_pass]) for l in range(len(model.config.hidden_sizes))]
        Xb = np.tile(X, (stop - start, 1))
        pred, _ = _forward(model, Xb, masks)
        out[start:stop] = pred.reshape(stop - start, m)
    return out


def mc_predict_batch(model: MlpModel, X, T: int | None = None, seed: int = 0):
    T = T or model.config.mc_passes
    if T < 2:
        raise ConfigError("T must be >= 2")
    return mc_summary(mc_samples(model, X, T, seed))


def mc_predict(model: MlpModel, x, T: int | None = None, seed: int = 0) -> UqPrediction:
    """MC-dropout mean and spread at a single (scaled) input."""
    x = np.asarray(x, dtype=float).reshape(2)
    mean, std = mc_predict_batch(model, x[None, :], T, seed)
    return UqPrediction(float(x[0]), float(x[1]), float(mean[0]), float(std[0]), model.model_tag)


def with_config(model: MlpModel, **changes) -> MlpModel:
    """Same weights under an altered config (e.g. a different dropout rate)."""
    return MlpModel([W.copy() for W in model.weights], [b.copy() for b in model.biases],
                    replace(model.config, **changes), model.model_tag, dict(model.meta))
