"""Versioned model files.

Layout::

    FLUXLATTICE-MODEL <version>\\n
    <one-line JSON header>\\n
    <payload: raw little-endian arrays, back to back>

The header names the model kind and tag, lists every array with dtype,
shape and byte offset, and records the payload length and SHA-256, so a
truncated or altered file is detected before any array is rebuilt.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import IntegrityError, VersionError
from .gp import GpHyperparams, GpModel
from .mcdnn import MlpConfig, MlpModel

MAGIC = b"FLUXLATTICE-MODEL"
FORMAT_VERSION = 1


def _model_state(model) -> tuple[str, dict, dict[str, np.ndarray]]:
    if isinstance(model, GpModel):
        hp = model.hyperparams
        fields = {
            "hyperparams": {"sigma_f": hp.sigma_f, "length_scale": hp.length_scale, "jitter": hp.jitter},
            "jitter_used": model.jitter_used,
        }
        arrays = {
            "X_train": model.X_train,
            "y_train": model.y_train,
            "noise_sd": model.noise_sd,
            "chol": model.chol,
            "alpha": model.alpha,
        }
        return "gp", fields, arrays
    if isinstance(model, MlpModel):
        c = model.config
        fields = {
            "config": {
                "hidden_sizes": list(c.hidden_sizes),
                "dropout_p": c.dropout_p,
                "weight_decay": c.weight_decay,
                "learning_rate": c.learning_rate,
                "epochs": c.epochs,
                "batch_size": c.batch_size,
                "seed": c.seed,
                "mc_passes": c.mc_passes,
            }
        }
        arrays = {}
        for l, (W, b) in enumerate(zip(model.weights, model.biases)):
            arrays[f"W{l}"] = W
            arrays[f"b{l}"] = b
        return "mlp", fields, arrays
    raise TypeError(f"cannot persist {type(model).__name__}")


def save_model(model, path) -> None:
    kind, fields, arrays = _model_state(model)
    specs, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        raw = a.tobytes()
        specs.append({"name": name, "dtype": "<f8", "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "kind": kind,
        "model_tag": model.model_tag,
        "fields": fields,
        "meta": model.meta,
        "arrays": specs,
        "payload_bytes": len(payload),
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC + b" " + str(FORMAT_VERSION).encode() + b"\n")
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n")
        fh.write(payload)


def read_header(path) -> tuple[int, dict, bytes]:
    data = Path(path).read_bytes()
    first, sep, rest = data.partition(b"\n")
    if not sep or not first.startswith(MAGIC + b" "):
        raise IntegrityError(f"{path}: not a model file")
    try:
        version = int(first[len(MAGIC) + 1:])
    except ValueError:
        raise IntegrityError(f"{path}: unreadable version tag") from None
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    line, sep, payload = rest.partition(b"\n")
    if not sep:
        raise IntegrityError(f"{path}: truncated header")
    try:
        header = json.loads(line)
    except json.JSONDecodeError:
        raise IntegrityError(f"{path}: corrupt header") from None
    if len(payload) != header.get("payload_bytes"):
        raise IntegrityError(f"{path}: payload is {len(payload)} bytes, expected {header.get('payload_bytes')}")
    if hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise IntegrityError(f"{path}: payload checksum mismatch")
    return version, header, payload


def load_model(path):
    _, header, payload = read_header(path)
    arrays = {}
    for spec in header["arrays"]:
        raw = payload[spec["offset"]:spec["offset"] + spec["nbytes"]]
        arrays[spec["name"]] = np.frombuffer(raw, dtype=spec["dtype"]).reshape(spec["shape"]).astype(float)
    fields = header["fields"]
    if header["kind"] == "gp":
        hp = GpHyperparams(**fields["hyperparams"])
        return GpModel(
            arrays["X_train"], arrays["y_train"], arrays["noise_sd"], hp,
            arrays["chol"], arrays["alpha"], fields["jitter_used"],
            header["model_tag"], header["meta"],
        )
    if header["kind"] == "mlp":
        cfg = MlpConfig(**{**fields["config"], "hidden_sizes": tuple(fields["config"]["hidden_sizes"])})
        n = len(cfg.hidden_sizes) + 1
        return MlpModel(
            [arrays[f"W{l}"] for l in range(n)], [arrays[f"b{l}"] for l in range(n)],
            cfg, header["model_tag"], header["meta"],
        )
    raise IntegrityError(f"{path}: unknown model kind {header['kind']!r}")
