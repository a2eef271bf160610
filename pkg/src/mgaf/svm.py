"""Multiclass linear SVM over the multimodal layer.

One-vs-rest binary classifiers trained by projected subgradient descent on
the objective ``(1/(2C))*||w||^2 + mean hinge`` with step size 1/(lambda*t),
lambda = 1/C. Features are standardized per column; the statistics live in
the model and are re-applied at predict time. The returned weights are the
averaged iterates, whose objective decreases (up to small transients) as
training proceeds.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

CHECKPOINT_MAGIC = b"MGAFSVM1"


@dataclass
class SvmModel:
    classes: np.ndarray        # sorted original labels
    weights: np.ndarray        # (n_classes, n_features), standardized space
    biases: np.ndarray         # (n_classes,)
    feature_mean: np.ndarray
    feature_scale: np.ndarray  # per-column std; zero-variance columns -> 1
    c: float

    @property
    def n_features(self) -> int:
        return self.weights.shape[1]


def hinge_objective(x, y_signed, w, b, c: float) -> float:
    """(1/(2C))*||w||^2 + mean_i max(0, 1 - y_i*(x_i.w + b))."""
    margins = y_signed * (x @ w + b)
    hinge = np.maximum(0.0, 1.0 - margins).mean()
    return float(hinge + (w @ w) / (2.0 * c))


def _as_feature_matrix(x) -> np.ndarray:
    x = getattr(x, "data", x)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected a (samples, features) matrix, got shape {x.shape}")
    return x


def _train_binary(x, y_signed, c, epochs, record=None):
    n, d = x.shape
    lam = 1.0 / c
    radius = 1.0 / np.sqrt(lam)
    w = np.zeros(d)
    b = 0.0
    w_avg = np.zeros(d)
    b_avg = 0.0
    for t in range(1, epochs + 1):
        margins = y_signed * (x @ w + b)
        viol = margins < 1.0
        gw = lam * w - (y_signed[viol] @ x[viol]) / n
        gb = -y_signed[viol].sum() / n
        eta = 1.0 / (lam * t)
        w -= eta * gw
        b -= eta * gb
        norm = np.linalg.norm(w)
        if norm > radius:
            w *= radius / norm
        w_avg += (w - w_avg) / t
        b_avg += (b - b_avg) / t
        if record is not None:
            record.append(hinge_objective(x, y_signed, w_avg, b_avg, c))
    return w_avg, b_avg


def train_svm(x, y, c: float = 1.0, seed: int = 0, epochs: int = 100,
              return_history: bool = False):
    """Fit one-vs-rest linear SVMs on standardized features.

    ``seed`` is accepted for interface stability; full-batch subgradient
    training is deterministic and does not consume randomness.
    """
    del seed
    x = _as_feature_matrix(x)
    y = np.asarray(y)
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"row counts disagree: X has {x.shape[0]}, y has {y.shape[0]}")
    if c <= 0:
        raise ValueError(f"C must be positive, got {c}")
    classes = np.unique(y)
    if classes.size < 2:
        raise DataError(f"need at least 2 classes to train, got {classes.size}")
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale == 0.0] = 1.0
    xs = (x - mean) / scale
    weights = np.zeros((classes.size, x.shape[1]))
    biases = np.zeros(classes.size)
    history: dict[int, list[float]] = {}
    for i, cls in enumerate(classes):
        y_signed = np.where(y == cls, 1.0, -1.0)
        record: list[float] | None = [] if return_history else None
        weights[i], biases[i] = _train_binary(xs, y_signed, c, epochs, record)
        if return_history:
            history[int(cls)] = record
    model = SvmModel(classes=classes, weights=weights, biases=biases,
                     feature_mean=mean, feature_scale=scale, c=c)
    return (model, history) if return_history else model


def decision_scores(model: SvmModel, x) -> np.ndarray:
    x = _as_feature_matrix(x)
    if x.shape[1] != model.n_features:
        raise ValueError(
            f"feature width {x.shape[1]} does not match model width {model.n_features}"
        )
    xs = (x - model.feature_mean) / model.feature_scale
    return xs @ model.weights.T + model.biases


def predict(model: SvmModel, x) -> np.ndarray:
    """Argmax over per-class scores; ties resolve to the lowest class id."""
    x = _as_feature_matrix(x)
    if x.shape[0] == 0:
        return np.empty(0, dtype=model.classes.dtype)
    return model.classes[np.argmax(decision_scores(model, x), axis=1)]


def save_model(model: SvmModel, path) -> None:
    """Binary checkpoint: magic, sizes, C, then classes/stats/weights blobs."""
    parts = [CHECKPOINT_MAGIC]
    parts.append(struct.pack("<IQd", model.classes.size, model.n_features, model.c))
    parts.append(np.ascontiguousarray(model.classes, dtype="<i8").tobytes())
    for arr in (model.feature_mean, model.feature_scale, model.weights, model.biases):
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_model(path) -> SvmModel:
    blob = Path(path).read_bytes()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise DataError(f"{Path(path).name}: bad magic, not an SVM checkpoint")
    off = len(CHECKPOINT_MAGIC)
    n_classes, n_features, c = struct.unpack("<IQd", blob[off : off + 20])
    off += 20

    def take(count, dtype):
        nonlocal off
        nbytes = count * 8
        if off + nbytes > len(blob):
            raise DataError(f"{Path(path).name}: truncated checkpoint")
        arr = np.frombuffer(blob[off : off + nbytes], dtype=dtype).copy()
        off += nbytes
        return arr

    classes = take(n_classes, "<i8")
    mean = take(n_features, "<f8")
    scale = take(n_features, "<f8")
    weights = take(n_classes * n_features, "<f8").reshape(n_classes, n_features)
    biases = take(n_classes, "<f8")
    return SvmModel(classes=classes, weights=weights, biases=biases,
                    feature_mean=mean, feature_scale=scale, c=c)
