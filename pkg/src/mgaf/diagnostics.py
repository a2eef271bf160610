"""Cross-modality feature diagnostics, accuracy metrics, feature export."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .ops import flatten4d


def ncc(f1, f2) -> float:
    """Normalized cross-correlation over all elements of two equal-shaped
    feature matrices; lies in [-1, 1], with 1 for identical-up-to-affine
    maps. Population (1/P) normalization is used for both the covariance
    and the standard deviations, so the choice cancels."""
    a = np.asarray(f1, dtype=np.float64)
    b = np.asarray(f2, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    da = a - a.mean()
    db = b - b.mean()
    sa = np.sqrt((da * da).mean())
    sb = np.sqrt((db * db).mean())
    if sa == 0.0 or sb == 0.0:
        raise DataError("ncc undefined for zero-variance input")
    return float((da * db).mean() / (sa * sb))


@dataclass
class Metrics:
    accuracy: float
    confusion: np.ndarray  # rows = truth, cols = prediction
    classes: np.ndarray


def metrics(pred, truth) -> Metrics:
    """Accuracy and confusion matrix over the union of observed classes."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {truth.shape}")
    classes = np.unique(np.concatenate([truth, pred]))
    index = {c: i for i, c in enumerate(classes)}
    confusion = np.zeros((classes.size, classes.size), dtype=np.int64)
    for t, p in zip(truth, pred):
        confusion[index[t], index[p]] += 1
    total = truth.size
    accuracy = float(np.trace(confusion) / total) if total else 0.0
    return Metrics(accuracy=accuracy, confusion=confusion, classes=classes)


def ncc_table(acts_a, acts_b, stages=("conv1", "conv2", "conv3")) -> list[tuple[str, float]]:
    """Per-stage NCC between two modalities' conv activations for the same
    aligned samples."""
    rows = []
    for stage in stages:
        fa = flatten4d(acts_a.stage(stage))
        fb = flatten4d(acts_b.stage(stage))
        rows.append((stage, ncc(fa, fb)))
    return rows


def export_features(features, y, path) -> None:
    """Write the multimodal layer as CSV: a ``# stage_offsets=...`` comment,
    a header, then one ``label,f0,f1,...`` row per sample."""
    data = np.asarray(getattr(features, "data", features), dtype=np.float64)
    offsets = getattr(features, "stage_offsets", ())
    y = np.asarray(y)
    if data.shape[0] != y.shape[0]:
        raise ValueError(f"row counts disagree: {data.shape[0]} vs {y.shape[0]}")
    lines = ["# stage_offsets=" + ",".join(str(o) for o in offsets)]
    lines.append("label," + ",".join(f"f{i}" for i in range(data.shape[1])))
    for label, row in zip(y, data):
        lines.append(str(int(label)) + "," + ",".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_features(path):
    """Inverse of :func:`export_features`; returns (X, y, stage_offsets)."""
    offsets: tuple[int, ...] = ()
    labels = []
    rows = []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("# stage_offsets="):
            tail = line.partition("=")[2]
            offsets = tuple(int(v) for v in tail.split(",") if v)
            continue
        if line.startswith("label"):
            continue
        cells = line.split(",")
        try:
            labels.append(int(cells[0]))
            rows.append([float(v) for v in cells[1:]])
        except ValueError:
            raise DataError(f"{Path(path).name}:{lineno}: non-numeric cell") from None
    x = np.asarray(rows, dtype=np.float64) if rows else np.empty((0, 0))
    return x, np.asarray(labels, dtype=np.int64), offsets


def write_ncc_csv(rows, path) -> None:
    lines = ["stage,value"] + [f"{stage},{value!r}" for stage, value in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
