"""Gated average fusion of flattened feature maps.

Each modality's ``(batch, features)`` matrix is convolved with a fixed 3x3
high-boost kernel, squashed through a sigmoid into per-element gates, and
the gated maps are summed. Output dims equal single-input dims for any
modality count; only ``concat`` grows with the number of modalities.

Gating scope: ``"batch"`` runs the convolution over the whole
batch-by-feature matrix (vertical taps mix neighbouring samples), which is
the canonical behaviour for training and ablation; ``"per_sample"`` treats
every row as its own 1xM map so gates are independent of batch composition,
which is the right choice for single-sample inference.
"""

from __future__ import annotations

from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .ops import conv2d_same, flatten4d, sigmoid

__all__ = ["FusionMode", "high_boost_kernel", "gate", "fuse", "fuse_stage"]


class FusionMode(str, Enum):
    GATED_AVERAGE = "gated_average"
    AVERAGE = "average"
    GATED_NO_KERNEL = "gated_no_kernel"
    CONCAT = "concat"


def high_boost_kernel(amplification: float = 1.0) -> np.ndarray:
    """3x3 sharpening kernel: border -1, center ``amplification + 8``.

    At amplification 1 the weights sum to 1, so constant regions pass
    through unchanged; at 0 it is a pure high-pass (weights sum to 0).
    """
    k = -np.ones((3, 3))
    k[1, 1] = amplification + 8.0
    return k


def gate(features, kernel, scope: str = "batch") -> np.ndarray:
    """Sigmoid of the high-boost convolution; values lie in (0, 1)."""
    features = np.asarray(features, dtype=np.float64)
    if not np.all(np.isfinite(features)):
        raise ValueError("gate input contains non-finite values")
    if scope == "batch":
        return sigmoid(conv2d_same(features, kernel))
    if scope == "per_sample":
        # A 1xM map only sees the kernel's middle row; vectorize over rows.
        kernel = np.asarray(kernel, dtype=np.float64)
        mid = kernel[kernel.shape[0] // 2]
        half = len(mid) // 2
        n, m = features.shape
        padded = np.zeros((n, m + 2 * half))
        padded[:, half : half + m] = features
        out = np.zeros_like(features)
        for v, weight in enumerate(mid):
            out += weight * padded[:, v : v + m]
        return sigmoid(out)
    raise ValueError(f"unknown gating scope {scope!r}")


def fuse(
    features: Sequence[np.ndarray],
    mode: FusionMode | str,
    kernel=None,
    scope: str = "batch",
    gate_override: Callable[[np.ndarray], np.ndarray] | None = None,
) -> np.ndarray:
    """Combine per-modality feature matrices into one fused matrix.

    ``gated_average`` sums gate(F)*F per modality; ``average`` forces all
    gates to one (an elementwise sum); ``gated_no_kernel`` gates with
    sigmoid(F) directly; ``concat`` concatenates columns. ``gate_override``
    is a testing hook replacing the gate computation.
    """
    mode = FusionMode(mode)
    mats = [np.asarray(f, dtype=np.float64) for f in features]
    if not mats:
        raise ValueError("fuse needs at least one feature matrix")
    for f in mats:
        if f.ndim != 2:
            raise ValueError(f"features must be 2D matrices, got shape {f.shape}")
    if mode is FusionMode.CONCAT:
        rows = {f.shape[0] for f in mats}
        if len(rows) != 1:
            raise ValueError(f"concat requires equal row counts, got {sorted(rows)}")
        return np.concatenate(mats, axis=1)
    shapes = {f.shape for f in mats}
    if len(shapes) != 1:
        raise ValueError(f"fusion requires equal dims, got {sorted(shapes)}")
    if kernel is None:
        kernel = high_boost_kernel(1.0)
    fused = np.zeros_like(mats[0])
    for f in mats:
        if gate_override is not None:
            g = gate_override(f)
        elif mode is FusionMode.GATED_AVERAGE:
            g = gate(f, kernel, scope)
        elif mode is FusionMode.GATED_NO_KERNEL:
            g = sigmoid(f)
        else:  # AVERAGE: gates fixed at one
            g = 1.0
        fused += g * f
    return fused


def fuse_stage(
    blocks: Sequence[np.ndarray],
    mode: FusionMode | str,
    kernel=None,
    scope: str = "batch",
) -> np.ndarray:
    """Flatten per-modality 4D activation blocks, then fuse the matrices."""
    blocks = list(blocks)
    if not blocks:
        raise ValueError("fuse_stage needs at least one activation block")
    shapes = {np.asarray(b).shape for b in blocks}
    if len(shapes) != 1:
        raise ValueError(f"stage blocks must share (h, w, c, batch) dims, got {sorted(shapes)}")
    return fuse([flatten4d(b) for b in blocks], mode, kernel, scope)
