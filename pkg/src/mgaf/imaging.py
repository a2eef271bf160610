"""Image encodings of the sensor streams.

Signal images stack the six inertial channels into a 24x52 matrix whose row
order makes every channel pair spatially adjacent at least once, then
normalize and resize to 64x64. Sequential front-view images (SFIs) are the
per-frame normalized depth maps, also resized to 64x64. A Prewitt gradient
magnitude of an SFI serves as an optional third modality.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .ops import conv2d_valid

IMAGE_SIZE = 64
SIGNAL_WINDOW = 52
SIGNAL_ROWS = 24

# Channel ids (1-based) stacked top to bottom. Every one of the 15 unordered
# channel pairs occurs among the 23 adjacent-row pairs; some pairs repeat.
ROW_STACKING_SEQUENCE = (
    1, 2, 3, 4, 5, 6,
    1, 3, 5, 2, 4, 6,
    1, 4, 2, 5, 3, 6,
    1, 5, 2, 6, 1, 6,
)

PREWITT_X = np.array([[-1.0, 0.0, 1.0]] * 3)
PREWITT_Y = PREWITT_X.T.copy()


@dataclass
class SignalImage:
    pixels: np.ndarray  # (64, 64) in [0, 1]
    label: int
    window_start: int = 0


@dataclass
class SFImage:
    pixels: np.ndarray  # (64, 64) in [0, 1]
    label: int
    frame_index: int = 0
    instance: int = 0


def stacking_order() -> list[int]:
    """The 24 channel ids (1-based) used to stack rows of a signal image."""
    return list(ROW_STACKING_SEQUENCE)


def normalize01(img) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant image maps to all 0.5."""
    img = np.asarray(img, dtype=np.float64)
    lo = img.min()
    hi = img.max()
    if hi == lo:
        return np.full_like(img, 0.5)
    return (img - lo) / (hi - lo)


def resize_bilinear(img, out_rows: int, out_cols: int) -> np.ndarray:
    """Corner-aligned bilinear resampling; identity when dims are unchanged."""
    src = np.asarray(img, dtype=np.float64)
    if src.ndim != 2 or src.size == 0:
        raise ValueError(f"expected a non-empty 2D image, got shape {src.shape}")
    if out_rows < 1 or out_cols < 1:
        raise ValueError(f"target dims must be >= 1, got ({out_rows}, {out_cols})")
    r_in, c_in = src.shape
    r = np.linspace(0.0, r_in - 1.0, out_rows)
    c = np.linspace(0.0, c_in - 1.0, out_cols)
    r0 = np.floor(r).astype(int)
    c0 = np.floor(c).astype(int)
    r1 = np.minimum(r0 + 1, r_in - 1)
    c1 = np.minimum(c0 + 1, c_in - 1)
    fr = (r - r0)[:, None]
    fc = (c - c0)[None, :]
    top = src[np.ix_(r0, c0)] * (1 - fc) + src[np.ix_(r0, c1)] * fc
    bottom = src[np.ix_(r1, c0)] * (1 - fc) + src[np.ix_(r1, c1)] * fc
    return top * (1 - fr) + bottom * fr


def signal_stack(sequences, start: int = 0, window: int = SIGNAL_WINDOW) -> np.ndarray:
    """The raw 24 x window matrix: channel rows repeated and ordered by
    ``ROW_STACKING_SEQUENCE`` over one window of the six input series."""
    sequences = np.asarray(sequences, dtype=np.float64)
    rows = np.array(ROW_STACKING_SEQUENCE) - 1
    return sequences[rows, start : start + window]


def build_signal_images(recording, window: int = SIGNAL_WINDOW,
                        overlap: float = 0.5) -> list[SignalImage]:
    """Slide a window over the six channels, stack rows per
    ``ROW_STACKING_SEQUENCE``, normalize the whole image, resize to 64x64."""
    sequences = np.asarray(recording.sequences, dtype=np.float64)
    length = sequences.shape[1]
    if length < window:
        raise DataError(f"recording length {length} shorter than window {window}")
    if not 0.0 <= overlap < 1.0:
        raise ValueError(f"overlap must be in [0, 1), got {overlap}")
    step = max(1, int(round(window * (1.0 - overlap))))
    images = []
    for start in range(0, length - window + 1, step):
        stack = signal_stack(sequences, start, window)
        pixels = resize_bilinear(normalize01(stack), IMAGE_SIZE, IMAGE_SIZE)
        images.append(SignalImage(pixels=pixels, label=recording.label, window_start=start))
    return images


def build_sfis(recording, instance: int = 0) -> list[SFImage]:
    """One normalized 64x64 image per depth frame."""
    return [
        SFImage(
            pixels=resize_bilinear(normalize01(frame), IMAGE_SIZE, IMAGE_SIZE),
            label=recording.label,
            frame_index=i,
            instance=instance,
        )
        for i, frame in enumerate(np.asarray(recording.frames, dtype=np.float64))
    ]


def prewitt(img, normalize: bool = True) -> np.ndarray:
    """Prewitt gradient magnitude at the input size.

    The border is edge-replicated before the valid correlation so a constant
    image yields zero response everywhere, border included.
    """
    src = np.asarray(img, dtype=np.float64)
    padded = np.pad(src, 1, mode="edge")
    gx = conv2d_valid(padded, PREWITT_X)
    gy = conv2d_valid(padded, PREWITT_Y)
    magnitude = np.hypot(gx, gy)
    return normalize01(magnitude) if normalize else magnitude


def write_pgm(img, path) -> None:
    """Dump a [0,1] image as binary PGM (P5, maxval 255) for inspection."""
    img = np.asarray(img, dtype=np.float64)
    gray = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header + gray.tobytes())
