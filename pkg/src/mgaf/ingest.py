"""Loading, generating and augmenting inertial/depth recordings.

On-disk formats (both written and read here):

* Inertial CSV: a ``#meta label=<int> subject=<int> trial=<int> rate=<float>``
  line, a ``ax,ay,az,gx,gy,gz`` header, then one sample per row.
* Depth DSEQ1: magic ``DSEQ1``, little-endian u32 rows/cols/frames/label,
  then frames*rows*cols little-endian f32 depth values in mm, row-major.

Loaders reject malformed input instead of repairing it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

CSV_HEADER = "ax,ay,az,gx,gy,gz"
DSEQ_MAGIC = b"DSEQ1"
# Shortest inertial length the signal-image window can consume.
MIN_SEQUENCE_LEN = 52


@dataclass
class InertialRecording:
    """Six equal-length series: 3-axis acceleration then 3-axis angular rate."""

    sample_rate: float
    sequences: np.ndarray  # (6, length)
    label: int
    subject: int = 0
    trial: int = 0

    def __post_init__(self):
        self.sequences = np.asarray(self.sequences, dtype=np.float64)
        if self.sequences.ndim != 2 or self.sequences.shape[0] != 6:
            raise DataError(f"expected 6 signal sequences, got shape {self.sequences.shape}")
        if self.sequences.shape[1] < MIN_SEQUENCE_LEN:
            raise DataError(
                f"sequences must have length >= {MIN_SEQUENCE_LEN}, got {self.sequences.shape[1]}"
            )
        if not np.all(np.isfinite(self.sequences)):
            raise DataError("inertial sequences contain non-finite values")
        if self.sample_rate <= 0:
            raise DataError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def length(self) -> int:
        return self.sequences.shape[1]


@dataclass
class DepthRecording:
    """A stack of same-sized depth frames in millimetres."""

    frames: np.ndarray  # (n_frames, rows, cols)
    label: int
    subject: int = 0
    trial: int = 0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[0] < 1:
            raise DataError(f"expected >=1 frames of equal dims, got shape {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise DataError("depth frames contain non-finite values")
        if np.any(self.frames < 0):
            raise DataError("depth values must be non-negative millimetres")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class ActionInstance:
    """One action performed once, observed by both sensors."""

    label: int
    inertial: InertialRecording
    depth: DepthRecording

    def __post_init__(self):
        if not (self.label == self.inertial.label == self.depth.label):
            raise DataError(
                f"modality labels disagree: instance={self.label} "
                f"inertial={self.inertial.label} depth={self.depth.label}"
            )


def save_inertial_csv(recording: InertialRecording, path) -> None:
    lines = [
        f"#meta label={recording.label} subject={recording.subject} "
        f"trial={recording.trial} rate={float(recording.sample_rate)!r}",
        CSV_HEADER,
    ]
    for row in recording.sequences.T:
        lines.append(",".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_meta(line: str) -> dict:
    meta = {}
    for token in line[len("#meta") :].split():
        key, _, value = token.partition("=")
        if not value:
            raise DataError(f"malformed #meta token: {token!r}")
        meta[key] = value
    try:
        return {
            "label": int(meta["label"]),
            "subject": int(meta["subject"]),
            "trial": int(meta["trial"]),
            "rate": float(meta["rate"]),
        }
    except KeyError as exc:
        raise DataError(f"#meta line missing key {exc}") from exc


def load_inertial_csv(path) -> InertialRecording:
    """Read an inertial recording, rejecting ragged or non-numeric rows."""
    path = Path(path)
    meta = None
    header_seen = False
    columns: list[list[float]] = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#meta"):
            meta = _parse_meta(line)
            continue
        if line.startswith("#"):
            continue
        if not header_seen:
            if line != CSV_HEADER:
                raise DataError(f"{path.name}:{lineno}: expected header {CSV_HEADER!r}, got {line!r}")
            header_seen = True
            continue
        cells = line.split(",")
        if len(cells) != 6:
            raise DataError(
                f"{path.name}:{lineno}: expected 6 signal columns, got {len(cells)}"
            )
        row = []
        for col, cell in enumerate(cells, start=1):
            try:
                row.append(float(cell))
            except ValueError:
                raise DataError(
                    f"{path.name}:{lineno}: column {col}: non-numeric cell {cell!r}"
                ) from None
        columns.append(row)
    if meta is None:
        raise DataError(f"{path.name}: missing #meta line")
    if not header_seen:
        raise DataError(f"{path.name}: missing {CSV_HEADER!r} header")
    if not columns:
        raise DataError(f"{path.name}: no sample rows")
    return InertialRecording(
        sample_rate=meta["rate"],
        sequences=np.asarray(columns, dtype=np.float64).T,
        label=meta["label"],
        subject=meta["subject"],
        trial=meta["trial"],
    )


def save_depth_dseq(recording: DepthRecording, path) -> None:
    frames = recording.frames.astype("<f4")
    n, rows, cols = frames.shape
    header = DSEQ_MAGIC + struct.pack("<4I", rows, cols, n, recording.label)
    Path(path).write_bytes(header + frames.tobytes())


def load_depth_dseq(path) -> DepthRecording:
    """Read a DSEQ1 depth recording; subject/trial are not stored on disk."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[: len(DSEQ_MAGIC)] != DSEQ_MAGIC:
        raise DataError(f"{path.name}: bad magic, not a DSEQ1 file")
    head_len = len(DSEQ_MAGIC) + 16
    if len(blob) < head_len:
        raise DataError(f"{path.name}: truncated header")
    rows, cols, n_frames, label = struct.unpack("<4I", blob[len(DSEQ_MAGIC) : head_len])
    if rows == 0 or cols == 0 or n_frames == 0:
        raise DataError(f"{path.name}: zero-sized dimension in header")
    frame_bytes = rows * cols * 4
    payload = blob[head_len:]
    if len(payload) < n_frames * frame_bytes:
        raise DataError(f"{path.name}: truncated frame {len(payload) // frame_bytes}")
    data = np.frombuffer(payload[: n_frames * frame_bytes], dtype="<f4")
    return DepthRecording(frames=data.reshape(n_frames, rows, cols), label=label)


def _class_trajectory(class_id: int, rng: np.random.Generator):
    """A smooth 2D path in [0,1]^2; speed grows with the class id so every
    class has a distinct motion signature in both position and derivative."""
    freq = 1.0 + 0.5 * class_id
    direction = 1.0 if class_id % 2 == 0 else -1.0
    phase = rng.uniform(0.0, 2 * np.pi)
    amp_x = rng.uniform(0.22, 0.32)
    amp_y = rng.uniform(0.22, 0.32)
    cx = rng.uniform(0.45, 0.55)
    cy = rng.uniform(0.45, 0.55)

    def pos(t):
        ang = 2 * np.pi * freq * t * direction + phase
        return cx + amp_x * np.cos(ang), cy + amp_y * np.sin(ang)

    def vel(t):
        ang = 2 * np.pi * freq * t * direction + phase
        w = 2 * np.pi * freq * direction
        return -amp_x * w * np.sin(ang), amp_y * w * np.cos(ang)

    def acc(t):
        ang = 2 * np.pi * freq * t * direction + phase
        w = 2 * np.pi * freq * direction
        return -amp_x * w * w * np.cos(ang), -amp_y * w * w * np.sin(ang)

    return pos, vel, acc


def _inertial_template(pos, vel, acc, length: int) -> np.ndarray:
    t = np.linspace(0.0, 1.0, length)
    vx, vy = vel(t)
    ax, ay = acc(t)
    speed = np.hypot(vx, vy)
    template = np.stack([vx, vy, speed, ax, ay, vx * vy])
    peak = np.abs(template).max()
    return template / peak if peak > 0 else template


def _depth_frames(pos, n_frames: int, rows: int, cols: int, jitter) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n_frames)
    px, py = pos(t)
    px = px + jitter[:, 0]
    py = py + jitter[:, 1]
    rr = np.arange(rows)[None, :, None]
    cc = np.arange(cols)[None, None, :]
    cy = (py * (rows - 1))[:, None, None]
    cx = (px * (cols - 1))[:, None, None]
    blob_sigma = max(rows, cols) / 10.0
    d2 = (rr - cy) ** 2 + (cc - cx) ** 2
    return 600.0 * np.exp(-d2 / (2.0 * blob_sigma**2))


def synth_generate(
    seed: int,
    n_classes: int,
    n_instances_per_class: int,
    noise: float,
    *,
    inertial_len: int = MIN_SEQUENCE_LEN,
    n_frames: int = 6,
    frame_rows: int = 32,
    frame_cols: int = 32,
    sample_rate: float = 50.0,
) -> list[ActionInstance]:
    """Deterministic synthetic dataset: each class follows a latent 2D
    trajectory rendered both as moving-blob depth frames and as unit-peak
    derivative series plus Gaussian noise, so the modalities share
    information without being identical."""
    if n_classes < 2:
        raise DataError(f"need at least 2 classes, got {n_classes}")
    if noise < 0:
        raise DataError(f"noise must be >= 0, got {noise}")
    rng = np.random.default_rng(seed)
    instances = []
    for class_id in range(n_classes):
        pos, vel, acc = _class_trajectory(class_id, rng)
        template = _inertial_template(pos, vel, acc, inertial_len)
        for inst in range(n_instances_per_class):
            series = template + rng.normal(0.0, noise, size=template.shape)
            jitter = rng.normal(0.0, 0.03 * noise, size=(n_frames, 2))
            clean_frames = _depth_frames(pos, n_frames, frame_rows, frame_cols, jitter)
            pixel_noise = rng.normal(0.0, 80.0 * noise, size=clean_frames.shape)
            frames = np.clip(clean_frames + pixel_noise, 0.0, None)
            instances.append(
                ActionInstance(
                    label=class_id,
                    inertial=InertialRecording(
                        sample_rate=sample_rate,
                        sequences=series,
                        label=class_id,
                        subject=inst,
                    ),
                    depth=DepthRecording(frames=frames, label=class_id, subject=inst),
                )
            )
    return instances


def augment(
    recording: InertialRecording,
    seed: int,
    *,
    n_jitter: int = 1,
    n_scale: int = 1,
    sigma: float = 0.05,
    scale_range: tuple[float, float] = (0.7, 1.3),
) -> list[InertialRecording]:
    """Return the recording plus jittered and amplitude-scaled copies;
    labels and lengths are preserved. Output count is 1+n_jitter+n_scale."""
    rng = np.random.default_rng(seed)
    out = [
        InertialRecording(
            sample_rate=recording.sample_rate,
            sequences=recording.sequences.copy(),
            label=recording.label,
            subject=recording.subject,
            trial=recording.trial,
        )
    ]
    for _ in range(n_jitter):
        jittered = recording.sequences + rng.normal(0.0, sigma, recording.sequences.shape)
        out.append(
            InertialRecording(recording.sample_rate, jittered, recording.label,
                              recording.subject, recording.trial)
        )
    lo, hi = scale_range
    for _ in range(n_scale):
        factor = rng.uniform(lo, hi)
        out.append(
            InertialRecording(recording.sample_rate, recording.sequences * factor,
                              recording.label, recording.subject, recording.trial)
        )
    return out


def save_instances(instances, directory) -> None:
    """Write one CSV + DSEQ pair per instance under ``inertial/`` and ``depth/``."""
    directory = Path(directory)
    (directory / "inertial").mkdir(parents=True, exist_ok=True)
    (directory / "depth").mkdir(parents=True, exist_ok=True)
    for i, inst in enumerate(instances):
        stem = f"inst{i:05d}"
        save_inertial_csv(inst.inertial, directory / "inertial" / f"{stem}.csv")
        save_depth_dseq(inst.depth, directory / "depth" / f"{stem}.dseq")


def load_instances(directory) -> list[ActionInstance]:
    """Load paired recordings by matching file stems across the two subdirs."""
    directory = Path(directory)
    inertial_dir = directory / "inertial"
    depth_dir = directory / "depth"
    if not inertial_dir.is_dir() or not depth_dir.is_dir():
        raise DataError(f"dataset directory {directory} needs inertial/ and depth/ subdirs")
    instances = []
    for csv_path in sorted(inertial_dir.glob("*.csv")):
        dseq_path = depth_dir / (csv_path.stem + ".dseq")
        if not dseq_path.exists():
            raise DataError(f"instance {csv_path.stem} missing depth file {dseq_path}")
        inertial = load_inertial_csv(csv_path)
        depth = load_depth_dseq(dseq_path)
        instances.append(ActionInstance(label=inertial.label, inertial=inertial, depth=depth))
    if not instances:
        raise DataError(f"no instances found under {directory}")
    return instances
