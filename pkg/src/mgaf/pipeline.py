"""End-to-end orchestration: split, train per-modality CNNs, pair samples
across modalities, fuse stage features, classify with the SVM.

An experiment repeats R seeded 80/20 instance splits. Within a split each
modality's CNN trains on that modality's images alone; fusion happens at
feature level on paired samples. Inertial windows drive sample alignment:
every (instance, window) pair becomes one sample whose depth-side features
come either from one seeded-random frame (``random_frame``) or from the
feature-level mean over the instance's frames (``mean_frame``).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from pathlib import Path

import numpy as np

from . import cnn, svm
from .diagnostics import metrics, ncc_table, write_ncc_csv
from .errors import ConfigError, DataError
from .gaf import FusionMode, fuse, fuse_stage, high_boost_kernel
from .imaging import build_sfis, build_signal_images, prewitt
from .ingest import augment, load_instances, synth_generate

MODALITIES = ("si", "sfi", "sfi_prewitt")
STAGES = ("conv1", "conv2", "conv3", "fc1")


class PairingPolicy(str, Enum):
    RANDOM_FRAME = "random_frame"
    MEAN_FRAME = "mean_frame"


def derive_seed(seed: int, *tags: int) -> int:
    """Stable child seed for a (seed, purpose, split, ...) tuple."""
    return int(np.random.SeedSequence([int(seed), *map(int, tags)]).generate_state(1)[0])


@dataclass(frozen=True)
class ExperimentConfig:
    data: str = ""                 # dataset directory; empty -> synthetic
    classes: int = 4
    instances: int = 12            # per class, synthetic only
    noise: float = 0.8
    frames: int = 6
    modes: tuple[str, ...] = ("gated_average",)
    modalities: tuple[str, ...] = ("si", "sfi")
    pairing_train: str = "random_frame"
    pairing_eval: str = "mean_frame"
    stages: tuple[str, ...] = STAGES
    gating_scope: str = "batch"
    amplification: float = 1.0
    window: int = 52
    overlap: float = 0.5
    augment_jitter: int = 0
    augment_scale: int = 0
    augment_sigma: float = 0.05
    epochs: int = 10
    val_fraction: float = 0.15
    patience: int = 5
    lr: float = 0.005
    momentum: float = 0.9
    l2: float = 0.004
    batch: int = 64
    fc_width: int = 128
    dtype: str = "float64"  # float32 opts the CNNs into single precision
    svm_c: float = 1.0
    svm_epochs: int = 100
    splits: int = 1
    train_fraction: float = 0.8
    seed: int = 0
    deterministic: bool = True
    unimodal_baselines: bool = False
    threads: int = 1

    def validate(self) -> None:
        for mode in self.modes:
            FusionMode(mode)  # raises ValueError on unknown mode
        if not self.modes:
            raise ConfigError("modes must not be empty")
        for m in self.modalities:
            if m not in MODALITIES:
                raise ConfigError(f"unknown modality {m!r}; choose from {MODALITIES}")
        if not self.modalities:
            raise ConfigError("modalities must not be empty")
        for s in self.stages:
            if s not in STAGES:
                raise ConfigError(f"unknown stage {s!r}; choose from {STAGES}")
        if not self.stages:
            raise ConfigError("stages must not be empty")
        PairingPolicy(self.pairing_train)
        PairingPolicy(self.pairing_eval)
        if self.gating_scope not in ("batch", "per_sample"):
            raise ConfigError(f"gating_scope must be batch or per_sample, got {self.gating_scope!r}")
        if self.splits < 1:
            raise ConfigError(f"splits must be >= 1, got {self.splits}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"train_fraction must be in (0, 1), got {self.train_fraction}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")

    def to_lines(self) -> list[str]:
        out = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            out.append(f"{f.name}={value}")
        return out


_TUPLE_KEYS = {"modes", "modalities", "stages"}
_BOOL_KEYS = {"deterministic", "unimodal_baselines"}


def _coerce(name: str, value, target_example):
    if not isinstance(value, str):
        return value
    if name in _TUPLE_KEYS:
        return tuple(v.strip() for v in value.split(",") if v.strip())
    if name in _BOOL_KEYS:
        low = value.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {value!r}")
    kind = type(target_example)
    try:
        if kind is int:
            return int(value)
        if kind is float:
            return float(value)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {value!r} as {kind.__name__}") from None
    return value


def config_from_mapping(mapping: dict) -> ExperimentConfig:
    defaults = ExperimentConfig()
    known = {f.name for f in fields(ExperimentConfig)}
    updates = {}
    for key, value in mapping.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        updates[key] = _coerce(key, value, getattr(defaults, key))
    config = replace(defaults, **updates)
    config.validate()
    return config


def read_config_file(path) -> dict[str, str]:
    """Flat ``key=value`` file; blank lines and ``#`` comments are skipped."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"config file not found: {path}")
    mapping: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path.name}:{lineno}: expected key=value, got {line!r}")
        mapping[key.strip()] = value.strip()
    return mapping


@dataclass
class PreparedInstance:
    index: int
    label: int
    images: dict[str, list[np.ndarray]]
    source: object = None  # original ActionInstance, kept for augmentation


@dataclass
class PairedSample:
    instance: int  # position in the prepared list handed to pair_samples
    label: int
    picks: dict[str, tuple[int, ...]]  # modality -> image indices (averaged)


@dataclass
class MultimodalFeatures:
    """Concatenation of the fused stage blocks, one row per sample."""

    data: np.ndarray
    stage_offsets: tuple[int, ...]
    stage_names: tuple[str, ...]

    def __post_init__(self):
        offs = self.stage_offsets
        if offs and (offs[0] != 0 or any(a >= b for a, b in zip(offs, offs[1:]))
                     or offs[-1] >= self.data.shape[1]):
            raise ValueError(f"stage offsets {offs} inconsistent with width {self.data.shape[1]}")

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]


def prepare_instances(instances, config: ExperimentConfig) -> list[PreparedInstance]:
    """Render every instance's images for each configured modality."""
    prepared = []
    for index, inst in enumerate(instances):
        images: dict[str, list[np.ndarray]] = {}
        if "si" in config.modalities:
            images["si"] = [
                im.pixels
                for im in build_signal_images(inst.inertial, config.window, config.overlap)
            ]
        needs_sfi = "sfi" in config.modalities or "sfi_prewitt" in config.modalities
        if needs_sfi:
            sfis = [im.pixels for im in build_sfis(inst.depth, instance=index)]
            if "sfi" in config.modalities:
                images["sfi"] = sfis
            if "sfi_prewitt" in config.modalities:
                images["sfi_prewitt"] = [prewitt(im) for im in sfis]
        prepared.append(PreparedInstance(index=index, label=inst.label,
                                         images=images, source=inst))
    return prepared


def pair_samples(prepared, policy, seed: int,
                 modalities=("si", "sfi")) -> list[PairedSample]:
    """Align modality images into fusible samples.

    One sample per (instance, inertial window); all depth-derived modalities
    of a sample share the same frame choice.
    """
    policy = PairingPolicy(policy)
    rng = np.random.default_rng(seed)
    depth_mods = [m for m in modalities if m != "si"]
    samples = []
    for pos, p in enumerate(prepared):
        for m in modalities:
            if not p.images.get(m):
                raise DataError(f"instance {p.index} is missing modality {m!r}")
        if "si" in modalities:
            anchors = range(len(p.images["si"]))
            anchored_depth = False
        else:
            anchors = range(len(p.images[depth_mods[0]]))
            anchored_depth = True
        for a in anchors:
            picks: dict[str, tuple[int, ...]] = {}
            if "si" in modalities:
                picks["si"] = (a,)
            if depth_mods:
                n_frames = len(p.images[depth_mods[0]])
                if anchored_depth:
                    frame_pick: tuple[int, ...] = (a,)
                elif policy is PairingPolicy.RANDOM_FRAME:
                    frame_pick = (int(rng.integers(n_frames)),)
                else:
                    frame_pick = tuple(range(n_frames))
                for m in depth_mods:
                    picks[m] = frame_pick
            samples.append(PairedSample(instance=pos, label=p.label, picks=picks))
    return samples


def modality_sample_features(model, prepared, samples, modality: str,
                             chunk: int = 64) -> cnn.StageActivations:
    """Stage activations for each sample, averaging over a sample's picks.

    Images are extracted once each in chunks; samples with multiple picks
    (mean_frame pairing) receive the feature-level mean.
    """
    unique: dict[tuple[int, int], int] = {}
    sample_ids, unique_ids, weights = [], [], []
    for s_i, s in enumerate(samples):
        picks = s.picks[modality]
        for j in picks:
            key = (s.instance, j)
            pos = unique.setdefault(key, len(unique))
            sample_ids.append(s_i)
            unique_ids.append(pos)
            weights.append(1.0 / len(picks))
    sample_ids = np.asarray(sample_ids)
    unique_ids = np.asarray(unique_ids)
    weights = np.asarray(weights)
    stack = [prepared[i].images[modality][j] for (i, j) in unique.keys()]
    n_samples = len(samples)
    shapes = cnn.stage_shapes(model.config)
    conv_names = [f"conv{i + 1}" for i in range(len(model.config.conv_channels))]
    conv_bufs = [np.zeros((n_samples, *shapes[name])) for name in conv_names]
    fc_buf = np.zeros((n_samples, model.config.fc_width))
    for lo in range(0, len(stack), chunk):
        block = cnn.stack_images(stack[lo : lo + chunk])
        acts = cnn.extract(model, block)
        mask = (unique_ids >= lo) & (unique_ids < lo + chunk)
        rows = sample_ids[mask]
        local = unique_ids[mask] - lo
        w = weights[mask]
        for buf, conv in zip(conv_bufs, acts.convs):
            batch_major = conv.transpose(3, 0, 1, 2)
            np.add.at(buf, rows, batch_major[local] * w[:, None, None, None])
        np.add.at(fc_buf, rows, acts.fc1[local] * w[:, None])
    return cnn.StageActivations(
        convs=tuple(buf.transpose(1, 2, 3, 0) for buf in conv_bufs),
        fc1=fc_buf,
    )


def build_multimodal(acts_per_modality, mode, kernel=None, scope: str = "batch",
                     stages=STAGES) -> MultimodalFeatures:
    """Fuse each tapped stage across modalities and concatenate the fused
    blocks column-wise, recording where each stage block starts."""
    if kernel is None:
        kernel = high_boost_kernel(1.0)
    blocks = []
    offsets = []
    col = 0
    for stage in stages:
        per_mod = [a.stage(stage) for a in acts_per_modality]
        if stage == "fc1":
            fused = fuse(per_mod, mode, kernel, scope)
        else:
            fused = fuse_stage(per_mod, mode, kernel, scope)
        offsets.append(col)
        col += fused.shape[1]
        blocks.append(fused)
    return MultimodalFeatures(data=np.concatenate(blocks, axis=1),
                              stage_offsets=tuple(offsets), stage_names=tuple(stages))


@dataclass
class ReportRow:
    split: int
    mode: str
    accuracy: float
    train_minutes: float
    infer_micros_per_sample: float


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    rows: list[ReportRow]
    ncc_rows: list[tuple[int, str, float]] = field(default_factory=list)
    confusion: np.ndarray | None = None
    confusion_classes: np.ndarray | None = None

    def accuracies(self, mode: str) -> list[float]:
        return [r.accuracy for r in self.rows if r.mode == mode]

    def mean_accuracy(self, mode: str) -> float:
        accs = self.accuracies(mode)
        if not accs:
            raise KeyError(f"no rows for mode {mode!r}")
        return float(np.mean(accs))

    def mean_ncc(self) -> list[tuple[str, float]]:
        by_stage: dict[str, list[float]] = {}
        for _, stage, value in self.ncc_rows:
            by_stage.setdefault(stage, []).append(value)
        return [(stage, float(np.mean(vals))) for stage, vals in by_stage.items()]

    def report_csv_text(self) -> str:
        lines = ["split_id,mode,accuracy,train_minutes,infer_micros_per_sample"]
        for r in self.rows:
            train_m = 0.0 if self.config.deterministic else r.train_minutes
            infer_us = 0.0 if self.config.deterministic else r.infer_micros_per_sample
            lines.append(f"{r.split},{r.mode},{r.accuracy!r},{train_m!r},{infer_us!r}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.csv").write_text(self.report_csv_text(), encoding="utf-8")
        if self.ncc_rows:
            write_ncc_csv(self.mean_ncc(), out_dir / "ncc.csv")
        if self.confusion is not None:
            header = "truth\\pred," + ",".join(str(c) for c in self.confusion_classes)
            lines = [header]
            for cls, row in zip(self.confusion_classes, self.confusion):
                lines.append(str(cls) + "," + ",".join(str(v) for v in row))
            (out_dir / "confusion.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_or_synthesize(config: ExperimentConfig):
    if config.data:
        path = Path(config.data)
        if not path.exists():
            raise DataError(f"dataset path does not exist: {path}")
        return load_instances(path)
    return synth_generate(config.seed, config.classes, config.instances,
                          config.noise, n_frames=config.frames)


def _cnn_config(config: ExperimentConfig, n_classes: int) -> cnn.CnnConfig:
    return cnn.CnnConfig(
        n_classes=max(2, n_classes),
        fc_width=config.fc_width,
        learning_rate=config.lr,
        momentum=config.momentum,
        l2=config.l2,
        batch_size=config.batch,
        dtype=config.dtype,
    )


def train_modality_cnn(prepared, train_idx, modality: str,
                       config: ExperimentConfig, n_classes: int,
                       model_seed: int, split: int = 0) -> cnn.CnnModel:
    """Train one modality's CNN on the training instances' images."""
    images, labels = [], []
    for i in train_idx:
        p = prepared[int(i)]
        imgs = p.images[modality]
        if not imgs:
            raise DataError(f"instance {p.index} is missing modality {modality!r}")
        images.extend(imgs)
        labels.extend([p.label] * len(imgs))
        if modality == "si" and (config.augment_jitter or config.augment_scale):
            extra_seed = derive_seed(config.seed, 41, split, p.index)
            copies = augment(p.source.inertial, extra_seed,
                             n_jitter=config.augment_jitter,
                             n_scale=config.augment_scale,
                             sigma=config.augment_sigma)
            for copy in copies[1:]:  # first copy is the original
                for im in build_signal_images(copy, config.window, config.overlap):
                    images.append(im.pixels)
                    labels.append(p.label)
    model = cnn.init(_cnn_config(config, n_classes), seed=model_seed)
    cnn.fit(model, cnn.stack_images(images), np.asarray(labels),
            epochs=config.epochs, val_fraction=config.val_fraction,
            patience=config.patience,
            shuffle_seed=derive_seed(model_seed, 1))
    return model


def _predictor(features_train: MultimodalFeatures, y_train, config: ExperimentConfig):
    """SVM trainer that degrades to a constant predictor on single-class data."""
    classes = np.unique(y_train)
    if classes.size < 2:
        only = classes[0]
        return None, lambda feats: np.full(feats.rows, only, dtype=classes.dtype)
    model = svm.train_svm(features_train, y_train, c=config.svm_c,
                          seed=config.seed, epochs=config.svm_epochs)
    return model, lambda feats: svm.predict(model, feats)


def run_experiment(config: ExperimentConfig) -> ExperimentReport:
    """Run R seeded splits of the full pipeline and collect per-row results."""
    config.validate()
    instances = load_or_synthesize(config)
    if len(instances) < 2:
        raise DataError("need at least 2 instances to split")
    n_classes = 1 + max(inst.label for inst in instances)
    prepared = prepare_instances(instances, config)
    kernel = high_boost_kernel(config.amplification)
    rows: list[ReportRow] = []
    ncc_rows: list[tuple[int, str, float]] = []
    confusion = None
    confusion_classes = None
    for split in range(config.splits):
        rng = np.random.default_rng(derive_seed(config.seed, 11, split))
        order = rng.permutation(len(prepared))
        n_train = int(round(config.train_fraction * len(prepared)))
        n_train = min(max(n_train, 1), len(prepared) - 1)
        train_idx, test_idx = order[:n_train], order[n_train:]
        t_cnn = time.perf_counter()
        models = {
            modality: train_modality_cnn(
                prepared, train_idx, modality, config, n_classes,
                model_seed=derive_seed(config.seed, 23, split, mi), split=split)
            for mi, modality in enumerate(config.modalities)
        }
        train_prepared = [prepared[int(i)] for i in train_idx]
        test_prepared = [prepared[int(i)] for i in test_idx]
        train_samples = pair_samples(train_prepared, config.pairing_train,
                                     derive_seed(config.seed, 31, split), config.modalities)
        eval_samples = pair_samples(test_prepared, config.pairing_eval,
                                    derive_seed(config.seed, 37, split), config.modalities)
        train_acts = {m: modality_sample_features(models[m], train_prepared,
                                                  train_samples, m)
                      for m in config.modalities}
        eval_acts = {m: modality_sample_features(models[m], test_prepared,
                                                 eval_samples, m)
                     for m in config.modalities}
        cnn_minutes = (time.perf_counter() - t_cnn) / 60.0
        y_train = np.asarray([s.label for s in train_samples])
        y_eval = np.asarray([s.label for s in eval_samples])
        if len(config.modalities) >= 2 and y_eval.size:
            pair = (config.modalities[0], config.modalities[1])
            for stage, value in ncc_table(eval_acts[pair[0]], eval_acts[pair[1]]):
                ncc_rows.append((split, stage, value))

        def evaluate_mode(mode_name: str, acts_list, mode):
            nonlocal confusion, confusion_classes
            t0 = time.perf_counter()
            mm_train = build_multimodal([train_acts[m] for m in acts_list], mode,
                                        kernel, config.gating_scope, config.stages)
            mm_eval = build_multimodal([eval_acts[m] for m in acts_list], mode,
                                       kernel, config.gating_scope, config.stages)
            _, predict_fn = _predictor(mm_train, y_train, config)
            fit_minutes = (time.perf_counter() - t0) / 60.0
            t1 = time.perf_counter()
            preds = predict_fn(mm_eval)
            infer_us = (time.perf_counter() - t1) / max(1, y_eval.size) * 1e6
            result = metrics(preds, y_eval)
            rows.append(ReportRow(split=split, mode=mode_name,
                                  accuracy=result.accuracy,
                                  train_minutes=cnn_minutes + fit_minutes,
                                  infer_micros_per_sample=infer_us))
            if mode_name == config.modes[0]:
                if confusion is None:
                    confusion = result.confusion
                    confusion_classes = result.classes
                elif result.confusion.shape == confusion.shape and np.array_equal(
                        result.classes, confusion_classes):
                    confusion = confusion + result.confusion

        for mode in config.modes:
            evaluate_mode(mode, config.modalities, mode)
        if config.unimodal_baselines:
            for m in config.modalities:
                evaluate_mode(f"unimodal_{m}", (m,), FusionMode.CONCAT)
    return ExperimentReport(config=config, rows=rows, ncc_rows=ncc_rows,
                            confusion=confusion, confusion_classes=confusion_classes)


def build_full_features(config: ExperimentConfig, checkpoints: dict[str, str] | None = None):
    """Train (or load) per-modality CNNs on the whole dataset, extract
    features for every paired sample, and fuse under the first mode.

    Returns ``(models, acts_per_modality, multimodal, labels)``.
    """
    config.validate()
    instances = load_or_synthesize(config)
    n_classes = 1 + max(inst.label for inst in instances)
    prepared = prepare_instances(instances, config)
    all_idx = np.arange(len(prepared))
    models = {}
    for mi, modality in enumerate(config.modalities):
        if checkpoints and modality in checkpoints:
            models[modality] = cnn.load_model(checkpoints[modality])
        else:
            models[modality] = train_modality_cnn(
                prepared, all_idx, modality, config, n_classes,
                model_seed=derive_seed(config.seed, 23, 0, mi))
    samples = pair_samples(prepared, config.pairing_eval,
                           derive_seed(config.seed, 37, 0), config.modalities)
    acts = {m: modality_sample_features(models[m], prepared, samples, m)
            for m in config.modalities}
    labels = np.asarray([s.label for s in samples])
    mm = build_multimodal([acts[m] for m in config.modalities], config.modes[0],
                          high_boost_kernel(config.amplification),
                          config.gating_scope, config.stages)
    return models, acts, mm, labels
