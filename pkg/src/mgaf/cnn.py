"""Per-modality feature extractor: three conv layers, two pools, one FC.

The softmax head exists only to train the network; downstream stages
consume the activations tapped after every conv block (post-pool where a
pool follows) and after the first fully connected layer. Public entry
points take activation blocks in ``(height, width, channels, batch)``
layout; internally everything runs batch-major.

Training is plain SGD with momentum; the L2 penalty enters the weight
gradients (biases are not decayed) and the reported loss is the
cross-entropy term alone.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, NumericalError

CHECKPOINT_MAGIC = b"MGAFCNN1"

_POOL_KINDS = ("max", "avg")
_PADDINGS = ("valid", "same")
_DTYPES = ("float64", "float32")


@dataclass(frozen=True)
class CnnConfig:
    n_classes: int
    input_shape: tuple[int, int, int] = (64, 64, 1)
    conv_channels: tuple[int, ...] = (16, 32, 32)
    kernel_sizes: tuple[int, ...] = (5, 5, 5)
    pool_after: tuple[int, ...] = (0, 2)  # conv indices followed by a pool
    pool_size: int = 2
    pool_kind: str = "max"
    conv_padding: str = "valid"
    fc_width: int = 128
    learning_rate: float = 0.005
    momentum: float = 0.9
    l2: float = 0.004
    batch_size: int = 64
    dtype: str = "float64"  # float32 is the opt-in for faster training

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    def validate(self) -> None:
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {_DTYPES}")
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be >= 2, got {self.n_classes}")
        if len(self.conv_channels) != len(self.kernel_sizes):
            raise ConfigError("conv_channels and kernel_sizes lengths differ")
        if any(c < 1 for c in self.conv_channels) or any(k < 1 for k in self.kernel_sizes):
            raise ConfigError("conv channels and kernel sizes must be positive")
        if any(i < 0 or i >= len(self.conv_channels) for i in self.pool_after):
            raise ConfigError(f"pool_after indices out of range: {self.pool_after}")
        if self.pool_kind not in _POOL_KINDS:
            raise ConfigError(f"pool_kind must be one of {_POOL_KINDS}")
        if self.conv_padding not in _PADDINGS:
            raise ConfigError(f"conv_padding must be one of {_PADDINGS}")
        if self.conv_padding == "same" and any(k % 2 == 0 for k in self.kernel_sizes):
            raise ConfigError("same padding requires odd kernel sizes")
        if min(self.fc_width, self.pool_size, self.batch_size) < 1:
            raise ConfigError("fc_width, pool_size and batch_size must be positive")
        if self.learning_rate < 0 or self.momentum < 0 or self.l2 < 0:
            raise ConfigError("learning_rate, momentum and l2 must be >= 0")
        stage_shapes(self)  # raises if a layer shrinks a dim below 1


def stage_shapes(config: CnnConfig) -> dict[str, tuple[int, ...]]:
    """Per-stage activation shapes: ``(h, w, c)`` after each conv block
    (post-pool where one follows) and ``(fc_width,)`` for the FC stage."""
    h, w, _ = config.input_shape
    shapes: dict[str, tuple[int, ...]] = {}
    for i, (channels, k) in enumerate(zip(config.conv_channels, config.kernel_sizes)):
        if config.conv_padding == "valid":
            h, w = h - k + 1, w - k + 1
        if h < 1 or w < 1:
            raise ConfigError(f"conv{i + 1} output would be empty: ({h}, {w})")
        if i in config.pool_after:
            h, w = h // config.pool_size, w // config.pool_size
            if h < 1 or w < 1:
                raise ConfigError(f"pool after conv{i + 1} would empty the map")
        shapes[f"conv{i + 1}"] = (h, w, channels)
    shapes["fc1"] = (config.fc_width,)
    return shapes


@dataclass
class StageActivations:
    """Feature taps for one batch: conv blocks as (h, w, c, batch), fc1 as
    (batch, width)."""

    convs: tuple[np.ndarray, ...]
    fc1: np.ndarray

    def __post_init__(self):
        batches = {a.shape[3] for a in self.convs} | {self.fc1.shape[0]}
        if len(batches) != 1:
            raise ValueError(f"stage batch dims disagree: {sorted(batches)}")

    @property
    def batch(self) -> int:
        return self.fc1.shape[0]

    @property
    def conv1(self) -> np.ndarray:
        return self.convs[0]

    @property
    def conv2(self) -> np.ndarray:
        return self.convs[1]

    @property
    def conv3(self) -> np.ndarray:
        return self.convs[2]

    def stage(self, name: str) -> np.ndarray:
        if name == "fc1":
            return self.fc1
        if name.startswith("conv"):
            return self.convs[int(name[4:]) - 1]
        raise KeyError(name)


@dataclass
class CnnModel:
    config: CnnConfig
    seed: int
    conv_weights: list[np.ndarray]  # each (kh, kw, c_in, c_out)
    conv_biases: list[np.ndarray]
    fc_weight: np.ndarray  # (flat, fc_width)
    fc_bias: np.ndarray
    head_weight: np.ndarray  # (fc_width, n_classes)
    head_bias: np.ndarray
    velocities: dict[str, np.ndarray] = field(default_factory=dict)

    def parameters(self) -> dict[str, np.ndarray]:
        """Live parameter arrays in declaration (checkpoint) order."""
        params: dict[str, np.ndarray] = {}
        for i, (w, b) in enumerate(zip(self.conv_weights, self.conv_biases)):
            params[f"conv{i + 1}_w"] = w
            params[f"conv{i + 1}_b"] = b
        params["fc1_w"] = self.fc_weight
        params["fc1_b"] = self.fc_bias
        params["head_w"] = self.head_weight
        params["head_b"] = self.head_bias
        return params

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())


def init(config: CnnConfig, seed: int) -> CnnModel:
    """He-style fan-in uniform weights (variance 2/fan_in), zero biases."""
    config.validate()
    rng = np.random.default_rng(seed)
    dtype = config.np_dtype

    def he_uniform(shape, fan_in):
        limit = np.sqrt(6.0 / fan_in)
        return rng.uniform(-limit, limit, size=shape).astype(dtype)

    conv_weights, conv_biases = [], []
    c_in = config.input_shape[2]
    for channels, k in zip(config.conv_channels, config.kernel_sizes):
        conv_weights.append(he_uniform((k, k, c_in, channels), k * k * c_in))
        conv_biases.append(np.zeros(channels, dtype=dtype))
        c_in = channels
    shapes = stage_shapes(config)
    flat = int(np.prod(shapes[f"conv{len(config.conv_channels)}"]))
    fc_weight = he_uniform((flat, config.fc_width), flat)
    head_weight = he_uniform((config.fc_width, config.n_classes), config.fc_width)
    model = CnnModel(
        config=config,
        seed=seed,
        conv_weights=conv_weights,
        conv_biases=conv_biases,
        fc_weight=fc_weight,
        fc_bias=np.zeros(config.fc_width, dtype=dtype),
        head_weight=head_weight,
        head_bias=np.zeros(config.n_classes, dtype=dtype),
    )
    model.velocities = {k: np.zeros_like(v) for k, v in model.parameters().items()}
    return model


def stack_images(images) -> np.ndarray:
    """Stack 2D grayscale images into an ``(h, w, 1, batch)`` block."""
    block = np.stack([np.asarray(im, dtype=np.float64) for im in images], axis=-1)
    return block[:, :, None, :]


def _to_batch_major(model: CnnModel, batch) -> np.ndarray:
    x = np.asarray(batch, dtype=model.config.np_dtype)
    h, w, c = model.config.input_shape
    if x.ndim != 4 or x.shape[:3] != (h, w, c):
        raise ValueError(f"expected input of shape ({h}, {w}, {c}, batch), got {x.shape}")
    return np.ascontiguousarray(x.transpose(3, 0, 1, 2))


def _taps(kh, kw):
    return [(u, v) for u in range(kh) for v in range(kw)]


def _conv_forward(x, w, padding, keep_patches=True):
    """Stride-1 correlation, shaped for this machine's memory bandwidth.

    Multichannel inputs run one small GEMM per kernel tap over a contiguous
    patch copy (cached for the weight gradient). Single-channel inputs
    instead build a (taps, positions) matrix with contiguous writes and use
    one transposed GEMM, since per-tap accumulation over a wide output is
    pure memory traffic when the contraction depth is 1.
    """
    kh, kw, c_in, c_out = w.shape
    if padding == "same":
        p = (kh - 1) // 2
        x = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    n, h, wd, _ = x.shape
    oh, ow = h - kh + 1, wd - kw + 1
    rows = n * oh * ow
    if c_in == 1:
        cols = np.empty((kh * kw, rows), dtype=x.dtype)
        for t, (u, v) in enumerate(_taps(kh, kw)):
            cols[t] = x[:, u : u + oh, v : v + ow, 0].reshape(rows)
        out = cols.T @ w.reshape(kh * kw, c_out)
        return out.reshape(n, oh, ow, c_out), (cols, x.shape)
    out = np.zeros((rows, c_out), dtype=x.dtype)
    patches = [] if keep_patches else None
    for u, v in _taps(kh, kw):
        patch = np.ascontiguousarray(x[:, u : u + oh, v : v + ow, :]).reshape(rows, c_in)
        if keep_patches:
            patches.append(patch)
        out += patch @ w[u, v]
    return out.reshape(n, oh, ow, c_out), (patches, x.shape)


def _conv_backward(dout, cache, w, x_shape, padding):
    stored, padded_shape = cache
    kh, kw, c_in, c_out = w.shape
    n, oh, ow = dout.shape[:3]
    dout2d = dout.reshape(n * oh * ow, c_out)
    db = dout2d.sum(axis=0)
    dx = np.zeros(padded_shape, dtype=dout.dtype)
    if c_in == 1:
        cols = stored
        dw = (cols @ dout2d).reshape(w.shape)
        dcols = np.ascontiguousarray((dout2d @ w.reshape(kh * kw, c_out).T).T)
        for t, (u, v) in enumerate(_taps(kh, kw)):
            dx[:, u : u + oh, v : v + ow, 0] += dcols[t].reshape(n, oh, ow)
    else:
        dw = np.empty_like(w)
        for t, (u, v) in enumerate(_taps(kh, kw)):
            dw[u, v] = stored[t].T @ dout2d
            dpatch = dout2d @ w[u, v].T
            dx[:, u : u + oh, v : v + ow, :] += dpatch.reshape(n, oh, ow, c_in)
    if padding == "same":
        p = (kh - 1) // 2
        dx = dx[:, p : p + x_shape[1], p : p + x_shape[2], :]
    return dw, db, dx


def _pool_forward(x, size, kind, want_idx=True):
    n, h, w, c = x.shape
    oh, ow = h // size, w // size
    crop = x[:, : oh * size, : ow * size, :]
    win = crop.reshape(n, oh, size, ow, size, c)
    if kind == "max":
        if not want_idx:
            return win.max(axis=(2, 4)), None
        flat = win.transpose(0, 1, 3, 5, 2, 4).reshape(n, oh, ow, c, size * size)
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        return out, idx
    return win.mean(axis=(2, 4)), None


def _pool_backward(dout, idx, x_shape, size, kind):
    n, h, w, c = x_shape
    oh, ow = dout.shape[1], dout.shape[2]
    if kind == "max":
        dflat = np.zeros((n, oh, ow, c, size * size), dtype=dout.dtype)
        np.put_along_axis(dflat, idx[..., None], dout[..., None], axis=-1)
        dwin = dflat.reshape(n, oh, ow, c, size, size).transpose(0, 1, 4, 2, 5, 3)
    else:
        dwin = np.broadcast_to(
            dout[:, :, None, :, None, :] / (size * size), (n, oh, size, ow, size, c)
        )
    dx = np.zeros(x_shape, dtype=dout.dtype)
    dx[:, : oh * size, : ow * size, :] = dwin.reshape(n, oh * size, ow * size, c)
    return dx


def _forward_internal(model: CnnModel, x, want_cache: bool):
    cfg = model.config
    cache = {"in_shape": [], "conv": [], "pre": [], "pool_idx": [], "pool_in_shape": []}
    taps = []
    a = x
    for i, w in enumerate(model.conv_weights):
        pre, conv_cache = _conv_forward(a, w, cfg.conv_padding, keep_patches=want_cache)
        pre = pre + model.conv_biases[i]
        act = np.maximum(pre, 0.0)
        if i in cfg.pool_after:
            pooled, idx = _pool_forward(act, cfg.pool_size, cfg.pool_kind,
                                        want_idx=want_cache)
        else:
            pooled, idx = act, None
        if want_cache:
            cache["in_shape"].append(a.shape)
            cache["conv"].append(conv_cache)
            cache["pre"].append(pre)
            cache["pool_idx"].append(idx)
            cache["pool_in_shape"].append(act.shape)
        taps.append(pooled)
        a = pooled
    flat = a.reshape(a.shape[0], -1)
    fc_pre = flat @ model.fc_weight + model.fc_bias
    fc_act = np.maximum(fc_pre, 0.0)
    logits = fc_act @ model.head_weight + model.head_bias
    if want_cache:
        cache.update(flat=flat, fc_pre=fc_pre, fc_act=fc_act)
    return taps, fc_act, logits, cache


def _softmax_cross_entropy(logits, labels):
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    loss = -log_probs[np.arange(n), labels].mean()
    dlogits = (np.exp(log_probs) - np.eye(logits.shape[1], dtype=logits.dtype)[labels]) / n
    return loss, dlogits


def _check_labels(config, labels, n):
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError(f"labels must have shape ({n},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= config.n_classes:
        raise DataError(f"labels must lie in [0, {config.n_classes}), got "
                        f"[{labels.min()}, {labels.max()}]")
    return labels.astype(int)


def forward(model: CnnModel, batch):
    """Run the network on an ``(h, w, c, batch)`` block.

    Returns ``(StageActivations, logits)``; activations are tapped after
    each conv block and the first FC layer.
    """
    x = _to_batch_major(model, batch)
    taps, fc_act, logits, _ = _forward_internal(model, x, want_cache=False)
    acts = StageActivations(
        convs=tuple(t.transpose(1, 2, 3, 0) for t in taps),
        fc1=fc_act,
    )
    return acts, logits


def extract(model: CnnModel, batch) -> StageActivations:
    """Feature taps only; identical to :func:`forward` with logits dropped."""
    return forward(model, batch)[0]


def _gradients(model: CnnModel, x, labels):
    cfg = model.config
    taps, _, logits, cache = _forward_internal(model, x, want_cache=True)
    loss, dlogits = _softmax_cross_entropy(logits, labels)
    grads: dict[str, np.ndarray] = {}
    grads["head_w"] = cache["fc_act"].T @ dlogits
    grads["head_b"] = dlogits.sum(axis=0)
    dfc_act = dlogits @ model.head_weight.T
    dfc_pre = dfc_act * (cache["fc_pre"] > 0)
    grads["fc1_w"] = cache["flat"].T @ dfc_pre
    grads["fc1_b"] = dfc_pre.sum(axis=0)
    da = (dfc_pre @ model.fc_weight.T).reshape(taps[-1].shape)
    for i in reversed(range(len(model.conv_weights))):
        if i in cfg.pool_after:
            da = _pool_backward(da, cache["pool_idx"][i], cache["pool_in_shape"][i],
                                cfg.pool_size, cfg.pool_kind)
        dpre = da * (cache["pre"][i] > 0)
        dw, db, da = _conv_backward(dpre, cache["conv"][i], model.conv_weights[i],
                                    cache["in_shape"][i], cfg.conv_padding)
        grads[f"conv{i + 1}_w"] = dw
        grads[f"conv{i + 1}_b"] = db
    return loss, grads


def evaluate_loss(model: CnnModel, batch, labels, include_l2: bool = False) -> float:
    """Cross-entropy of the batch; optionally adds the 0.5*l2*||w||^2 term."""
    x = _to_batch_major(model, batch)
    labels = _check_labels(model.config, labels, x.shape[0])
    _, _, logits, _ = _forward_internal(model, x, want_cache=False)
    loss, _ = _softmax_cross_entropy(logits, labels)
    if include_l2:
        loss += 0.5 * model.config.l2 * sum(
            float((w * w).sum())
            for name, w in model.parameters().items()
            if name.endswith("_w")
        )
    return float(loss)


def train_step(model: CnnModel, batch, labels) -> float:
    """One SGD-with-momentum update.

    The update minimizes cross-entropy plus 0.5*l2*||w||^2 over the weight
    tensors; the returned value is the pre-update cross-entropy.
    """
    cfg = model.config
    x = _to_batch_major(model, batch)
    labels = _check_labels(cfg, labels, x.shape[0])
    loss, grads = _gradients(model, x, labels)
    if not np.isfinite(loss):
        raise NumericalError(
            f"non-finite training loss {loss}; parameter norm "
            f"{sum(float(np.abs(p).max()) for p in model.parameters().values()):.3e}"
        )
    params = model.parameters()
    for name, p in params.items():
        g = grads[name]
        if name.endswith("_w"):
            g = g + cfg.l2 * p
        v = model.velocities[name]
        v *= cfg.momentum
        v += g
        p -= cfg.learning_rate * v
    return float(loss)


def fit(
    model: CnnModel,
    images,
    labels,
    *,
    epochs: int = 20,
    val_fraction: float = 0.1,
    patience: int = 5,
    shuffle_seed: int = 0,
) -> dict:
    """Mini-batch training with early stop once validation loss stops
    improving for ``patience`` epochs; best-validation weights are restored."""
    x = _to_batch_major(model, images)
    n = x.shape[0]
    labels = _check_labels(model.config, labels, n)
    rng = np.random.default_rng(shuffle_seed)
    order = rng.permutation(n)
    n_val = int(round(val_fraction * n))
    if n_val < 1 or n - n_val < 1:
        n_val = 0
    val_idx, train_idx = order[:n_val], order[n_val:]
    history: dict = {"train_loss": [], "val_loss": [], "stopped_epoch": None}
    best_val = np.inf
    best_params = None
    since_best = 0
    batch = model.config.batch_size
    for epoch in range(epochs):
        perm = train_idx[rng.permutation(len(train_idx))]
        losses = []
        for lo in range(0, len(perm), batch):
            idx = perm[lo : lo + batch]
            xb = x[idx].transpose(1, 2, 3, 0)
            losses.append(train_step(model, xb, labels[idx]))
        history["train_loss"].append(float(np.mean(losses)))
        if n_val:
            xv = x[val_idx].transpose(1, 2, 3, 0)
            val_loss = evaluate_loss(model, xv, labels[val_idx])
            history["val_loss"].append(val_loss)
            if val_loss < best_val - 1e-12:
                best_val = val_loss
                best_params = {k: v.copy() for k, v in model.parameters().items()}
                since_best = 0
            else:
                since_best += 1
                if since_best > patience:
                    history["stopped_epoch"] = epoch
                    break
    if best_params is not None:
        for name, p in model.parameters().items():
            p[...] = best_params[name]
    return history


def save_model(model: CnnModel, path) -> None:
    """Binary checkpoint: magic, config block, then f64 weight blobs in
    declaration order."""
    cfg = model.config
    parts = [CHECKPOINT_MAGIC]
    parts.append(struct.pack("<5I", cfg.n_classes, *cfg.input_shape, len(cfg.conv_channels)))
    for k, ch in zip(cfg.kernel_sizes, cfg.conv_channels):
        parts.append(struct.pack("<2I", k, ch))
    parts.append(struct.pack("<I", len(cfg.pool_after)))
    if cfg.pool_after:
        parts.append(struct.pack(f"<{len(cfg.pool_after)}I", *cfg.pool_after))
    parts.append(struct.pack("<I3B", cfg.pool_size,
                             _POOL_KINDS.index(cfg.pool_kind),
                             _PADDINGS.index(cfg.conv_padding),
                             _DTYPES.index(cfg.dtype)))
    parts.append(struct.pack("<I3dIq", cfg.fc_width, cfg.learning_rate, cfg.momentum,
                             cfg.l2, cfg.batch_size, model.seed))
    for arr in model.parameters().values():
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_model(path) -> CnnModel:
    blob = Path(path).read_bytes()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise DataError(f"{Path(path).name}: bad magic, not a CNN checkpoint")
    off = len(CHECKPOINT_MAGIC)

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(blob):
            raise DataError(f"{Path(path).name}: truncated checkpoint")
        vals = struct.unpack(fmt, blob[off : off + size])
        off += size
        return vals

    n_classes, ih, iw, ic, n_conv = take("<5I")
    kernel_sizes, conv_channels = [], []
    for _ in range(n_conv):
        k, ch = take("<2I")
        kernel_sizes.append(k)
        conv_channels.append(ch)
    (n_pool,) = take("<I")
    pool_after = tuple(take(f"<{n_pool}I")) if n_pool else ()
    pool_size, kind_code, pad_code, dtype_code = take("<I3B")
    fc_width, lr, momentum, l2, batch_size, seed = take("<I3dIq")
    config = CnnConfig(
        n_classes=n_classes,
        input_shape=(ih, iw, ic),
        conv_channels=tuple(conv_channels),
        kernel_sizes=tuple(kernel_sizes),
        pool_after=pool_after,
        pool_size=pool_size,
        pool_kind=_POOL_KINDS[kind_code],
        conv_padding=_PADDINGS[pad_code],
        dtype=_DTYPES[dtype_code],
        fc_width=fc_width,
        learning_rate=lr,
        momentum=momentum,
        l2=l2,
        batch_size=batch_size,
    )
    model = init(config, seed=seed)
    for name, p in model.parameters().items():
        nbytes = p.size * 8
        if off + nbytes > len(blob):
            raise DataError(f"{Path(path).name}: truncated weight blob {name}")
        p[...] = np.frombuffer(blob[off : off + nbytes], dtype="<f8").reshape(p.shape)
        off += nbytes
    model.velocities = {k: np.zeros_like(v) for k, v in model.parameters().items()}
    return model
