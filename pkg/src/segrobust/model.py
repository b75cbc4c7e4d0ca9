"""U-Net construction, inference, training and the binary model file.

Model file layout (all integers u32 little-endian, floats IEEE-754 f32 LE)::

    b"SRUN" | version | depth | base | kernel | height | width
    | label_len | label (utf-8)
    | n_params | n_params x ( name_len | name (utf-8) | rank | dims[rank] | data[prod(dims)] )
    | crc32 of every preceding byte
"""

from __future__ import annotations

import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensor as T
from .errors import ConfigError, FormatError, ShapeError, TrainingError
from .losses import LossSpec, compute_loss, dice_score
from .tensor import Tensor

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"SRUN"
MODEL_VERSION = 1


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 2
    base_channels: int = 8
    kernel_size: int = 3
    input_size: tuple = (32, 32)

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        errors = self.violations()
        if errors:
            raise ConfigError("; ".join(errors))

    def violations(self) -> list:
        out = []
        if self.depth < 1:
            out.append("depth must be >= 1")
        if self.base_channels < 1:
            out.append("base_channels must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            out.append("kernel_size must be a positive odd integer")
        step = 2 ** max(self.depth, 0)
        h, w = self.input_size
        if h < 1 or w < 1 or h % step or w % step:
            out.append(f"input_size {h}x{w} must be divisible by 2**depth = {step}")
        return out

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level


def layer_shapes(config: UNetConfig) -> dict:
    """Ordered map of parameter name -> shape for a config."""
    k = config.kernel_size
    shapes = {}

    def conv(name, cin, cout, ksize=k):
        shapes[f"{name}.weight"] = (cout, cin, ksize, ksize)
        shapes[f"{name}.bias"] = (cout,)

    cin = 1
    for level in range(config.depth):
        c = config.channels(level)
        conv(f"enc{level}.conv0", cin, c)
        conv(f"enc{level}.conv1", c, c)
        cin = c
    cb = config.channels(config.depth)
    conv("bottleneck.conv0", cin, cb)
    conv("bottleneck.conv1", cb, cb)
    cin = cb
    for level in reversed(range(config.depth)):
        c = config.channels(level)
        conv(f"dec{level}.conv0", cin + c, c)
        conv(f"dec{level}.conv1", c, c)
        cin = c
    conv("final", cin, 1, ksize=1)
    return shapes


def parameter_count(config: UNetConfig) -> int:
    """Closed-form parameter count (independent of :func:`layer_shapes`)."""
    k2 = config.kernel_size**2
    b, d = config.base_channels, config.depth

    def conv(cin, cout, ks=k2):
        return cin * cout * ks + cout

    total = 0
    prev = 1
    for level in range(d):
        c = b * 2**level
        total += conv(prev, c) + conv(c, c)
        prev = c
    cb = b * 2**d
    total += conv(prev, cb) + conv(cb, cb)
    for level in range(d):
        c = b * 2**level
        total += conv(2 * c + c, c) + conv(c, c)
    return total + conv(b, 1, 1)


@dataclass
class Model:
    config: UNetConfig
    params: dict
    label: str = ""

    def n_parameters(self) -> int:
        return sum(int(v.size) for v in self.params.values())

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.params.items()}, self.label)


def build_unet(config: UNetConfig, seed: int, label: str = "") -> Model:
    """He-uniform weights from a seeded PCG64 stream, zero biases."""
    rng = np.random.Generator(np.random.PCG64(seed))
    params = {}
    for name, shape in layer_shapes(config).items():
        if name.endswith(".weight"):
            fan_in = shape[1] * shape[2] * shape[3]
            limit = math.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-limit, limit, size=shape).astype(np.float32)
        else:
            params[name] = np.zeros(shape, dtype=np.float32)
    return Model(config, params, label)


def unet_logits(config: UNetConfig, params: Mapping[str, Tensor], x: Tensor) -> Tensor:
    """Differentiable U-Net forward pass returning the final-layer logits."""

    def block(name, h):
        h = T.relu(T.conv2d(h, params[f"{name}.conv0.weight"], params[f"{name}.conv0.bias"]))
        return T.relu(T.conv2d(h, params[f"{name}.conv1.weight"], params[f"{name}.conv1.bias"]))

    skips = []
    h = x
    for level in range(config.depth):
        h = block(f"enc{level}", h)
        skips.append(h)
        h = T.maxpool2x2(h)
    h = block("bottleneck", h)
    for level in reversed(range(config.depth)):
        h = T.concat_channels(T.upsample2x2(h), skips[level])
        h = block(f"dec{level}", h)
    return T.conv2d(h, params["final.weight"], params["final.bias"])


def _check_image(model: Model, image) -> np.ndarray:
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim not in (3, 4) or arr.shape[-3] != 1 or arr.shape[-2:] != model.config.input_size:
        h, w = model.config.input_size
        raise ShapeError(f"expected image [1,{h},{w}] or [N,1,{h},{w}], got {arr.shape}")
    return arr


def forward(model: Model, image, output_mode: str = "probabilities") -> Tensor:
    """Inference; ``image`` is ``[1,H,W]``, ``[N,1,H,W]`` or an ``HxW`` raster."""
    if output_mode not in ("probabilities", "logits"):
        raise ConfigError(f"output_mode must be 'probabilities' or 'logits', got {output_mode!r}")
    arr = _check_image(model, image)
    with T.no_tape():
        dt = T.current_dtype()
        params = {k: Tensor._wrap(v.astype(dt, copy=False), False) for k, v in model.params.items()}
        logits = unet_logits(model.config, params, Tensor._wrap(arr.astype(dt, copy=False), False))
        return T.sigmoid(logits) if output_mode == "probabilities" else logits


def predict(model: Model, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Probability maps for a stack of ``HxW`` rasters, shape ``[N,H,W]``."""
    images = np.asarray(images, dtype=np.float32)
    out = []
    for start in range(0, len(images), batch_size):
        chunk = images[start : start + batch_size, None]
        out.append(forward(model, chunk).data[:, 0])
    if not out:
        return np.zeros((0,) + model.config.input_size, dtype=np.float32)
    return np.concatenate(out)


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 8
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        errors = self.violations()
        if errors:
            raise ConfigError("; ".join(errors))

    def violations(self) -> list:
        out = []
        if self.epochs < 1:
            out.append("epochs must be >= 1")
        if self.batch_size < 1:
            out.append("batch_size must be >= 1")
        if not self.learning_rate >= 0:
            out.append("learning_rate must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            out.append("optimizer must be 'sgd' or 'adam'")
        return out


@dataclass
class EpochRecord:
    train_loss: float
    train_dice: float
    val_dice: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def as_dicts(self) -> list:
        return [vars(r).copy() for r in self.records]


@dataclass
class OptimizerState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(params: dict, grads: Mapping, state: OptimizerState, tc: TrainConfig) -> None:
    """In-place SGD or bias-corrected Adam update of ``params`` (name -> ndarray)."""
    lr = tc.learning_rate
    if tc.optimizer == "sgd":
        for name, p in params.items():
            p -= lr * grads[name]
        return
    state.step += 1
    b1, b2 = tc.beta1, tc.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + tc.adam_eps)


def _mean_dice(probs: np.ndarray, masks: np.ndarray) -> float:
    return float(np.mean([dice_score(p, y) for p, y in zip(probs, masks)]))


def train(model: Model, train_set, val_set, loss: LossSpec, tc: TrainConfig):
    """Mini-batch training on ``loss``. Returns a trained copy and its history.

    ``train_set``/``val_set`` are Datasets (anything with ``images()`` and
    ``masks()`` returning ``[N,H,W]`` arrays).
    """
    images, masks = train_set.images(), train_set.masks()
    if len(images) == 0:
        raise ConfigError("training set is empty")
    _check_image(model, images[:1, None])
    val_images = val_set.images() if val_set is not None else None
    val_masks = val_set.masks() if val_set is not None else None

    model = model.copy()
    state = OptimizerState()
    rng = np.random.Generator(np.random.PCG64(tc.seed))
    history = TrainHistory()
    n = len(images)
    for epoch in range(tc.epochs):
        order = rng.permutation(n) if tc.shuffle else np.arange(n)
        losses, dices = [], []
        for b, start in enumerate(range(0, n, tc.batch_size)):
            idx = order[start : start + tc.batch_size]
            x = images[idx][:, None].astype(np.float32)
            y = masks[idx][:, None].astype(np.float32)
            leaves = {k: Tensor._wrap(v, True) for k, v in model.params.items()}
            with T.Tape() as tape:
                probs = T.sigmoid(unet_logits(model.config, leaves, Tensor._wrap(x, False)))
                value = compute_loss(loss, probs, y)
            lv = float(value.data)
            if not np.isfinite(lv):
                raise TrainingError(f"non-finite loss {lv} at epoch {epoch + 1}, batch {b + 1} ({model.label})")
            tape.backward(value)
            grads = {k: t.grad for k, t in leaves.items()}
            optimizer_step(model.params, grads, state, tc)
            losses.append(lv)
            dices.extend(dice_score(p, t) for p, t in zip(probs.data[:, 0], masks[idx]))
        val = _mean_dice(predict(model, val_images), val_masks) if val_images is not None and len(val_images) else float("nan")
        history.records.append(EpochRecord(float(np.mean(losses)), float(np.mean(dices)), val))
        logger.debug("%s epoch %d loss %.4f val dice %.4f", model.label, epoch + 1, history.records[-1].train_loss, val)
    return model, history


# ---------------------------------------------------------------- persistence


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def model_to_bytes(model: Model) -> bytes:
    c = model.config
    parts = [MODEL_MAGIC, struct.pack("<6I", MODEL_VERSION, c.depth, c.base_channels, c.kernel_size, *c.input_size)]
    parts.append(_pack_str(model.label))
    parts.append(struct.pack("<I", len(model.params)))
    for name, arr in model.params.items():
        parts.append(_pack_str(name))
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"model file truncated at byte {self.pos} (needed {n} more)")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u32s(self, count: int) -> tuple:
        return struct.unpack(f"<{count}I", self.take(4 * count))

    def string(self) -> str:
        try:
            return self.take(self.u32()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"model file has an undecodable string: {exc}") from None


def model_from_bytes(buf: bytes) -> Model:
    if len(buf) < 8 or buf[:4] != MODEL_MAGIC:
        raise FormatError("not a model file (bad magic)")
    if len(buf) < 12:
        raise FormatError("model file truncated")
    (crc,) = struct.unpack("<I", buf[-4:])
    body = buf[:-4]
    r = _Reader(body)
    r.take(4)
    version = r.u32()
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported model file version {version} (expected {MODEL_VERSION})")
    if zlib.crc32(body) != crc:
        raise FormatError("model file checksum mismatch (corrupt or truncated)")
    depth, base, kernel, h, w = r.u32s(5)
    try:
        config = UNetConfig(depth, base, kernel, (h, w))
    except ConfigError as exc:
        raise FormatError(f"model file carries an invalid config: {exc}") from None
    label = r.string()
    expected = layer_shapes(config)
    count = r.u32()
    params = {}
    for _ in range(count):
        name = r.string()
        rank = r.u32()
        if rank > 4:
            raise FormatError(f"parameter {name!r} has rank {rank} > 4")
        dims = r.u32s(rank)
        if expected.get(name) != dims:
            raise FormatError(f"parameter {name!r} has shape {dims}, config expects {expected.get(name)}")
        size = int(np.prod(dims))
        params[name] = np.frombuffer(r.take(4 * size), dtype="<f4").astype(np.float32).reshape(dims)
    if set(params) != set(expected):
        raise FormatError(f"model file parameters do not match config (missing {sorted(set(expected) - set(params))})")
    if r.pos != len(body):
        raise FormatError("model file has trailing bytes")
    return Model(config, {k: params[k] for k in expected}, label)


def save_model(model: Model, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> Model:
    return model_from_bytes(Path(path).read_bytes())
