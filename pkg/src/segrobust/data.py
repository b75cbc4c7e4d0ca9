"""Synthetic data, preprocessing and the on-disk dataset container.

A dataset directory holds ``manifest.json`` plus one ``.lsbr`` file per sample:

    b"LSBR" | u32 LE height | u32 LE width | H*W f32 LE image | H*W u8 mask (0/1)

The manifest lists every sample with its file name and SHA-256 digest.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, IngestionError

RASTER_MAGIC = b"LSBR"
MANIFEST_FORMAT = "segrobust-dataset"
MANIFEST_VERSION = 1
DEFAULT_INTENSITY_MAX = 0.2


@dataclass
class Sample:
    image: np.ndarray
    mask: np.ndarray
    id: str

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.mask = np.asarray(self.mask, dtype=np.uint8)
        if self.image.ndim != 2 or self.image.shape != self.mask.shape:
            raise ContractError(f"sample {self.id}: image {self.image.shape} and mask {self.mask.shape} must be equal 2-D shapes")


@dataclass
class Dataset:
    samples: list
    intensity_max: float = DEFAULT_INTENSITY_MAX
    provenance: str = "synthetic"
    split: str = "all"
    seed: int | None = None
    pipeline: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.samples:
            raise ContractError("dataset must contain at least one sample")
        if not self.intensity_max > 0:
            raise ContractError("intensity_max must be > 0")
        shape = self.samples[0].image.shape
        for s in self.samples:
            if s.image.shape != shape:
                raise ContractError(f"sample {s.id} has shape {s.image.shape}, expected {shape}")

    def __len__(self):
        return len(self.samples)

    @property
    def shape(self) -> tuple:
        return self.samples[0].image.shape

    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.samples])

    def masks(self) -> np.ndarray:
        return np.stack([s.mask for s in self.samples])

    def ids(self) -> list:
        return [s.id for s in self.samples]

    def subset(self, start: int, stop: int, split: str) -> "Dataset":
        return Dataset(self.samples[start:stop], self.intensity_max, self.provenance, split, self.seed, dict(self.pipeline))


# ---------------------------------------------------------------- preprocessing


def zero_pad(raster: np.ndarray, target: tuple) -> np.ndarray:
    """Centre ``raster`` in a zero canvas of ``target``; odd leftovers go right/bottom."""
    raster = np.asarray(raster)
    h, w = raster.shape
    ht, wt = target
    if ht < h or wt < w:
        raise ContractError(f"cannot pad {h}x{w} into smaller target {ht}x{wt}")
    top, left = (ht - h) // 2, (wt - w) // 2
    out = np.zeros((ht, wt), dtype=raster.dtype)
    out[top : top + h, left : left + w] = raster
    return out


def crop_center(raster: np.ndarray, size: tuple) -> np.ndarray:
    """Inverse of :func:`zero_pad`."""
    ht, wt = raster.shape
    h, w = size
    top, left = (ht - h) // 2, (wt - w) // 2
    return raster[top : top + h, left : left + w]


def scale_to_range(raster: np.ndarray, intensity_max: float = DEFAULT_INTENSITY_MAX) -> np.ndarray:
    """Min-max scale into ``[0, intensity_max]``; a constant raster becomes zeros."""
    x = np.asarray(raster, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo) * intensity_max


def slice_volume(volume: np.ndarray, mask_volume: np.ndarray, prefix: str = "vol") -> list:
    """One Sample per depth frame, ids ``{prefix}-d{index}``."""
    volume = np.asarray(volume)
    mask_volume = np.asarray(mask_volume)
    if volume.ndim != 3 or volume.shape != mask_volume.shape:
        raise ContractError(f"volume {volume.shape} and mask volume {mask_volume.shape} must be equal DxHxW shapes")
    return [Sample(volume[d], mask_volume[d], f"{prefix}-d{d:03d}") for d in range(volume.shape[0])]


def preprocess_volume(volume, mask_volume, target: tuple, intensity_max: float = DEFAULT_INTENSITY_MAX, prefix: str = "vol") -> list:
    """Slice, zero-pad to ``target`` and scale each frame, as done for the real scans."""
    out = []
    for s in slice_volume(volume, mask_volume, prefix):
        mask = np.asarray(s.mask)
        if not np.isin(mask, (0, 1)).all():
            raise ContractError(f"{s.id}: mask values must be 0 or 1")
        image = zero_pad(scale_to_range(s.image, intensity_max), target)
        out.append(Sample(image, zero_pad(mask, target), s.id))
    return out


# ---------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class SynthConfig:
    count: int = 80
    height: int = 32
    width: int = 32
    family: str = "ellipse-pair"
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        errors = self.violations()
        if errors:
            raise ConfigError("; ".join(errors))

    def violations(self) -> list:
        out = []
        if self.count < 1:
            out.append("count must be >= 1")
        if self.height < 16 or self.width < 16 or self.height % 4 or self.width % 4:
            out.append("height and width must be >= 16 and divisible by 4")
        if self.family not in ("ellipse-pair", "single-blob"):
            out.append("family must be 'ellipse-pair' or 'single-blob'")
        if self.noise < 0:
            out.append("noise must be >= 0")
        return out


def _ellipse_radius(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Normalised elliptical radius field (<= 1 inside) for one random ellipse."""
    s = min(h, w)
    a, b = rng.uniform(0.08 * s, 0.18 * s, size=2)
    theta = rng.uniform(0.0, np.pi)
    reach = max(a, b) + 1.0
    cy = rng.uniform(reach, h - 1 - reach)
    cx = rng.uniform(reach, w - 1 - reach)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return np.sqrt((u / a) ** 2 + (v / b) ** 2)


def synth_sample(cfg: SynthConfig, index: int, intensity_max: float = DEFAULT_INTENSITY_MAX) -> Sample:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, index])))
    h, w = cfg.height, cfg.width
    n_blobs = 1 if cfg.family == "single-blob" else (2 if rng.random() < 0.8 else 1)
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    gy, gx = rng.uniform(-0.1, 0.1, size=2)
    image = 0.3 + gy * yy + gx * xx
    mask = np.zeros((h, w), dtype=bool)
    for _ in range(n_blobs):
        r = _ellipse_radius(h, w, rng)
        contrast = rng.uniform(0.3, 0.5)
        # soft edge: half contrast exactly on the mask boundary
        image = image + contrast / (1.0 + np.exp(np.clip((r - 1.0) * 8.0, -50, 50)))
        mask |= r <= 1.0
    image = image + cfg.noise * rng.standard_normal((h, w))
    return Sample(scale_to_range(image, intensity_max), mask.astype(np.uint8), f"syn-{cfg.seed}-{index:05d}")


def generate_synthetic(cfg: SynthConfig, intensity_max: float = DEFAULT_INTENSITY_MAX) -> Dataset:
    """Deterministic per (seed, index): each sample draws from its own PCG64 stream."""
    samples = [synth_sample(cfg, i, intensity_max) for i in range(cfg.count)]
    pipeline = {
        "generator": "synthetic",
        "family": cfg.family,
        "height": cfg.height,
        "width": cfg.width,
        "noise": cfg.noise,
        "scaling": "per-image min-max",
    }
    return Dataset(samples, intensity_max, "synthetic", "all", cfg.seed, pipeline)


# ---------------------------------------------------------------- container


def raster_to_bytes(sample: Sample) -> bytes:
    h, w = sample.image.shape
    return (
        RASTER_MAGIC
        + struct.pack("<II", h, w)
        + np.ascontiguousarray(sample.image, dtype="<f4").tobytes()
        + np.ascontiguousarray(sample.mask, dtype=np.uint8).tobytes()
    )


def raster_from_bytes(buf: bytes, sample_id: str) -> Sample:
    if len(buf) < 12 or buf[:4] != RASTER_MAGIC:
        raise IngestionError(f"sample {sample_id}: bad raster magic")
    h, w = struct.unpack("<II", buf[4:12])
    n = h * w
    if len(buf) != 12 + 5 * n:
        raise IngestionError(f"sample {sample_id}: raster is {len(buf)} bytes, expected {12 + 5 * n} for {h}x{w}")
    image = np.frombuffer(buf, dtype="<f4", count=n, offset=12).astype(np.float32).reshape(h, w)
    mask = np.frombuffer(buf, dtype=np.uint8, count=n, offset=12 + 4 * n).reshape(h, w).copy()
    bad = np.setdiff1d(np.unique(mask), (0, 1))
    if bad.size:
        raise IngestionError(f"sample {sample_id}: mask contains values {bad.tolist()} outside {{0, 1}}")
    if not np.isfinite(image).all():
        raise IngestionError(f"sample {sample_id}: image contains non-finite values")
    return Sample(image, mask, sample_id)


def _manifest_bytes(manifest: dict) -> bytes:
    return (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode("utf-8")


def write_dataset(ds: Dataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(ds.samples):
        name = f"{i:05d}.lsbr"
        raw = raster_to_bytes(s)
        (directory / name).write_bytes(raw)
        entries.append({"id": s.id, "file": name, "sha256": hashlib.sha256(raw).hexdigest()})
    h, w = ds.shape
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "intensity_max": ds.intensity_max,
        "provenance": ds.provenance,
        "split": ds.split,
        "seed": ds.seed,
        "height": h,
        "width": w,
        "pipeline": ds.pipeline,
        "samples": entries,
    }
    (directory / "manifest.json").write_bytes(_manifest_bytes(manifest))
    return directory


def read_dataset(directory) -> Dataset:
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.is_file():
        raise IngestionError(f"{directory}: missing manifest.json")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise IngestionError(f"{path}: unreadable manifest ({exc})") from None
    if manifest.get("format") != MANIFEST_FORMAT or manifest.get("version") != MANIFEST_VERSION:
        raise IngestionError(f"{path}: unsupported manifest format/version")
    try:
        entries = manifest["samples"]
        samples = []
        for e in entries:
            f = directory / e["file"]
            if not f.is_file():
                raise IngestionError(f"sample {e['id']}: raster file {e['file']} is missing")
            raw = f.read_bytes()
            if hashlib.sha256(raw).hexdigest() != e["sha256"]:
                raise IngestionError(f"sample {e['id']}: checksum mismatch for {e['file']}")
            samples.append(raster_from_bytes(raw, e["id"]))
        if not samples:
            raise IngestionError(f"{path}: manifest lists no samples")
        if any(s.image.shape != (manifest["height"], manifest["width"]) for s in samples):
            raise IngestionError(f"{path}: sample shapes disagree with manifest height/width")
        imax = float(manifest["intensity_max"])
        for s in samples:
            if s.image.min() < 0 or s.image.max() > np.float32(imax):
                raise IngestionError(f"sample {s.id}: image values outside [0, {imax}]")
        return Dataset(samples, imax, manifest["provenance"], manifest["split"], manifest.get("seed"), manifest.get("pipeline", {}))
    except (KeyError, TypeError) as exc:
        raise IngestionError(f"{path}: malformed manifest ({exc!r})") from None
