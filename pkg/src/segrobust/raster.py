"""Binary PGM (P5, maxval 255) reading and writing, plus saliency export."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .errors import FormatError


def write_pgm(path, pixels: np.ndarray) -> Path:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise ValueError(f"PGM rasters are 2-D, got shape {pixels.shape}")
    if pixels.dtype != np.uint8:
        raise ValueError("PGM pixels must be uint8")
    h, w = pixels.shape
    path = Path(path)
    path.write_bytes(b"P5\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(pixels).tobytes())
    return path


_HEADER = re.compile(rb"P5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = _HEADER.match(raw)
    if not m:
        raise FormatError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    body = raw[m.end() :]
    if len(body) != w * h:
        raise FormatError(f"{path}: expected {w * h} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def normalize_u8(values: np.ndarray) -> tuple:
    """Min-max map to 0..255; returns ``(pixels, lo, hi)``."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        return np.zeros(v.shape, dtype=np.uint8), lo, hi
    return np.round((v - lo) / (hi - lo) * 255.0).astype(np.uint8), lo, hi


def sidecar_path(pgm_path) -> Path:
    p = Path(pgm_path)
    return p.with_name(p.stem + ".range.txt")


def write_saliency(path, values: np.ndarray) -> Path:
    """Write a normalised PGM and a sidecar holding the true min/max."""
    pixels, lo, hi = normalize_u8(values)
    write_pgm(path, pixels)
    sidecar_path(path).write_text(f"min {lo!r}\nmax {hi!r}\n", encoding="ascii")
    return Path(path)


def read_saliency(path) -> np.ndarray:
    """Dequantised values (exact at the two extremes, within half a level elsewhere)."""
    pixels = read_pgm(path)
    fields = dict(line.split() for line in sidecar_path(path).read_text(encoding="ascii").splitlines() if line.strip())
    lo, hi = float(fields["min"]), float(fields["max"])
    return lo + pixels.astype(np.float64) / 255.0 * (hi - lo)
