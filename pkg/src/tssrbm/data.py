"""Texture ingestion, preprocessing, patch sampling and image output."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DimensionError, FormatError, IoError

_HEADER = re.compile(rb"\A(P5)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def read_pgm_bytes(data: bytes) -> np.ndarray:
    """Decode a binary (P5, 8-bit) PGM into a uint8 array."""
    m = _HEADER.match(data)
    if m is None:
        raise FormatError("not a binary PGM (P5) file")
    width, height, maxval = int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}; only 255 is accepted")
    payload = data[m.end():]
    need = width * height
    if len(payload) < need:
        raise FormatError(f"truncated PGM payload: {len(payload)} of {need} bytes")
    return np.frombuffer(payload[:need], dtype=np.uint8).reshape(height, width)


def load_grayscale(path) -> np.ndarray:
    """Load a P5 PGM as float64 values in ``[0, 1]``."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return read_pgm_bytes(data).astype(np.float64) / 255.0


def write_pgm(pixels: np.ndarray, path) -> None:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.dtype != np.uint8:
        raise FormatError("write_pgm expects a 2-d uint8 array")
    h, w = pixels.shape
    try:
        with open(path, "wb") as fh:
            fh.write(b"P5\n%d %d\n255\n" % (w, h))
            fh.write(pixels.tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def to_uint8(grid, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    """Undo normalization (``x * std + mean`` in [0, 1] units) and quantize."""
    x = (np.asarray(grid, dtype=np.float64) * std + mean) * 255.0
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def save_image(grid, stats, path) -> None:
    """Write a normalized grid as PGM.

    ``stats`` is ``(mean, std)``, ``None``, or anything carrying ``mean`` and
    ``std`` attributes (a dataset or a model).
    """
    if hasattr(stats, "mean") and hasattr(stats, "std") and not isinstance(stats, (tuple, np.ndarray)):
        stats = (stats.mean, stats.std)
    mean, std = stats if stats is not None else (0.0, 1.0)
    write_pgm(to_uint8(grid, mean, std), path)


@dataclass
class TextureDataset:
    name: str
    train: np.ndarray
    test: np.ndarray
    mean: float
    std: float
    source_shape: tuple[int, int]

    def normalize(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, x):
        return np.asarray(x, dtype=np.float64) * self.std + self.mean

    def save(self, path) -> None:
        np.savez(path, name=self.name, train=self.train, test=self.test,
                 stats=np.array([self.mean, self.std]), source_shape=np.array(self.source_shape))

    @classmethod
    def load(cls, path) -> "TextureDataset":
        try:
            z = np.load(path, allow_pickle=False)
        except OSError as exc:
            raise IoError(f"cannot read dataset {path}: {exc}") from exc
        return cls(str(z["name"]), z["train"], z["test"], float(z["stats"][0]),
                   float(z["stats"][1]), tuple(int(x) for x in z["source_shape"]))


def rescale(image, target: int) -> np.ndarray:
    """Bilinear resize of a square-or-not image so that its width is ``target``."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    if target > min(h, w):
        raise DimensionError(f"target {target} exceeds source {h}x{w}")
    if target == w:
        return image.copy()
    out_h = int(round(h * target / w))
    out = ndimage.zoom(image, (out_h / h, target / w), order=1, mode="nearest", grid_mode=True)
    return out[:out_h, :target]


def preprocess(image, target: int = 320, name: str = "texture") -> TextureDataset:
    """Rescale, split into top (train) / bottom (test) halves, normalize.

    Both halves are normalized with the train half's mean and std.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise DimensionError("expected a grayscale image")
    scaled = rescale(image, target)
    half = scaled.shape[0] // 2
    train, test = scaled[:half], scaled[half:2 * half]
    mean = float(train.mean())
    std = float(train.std())
    if not std > 1e-12:
        raise FormatError("degenerate texture: training half has zero variance")
    ntrain = (train - mean) / std
    # second pass removes the residual rounding of the first
    m2, s2 = float(ntrain.mean()), float(ntrain.std())
    ntrain = (ntrain - m2) / s2
    mean, std = mean + m2 * std, std * s2
    return TextureDataset(name, ntrain, (test - mean) / std, mean, std, image.shape)


def sample_patches(dataset, size: int, count: int, rng: np.random.Generator,
                   split: str = "train") -> np.ndarray:
    """``count`` uniformly placed ``size x size`` crops, shape ``(count, size, size)``.

    ``dataset`` may be a list of datasets, in which case each patch picks its
    texture uniformly.
    """
    sets = dataset if isinstance(dataset, (list, tuple)) else [dataset]
    regions = [getattr(d, split) for d in sets]
    for r in regions:
        if size > r.shape[0] or size > r.shape[1]:
            raise DimensionError(f"patch {size} larger than region {r.shape}")
    out = np.empty((count, size, size))
    which = rng.integers(0, len(regions), size=count) if len(regions) > 1 else np.zeros(count, int)
    for n in range(count):
        r = regions[which[n]]
        y = rng.integers(0, r.shape[0] - size + 1)
        x = rng.integers(0, r.shape[1] - size + 1)
        out[n] = r[y:y + size, x:x + size]
    return out


def stripe_texture(height: int = 128, width: int = 64, period: float = 8.0,
                   angle: float = 0.35, sharpness: float = 3.0) -> np.ndarray:
    """Periodic oriented stripes in ``[0, 1]``; a procedural stand-in texture."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    phase = 2 * np.pi * (xx * np.cos(angle) + yy * np.sin(angle)) / period
    return 0.5 + 0.5 * np.tanh(sharpness * np.sin(phase)) / np.tanh(sharpness)
