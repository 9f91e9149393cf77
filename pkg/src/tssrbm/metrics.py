"""Texture similarity score, MSSIM and chain autocorrelation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DegenerateInputError, DimensionError


def ncc(a, b) -> float:
    """Normalized cross correlation without mean removal."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DimensionError(f"patch sizes differ: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DegenerateInputError("zero-norm patch")
    return float(a @ b / (na * nb))


def center_crop(img, size: int, offset: tuple[int, int] | None = None) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    if size > h or size > w:
        raise DimensionError(f"crop {size} larger than image {img.shape}")
    y, x = offset if offset is not None else ((h - size) // 2, (w - size) // 2)
    return img[y:y + size, x:x + size]


def tss(sample, test_region, patch: int = 19, offset: tuple[int, int] | None = None) -> float:
    """Max NCC between the sample's centre patch and every window of ``test_region``."""
    s = center_crop(sample, patch, offset)
    x = np.asarray(test_region, dtype=np.float64)
    if patch > x.shape[0] or patch > x.shape[1]:
        raise DimensionError("patch larger than test region")
    ns = np.linalg.norm(s)
    if ns == 0:
        raise DegenerateInputError("sample patch has zero norm")
    win = sliding_window_view(x, (patch, patch))
    dots = np.einsum("ijkl,kl->ij", win, s)
    norms = np.sqrt(np.einsum("ijkl,ijkl->ij", win, win))
    ok = norms > 0
    if not ok.any():
        raise DegenerateInputError("test region has no non-zero window")
    return float(np.max(dots[ok] / (norms[ok] * ns)))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-ax ** 2 / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(x, y, data_range: float, k1: float = 0.01, k2: float = 0.03,
             window: np.ndarray | None = None) -> np.ndarray:
    """Local SSIM over every fully contained window ('valid' placement)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = gaussian_window() if window is None else window
    if x.shape != y.shape:
        raise DimensionError(f"image shapes differ: {x.shape} vs {y.shape}")
    if x.shape[0] < w.shape[0] or x.shape[1] < w.shape[1]:
        raise DimensionError(f"images smaller than the {w.shape} window")

    def filt(a):
        return np.einsum("ijkl,kl->ij", sliding_window_view(a, w.shape), w)

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (sxx + syy + c2))


def mssim(x, y, data_range: float | None = None) -> float:
    """Mean SSIM (11x11 Gaussian window, sigma 1.5, K = 0.01, 0.03).

    ``data_range`` defaults to the observed max - min over both images.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"image shapes differ: {x.shape} vs {y.shape}")
    if data_range is None:
        data_range = float(max(x.max(), y.max()) - min(x.min(), y.min()))
    if data_range <= 0:
        if np.array_equal(x, y):
            return 1.0
        raise DegenerateInputError("zero dynamic range")
    return float(np.mean(ssim_map(x, y, data_range)))


def autocorr_spectrum(chain, max_lag: int) -> np.ndarray:
    """Normalized autocorrelation ``r(0..max_lag)`` of a chain of images."""
    x = np.asarray(chain, dtype=np.float64)
    n = x.shape[0]
    if max_lag < 0 or n <= max_lag:
        raise ConfigError(f"chain of length {n} too short for max_lag {max_lag}")
    x = x.reshape(n, -1)
    x = x - x.mean(axis=0)
    denom = float(np.sum(x * x))
    if denom == 0:
        raise DegenerateInputError("chain has zero variance")
    return np.array([np.sum(x[:n - tau] * x[tau:]) / denom for tau in range(max_lag + 1)])


@dataclass
class MetricReport:
    scores: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)

    @property
    def mean(self) -> float:
        return float(np.mean(self.scores))

    @property
    def std(self) -> float:
        return float(np.std(self.scores))

    @property
    def n(self) -> int:
        return int(self.scores.size)

    def row(self, texture: str, model: str, metric: str) -> str:
        return f"{texture}\t{model}\t{metric}\t{self.mean:.6f}\t{self.std:.6f}\t{self.n}"


REPORT_HEADER = "texture\tmodel\tmetric\tmean\tstd\tn"
