"""Weight-sharing geometries and the linear maps they induce.

Two sharing schemes are used by the layers:

* diagonal tiled convolution (first layer): ``T`` tilings, tiling ``t`` is
  offset by ``(t, t)`` pixels and places ``M x M`` disjoint copies of each of
  its ``F`` kernels with stride ``k``;
* plain valid convolution with stride 1 (upper layers).

Hidden units are always enumerated in ``(tiling, filter, row, col)``
row-major order, i.e. per-unit arrays have shape ``(B, T, F, M, M)``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import _kernels_py
from .errors import DimensionError

try:
    from . import _tiled_ext
except ImportError:  # extension not built
    _tiled_ext = None


def _select_backend():
    choice = os.environ.get("TSSRBM_BACKEND", "auto").lower()
    if choice == "python":
        return _kernels_py, "python"
    if choice in ("ext", "cython"):
        if _tiled_ext is None:
            raise ImportError("TSSRBM_BACKEND=ext but tssrbm._tiled_ext is not built")
        return _tiled_ext, "ext"
    if _tiled_ext is not None:
        return _tiled_ext, "ext"
    return _kernels_py, "python"


_backend, BACKEND = _select_backend()


def ext_available() -> bool:
    return _tiled_ext is not None


def set_backend(name: str) -> None:
    """Switch kernel backend at runtime (``"python"``, ``"ext"`` or ``"auto"``)."""
    global _backend, BACKEND
    if name == "auto":
        name = "ext" if _tiled_ext is not None else "python"
    if name == "python":
        _backend, BACKEND = _kernels_py, "python"
    elif name == "ext":
        if _tiled_ext is None:
            raise ImportError("compiled backend unavailable")
        _backend, BACKEND = _tiled_ext, "ext"
    else:
        raise ValueError(f"unknown backend {name!r}")


@dataclass(frozen=True)
class TiledGeometry:
    image_height: int
    image_width: int
    kernel: int = 11
    num_tilings: int = 11
    filters_per_tiling: int = 32

    @property
    def positions(self) -> int:
        """Receptive-field positions per axis, identical for every tiling."""
        return (self.image_height - self.num_tilings + 1) // self.kernel

    @property
    def positions_per_tiling(self) -> tuple[int, ...]:
        k, h = self.kernel, self.image_height
        return tuple((h - t - k) // k + 1 for t in range(self.num_tilings))

    @property
    def n_units(self) -> int:
        return self.filters_per_tiling * self.num_tilings * self.positions ** 2

    @property
    def n_pixels(self) -> int:
        return self.image_height * self.image_width

    @property
    def unit_shape(self) -> tuple[int, int, int, int]:
        m = self.positions
        return (self.num_tilings, self.filters_per_tiling, m, m)

    @property
    def image_shape(self) -> tuple[int, int]:
        return (self.image_height, self.image_width)

    @property
    def kernel_shape(self) -> tuple[int, int, int, int]:
        k = self.kernel
        return (self.num_tilings, self.filters_per_tiling, k, k)

    def resized(self, size: int) -> "TiledGeometry":
        """Same kernels and tilings over a ``size x size`` image."""
        return build_tiled_geometry(size, size, self.kernel, self.num_tilings,
                                    self.filters_per_tiling)

    def unit_index(self, t: int, f: int, r: int, c: int) -> int:
        m = self.positions
        return ((t * self.filters_per_tiling + f) * m + r) * m + c

    def unit_coords(self, index: int) -> tuple[int, int, int, int]:
        m = self.positions
        index, c = divmod(index, m)
        index, r = divmod(index, m)
        t, f = divmod(index, self.filters_per_tiling)
        return t, f, r, c

    def field_origin(self, t: int, r: int, c: int) -> tuple[int, int]:
        return t + r * self.kernel, t + c * self.kernel

    def covered_pixels(self, index: int) -> np.ndarray:
        """Flat (row-major) pixel indices inside unit ``index``'s receptive field."""
        t, _, r, c = self.unit_coords(index)
        y0, x0 = self.field_origin(t, r, c)
        rows = np.arange(y0, y0 + self.kernel)
        cols = np.arange(x0, x0 + self.kernel)
        return (rows[:, None] * self.image_width + cols[None, :]).ravel()


def build_tiled_geometry(height: int, width: int, kernel: int = 11, tilings: int = 11,
                         filters: int = 32) -> TiledGeometry:
    if height != width:
        raise DimensionError(f"only square images are supported, got {height}x{width}")
    if kernel < 1 or tilings < 1 or filters < 1:
        raise DimensionError("kernel, tilings and filters must be positive")
    if kernel > height:
        raise DimensionError(f"kernel {kernel} larger than image side {height}")
    if tilings > kernel:
        raise DimensionError(f"diagonal tiling needs tilings <= kernel ({tilings} > {kernel})")
    if (height - tilings + 1) % kernel:
        raise DimensionError(
            f"image side {height} incompatible with kernel {kernel} and {tilings} tilings: "
            f"({height} - {tilings} + 1) is not a multiple of {kernel}")
    return TiledGeometry(height, width, kernel, tilings, filters)


def valid_tiled_sizes(kernel: int, tilings: int, upto: int) -> list[int]:
    return [m * kernel + tilings - 1 for m in range(1, upto) if m * kernel + tilings - 1 <= upto]


def _as_batch(x, ndim):
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim == ndim - 1:
        return x[None], True
    if x.ndim != ndim:
        raise DimensionError(f"expected {ndim - 1}- or {ndim}-d array, got shape {x.shape}")
    return x, False


def _check_image(v, geom):
    if v.shape[-2:] != geom.image_shape:
        raise DimensionError(f"image shape {v.shape[-2:]} does not match geometry {geom.image_shape}")


def _check_kernels(w, geom):
    if w.shape != geom.kernel_shape:
        raise DimensionError(f"kernel stack shape {w.shape} != {geom.kernel_shape}")


def tiled_forward(image, weights, geom: TiledGeometry) -> np.ndarray:
    """Projection ``v . W_i`` of every hidden unit, shape ``(B, T, F, M, M)``."""
    v, squeeze = _as_batch(image, 3)
    _check_image(v, geom)
    w = np.ascontiguousarray(weights, dtype=np.float64)
    _check_kernels(w, geom)
    out = _backend.forward(v, w, geom.positions)
    return out[0] if squeeze else out


def tiled_adjoint(coeffs, weights, geom: TiledGeometry) -> np.ndarray:
    """``sum_i c_i W_i`` pasted into image space; the adjoint of :func:`tiled_forward`."""
    c, squeeze = _as_batch(coeffs, 5)
    if c.shape[1:] != geom.unit_shape:
        raise DimensionError(f"coefficient shape {c.shape[1:]} != {geom.unit_shape}")
    w = np.ascontiguousarray(weights, dtype=np.float64)
    _check_kernels(w, geom)
    out = _backend.adjoint(c, w, geom.image_height, geom.image_width)
    return out[0] if squeeze else out


def tiled_weight_grad(image, coeffs, geom: TiledGeometry) -> np.ndarray:
    """``sum_b sum_i c_bi * patch_i(v_b)`` reduced onto the shared kernels."""
    v, _ = _as_batch(image, 3)
    c, _ = _as_batch(coeffs, 5)
    _check_image(v, geom)
    if c.shape[1:] != geom.unit_shape or c.shape[0] != v.shape[0]:
        raise DimensionError(f"coefficient shape {c.shape} incompatible with images {v.shape}")
    return _backend.weight_grad(v, c, geom.kernel)


def field_sumsq(image, geom: TiledGeometry) -> np.ndarray:
    """Sum of squared pixels inside each receptive field, shape ``(B, T, M, M)``."""
    v, squeeze = _as_batch(image, 3)
    _check_image(v, geom)
    out = _backend.field_sumsq(v, geom.num_tilings, geom.kernel, geom.positions)
    return out[0] if squeeze else out


def field_scatter(coeffs, geom: TiledGeometry) -> np.ndarray:
    """Adjoint of :func:`field_sumsq`'s indicator map: add each value over its field."""
    c, squeeze = _as_batch(coeffs, 4)
    m = geom.positions
    if c.shape[1:] != (geom.num_tilings, m, m):
        raise DimensionError(f"coefficient shape {c.shape[1:]} incompatible with geometry")
    out = _backend.field_scatter(c, geom.image_height, geom.image_width, geom.kernel)
    return out[0] if squeeze else out


@dataclass(frozen=True)
class ConvGeometry:
    input_maps: int
    map_size: int
    kernel: int = 2
    output_filters: int = 128
    stride: int = 1

    @property
    def output_size(self) -> int:
        return self.map_size - self.kernel + 1

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.input_maps, self.map_size, self.map_size)

    @property
    def output_shape(self) -> tuple[int, int, int]:
        s = self.output_size
        return (self.output_filters, s, s)

    @property
    def kernel_shape(self) -> tuple[int, int, int, int]:
        return (self.output_filters, self.input_maps, self.kernel, self.kernel)

    def resized(self, map_size: int) -> "ConvGeometry":
        return build_conv_geometry(self.input_maps, map_size, self.kernel, self.output_filters)


def build_conv_geometry(input_maps: int, map_size: int, kernel: int = 2,
                        output_filters: int = 128) -> ConvGeometry:
    if min(input_maps, map_size, kernel, output_filters) < 1:
        raise DimensionError("conv geometry fields must be positive")
    if kernel > map_size:
        raise DimensionError(f"kernel {kernel} larger than map side {map_size}")
    return ConvGeometry(input_maps, map_size, kernel, output_filters)


def conv_forward(maps, kernels, geom: ConvGeometry) -> np.ndarray:
    """Valid cross-correlation over all input maps jointly; ``(B, G, O, O)``."""
    x, squeeze = _as_batch(maps, 4)
    if x.shape[1:] != geom.input_shape:
        raise DimensionError(f"input maps {x.shape[1:]} != {geom.input_shape}")
    if kernels.shape != geom.kernel_shape:
        raise DimensionError(f"kernels {kernels.shape} != {geom.kernel_shape}")
    o = geom.output_size
    out = np.zeros((x.shape[0], geom.output_filters, o, o))
    for i in range(geom.kernel):
        for j in range(geom.kernel):
            win = x[:, :, i:i + o, j:j + o]
            out += np.einsum("bcrs,gc->bgrs", win, kernels[:, :, i, j], optimize=True)
    return out[0] if squeeze else out


def conv_adjoint(coeffs, kernels, geom: ConvGeometry) -> np.ndarray:
    c, squeeze = _as_batch(coeffs, 4)
    if c.shape[1:] != geom.output_shape:
        raise DimensionError(f"coefficients {c.shape[1:]} != {geom.output_shape}")
    if kernels.shape != geom.kernel_shape:
        raise DimensionError(f"kernels {kernels.shape} != {geom.kernel_shape}")
    o = geom.output_size
    out = np.zeros((c.shape[0],) + geom.input_shape)
    for i in range(geom.kernel):
        for j in range(geom.kernel):
            out[:, :, i:i + o, j:j + o] += np.einsum("bgrs,gc->bcrs", c, kernels[:, :, i, j],
                                                     optimize=True)
    return out[0] if squeeze else out


def conv_weight_grad(maps, coeffs, geom: ConvGeometry) -> np.ndarray:
    """``sum_b`` correlation of output coefficients with input windows, kernel-shaped."""
    x, _ = _as_batch(maps, 4)
    c, _ = _as_batch(coeffs, 4)
    o = geom.output_size
    out = np.empty(geom.kernel_shape)
    for i in range(geom.kernel):
        for j in range(geom.kernel):
            out[:, :, i, j] = np.einsum("bgrs,bcrs->gc", c, x[:, :, i:i + o, j:j + o],
                                        optimize=True)
    return out
