"""Tiled-convolutional spike-and-slab RBMs and DBNs for texture modeling."""

from .dbn import DbnModel, generate, inpaint, inpainting_mask
from .tiling import build_conv_geometry, build_tiled_geometry, ext_available, set_backend
from .training import LayerSpec, TrainConfig, train_dbn

__version__ = "0.1.0"


def backend() -> str:
    """Name of the active kernel backend, ``"ext"`` or ``"python"``."""
    from . import tiling
    return tiling.BACKEND


__all__ = [
    "DbnModel", "LayerSpec", "TrainConfig", "backend", "build_conv_geometry", "build_tiled_geometry",
    "ext_available", "generate", "inpaint", "inpainting_mask", "set_backend", "train_dbn",
]
