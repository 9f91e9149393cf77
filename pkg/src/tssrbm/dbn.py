"""Deep belief network built from a tiled ssRBM plus up to two upper layers."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple, Optional

import numpy as np

from . import ssrbm, upper
from .errors import ConfigError, DimensionError
from .ssrbm import SpikeSlabState, SsRbmParams
from .tiling import build_conv_geometry, build_tiled_geometry
from .upper import BinaryRbmParams, SsVisRbmParams


@dataclass
class DbnModel:
    layer1: SsRbmParams
    layer2: Optional[SsVisRbmParams] = None
    layer3: Optional[BinaryRbmParams] = None
    mean: float = 0.0
    std: float = 1.0

    @property
    def depth(self) -> int:
        return 1 + (self.layer2 is not None) + (self.layer3 is not None)

    @property
    def image_size(self) -> int:
        return self.layer1.geom.image_height

    def layers(self) -> list:
        return [l for l in (self.layer1, self.layer2, self.layer3) if l is not None]

    def check_chain(self) -> None:
        g1 = self.layer1.geom
        if self.layer2 is not None:
            g2 = self.layer2.geom
            if g2.input_maps != g1.num_tilings * g1.filters_per_tiling or g2.map_size != g1.positions:
                raise DimensionError("layer 2 does not sit on layer-1 feature maps")
        if self.layer3 is not None:
            if self.layer2 is None:
                raise DimensionError("layer 3 requires layer 2")
            g2, g3 = self.layer2.geom, self.layer3.geom
            if g3.input_maps != g2.output_filters or g3.map_size != g2.output_size:
                raise DimensionError("layer 3 does not sit on layer-2 feature maps")

    def resized(self, size: int) -> "DbnModel":
        """The same parameters laid over ``size x size`` images."""
        g1 = self.layer1.geom
        geom1 = build_tiled_geometry(size, size, g1.kernel, g1.num_tilings, g1.filters_per_tiling)
        out = replace(self, layer1=self.layer1.with_geometry(geom1))
        if self.layer2 is not None:
            g2 = self.layer2.geom
            geom2 = build_conv_geometry(g2.input_maps, geom1.positions, g2.kernel, g2.output_filters)
            out.layer2 = self.layer2.with_geometry(geom2)
            if self.layer3 is not None:
                g3 = self.layer3.geom
                geom3 = build_conv_geometry(g3.input_maps, geom2.output_size, g3.kernel,
                                            g3.output_filters)
                out.layer3 = self.layer3.with_geometry(geom3)
        return out


def _to_maps(x):
    """``(B, T, F, M, M)`` -> ``(B, T*F, M, M)``."""
    b, t, f, m, _ = x.shape
    return x.reshape(b, t * f, m, m)


def _to_units(x, geom):
    return x.reshape((x.shape[0],) + geom.unit_shape)


class UpPass(NamedTuple):
    q: np.ndarray          # P(h=1|v) as maps (B, C, M, M)
    m: np.ndarray          # E[s | v, h_hat] as maps
    s_var: np.ndarray      # slab variance per map (C, 1, 1)
    g: Optional[np.ndarray]  # P(g=1 | m, q) when a second layer exists


def infer_up(v, model: DbnModel, rng: np.random.Generator) -> UpPass:
    """Map images to the representation each upper layer is trained on."""
    p1 = model.layer1
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 2:
        v = v[None]
    if v.shape[-2:] != p1.geom.image_shape:
        raise DimensionError(f"image shape {v.shape[-2:]} does not match layer 1 {p1.geom.image_shape}")
    proj = ssrbm.projections(v, p1)
    q = ssrbm.spike_activation(v, p1, proj)
    h_hat = (rng.random(q.shape) < q).astype(np.float64)
    m = ssrbm.slab_mean(v, h_hat, p1, proj)
    s_var = (1.0 / p1.alpha).reshape(-1)[:, None, None]
    q, m = _to_maps(q), _to_maps(m)
    g = upper.g_activation(m, q, model.layer2) if model.layer2 is not None else None
    return UpPass(q, m, s_var, g)


def _down_from_g(g, model: DbnModel, rng: np.random.Generator) -> np.ndarray:
    """Top-down projection from second-layer hidden units to image space.

    Spikes are sampled at the interface, then their probabilities and the
    slab expectations are handed to layer 1, whose conditional mean is the
    image.
    """
    p2 = model.layer2
    d = upper.top_down(g, p2)
    h_hat, q = upper.sample_h_given_g(g, p2, rng, d)
    s = upper.slab_mean2(h_hat, g, p2, d)
    geom = model.layer1.geom
    state = SpikeSlabState(_to_units(q, geom), _to_units(s, geom))
    return ssrbm.visible_mean(state, model.layer1)


def generate(model: DbnModel, n_samples: int = 128, burn_in: int = 2000, thin: int = 50,
             out_size: int = 120, rng: np.random.Generator | None = None,
             n_chains: int = 1, return_chain_states: bool = False) -> np.ndarray:
    """Unconstrained samples (normalized units), shape ``(n_samples, out, out)``.

    Block Gibbs runs in the top layer; after ``burn_in`` sweeps every
    ``thin``-th sweep of each chain is projected down to image space.
    """
    if burn_in < 1:
        raise ConfigError("burn_in must be at least 1 sweep")
    if thin < 1 or n_samples < 1 or n_chains < 1:
        raise ConfigError("thin, n_samples and n_chains must be positive")
    rng = np.random.default_rng() if rng is None else rng
    model = model.resized(out_size)
    per_chain = -(-n_samples // n_chains)
    out = []

    if model.depth == 1:
        p1 = model.layer1
        v = ssrbm.noise_chains(n_chains, p1, rng)

        def sweep():
            nonlocal v
            h, s, v = ssrbm.gibbs_sweep(v, p1, rng)
            return h, s

        def emit(hs):
            return ssrbm.visible_mean(SpikeSlabState(*hs), p1)
    elif model.depth == 2:
        p2 = model.layer2
        s, h = upper.noise_chains2(n_chains, p2, rng)

        def sweep():
            nonlocal s, h
            g, h, s = upper.gibbs_sweep2(s, h, p2, rng)
            return g

        def emit(g):
            return _down_from_g(g, model, rng)
    else:
        p3 = model.layer3
        gv = upper.brbm_noise_chains(n_chains, p3, rng)

        def sweep():
            nonlocal gv
            _, gv = upper.brbm_gibbs_sweep(gv, p3, rng)
            return gv

        def emit(g):
            return _down_from_g(g, model, rng)

    for _ in range(burn_in):
        state = sweep()
    for _ in range(per_chain):
        for _ in range(thin):
            state = sweep()
        out.append(emit(state))
    # (per_chain, n_chains, H, W) -> chain-major ordering
    samples = np.stack(out, axis=1).reshape(-1, out_size, out_size)
    return samples[:n_samples]


def inpainting_mask(size: int = 76, hole: int = 54) -> np.ndarray:
    """Boolean mask, True on the clamped border and False on the centred hole."""
    if hole > size or (size - hole) % 2:
        raise DimensionError(f"hole {hole} cannot be centred in a {size} frame")
    mask = np.ones((size, size), dtype=bool)
    o = (size - hole) // 2
    mask[o:o + hole, o:o + hole] = False
    return mask


def inpaint(frame, mask, model: DbnModel, iters: int = 500,
            rng: np.random.Generator | None = None, top_steps: int = 1,
            average: bool = False) -> np.ndarray:
    """Fill the unclamped pixels of ``frame`` by clamped Gibbs sampling.

    Each iteration runs an up-pass, ``top_steps`` top-layer Gibbs steps and a
    down-pass, then restores the clamped pixels. The returned free pixels are
    the conditional mean of the final iteration (or the mean over all
    iterations with ``average=True``).
    """
    frame = np.asarray(frame, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if frame.shape != mask.shape or frame.ndim != 2:
        raise DimensionError("frame and mask must be equal-sized 2-d arrays")
    if iters <= 0:
        return frame.copy()
    rng = np.random.default_rng() if rng is None else rng
    model = model.resized(frame.shape[0])
    p1 = model.layer1
    geom = p1.geom
    v = np.where(mask, frame, 0.0)[None]
    acc = np.zeros_like(v)
    mean = v
    for _ in range(iters):
        if model.depth == 1:
            h, s, v_new = ssrbm.gibbs_sweep(v, p1, rng)
        else:
            proj = ssrbm.projections(v, p1)
            q = ssrbm.spike_activation(v, p1, proj)
            h_hat = (rng.random(q.shape) < q).astype(np.float64)
            s_hat = ssrbm.sample_s_given_vh(v, h_hat, p1, rng, proj)
            s2, h2 = _to_maps(s_hat), _to_maps(h_hat)
            for _ in range(top_steps):
                g = upper.sample_g_given_sh(s2, h2, model.layer2, rng)
                if model.depth == 3:
                    _, g = upper.brbm_gibbs_sweep(g, model.layer3, rng)
                d = upper.top_down(g, model.layer2)
                h2, _ = upper.sample_h_given_g(g, model.layer2, rng, d)
                s2 = upper.sample_s_given_hg(h2, g, model.layer2, rng, d)
            h, s = _to_units(h2, geom), _to_units(s2, geom)
            v_new = ssrbm.sample_v_given_sh(SpikeSlabState(h, s), p1, rng)
        mean = ssrbm.visible_mean(SpikeSlabState(h, s), p1)
        acc += mean
        v = np.where(mask, frame, v_new)
    est = acc / iters if average else mean
    return np.where(mask, frame, est[0])
