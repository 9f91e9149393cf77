"""Upper layers of the DBN.

``SsVisRbmParams``: an RBM whose visible layer is the first layer's
spike-and-slab pair ``(s, h)`` and whose hidden layer is binary ``g``::

    E(s, h, g) = - sum_ij g_j U_ij s_i h_i - sum_j rho_j g_j
                 + 1/2 sum_i alpha_i s_i^2 - sum_i alpha_i mu_i s_i h_i
                 - sum_i b_i h_i [+ 1/2 sum_i alpha_i mu_i^2 h_i]

The bracketed term mirrors the first-layer energy and is on by default
(``bias_shift=True``). ``U`` is shared convolutionally: each g-filter owns
a ``k x k`` window over every input map.

``BinaryRbmParams``: a convolutional binary-binary RBM used as third layer.

Visible arrays for both are maps ``(B, C, S, S)``; hidden ``(B, G, O, O)``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit

from . import tiling
from .errors import DimensionError
from .ssrbm import ALPHA_MIN, LOGIT_CLIP, SsRbmParams
from .tiling import ConvGeometry

SSVIS_PARAMS = ("U", "rho", "alpha", "mu", "b")
BRBM_PARAMS = ("W", "vbias", "hbias")


def _maps(x):
    return x[:, None, None]


def _batch(x, shape):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-3:] != shape:
        raise DimensionError(f"map shape {x.shape[-3:]} != {shape}")
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise DimensionError(f"expected 3- or 4-d maps, got {x.shape}")
    return x, False


def _sigmoid(x):
    return expit(np.clip(x, -LOGIT_CLIP, LOGIT_CLIP))


@dataclass
class SsVisRbmParams:
    geom: ConvGeometry
    U: np.ndarray
    rho: np.ndarray
    alpha: np.ndarray
    mu: np.ndarray
    b: np.ndarray
    bias_shift: bool = True

    def __post_init__(self):
        self.U = np.asarray(self.U, dtype=np.float64)
        if self.U.shape != self.geom.kernel_shape:
            raise DimensionError(f"U shape {self.U.shape} != {self.geom.kernel_shape}")
        self.rho = np.asarray(self.rho, dtype=np.float64)
        if self.rho.shape != (self.geom.output_filters,):
            raise DimensionError("rho must have one entry per g-filter")
        for name in ("alpha", "mu", "b"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (self.geom.input_maps,):
                raise DimensionError(f"{name} must have one entry per input map")
            setattr(self, name, arr)

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in SSVIS_PARAMS}

    def with_arrays(self, arrays: dict) -> "SsVisRbmParams":
        return replace(self, **{n: np.array(arrays[n], dtype=np.float64) for n in SSVIS_PARAMS})

    def copy(self) -> "SsVisRbmParams":
        return self.with_arrays(self.arrays())

    def with_geometry(self, geom: ConvGeometry) -> "SsVisRbmParams":
        if geom.kernel_shape != self.geom.kernel_shape:
            raise DimensionError("geometry change must keep the kernel stack")
        return replace(self, geom=geom)


def init_from_lower(first: SsRbmParams, geom: ConvGeometry, rng: np.random.Generator,
                    u_scale: float = 0.01, bias_shift: bool = True) -> SsVisRbmParams:
    """Second layer whose slab/spike parameters copy the first layer's."""
    n_maps = first.geom.num_tilings * first.geom.filters_per_tiling
    if geom.input_maps != n_maps or geom.map_size != first.geom.positions:
        raise DimensionError(
            f"conv geometry {geom.input_shape} does not sit on first-layer maps "
            f"({n_maps}, {first.geom.positions}, {first.geom.positions})")
    return SsVisRbmParams(
        geom=geom,
        U=rng.normal(0.0, u_scale, size=geom.kernel_shape) if u_scale > 0 else np.zeros(geom.kernel_shape),
        rho=np.zeros(geom.output_filters),
        alpha=first.alpha.reshape(-1).copy(),
        mu=first.mu.reshape(-1).copy(),
        b=first.b.reshape(-1).copy(),
        bias_shift=bias_shift,
    )


def g_logits(s, h, params: SsVisRbmParams) -> np.ndarray:
    return tiling.conv_forward(np.asarray(s) * np.asarray(h), params.U, params.geom) \
        + _maps(params.rho)


def g_activation(s, h, params: SsVisRbmParams) -> np.ndarray:
    return _sigmoid(g_logits(s, h, params))


def sample_g_given_sh(s, h, params: SsVisRbmParams, rng: np.random.Generator) -> np.ndarray:
    p = g_activation(s, h, params)
    return (rng.random(p.shape) < p).astype(np.float64)


def top_down(g, params: SsVisRbmParams) -> np.ndarray:
    """``d_i = sum_j U_ij g_j`` on the visible maps."""
    return tiling.conv_adjoint(g, params.U, params.geom)


def h_logits(g, params: SsVisRbmParams, d=None) -> np.ndarray:
    if d is None:
        d = top_down(g, params)
    a, mu = _maps(params.alpha), _maps(params.mu)
    logit = 0.5 * d ** 2 / a + mu * d + _maps(params.b)
    if not params.bias_shift:
        logit = logit + 0.5 * a * mu ** 2
    return np.clip(logit, -LOGIT_CLIP, LOGIT_CLIP)


def h_activation(g, params: SsVisRbmParams, d=None) -> np.ndarray:
    return _sigmoid(h_logits(g, params, d))


def sample_h_given_g(g, params: SsVisRbmParams, rng: np.random.Generator, d=None):
    """Returns ``(h, P(h = 1 | g))``."""
    p = h_activation(g, params, d)
    return (rng.random(p.shape) < p).astype(np.float64), p


def slab_mean2(h, g, params: SsVisRbmParams, d=None) -> np.ndarray:
    if d is None:
        d = top_down(g, params)
    return (d / _maps(params.alpha) + _maps(params.mu)) * h


def sample_s_given_hg(h, g, params: SsVisRbmParams, rng: np.random.Generator, d=None):
    mean = slab_mean2(h, g, params, d)
    return mean + rng.standard_normal(mean.shape) / np.sqrt(_maps(params.alpha))


def gibbs_sweep2(s, h, params: SsVisRbmParams, rng: np.random.Generator):
    """``g | s, h`` then ``h | g`` then ``s | h, g``; returns ``(g, h, s)``."""
    g = sample_g_given_sh(s, h, params, rng)
    d = top_down(g, params)
    h_next, _ = sample_h_given_g(g, params, rng, d)
    s_next = sample_s_given_hg(h_next, g, params, rng, d)
    return g, h_next, s_next


def energy2(s, h, g, params: SsVisRbmParams):
    sb, squeeze = _batch(s, params.geom.input_shape)
    hb, _ = _batch(h, params.geom.input_shape)
    gb, _ = _batch(g, params.geom.output_shape)
    a, mu, b = _maps(params.alpha), _maps(params.mu), _maps(params.b)
    vis = (1, 2, 3)
    e = -np.sum(gb * tiling.conv_forward(sb * hb, params.U, params.geom), axis=vis)
    e -= np.sum(gb * _maps(params.rho), axis=vis)
    e += 0.5 * np.sum(a * sb ** 2, axis=vis)
    e -= np.sum(a * mu * sb * hb, axis=vis)
    e -= np.sum(b * hb, axis=vis)
    if params.bias_shift:
        e += 0.5 * np.sum(a * mu ** 2 * hb, axis=vis)
    return float(e[0]) if squeeze else e


def free_energy2(s, h, params: SsVisRbmParams):
    """``-log sum_g exp(-E(s, h, g))``."""
    sb, squeeze = _batch(s, params.geom.input_shape)
    hb, _ = _batch(h, params.geom.input_shape)
    a, mu, b = _maps(params.alpha), _maps(params.mu), _maps(params.b)
    vis = (1, 2, 3)
    f = 0.5 * np.sum(a * sb ** 2, axis=vis) - np.sum(a * mu * sb * hb, axis=vis) \
        - np.sum(b * hb, axis=vis)
    if params.bias_shift:
        f += 0.5 * np.sum(a * mu ** 2 * hb, axis=vis)
    f -= np.sum(np.logaddexp(0.0, g_logits(sb, hb, params)), axis=vis)
    return float(f[0]) if squeeze else f


def _stats2(sb, hb, gb, s2, params):
    n = sb.shape[0]
    a, mu = _maps(params.alpha), _maps(params.mu)
    red = (0, 2, 3)
    sh = sb * hb
    shift = 1.0 if params.bias_shift else 0.0
    return {
        "U": -tiling.conv_weight_grad(sh, gb, params.geom) / n,
        "rho": -np.sum(gb, axis=red) / n,
        "alpha": np.sum(0.5 * s2 - mu * sh + shift * 0.5 * mu ** 2 * hb, axis=red) / n,
        "mu": np.sum(-a * sh + shift * a * mu * hb, axis=red) / n,
        "b": -np.sum(hb, axis=red) / n,
    }


def energy_grad_stats2(s, h, g, params: SsVisRbmParams) -> dict[str, np.ndarray]:
    sb, _ = _batch(s, params.geom.input_shape)
    hb, _ = _batch(h, params.geom.input_shape)
    gb, _ = _batch(g, params.geom.output_shape)
    return _stats2(sb, hb, gb, sb ** 2, params)


def expected_grad_stats2(s, h, params: SsVisRbmParams, s_var=None) -> dict[str, np.ndarray]:
    """``E[dE/dtheta | s, h]`` with ``g`` integrated out.

    ``s`` may be a slab mean; ``s_var`` (per input map, or broadcastable)
    then supplies the slab variance so that ``<s^2> = s^2 + s_var``.
    """
    sb, _ = _batch(s, params.geom.input_shape)
    hb, _ = _batch(h, params.geom.input_shape)
    pg = g_activation(sb, hb, params)
    s2 = sb ** 2 if s_var is None else sb ** 2 + np.asarray(s_var, dtype=np.float64)
    return _stats2(sb, hb, pg, s2, params)


def apply_constraints2(params: SsVisRbmParams, alpha_min: float = ALPHA_MIN) -> SsVisRbmParams:
    return replace(params, alpha=np.maximum(params.alpha, alpha_min))


def noise_chains2(n: int, params: SsVisRbmParams, rng: np.random.Generator):
    shape = (n,) + params.geom.input_shape
    h = (rng.random(shape) < 0.5).astype(np.float64)
    s = rng.standard_normal(shape)
    return s, h


def reconstruction_error2(s, h, params: SsVisRbmParams, rng: np.random.Generator) -> float:
    sb, _ = _batch(s, params.geom.input_shape)
    hb, _ = _batch(h, params.geom.input_shape)
    g = sample_g_given_sh(sb, hb, params, rng)
    d = top_down(g, params)
    q = h_activation(g, params, d)
    return float(np.mean((slab_mean2(q, g, params, d) - sb * hb) ** 2))


# --- third layer: convolutional binary-binary RBM --------------------------

@dataclass
class BinaryRbmParams:
    geom: ConvGeometry
    W: np.ndarray
    vbias: np.ndarray
    hbias: np.ndarray

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        if self.W.shape != self.geom.kernel_shape:
            raise DimensionError(f"W shape {self.W.shape} != {self.geom.kernel_shape}")
        self.vbias = np.asarray(self.vbias, dtype=np.float64)
        self.hbias = np.asarray(self.hbias, dtype=np.float64)
        if self.vbias.shape != (self.geom.input_maps,) or self.hbias.shape != (self.geom.output_filters,):
            raise DimensionError("bias shapes do not match geometry")

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in BRBM_PARAMS}

    def with_arrays(self, arrays: dict) -> "BinaryRbmParams":
        return replace(self, **{n: np.array(arrays[n], dtype=np.float64) for n in BRBM_PARAMS})

    def copy(self) -> "BinaryRbmParams":
        return self.with_arrays(self.arrays())

    def with_geometry(self, geom: ConvGeometry) -> "BinaryRbmParams":
        if geom.kernel_shape != self.geom.kernel_shape:
            raise DimensionError("geometry change must keep the kernel stack")
        return replace(self, geom=geom)


def init_brbm(geom: ConvGeometry, rng: np.random.Generator, w_scale: float = 0.01) -> BinaryRbmParams:
    return BinaryRbmParams(geom, rng.normal(0.0, w_scale, size=geom.kernel_shape),
                           np.zeros(geom.input_maps), np.zeros(geom.output_filters))


def brbm_hidden_activation(v, params: BinaryRbmParams) -> np.ndarray:
    return _sigmoid(tiling.conv_forward(v, params.W, params.geom) + _maps(params.hbias))


def brbm_visible_activation(h, params: BinaryRbmParams) -> np.ndarray:
    return _sigmoid(tiling.conv_adjoint(h, params.W, params.geom) + _maps(params.vbias))


def brbm_energy(v, h, params: BinaryRbmParams):
    vb, squeeze = _batch(v, params.geom.input_shape)
    hb, _ = _batch(h, params.geom.output_shape)
    ax = (1, 2, 3)
    e = -np.sum(hb * tiling.conv_forward(vb, params.W, params.geom), axis=ax) \
        - np.sum(vb * _maps(params.vbias), axis=ax) - np.sum(hb * _maps(params.hbias), axis=ax)
    return float(e[0]) if squeeze else e


def brbm_free_energy(v, params: BinaryRbmParams):
    vb, squeeze = _batch(v, params.geom.input_shape)
    pre = tiling.conv_forward(vb, params.W, params.geom) + _maps(params.hbias)
    ax = (1, 2, 3)
    f = -np.sum(vb * _maps(params.vbias), axis=ax) - np.sum(np.logaddexp(0.0, pre), axis=ax)
    return float(f[0]) if squeeze else f


def brbm_gibbs_sweep(v, params: BinaryRbmParams, rng: np.random.Generator):
    """``h | v`` then ``v | h``; returns ``(h, v_next)``."""
    ph = brbm_hidden_activation(v, params)
    h = (rng.random(ph.shape) < ph).astype(np.float64)
    pv = brbm_visible_activation(h, params)
    return h, (rng.random(pv.shape) < pv).astype(np.float64)


def brbm_energy_grad_stats(v, h, params: BinaryRbmParams) -> dict[str, np.ndarray]:
    vb, _ = _batch(v, params.geom.input_shape)
    hb, _ = _batch(h, params.geom.output_shape)
    n = vb.shape[0]
    return {
        "W": -tiling.conv_weight_grad(vb, hb, params.geom) / n,
        "vbias": -np.sum(vb, axis=(0, 2, 3)) / n,
        "hbias": -np.sum(hb, axis=(0, 2, 3)) / n,
    }


def brbm_expected_grad_stats(v, params: BinaryRbmParams) -> dict[str, np.ndarray]:
    return brbm_energy_grad_stats(v, brbm_hidden_activation(v, params), params)


def brbm_reconstruction_error(v, params: BinaryRbmParams, rng: np.random.Generator) -> float:
    vb, _ = _batch(v, params.geom.input_shape)
    ph = brbm_hidden_activation(vb, params)
    h = (rng.random(ph.shape) < ph).astype(np.float64)
    return float(np.mean((brbm_visible_activation(h, params) - vb) ** 2))


def brbm_noise_chains(n: int, params: BinaryRbmParams, rng: np.random.Generator) -> np.ndarray:
    return (rng.random((n,) + params.geom.input_shape) < 0.5).astype(np.float64)
