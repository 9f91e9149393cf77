"""First layer: the mu-ssRBM with tiled-convolutional weight sharing.

Energy over visibles ``v``, slabs ``s`` and spikes ``h``::

    E = - sum_i (v.W_i) s_i h_i + 1/2 v.(lam I + sum_i Phi_i h_i) v
        + 1/2 sum_i alpha_i s_i^2 - sum_i alpha_i mu_i s_i h_i
        - sum_i b_i h_i + 1/2 sum_i alpha_i mu_i^2 h_i

``lam`` is one scalar; ``Phi_i = phi_i * I`` restricted to unit ``i``'s
receptive field. All per-unit parameters are shared by the ``M x M`` copies
of a filter, so they are stored with shape ``(T, F)``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np
from scipy.special import expit

from . import tiling
from .errors import DimensionError, NumericalError
from .tiling import TiledGeometry

LOGIT_CLIP = 30.0
ALPHA_MIN = 1e-2
LAMBDA_MIN = 1e-2

PROPER_SLACK = 0.9
PARAM_NAMES = ("W", "b", "mu", "alpha", "lam", "phi")


@dataclass
class SsRbmParams:
    geom: TiledGeometry
    W: np.ndarray
    b: np.ndarray
    mu: np.ndarray
    alpha: np.ndarray
    lam: float
    phi: np.ndarray

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        if self.W.shape != self.geom.kernel_shape:
            raise DimensionError(f"W shape {self.W.shape} != {self.geom.kernel_shape}")
        shape = self.geom.kernel_shape[:2]
        for name in ("b", "mu", "alpha", "phi"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise DimensionError(f"{name} shape {arr.shape} != {shape}")
            setattr(self, name, arr)
        self.lam = float(self.lam)

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: np.asarray(getattr(self, n), dtype=np.float64) for n in PARAM_NAMES}

    def with_arrays(self, arrays: dict) -> "SsRbmParams":
        return replace(self, **{n: np.array(arrays[n], dtype=np.float64) for n in PARAM_NAMES})

    def copy(self) -> "SsRbmParams":
        return self.with_arrays(self.arrays())

    def with_geometry(self, geom: TiledGeometry) -> "SsRbmParams":
        if geom.kernel_shape != self.geom.kernel_shape:
            raise DimensionError("geometry change must keep kernels and tilings")
        return replace(self, geom=geom)


def init_params(geom: TiledGeometry, rng: np.random.Generator, w_scale: float = 0.01,
                b: float = -1.0, mu: float = 0.0, alpha: float = 1.0, lam: float = 1.0,
                phi: float = 0.0) -> SsRbmParams:
    per_filter = geom.kernel_shape[:2]
    return SsRbmParams(
        geom=geom,
        W=rng.normal(0.0, w_scale, size=geom.kernel_shape),
        b=np.full(per_filter, b),
        mu=np.full(per_filter, mu),
        alpha=np.full(per_filter, alpha),
        lam=lam,
        phi=np.full(per_filter, phi),
    )


class SpikeSlabState(NamedTuple):
    h: np.ndarray
    s: np.ndarray


def _units(x):
    """Broadcast a per-filter ``(T, F)`` array against ``(B, T, F, M, M)``."""
    return x[:, :, None, None]


def _batch(v, geom):
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-2:] != geom.image_shape:
        raise DimensionError(f"image shape {v.shape[-2:]} does not match {geom.image_shape}")
    if v.ndim == 2:
        return v[None], True
    if v.ndim != 3:
        raise DimensionError(f"expected (H, W) or (B, H, W), got {v.shape}")
    return v, False


def _unit_batch(x, geom):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-4:] != geom.unit_shape:
        raise DimensionError(f"unit array shape {x.shape[-4:]} != {geom.unit_shape}")
    return x[None] if x.ndim == 4 else x


def projections(v, params: SsRbmParams) -> np.ndarray:
    return tiling.tiled_forward(v, params.W, params.geom)


def spike_logits(v, params: SsRbmParams, proj=None) -> np.ndarray:
    vb, squeeze = _batch(v, params.geom)
    if proj is None:
        proj = tiling.tiled_forward(vb, params.W, params.geom)
    else:
        proj = _unit_batch(proj, params.geom)
    sumsq = tiling.field_sumsq(vb, params.geom)[:, :, None]
    logit = (0.5 / _units(params.alpha)) * proj ** 2 + proj * _units(params.mu) \
        - 0.5 * _units(params.phi) * sumsq + _units(params.b)
    np.clip(logit, -LOGIT_CLIP, LOGIT_CLIP, out=logit)
    return logit[0] if squeeze else logit


def spike_activation(v, params: SsRbmParams, proj=None) -> np.ndarray:
    """``P(h_i = 1 | v)`` for every unit."""
    return expit(spike_logits(v, params, proj))


def sample_h_given_v(v, params: SsRbmParams, rng: np.random.Generator, proj=None) -> np.ndarray:
    p = spike_activation(v, params, proj)
    return (rng.random(p.shape) < p).astype(np.float64)


def slab_mean(v, h, params: SsRbmParams, proj=None) -> np.ndarray:
    """``E[s | v, h] = (alpha^-1 v.W_i + mu_i) h_i``."""
    if proj is None:
        proj = projections(v, params)
    return (proj / _units(params.alpha) + _units(params.mu)) * h


def sample_s_given_vh(v, h, params: SsRbmParams, rng: np.random.Generator, proj=None) -> np.ndarray:
    mean = slab_mean(v, h, params, proj)
    return mean + rng.standard_normal(mean.shape) / np.sqrt(_units(params.alpha))


def visible_precision(h, params: SsRbmParams) -> np.ndarray:
    """Diagonal of ``lam I + sum_i Phi_i h_i`` as an image."""
    hb = _unit_batch(h, params.geom)
    gated = np.einsum("btfrc,tf->btrc", hb, params.phi)
    prec = params.lam + tiling.field_scatter(gated, params.geom)
    return prec[0] if np.ndim(h) == 4 else prec


def visible_mean(state: SpikeSlabState, params: SsRbmParams) -> np.ndarray:
    prec = visible_precision(state.h, params)
    if np.any(prec <= 0):
        raise NumericalError("non-positive visible precision")
    return tiling.tiled_adjoint(state.s * state.h, params.W, params.geom) / prec


def sample_v_given_sh(state: SpikeSlabState, params: SsRbmParams,
                      rng: np.random.Generator) -> np.ndarray:
    prec = visible_precision(state.h, params)
    if np.any(prec <= 0):
        raise NumericalError("non-positive visible precision")
    mean = tiling.tiled_adjoint(state.s * state.h, params.W, params.geom) / prec
    return mean + rng.standard_normal(mean.shape) / np.sqrt(prec)


def gibbs_sweep(v, params: SsRbmParams, rng: np.random.Generator):
    """One block-Gibbs sweep ``h | v``, ``s | v, h``, ``v | s, h``."""
    proj = projections(v, params)
    h = sample_h_given_v(v, params, rng, proj)
    s = sample_s_given_vh(v, h, params, rng, proj)
    v_next = sample_v_given_sh(SpikeSlabState(h, s), params, rng)
    return h, s, v_next


def energy(v, state: SpikeSlabState, params: SsRbmParams):
    """Energy per image (scalar for an unbatched image)."""
    vb, squeeze = _batch(v, params.geom)
    h = _unit_batch(state.h, params.geom)
    s = _unit_batch(state.s, params.geom)
    a, mu = _units(params.alpha), _units(params.mu)
    proj = tiling.tiled_forward(vb, params.W, params.geom)
    sumsq = tiling.field_sumsq(vb, params.geom)[:, :, None]
    axes = (1, 2, 3, 4)
    e = -np.sum(proj * s * h, axis=axes)
    e += 0.5 * params.lam * np.sum(vb ** 2, axis=(1, 2))
    e += 0.5 * np.sum(_units(params.phi) * h * sumsq, axis=axes)
    e += 0.5 * np.sum(a * s ** 2, axis=axes)
    e -= np.sum(a * mu * s * h, axis=axes)
    e -= np.sum(_units(params.b) * h, axis=axes)
    e += 0.5 * np.sum(a * mu ** 2 * h, axis=axes)
    return float(e[0]) if squeeze else e


def free_energy(v, params: SsRbmParams):
    """``-log sum_h int exp(-E) ds`` up to a v-independent constant."""
    vb, squeeze = _batch(v, params.geom)
    vb = np.asarray(vb)
    proj = tiling.tiled_forward(vb, params.W, params.geom)
    sumsq = tiling.field_sumsq(vb, params.geom)[:, :, None]
    arg = (0.5 / _units(params.alpha)) * proj ** 2 + proj * _units(params.mu) \
        - 0.5 * _units(params.phi) * sumsq + _units(params.b)
    f = 0.5 * params.lam * np.sum(vb ** 2, axis=(1, 2)) - np.sum(np.logaddexp(0.0, arg),
                                                                 axis=(1, 2, 3, 4))
    return float(f[0]) if squeeze else f


def _stats(vb, sh, h, s2, params):
    """Mean over the batch of dE/dtheta given the moments ``sh = <s h>``,
    ``h = <h>``, ``s2 = <s^2>``."""
    n = vb.shape[0]
    geom = params.geom
    a, mu = _units(params.alpha), _units(params.mu)
    sumsq = tiling.field_sumsq(vb, geom)[:, :, None]
    red = (0, 3, 4)
    return {
        "W": -tiling.tiled_weight_grad(vb, sh, geom) / n,
        "b": -np.sum(h, axis=red) / n,
        "mu": np.sum(-a * sh + a * mu * h, axis=red) / n,
        "alpha": np.sum(0.5 * s2 - mu * sh + 0.5 * mu ** 2 * h, axis=red) / n,
        "lam": 0.5 * float(np.sum(vb ** 2)) / n,
        "phi": 0.5 * np.sum(h * sumsq, axis=red) / n,
    }


def energy_grad_stats(v, state: SpikeSlabState, params: SsRbmParams) -> dict[str, np.ndarray]:
    """``dE/dtheta`` at ``(v, s, h)``, summed over tied units and averaged over the batch."""
    vb, _ = _batch(v, params.geom)
    h = _unit_batch(state.h, params.geom)
    s = _unit_batch(state.s, params.geom)
    if h.shape[0] != vb.shape[0] or s.shape != h.shape:
        raise DimensionError("state batch does not match images")
    return _stats(vb, s * h, h, s ** 2, params)


def expected_grad_stats(v, params: SsRbmParams, h=None) -> dict[str, np.ndarray]:
    """``E[dE/dtheta | v, h]`` with the slab integrated out.

    With ``h=None`` the spikes are integrated out too (their probabilities
    replace the samples), giving the exact posterior expectation.
    """
    vb, _ = _batch(v, params.geom)
    proj = tiling.tiled_forward(vb, params.W, params.geom)
    q = spike_activation(vb, params, proj) if h is None else _unit_batch(h, params.geom)
    a = _units(params.alpha)
    m1 = proj / a + _units(params.mu)
    return _stats(vb, q * m1, q, q * m1 ** 2 + 1.0 / a, params)


def reconstruction_error(v, params: SsRbmParams, rng: np.random.Generator) -> float:
    """Mean squared error of the one-sweep conditional-mean reconstruction."""
    vb, _ = _batch(v, params.geom)
    proj = projections(vb, params)
    h = sample_h_given_v(vb, params, rng, proj)
    s = slab_mean(vb, h, params, proj)
    recon = visible_mean(SpikeSlabState(h, s), params)
    return float(np.mean((recon - vb) ** 2))


def apply_constraints(params: SsRbmParams, alpha_min: float = ALPHA_MIN,
                      lambda_min: float = LAMBDA_MIN, proper: bool = False) -> SsRbmParams:
    """Clip ``alpha``/``lam`` to their minima and ``phi`` to be non-negative.

    With ``proper=True`` each kernel is also shrunk so that
    ``|W|^2 / alpha <= phi + PROPER_SLACK * lam / (T F)``. Marginalizing the
    slabs subtracts ``W W^T / alpha`` from the visible precision of every active
    unit, and a pixel lies under at most ``T F`` receptive fields, so the
    precision then stays above ``(1 - PROPER_SLACK) lam`` for every spike
    configuration. Without it the joint can become improper when many
    overlapping units are on at once.
    """
    alpha = np.maximum(params.alpha, alpha_min)
    phi = np.maximum(params.phi, 0.0)
    lam = max(params.lam, lambda_min)
    W = params.W
    if proper:
        cap = phi + PROPER_SLACK * lam / (params.geom.num_tilings * params.geom.filters_per_tiling)
        ratio = np.sum(W ** 2, axis=(2, 3)) / alpha
        shrink = np.sqrt(np.minimum(1.0, cap / np.maximum(ratio, 1e-300)))
        W = W * shrink[:, :, None, None]
    return replace(params, W=W, alpha=alpha, lam=lam, phi=phi)


def noise_chains(n: int, params: SsRbmParams, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal((n,) + params.geom.image_shape)
