"""Stochastic maximum-likelihood training of every layer type.

The likelihood gradient is ``E_model[dE/dtheta] - E_data[dE/dtheta]``. The
data term comes from the minibatch; the model term from Gibbs chains that
either start at the data (CD-k), persist across updates (PCD), or persist
and are driven by slow + fast parameters (FPCD).
"""

from __future__ import annotations

import sys
import time
from dataclasses import dataclass, field
from typing import Any, Callable, NamedTuple, Optional

import numpy as np

from . import ssrbm, upper
from .data import sample_patches
from .dbn import DbnModel, infer_up
from .errors import ConfigError, NumericalError
from .ssrbm import SsRbmParams
from .tiling import build_conv_geometry, build_tiled_geometry
from .upper import BinaryRbmParams, SsVisRbmParams

ALGORITHMS = ("CD", "PCD", "FPCD")


@dataclass
class TrainConfig:
    algorithm: str = "FPCD"
    k: int = 1
    learning_rate: float = 1e-3
    lr_decay_start: Optional[int] = None
    momentum: float = 0.0
    minibatch: int = 64
    n_chains: int = 64
    restart_prob: float = 0.01
    fast_rate: Optional[float] = None
    fast_decay: float = 19.0 / 20.0
    updates: int = 10000
    epoch_updates: int = 100
    rb_spikes: bool = False
    scale_by_sharing: bool = False
    lr_scale: dict = field(default_factory=dict)
    proper_guard: bool = False
    fast_params: Optional[tuple] = None
    seed: int = 0

    def __post_init__(self):
        self.algorithm = self.algorithm.upper()
        self.validate()

    def validate(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if not 0.0 <= self.restart_prob <= 1.0:
            raise ConfigError(f"restart_prob must lie in [0, 1], got {self.restart_prob}")
        if self.learning_rate < 0 or (self.fast_rate is not None and self.fast_rate < 0):
            raise ConfigError("learning rates must be non-negative")
        if not 0.0 <= self.fast_decay <= 1.0:
            raise ConfigError("fast_decay must lie in [0, 1]")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.minibatch < 1 or self.n_chains < 1 or self.updates < 0 or self.epoch_updates < 1:
            raise ConfigError("minibatch, n_chains and epoch_updates must be positive")

    @property
    def effective_fast_rate(self) -> float:
        return self.learning_rate if self.fast_rate is None else self.fast_rate

    def rate_at(self, update: int) -> float:
        """Learning rate for the (1-based) update: constant, then ``1/t`` decay."""
        if self.lr_decay_start is None or update <= self.lr_decay_start:
            return self.learning_rate
        return self.learning_rate * self.lr_decay_start / update


class UpperBatch(NamedTuple):
    """Training data for the second layer: slab means, spike probabilities, slab variance."""
    s: np.ndarray
    h: np.ndarray
    s_var: Any = None


# --- per-layer adapters -----------------------------------------------------

class _SsRbm:
    @staticmethod
    def stats(v, params, cfg, rng):
        if cfg.rb_spikes:
            return ssrbm.expected_grad_stats(v, params)
        h = ssrbm.sample_h_given_v(v, params, rng)
        return ssrbm.expected_grad_stats(v, params, h)

    positive = stats

    @staticmethod
    def negative(chains, params, cfg, rng):
        return _SsRbm.stats(chains, params, cfg, rng)

    @staticmethod
    def noise(n, params, rng):
        return ssrbm.noise_chains(n, params, rng)

    @staticmethod
    def restart(chains, mask, params, rng):
        fresh = ssrbm.noise_chains(len(chains), params, rng)
        return np.where(mask[:, None, None], fresh, chains)

    @staticmethod
    def from_batch(batch):
        return np.array(batch, dtype=np.float64)

    @staticmethod
    def advance(chains, params, rng, k):
        v = chains
        for _ in range(k):
            _, _, v = ssrbm.gibbs_sweep(v, params, rng)
        return v

    constrain = staticmethod(ssrbm.apply_constraints)

    @staticmethod
    def free_energy(batch, params):
        return float(np.mean(ssrbm.free_energy(batch, params)))

    @staticmethod
    def recon(batch, params, rng):
        return ssrbm.reconstruction_error(batch, params, rng)


class _SsVis:
    @staticmethod
    def positive(batch, params, cfg, rng):
        return upper.expected_grad_stats2(batch.s, batch.h, params, batch.s_var)

    @staticmethod
    def negative(chains, params, cfg, rng):
        s, h = chains
        return upper.expected_grad_stats2(s, h, params)

    @staticmethod
    def noise(n, params, rng):
        return upper.noise_chains2(n, params, rng)

    @staticmethod
    def restart(chains, mask, params, rng):
        s, h = chains
        fs, fh = upper.noise_chains2(len(s), params, rng)
        m = mask[:, None, None, None]
        return np.where(m, fs, s), np.where(m, fh, h)

    @staticmethod
    def from_batch(batch):
        return np.array(batch.s), np.array(batch.h)

    @staticmethod
    def advance(chains, params, rng, k):
        s, h = chains
        for _ in range(k):
            _, h, s = upper.gibbs_sweep2(s, h, params, rng)
        return s, h

    constrain = staticmethod(upper.apply_constraints2)

    @staticmethod
    def free_energy(batch, params):
        return float(np.mean(upper.free_energy2(batch.s, batch.h, params)))

    @staticmethod
    def recon(batch, params, rng):
        return upper.reconstruction_error2(batch.s, batch.h, params, rng)


class _Brbm:
    @staticmethod
    def positive(batch, params, cfg, rng):
        return upper.brbm_expected_grad_stats(batch, params)

    @staticmethod
    def negative(chains, params, cfg, rng):
        return upper.brbm_expected_grad_stats(chains, params)

    @staticmethod
    def noise(n, params, rng):
        return upper.brbm_noise_chains(n, params, rng)

    @staticmethod
    def restart(chains, mask, params, rng):
        fresh = upper.brbm_noise_chains(len(chains), params, rng)
        return np.where(mask[:, None, None, None], fresh, chains)

    @staticmethod
    def from_batch(batch):
        return np.array(batch, dtype=np.float64)

    @staticmethod
    def advance(chains, params, rng, k):
        v = chains
        for _ in range(k):
            _, v = upper.brbm_gibbs_sweep(v, params, rng)
        return v

    @staticmethod
    def constrain(params):
        return params

    @staticmethod
    def free_energy(batch, params):
        return float(np.mean(upper.brbm_free_energy(batch, params)))

    @staticmethod
    def recon(batch, params, rng):
        return upper.brbm_reconstruction_error(batch, params, rng)


def _ops(params):
    if isinstance(params, SsRbmParams):
        return _SsRbm
    if isinstance(params, SsVisRbmParams):
        return _SsVis
    if isinstance(params, BinaryRbmParams):
        return _Brbm
    raise TypeError(f"unsupported parameter type {type(params).__name__}")


def apply_constraints(params, proper_guard: bool = False):
    """Clip precisions to their minima and ``phi`` to be non-negative.

    ``proper_guard`` additionally shrinks first-layer kernels into the
    sufficient properness region (see :func:`tssrbm.ssrbm.apply_constraints`).
    """
    if proper_guard and isinstance(params, SsRbmParams):
        return ssrbm.apply_constraints(params, proper=True)
    return _ops(params).constrain(params)


# --- updates ----------------------------------------------------------------

@dataclass
class ChainPool:
    chains: Any
    fast: Optional[dict] = None
    velocity: Optional[dict] = None
    updates: int = 0


def init_pool(params, cfg: TrainConfig, rng: np.random.Generator) -> ChainPool:
    ops = _ops(params)
    fast = None
    if cfg.algorithm == "FPCD":
        fast = {k: np.zeros_like(np.asarray(a, dtype=np.float64)) for k, a in params.arrays().items()}
    return ChainPool(chains=ops.noise(cfg.n_chains, params, rng), fast=fast)


def gradient(pos: dict, neg: dict) -> dict:
    """Log-likelihood ascent direction from the two phases' dE/dtheta."""
    grad = {k: np.asarray(neg[k]) - np.asarray(pos[k]) for k in pos}
    bad = [k for k, v in grad.items() if not np.all(np.isfinite(v))]
    if bad:
        raise NumericalError(f"non-finite gradient for {bad}: the chains diverged, which "
                             "usually means the model became improper; lower the learning rate")
    return grad


def sharing_counts(params) -> dict:
    """How many energy terms each parameter enters; the sums in ``dE/dtheta`` grow with it.

    ``phi`` and ``lam`` multiply squared pixels, so they count pixel terms
    rather than receptive-field sites.
    """
    if isinstance(params, SsRbmParams):
        g = params.geom
        sites = g.positions ** 2
        return {"W": sites, "b": sites, "mu": sites, "alpha": sites, "phi": sites * g.kernel ** 2,
                "lam": g.n_pixels}
    if isinstance(params, SsVisRbmParams):
        g = params.geom
        out, inp = g.output_size ** 2, g.map_size ** 2
        return {"U": out, "rho": out, "alpha": inp, "mu": inp, "b": inp}
    g = params.geom
    out, inp = g.output_size ** 2, g.map_size ** 2
    return {"W": out, "vbias": inp, "hbias": out}


def _scaled(grad, params, cfg):
    if cfg.scale_by_sharing:
        counts = sharing_counts(params)
        grad = {k: v / counts[k] for k, v in grad.items()}
    if cfg.lr_scale:
        unknown = set(cfg.lr_scale) - set(grad)
        if unknown:
            raise ConfigError(f"lr_scale names unknown parameters {sorted(unknown)}")
        grad = {k: v * cfg.lr_scale.get(k, 1.0) for k, v in grad.items()}
    return grad


def _apply(params, grad, cfg, pool, ops):
    t = pool.updates + 1 if pool is not None else 1
    lr = cfg.rate_at(t)
    grad = _scaled(grad, params, cfg)
    arrays = params.arrays()
    if pool is not None and cfg.momentum > 0:
        if pool.velocity is None:
            pool.velocity = {k: np.zeros_like(np.asarray(a, dtype=np.float64)) for k, a in arrays.items()}
        for k in arrays:
            pool.velocity[k] = cfg.momentum * pool.velocity[k] + lr * grad[k]
        new = {k: arrays[k] + pool.velocity[k] for k in arrays}
    else:
        new = {k: arrays[k] + lr * grad[k] for k in arrays}
    if pool is not None:
        pool.updates = t
    return apply_constraints(params.with_arrays(new), cfg.proper_guard)


def cd_gradient(batch, params, cfg: TrainConfig, rng: np.random.Generator) -> dict:
    """CD-k estimate of the log-likelihood gradient on ``batch``."""
    ops = _ops(params)
    pos = ops.positive(batch, params, cfg, rng)
    chains = ops.advance(ops.from_batch(batch), params, rng, cfg.k)
    return gradient(pos, ops.negative(chains, params, cfg, rng))


def cd_update(batch, params, cfg: TrainConfig, rng: np.random.Generator,
              pool: ChainPool | None = None):
    """One CD-k step; ``pool`` (optional) only carries momentum and the update count."""
    return _apply(params, cd_gradient(batch, params, cfg, rng), cfg, pool, _ops(params))


def _persistent(batch, params, pool, cfg, rng, fast_rate):
    ops = _ops(params)
    pos = ops.positive(batch, params, cfg, rng)
    n = len(pool.chains[0]) if isinstance(pool.chains, tuple) else len(pool.chains)
    mask = rng.random(n) < cfg.restart_prob
    chains = ops.restart(pool.chains, mask, params, rng)
    if pool.fast is not None:
        slow = params.arrays()
        chain_params = apply_constraints(params.with_arrays({k: slow[k] + pool.fast[k] for k in slow}),
                                         cfg.proper_guard)
    else:
        chain_params = params
    chains = ops.advance(chains, chain_params, rng, cfg.k)
    grad = gradient(pos, ops.negative(chains, chain_params, cfg, rng))
    pool.chains = chains
    new = _apply(params, grad, cfg, pool, ops)
    if pool.fast is not None:
        step = _scaled(grad, params, cfg)
        for k in pool.fast:
            rate = fast_rate if cfg.fast_params is None or k in cfg.fast_params else 0.0
            pool.fast[k] = cfg.fast_decay * pool.fast[k] + rate * step[k]
    return new, pool


def pcd_update(batch, params, pool: ChainPool, cfg: TrainConfig, rng: np.random.Generator):
    """One PCD step: persistent chains advanced ``k`` sweeps, random restarts to noise."""
    return _persistent(batch, params, pool, cfg, rng, 0.0)


def fpcd_update(batch, params, pool: ChainPool, cfg: TrainConfig, rng: np.random.Generator):
    """PCD whose chains run on slow + fast parameters; fast ones decay geometrically."""
    if pool.fast is None:
        pool.fast = {k: np.zeros_like(np.asarray(a, dtype=np.float64)) for k, a in params.arrays().items()}
    if cfg.fast_params is not None and not set(cfg.fast_params) <= set(pool.fast):
        raise ConfigError(f"fast_params names unknown parameters {sorted(set(cfg.fast_params) - set(pool.fast))}")
    return _persistent(batch, params, pool, cfg, rng, cfg.effective_fast_rate)


LOG_HEADER = "update\tepoch\tfree_energy_train\tfree_energy_val\trecon_err\twall_ms"


def train_layer(params, batch_fn: Callable, cfg: TrainConfig, rng: np.random.Generator,
                val_fn: Callable | None = None, log=None, label: str = ""):
    """Run ``cfg.updates`` updates of ``cfg.algorithm``; returns ``(params, history)``.

    ``batch_fn(rng)`` yields one minibatch; ``val_fn(rng)``, if given, a
    held-out batch for the free-energy gap.
    """
    data_rng, chain_rng, mon_rng = rng.spawn(3)
    ops = _ops(params)
    pool = init_pool(params, cfg, chain_rng) if cfg.algorithm != "CD" else ChainPool(chains=None)
    history = []
    if log is not None:
        if label:
            log.write(f"# {label} ({cfg.algorithm}-{cfg.k})\n")
        log.write(LOG_HEADER + "\n")
    start = time.perf_counter()
    for t in range(1, cfg.updates + 1):
        batch = batch_fn(data_rng)
        if cfg.algorithm == "CD":
            params = cd_update(batch, params, cfg, chain_rng, pool)
        elif cfg.algorithm == "PCD":
            params, pool = pcd_update(batch, params, pool, cfg, chain_rng)
        else:
            params, pool = fpcd_update(batch, params, pool, cfg, chain_rng)
        if t % cfg.epoch_updates == 0 or t == cfg.updates:
            fe_train = ops.free_energy(batch, params)
            fe_val = ops.free_energy(val_fn(mon_rng), params) if val_fn is not None else float("nan")
            row = (t, (t - 1) // cfg.epoch_updates, fe_train, fe_val,
                   ops.recon(batch, params, mon_rng), (time.perf_counter() - start) * 1e3)
            history.append(row)
            if log is not None:
                log.write("%d\t%d\t%.6f\t%.6f\t%.6f\t%.1f\n" % row)
                log.flush()
    return params, history


# --- greedy layer-wise DBN training ----------------------------------------

@dataclass
class LayerSpec:
    kind: str
    filters: int
    kernel: int
    tilings: int = 1
    bias_shift: bool = True


def default_layer_specs(depth: int = 1, preset: str = "single") -> list[LayerSpec]:
    """Layer stacks used in the experiments.

    ``single``: 32 filters per tiling, 11x11 fields, 11 tilings, upper
    layers with 128 filters over 2x2 windows. ``multi-texture``: 96 first
    layer filters and 256 in each upper layer.
    """
    if not 1 <= depth <= 3:
        raise ConfigError("depth must be 1, 2 or 3")
    if preset == "single":
        f1, f2, f3 = 32, 128, 128
    elif preset == "multi-texture":
        f1, f2, f3 = 96, 256, 256
    else:
        raise ConfigError(f"unknown preset {preset!r}")
    specs = [LayerSpec("ssrbm", f1, 11, 11), LayerSpec("ssvis", f2, 2), LayerSpec("brbm", f3, 2)]
    return specs[:depth]


def default_algorithms(depth: int) -> list[str]:
    """FPCD for a lone ssRBM; otherwise CD-1 below and PCD on top."""
    if depth == 1:
        return ["FPCD"]
    return ["CD"] * (depth - 1) + ["PCD"]


def _validate_specs(specs):
    kinds = [s.kind for s in specs]
    if kinds not in (["ssrbm"], ["ssrbm", "ssvis"], ["ssrbm", "ssvis", "brbm"]):
        raise ConfigError(f"layer kinds {kinds} do not form a supported stack")


def train_dbn(dataset, layer_specs: list[LayerSpec], cfgs: list[TrainConfig],
              rng: np.random.Generator, patch: int = 98, log=None,
              init: dict | None = None) -> DbnModel:
    """Greedy layer-wise training.

    Layer 1 learns from image patches; each higher layer learns from the
    frozen lower layers' up-pass of fresh patches and is initialized from
    the layer below where the model defines analogues.
    """
    _validate_specs(layer_specs)
    if len(cfgs) != len(layer_specs):
        raise ConfigError("need one TrainConfig per layer")
    init = init or {}
    init_rng, *layer_rngs = rng.spawn(1 + len(layer_specs))
    sets = dataset if isinstance(dataset, (list, tuple)) else [dataset]

    def patches(split):
        return lambda r, n: sample_patches(sets, patch, n, r, split=split)

    s1 = layer_specs[0]
    geom1 = build_tiled_geometry(patch, patch, s1.kernel, s1.tilings, s1.filters)
    p1 = ssrbm.init_params(geom1, init_rng, **init)
    cfg = cfgs[0]
    p1, _ = train_layer(p1, lambda r: patches("train")(r, cfg.minibatch), cfg, layer_rngs[0],
                        val_fn=lambda r: patches("test")(r, cfg.minibatch), log=log,
                        label="layer 1 ssrbm")
    model = DbnModel(p1, mean=sets[0].mean, std=sets[0].std)
    if len(layer_specs) == 1:
        return model

    s2, cfg2 = layer_specs[1], cfgs[1]
    geom2 = build_conv_geometry(geom1.num_tilings * geom1.filters_per_tiling, geom1.positions,
                                s2.kernel, s2.filters)
    p2 = upper.init_from_lower(p1, geom2, init_rng, bias_shift=s2.bias_shift)
    base = DbnModel(p1)

    def up2(split, n):
        def fn(r):
            up = infer_up(patches(split)(r, n), base, r)
            return UpperBatch(up.m, up.q, up.s_var)
        return fn

    p2, _ = train_layer(p2, up2("train", cfg2.minibatch), cfg2, layer_rngs[1],
                        val_fn=up2("test", cfg2.minibatch), log=log, label="layer 2 ssvis")
    model.layer2 = p2
    if len(layer_specs) == 2:
        return model

    s3, cfg3 = layer_specs[2], cfgs[2]
    geom3 = build_conv_geometry(s2.filters, geom2.output_size, s3.kernel, s3.filters)
    p3 = upper.init_brbm(geom3, init_rng)
    base2 = DbnModel(p1, p2)

    def up3(split, n):
        return lambda r: infer_up(patches(split)(r, n), base2, r).g

    p3, _ = train_layer(p3, up3("train", cfg3.minibatch), cfg3, layer_rngs[2],
                        val_fn=up3("test", cfg3.minibatch), log=log, label="layer 3 brbm")
    model.layer3 = p3
    return model
