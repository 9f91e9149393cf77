"""Run configuration: flat ``key = value`` files with ``[section]`` headers.

Every key lives in exactly one section. A file may list a key under its own
section or before any header; anything else is a ConfigError that names
the offending line.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, fields
from typing import Any, NamedTuple

from .errors import ConfigError
from .training import TrainConfig, default_algorithms


class Key(NamedTuple):
    section: str
    type: type
    default: Any
    help: str
    provenance: str = ""


PROTOCOL = "experimental protocol"

KEYS: dict[str, Key] = {
    # run
    "seed": Key("run", int, 0, "master seed expanded into named random streams"),
    "threads": Key("run", int, 1, "cap on worker threads for numeric libraries"),
    "texture": Key("run", str, "", "input texture image (binary PGM)"),
    "name": Key("run", str, "", "texture label for reports (default: file stem)"),
    "dataset": Key("run", str, "dataset.npz", "cached preprocessed dataset"),
    "model": Key("run", str, "model.ssdbn", "model file"),
    "out": Key("run", str, "out", "output directory"),
    "log": Key("run", str, "", "training log path (default: <out>/train.log)"),
    # data
    "target_size": Key("data", int, 320, "rescaled texture width before the train/test split",
                       PROTOCOL),
    "patch": Key("data", int, 98, "training patch size", PROTOCOL),
    # model
    "depth": Key("model", int, 1, "number of layers (1-3)"),
    "preset": Key("model", str, "single", "layer sizes: single or multi-texture", PROTOCOL),
    "filters": Key("model", int, 32, "first-layer filters per tiling", PROTOCOL),
    "kernel": Key("model", int, 11, "first-layer receptive field size", PROTOCOL),
    "tilings": Key("model", int, 11, "number of tilings", PROTOCOL),
    "filters2": Key("model", int, 0, "second-layer filters (0: preset)"),
    "kernel2": Key("model", int, 2, "second-layer receptive field size", PROTOCOL),
    "filters3": Key("model", int, 0, "third-layer filters (0: preset)"),
    "kernel3": Key("model", int, 2, "third-layer receptive field size", PROTOCOL),
    "bias_shift": Key("model", bool, True, "second layer keeps the slab-mean spike bias term"),
    "init_mu": Key("model", float, 0.0, "initial first-layer slab mean"),
    # train
    "algorithm": Key("train", str, "", "CD, PCD or FPCD for the top layer (default by depth)",
                     PROTOCOL),
    "lower_algorithm": Key("train", str, "CD", "algorithm for non-top layers", PROTOCOL),
    "k": Key("train", int, 1, "Gibbs sweeps per update", PROTOCOL),
    "learning_rate": Key("train", float, 1e-3, "base learning rate"),
    "lr_decay_start": Key("train", int, 5000, "update after which the rate decays as 1/t (0: never)"),
    "momentum": Key("train", float, 0.0, "momentum coefficient"),
    "minibatch": Key("train", int, 64, "minibatch size", PROTOCOL),
    "n_chains": Key("train", int, 64, "persistent chains"),
    "restart_prob": Key("train", float, 0.01, "per-chain restart probability per update", PROTOCOL),
    "fast_rate": Key("train", float, -1.0, "FPCD fast-parameter rate (negative: learning_rate)"),
    "fast_decay": Key("train", float, 0.95, "FPCD fast-parameter decay"),
    "updates": Key("train", int, 10000, "updates per layer"),
    "epoch_updates": Key("train", int, 100, "updates between log lines"),
    "scale_by_sharing": Key("train", bool, True, "divide gradients by the number of tied terms"),
    "lr_scale": Key("train", str, "b:20,phi:20", "per-parameter rate multipliers, name:factor list"),
    "proper_guard": Key("train", bool, False, "shrink first-layer kernels so the model stays normalizable"),
    # sample
    "n_samples": Key("sample", int, 128, "number of synthesized samples", PROTOCOL),
    "sample_size": Key("sample", int, 120, "sample side length", PROTOCOL),
    "burn_in": Key("sample", int, 2000, "sweeps before the first sample"),
    "thin": Key("sample", int, 50, "sweeps between samples"),
    "sample_chains": Key("sample", int, 1, "independent sampling chains"),
    # inpaint
    "frame_size": Key("inpaint", int, 76, "inpainting frame side length", PROTOCOL),
    "hole_size": Key("inpaint", int, 54, "side length of the hole to fill", PROTOCOL),
    "inpaint_iters": Key("inpaint", int, 500, "Gibbs iterations per frame", PROTOCOL),
    "n_frames": Key("inpaint", int, 20, "frames cut from the test region", PROTOCOL),
    "inpaint_seeds": Key("inpaint", int, 5, "sampling seeds per frame", PROTOCOL),
    # eval
    "tss_patch": Key("eval", int, 19, "TSS comparison patch size", PROTOCOL),
    "samples": Key("eval", str, "", "directory of PGM samples to score (default: generate)"),
    # mixing
    "chain_length": Key("mixing", int, 2000, "recorded sweeps for the autocorrelation"),
    "max_lag": Key("mixing", int, 100, "largest autocorrelation lag"),
    "mixing_size": Key("mixing", int, 0, "image size for the mixing chain (0: patch)"),
}

SECTIONS = tuple(dict.fromkeys(k.section for k in KEYS.values()))
COMMANDS = ("prepare", "train", "sample", "inpaint", "eval-tss", "eval-mssim", "mixing")

_LINE = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*=\s*(.*?)\s*$")
_SECTION = re.compile(r"^\s*\[\s*([A-Za-z_-]+)\s*\]\s*$")


def convert(name: str, raw: str):
    """Parse ``raw`` as the declared type of ``name``."""
    if name not in KEYS:
        raise ConfigError(f"unknown key {name!r}")
    kind = KEYS[name].type
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind.__name__}") from None
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Values set by a config file, keyed by name."""
    values: dict = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        where = f"{source}:{lineno}"
        m = _SECTION.match(stripped)
        if m:
            section = m.group(1)
            if section not in SECTIONS:
                raise ConfigError(f"{where}: unknown section [{section}]")
            continue
        m = _LINE.match(stripped)
        if not m:
            raise ConfigError(f"{where}: expected 'key = value', got {line.strip()!r}")
        key, raw = m.groups()
        if key not in KEYS:
            raise ConfigError(f"{where}: unknown key {key!r}")
        if section is not None and KEYS[key].section != section:
            raise ConfigError(f"{where}: key {key!r} belongs in [{KEYS[key].section}], "
                              f"not [{section}]")
        try:
            values[key] = convert(key, raw)
        except ConfigError as exc:
            raise ConfigError(f"{where}: {exc}") from None
    return values


def parse_lr_scale(text: str) -> dict:
    out = {}
    for item in filter(None, (t.strip() for t in text.split(","))):
        name, sep, factor = item.partition(":")
        if not sep:
            raise ConfigError(f"lr_scale: expected name:factor, got {item!r}")
        try:
            out[name.strip()] = float(factor)
        except ValueError:
            raise ConfigError(f"lr_scale: bad factor in {item!r}") from None
    return out


@dataclass
class RunConfig:
    command: str = "train"
    seed: int = 0
    threads: int = 1
    texture: str = ""
    name: str = ""
    dataset: str = "dataset.npz"
    model: str = "model.ssdbn"
    out: str = "out"
    log: str = ""
    target_size: int = 320
    patch: int = 98
    depth: int = 1
    preset: str = "single"
    filters: int = 32
    kernel: int = 11
    tilings: int = 11
    filters2: int = 0
    kernel2: int = 2
    filters3: int = 0
    kernel3: int = 2
    bias_shift: bool = True
    init_mu: float = 0.0
    algorithm: str = ""
    lower_algorithm: str = "CD"
    k: int = 1
    learning_rate: float = 1e-3
    lr_decay_start: int = 5000
    momentum: float = 0.0
    minibatch: int = 64
    n_chains: int = 64
    restart_prob: float = 0.01
    fast_rate: float = -1.0
    fast_decay: float = 0.95
    updates: int = 10000
    epoch_updates: int = 100
    scale_by_sharing: bool = True
    lr_scale: str = "b:20,phi:20"
    proper_guard: bool = False
    n_samples: int = 128
    sample_size: int = 120
    burn_in: int = 2000
    thin: int = 50
    sample_chains: int = 1
    frame_size: int = 76
    hole_size: int = 54
    inpaint_iters: int = 500
    n_frames: int = 20
    inpaint_seeds: int = 5
    tss_patch: int = 19
    samples: str = ""
    chain_length: int = 2000
    max_lag: int = 100
    mixing_size: int = 0

    def validate(self) -> "RunConfig":
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        if not 1 <= self.depth <= 3:
            raise ConfigError("depth: must be 1, 2 or 3")
        for name in ("restart_prob",):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name}: {getattr(self, name)} outside [0, 1]")
        positive = ("threads", "target_size", "patch", "filters", "kernel", "tilings", "kernel2",
                    "kernel3", "k", "minibatch", "n_chains", "epoch_updates", "n_samples",
                    "sample_size", "burn_in", "thin", "sample_chains", "frame_size",
                    "n_frames", "inpaint_seeds", "tss_patch", "chain_length")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be positive, got {getattr(self, name)}")
        for name in ("updates", "inpaint_iters", "hole_size", "max_lag", "filters2", "filters3",
                     "mixing_size", "lr_decay_start"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be non-negative")
        if self.chain_length <= self.max_lag:
            raise ConfigError("max_lag: must be smaller than chain_length")
        if self.algorithm and self.algorithm.upper() not in ("CD", "PCD", "FPCD"):
            raise ConfigError(f"algorithm: unknown {self.algorithm!r}")
        if self.preset not in ("single", "multi-texture"):
            raise ConfigError(f"preset: unknown {self.preset!r}")
        parse_lr_scale(self.lr_scale)
        for cfg in self.train_configs():
            cfg.validate()
        return self

    def algorithms(self) -> list[str]:
        algos = default_algorithms(self.depth)
        if self.depth > 1:
            algos[:-1] = [self.lower_algorithm.upper()] * (self.depth - 1)
        if self.algorithm:
            algos[-1] = self.algorithm.upper()
        return algos

    def train_configs(self) -> list[TrainConfig]:
        scale = parse_lr_scale(self.lr_scale)
        out = []
        for i, algo in enumerate(self.algorithms()):
            # multipliers name first-layer parameters; upper layers ignore unknown names
            names = ("W", "b", "mu", "alpha", "lam", "phi") if i == 0 else ()
            try:
                out.append(TrainConfig(
                    algorithm=algo, k=self.k, learning_rate=self.learning_rate,
                    lr_decay_start=self.lr_decay_start or None, momentum=self.momentum,
                    minibatch=self.minibatch, n_chains=self.n_chains,
                    restart_prob=self.restart_prob,
                    fast_rate=None if self.fast_rate < 0 else self.fast_rate,
                    fast_decay=self.fast_decay, updates=self.updates,
                    epoch_updates=self.epoch_updates, scale_by_sharing=self.scale_by_sharing,
                    lr_scale={k: v for k, v in scale.items() if k in names},
                    proper_guard=self.proper_guard, seed=self.seed))
            except ConfigError as exc:
                raise ConfigError(f"train: {exc}") from None
        return out


_DEFAULTS = {f.name: f.default for f in fields(RunConfig)}
assert set(KEYS) == set(_DEFAULTS) - {"command"}
assert all(KEYS[k].default == _DEFAULTS[k] for k in KEYS)


def resolve(command: str, file_values: dict, flag_values: dict) -> RunConfig:
    """Defaults, then file values, then flags (last writer wins)."""
    merged = {**file_values, **{k: v for k, v in flag_values.items() if v is not None}}
    unknown = set(merged) - set(KEYS)
    if unknown:
        raise ConfigError(f"unknown key {sorted(unknown)[0]!r}")
    return RunConfig(command=command, **merged).validate()
