"""Command-line front end: ``tssrbm <command> [--config FILE] [--key value ...]``."""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .config import COMMANDS, KEYS, SECTIONS, RunConfig
from .data import TextureDataset, load_grayscale, preprocess, read_pgm_bytes, save_image
from .dbn import DbnModel, generate, inpaint, inpainting_mask
from .errors import ConfigError, TssrbmError
from .metrics import REPORT_HEADER, MetricReport, autocorr_spectrum, mssim, tss
from .modelio import load_model, save_model
from .rng import stream
from .training import LayerSpec, default_layer_specs, train_dbn

DESCRIPTIONS = {
    "prepare": "rescale a texture, split it into train/test halves, normalize and cache it",
    "train": "train a TssRBM or DBN on the cached dataset and save the model and log",
    "sample": "synthesize textures from a model and write them as PGM files",
    "inpaint": "fill the centre hole of frames cut from the test region",
    "eval-tss": "score samples with the texture similarity score",
    "eval-mssim": "score inpainting with the mean structural similarity index",
    "mixing": "record a sampling chain and write its autocorrelation spectrum",
}


def _flag_help(name: str, key) -> str:
    note = f"; {key.provenance}" if key.provenance else ""
    default = key.default if key.default != "" else "unset"
    return f"{key.help} (default: {default}{note})"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tssrbm",
        description="Tiled-convolutional spike-and-slab RBMs and DBNs for texture modeling.",
        epilog="Config files hold 'key = value' lines grouped under the sections "
               + ", ".join(f"[{s}]" for s in SECTIONS)
               + ". Flags override file values. Keys marked 'experimental protocol' default "
                 "to the published experimental settings.")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    for command in COMMANDS:
        p = sub.add_parser(command, help=DESCRIPTIONS[command], description=DESCRIPTIONS[command],
                           argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="flat key = value config file")
        for section in SECTIONS:
            group = p.add_argument_group(f"[{section}]")
            for name, key in KEYS.items():
                if key.section == section:
                    group.add_argument(f"--{name.replace('_', '-')}", dest=name,
                                       metavar=key.type.__name__.upper(),
                                       help=_flag_help(name, key))
    return parser


def parse_config(argv=None) -> RunConfig:
    """Resolve defaults, an optional config file and command-line flags."""
    args = vars(build_parser().parse_args(argv))
    command = args.pop("command")
    path = args.pop("config", None)
    file_values = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
        file_values = cfgmod.parse_config_text(text, source=str(path))
    flags = {name: cfgmod.convert(name, raw) for name, raw in args.items()}
    return cfgmod.resolve(command, file_values, flags)


# --- commands -----------------------------------------------------------------

def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _texture_name(cfg: RunConfig, dataset: TextureDataset | None = None) -> str:
    if cfg.name:
        return cfg.name
    if dataset is not None and dataset.name:
        return dataset.name
    return Path(cfg.texture).stem or "texture"


def _dataset(cfg: RunConfig) -> TextureDataset:
    if Path(cfg.dataset).exists():
        return TextureDataset.load(cfg.dataset)
    if cfg.texture:
        return preprocess(load_grayscale(cfg.texture), cfg.target_size, _texture_name(cfg))
    raise ConfigError(f"dataset {cfg.dataset} not found; run 'prepare' or pass --texture")


def cmd_prepare(cfg: RunConfig) -> int:
    if not cfg.texture:
        raise ConfigError("texture: prepare needs an input image")
    ds = preprocess(load_grayscale(cfg.texture), cfg.target_size, _texture_name(cfg))
    Path(cfg.dataset).parent.mkdir(parents=True, exist_ok=True)
    ds.save(cfg.dataset)
    print(f"train {ds.train.shape[0]}x{ds.train.shape[1]}, test {ds.test.shape[0]}x{ds.test.shape[1]}, "
          f"mean {ds.mean:.4f}, std {ds.std:.4f} -> {cfg.dataset}")
    return 0


def layer_specs(cfg: RunConfig) -> list[LayerSpec]:
    specs = default_layer_specs(cfg.depth, cfg.preset)
    specs[0].filters, specs[0].kernel, specs[0].tilings = cfg.filters, cfg.kernel, cfg.tilings
    if cfg.preset == "multi-texture" and cfg.filters == KEYS["filters"].default:
        specs[0].filters = 96
    if cfg.depth > 1:
        specs[1].kernel, specs[1].bias_shift = cfg.kernel2, cfg.bias_shift
        specs[1].filters = cfg.filters2 or specs[1].filters
    if cfg.depth > 2:
        specs[2].kernel = cfg.kernel3
        specs[2].filters = cfg.filters3 or specs[2].filters
    return specs


def cmd_train(cfg: RunConfig) -> int:
    ds = _dataset(cfg)
    out = _out(cfg)
    log_path = Path(cfg.log) if cfg.log else out / "train.log"
    with open(log_path, "w") as log:
        model = train_dbn(ds, layer_specs(cfg), cfg.train_configs(), stream(cfg.seed, "init"),
                          patch=cfg.patch, log=log, init={"mu": cfg.init_mu})
    Path(cfg.model).parent.mkdir(parents=True, exist_ok=True)
    save_model(model, cfg.model)
    print(f"{model.depth}-layer model -> {cfg.model}; log -> {log_path}")
    return 0


def _samples(cfg: RunConfig, model: DbnModel) -> np.ndarray:
    return generate(model, n_samples=cfg.n_samples, burn_in=cfg.burn_in, thin=cfg.thin,
                    out_size=cfg.sample_size, rng=stream(cfg.seed, "sample"),
                    n_chains=cfg.sample_chains)


def cmd_sample(cfg: RunConfig) -> int:
    model = load_model(cfg.model)
    out = _out(cfg)
    samples = _samples(cfg, model)
    for i, s in enumerate(samples):
        save_image(s, model, out / f"sample_{i:03d}.pgm")
    print(f"{len(samples)} samples of {cfg.sample_size}x{cfg.sample_size} -> {out}")
    return 0


def frame_origins(cfg: RunConfig, test_shape) -> np.ndarray:
    """Top-left corners of the inpainting frames inside the test region."""
    h, w = test_shape
    if cfg.frame_size > min(h, w):
        raise ConfigError(f"frame_size: {cfg.frame_size} exceeds the test region {h}x{w}")
    rng = stream(cfg.seed, "inpaint")
    return np.stack([rng.integers(0, h - cfg.frame_size + 1, cfg.n_frames),
                     rng.integers(0, w - cfg.frame_size + 1, cfg.n_frames)], axis=1)


def run_inpainting(cfg: RunConfig, model: DbnModel, ds: TextureDataset):
    """Yield ``(frame index, seed index, truth, result)`` for the inpainting protocol."""
    mask = inpainting_mask(cfg.frame_size, cfg.hole_size)
    for i, (r, c) in enumerate(frame_origins(cfg, ds.test.shape)):
        truth = ds.test[r:r + cfg.frame_size, c:c + cfg.frame_size]
        for j in range(cfg.inpaint_seeds):
            result = inpaint(truth, mask, model, iters=cfg.inpaint_iters,
                             rng=stream(cfg.seed, "inpaint", i + 1, j))
            yield i, j, truth, result


def cmd_inpaint(cfg: RunConfig) -> int:
    model, ds = load_model(cfg.model), _dataset(cfg)
    out = _out(cfg)
    mask = inpainting_mask(cfg.frame_size, cfg.hole_size)
    count = 0
    for i, j, truth, result in run_inpainting(cfg, model, ds):
        if j == 0:
            save_image(truth, ds, out / f"frame_{i:02d}_truth.pgm")
            save_image(np.where(mask, truth, truth.min()), ds, out / f"frame_{i:02d}_input.pgm")
        save_image(result, ds, out / f"frame_{i:02d}_seed_{j}.pgm")
        count += 1
    print(f"{count} inpainted frames -> {out}")
    return 0


def _report(cfg: RunConfig, texture: str, model: DbnModel, metric: str, scores, filename) -> int:
    report = MetricReport(scores, {"seed": cfg.seed})
    table = REPORT_HEADER + "\n" + report.row(texture, f"{model.depth}-layer", metric) + "\n"
    (_out(cfg) / filename).write_text(table)
    sys.stdout.write(table)
    return 0


def _load_samples(cfg: RunConfig, model: DbnModel) -> list:
    files = sorted(Path(cfg.samples).glob("*.pgm"))
    if not files:
        raise ConfigError(f"samples: no PGM files in {cfg.samples}")
    return [(read_pgm_bytes(f.read_bytes()) / 255.0 - model.mean) / model.std for f in files]


def cmd_eval_tss(cfg: RunConfig) -> int:
    model, ds = load_model(cfg.model), _dataset(cfg)
    samples = _load_samples(cfg, model) if cfg.samples else _samples(cfg, model)
    scores = [tss(s, ds.test, patch=cfg.tss_patch) for s in samples]
    return _report(cfg, _texture_name(cfg, ds), model, "tss", scores, "tss.tsv")


def _to_8bit(x, ds):
    return (np.asarray(x) * ds.std + ds.mean) * 255.0


def cmd_eval_mssim(cfg: RunConfig) -> int:
    model, ds = load_model(cfg.model), _dataset(cfg)
    o = (cfg.frame_size - cfg.hole_size) // 2
    hole = (slice(o, o + cfg.hole_size),) * 2
    scores = [mssim(_to_8bit(res[hole], ds), _to_8bit(truth[hole], ds))
              for _, _, truth, res in run_inpainting(cfg, model, ds)]
    return _report(cfg, _texture_name(cfg, ds), model, "mssim", scores, "mssim.tsv")


def cmd_mixing(cfg: RunConfig) -> int:
    model = load_model(cfg.model)
    size = cfg.mixing_size or cfg.patch
    chain = generate(model, n_samples=cfg.chain_length, burn_in=cfg.burn_in, thin=1,
                     out_size=size, rng=stream(cfg.seed, "mixing"))
    r = autocorr_spectrum(chain, cfg.max_lag)
    lines = ["lag\tautocorr"] + [f"{tau}\t{v:.6f}" for tau, v in enumerate(r)]
    text = "\n".join(lines) + "\n"
    (_out(cfg) / "mixing.tsv").write_text(text)
    sys.stdout.write(text)
    return 0


HANDLERS = {
    "prepare": cmd_prepare, "train": cmd_train, "sample": cmd_sample, "inpaint": cmd_inpaint,
    "eval-tss": cmd_eval_tss, "eval-mssim": cmd_eval_mssim, "mixing": cmd_mixing,
}


def _limit_threads(n: int):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return None
    return threadpool_limits(n)


def dispatch(cfg: RunConfig) -> int:
    """Run the configured command; 0 on success, nonzero with a one-line message otherwise."""
    _limit_threads(cfg.threads)
    try:
        return HANDLERS[cfg.command](cfg)
    except ConfigError as exc:
        print(f"tssrbm {cfg.command}: config error: {exc}", file=sys.stderr)
        return 2
    except (TssrbmError, OSError, ValueError) as exc:
        print(f"tssrbm {cfg.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main(argv=None) -> int:
    try:
        cfg = parse_config(argv)
    except ConfigError as exc:
        print(f"tssrbm: config error: {exc}", file=sys.stderr)
        return 2
    return dispatch(cfg)


if __name__ == "__main__":
    sys.exit(main())
