import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import (MODE_PATTERN, TINY_LR_SCALE, bimodal, is_proper, random_brbm, random_ssrbm,
                      random_ssvis, tiny_geometry)
from tssrbm import oracle, ssrbm, training, upper
from tssrbm.errors import ConfigError
from tssrbm.training import TrainConfig

UPDATES = {"CD": training.cd_update, "PCD": training.pcd_update, "FPCD": training.fpcd_update}


def _step(algo, batch, params, pool, cfg, rng):
    if algo == "CD":
        return training.cd_update(batch, params, cfg, rng, pool), pool
    return UPDATES[algo](batch, params, pool, cfg, rng)


def _same(a, b):
    return all(np.array_equal(a.arrays()[k], b.arrays()[k]) for k in a.arrays())


def _batches(kind, rng, params, n=8):
    if kind == "ssrbm":
        return rng.normal(size=(n,) + params.geom.image_shape)
    if kind == "ssvis":
        s, h = upper.noise_chains2(n, params, rng)
        return training.UpperBatch(s, h.astype(float), None)
    return upper.brbm_noise_chains(n, params, rng)


MODELS = {
    "ssrbm": lambda r: random_ssrbm(r),
    "ssvis": lambda r: random_ssvis(r),
    "brbm": lambda r: random_brbm(r),
}


# --- config -------------------------------------------------------------------

@pytest.mark.parametrize("kwargs", [
    dict(algorithm="SGD"), dict(k=0), dict(restart_prob=1.5), dict(restart_prob=-0.1),
    dict(learning_rate=-1.0), dict(fast_decay=1.5), dict(momentum=1.0), dict(minibatch=0),
])
def test_config_rejects_bad_values(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs)


def test_config_defaults():
    cfg = TrainConfig()
    assert (cfg.algorithm, cfg.k, cfg.minibatch, cfg.n_chains, cfg.restart_prob) == ("FPCD", 1, 64, 64, 0.01)
    assert cfg.fast_decay == 19 / 20 and cfg.effective_fast_rate == cfg.learning_rate
    assert TrainConfig("pcd").algorithm == "PCD"


def test_rate_schedule():
    cfg = TrainConfig(learning_rate=0.1, lr_decay_start=10)
    assert cfg.rate_at(1) == cfg.rate_at(10) == 0.1
    assert cfg.rate_at(40) == pytest.approx(0.025)


def test_unknown_scale_names(rng):
    p = random_ssrbm(rng)
    batch = rng.normal(size=(4, 2, 2))
    with pytest.raises(ConfigError):
        training.cd_update(batch, p, TrainConfig("CD", lr_scale={"nope": 2.0}), rng)
    cfg = TrainConfig("FPCD", fast_params=("b", "nope"))
    with pytest.raises(ConfigError):
        training.fpcd_update(batch, p, training.init_pool(p, cfg, rng), cfg, rng)


# --- updates --------------------------------------------------------------------

@pytest.mark.parametrize("kind", sorted(MODELS))
@pytest.mark.parametrize("algo", ["CD", "PCD", "FPCD"])
def test_zero_learning_rate_leaves_params(kind, algo, rng):
    p = MODELS[kind](rng)
    cfg = TrainConfig(algo, learning_rate=0.0, n_chains=6, momentum=0.5)
    pool = training.init_pool(p, cfg, rng)
    q = p
    for _ in range(5):
        q, pool = _step(algo, _batches(kind, rng, p), q, pool, cfg, rng)
    assert _same(p, q)


@pytest.mark.parametrize("kind", sorted(MODELS))
def test_fast_rate_zero_is_pcd(kind):
    results = []
    for algo, extra in (("PCD", {}), ("FPCD", {"fast_rate": 0.0})):
        rng = np.random.default_rng(3)
        p = MODELS[kind](rng)
        cfg = TrainConfig(algo, learning_rate=0.01, n_chains=6, restart_prob=0.2, **extra)
        pool = training.init_pool(p, cfg, rng)
        for _ in range(20):
            p, pool = _step(algo, _batches(kind, rng, p), p, pool, cfg, rng)
        results.append((p, pool.chains))
    (p1, c1), (p2, c2) = results
    assert _same(p1, p2)
    for a, b in zip(c1 if isinstance(c1, tuple) else (c1,), c2 if isinstance(c2, tuple) else (c2,)):
        assert np.array_equal(a, b)


def test_fast_params_decay_geometrically(rng):
    p = random_ssrbm(rng)
    cfg = TrainConfig("FPCD", learning_rate=0.0, fast_rate=0.05, n_chains=6)
    pool = training.init_pool(p, cfg, rng)
    for _ in range(30):
        p, pool = training.fpcd_update(rng.normal(size=(6, 2, 2)), p, pool, cfg, rng)
    peak = max(np.abs(v).max() for v in pool.fast.values())
    assert peak > 0
    stop = TrainConfig("FPCD", learning_rate=0.0, fast_rate=0.0, n_chains=6)
    for _ in range(300):
        p, pool = training.fpcd_update(rng.normal(size=(6, 2, 2)), p, pool, stop, rng)
    assert max(np.abs(v).max() for v in pool.fast.values()) < 1e-6 * peak


def test_fast_params_only_for_fpcd(rng):
    p = random_ssrbm(rng)
    assert training.init_pool(p, TrainConfig("PCD"), rng).fast is None
    pool = training.init_pool(p, TrainConfig("FPCD"), rng)
    assert all(not v.any() for v in pool.fast.values())


def test_fast_params_subset(rng):
    p = random_ssrbm(rng)
    cfg = TrainConfig("FPCD", learning_rate=0.0, fast_rate=0.1, n_chains=6, fast_params=("b", "mu"))
    pool = training.init_pool(p, cfg, rng)
    for _ in range(5):
        p, pool = training.fpcd_update(rng.normal(size=(6, 2, 2)), p, pool, cfg, rng)
    assert pool.fast["b"].any() and pool.fast["mu"].any()
    assert not any(pool.fast[k].any() for k in ("W", "alpha", "lam", "phi"))


def test_full_restart_forgets_chains(rng):
    p = random_ssrbm(rng)
    cfg = TrainConfig("PCD", learning_rate=0.01, n_chains=5, restart_prob=1.0)
    batch = rng.normal(size=(5, 2, 2))
    out = []
    for start in (np.zeros((5, 2, 2)), np.full((5, 2, 2), 7.0)):
        pool = training.ChainPool(chains=start)
        q, pool = training.pcd_update(batch, p, pool, cfg, np.random.default_rng(9))
        out.append((q, pool.chains))
    assert _same(out[0][0], out[1][0])
    assert np.array_equal(out[0][1], out[1][1])


def test_pool_moves_at_zero_learning_rate(rng):
    p = random_ssrbm(rng)
    cfg = TrainConfig("PCD", learning_rate=0.0, n_chains=5, restart_prob=0.0)
    pool = training.init_pool(p, cfg, rng)
    for _ in range(10):
        before = pool.chains.copy()
        p, pool = training.pcd_update(rng.normal(size=(5, 2, 2)), p, pool, cfg, rng)
        assert pool.chains.shape == before.shape
        assert not np.array_equal(before, pool.chains)


def test_sharing_scale(rng):
    p = random_ssrbm(rng, height=3, kernel=2, tilings=2)
    batch = rng.normal(size=(4, 3, 3))
    grad = training.cd_gradient(batch, p, TrainConfig("CD"), np.random.default_rng(1))
    cfg = TrainConfig("CD", learning_rate=0.01, scale_by_sharing=True, lr_scale={"b": 3.0})
    q = training.cd_update(batch, p, cfg, np.random.default_rng(1))
    counts = training.sharing_counts(p)
    for k in ("W", "b", "mu"):
        step = 0.01 * grad[k] / counts[k] * (3.0 if k == "b" else 1.0)
        assert np.allclose(q.arrays()[k] - p.arrays()[k], step, atol=1e-14)


# --- constraints ------------------------------------------------------------------

def test_apply_constraints_examples(rng):
    p = random_ssrbm(rng)
    bad = p.with_arrays({**p.arrays(), "alpha": np.full((1, 2), -1.0), "lam": -3.0, "phi": np.full((1, 2), -2.0)})
    fixed = training.apply_constraints(bad)
    assert np.all(fixed.alpha == ssrbm.ALPHA_MIN) and fixed.lam == ssrbm.LAMBDA_MIN
    assert np.all(fixed.phi == 0.0)
    assert _same(training.apply_constraints(p), p)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 31), lr=st.floats(1e-3, 5.0), algo=st.sampled_from(["CD", "PCD", "FPCD"]),
       kind=st.sampled_from(sorted(MODELS)))
def test_constraints_hold_after_updates(seed, lr, algo, kind):
    rng = np.random.default_rng(seed)
    p = MODELS[kind](rng)
    cfg = TrainConfig(algo, learning_rate=lr, n_chains=4)
    pool = training.init_pool(p, cfg, rng)
    for _ in range(3):
        try:
            p, pool = _step(algo, _batches(kind, rng, p, 4), p, pool, cfg, rng)
        except Exception as exc:  # divergence at huge rates is reported, never silent
            assert type(exc).__name__ == "NumericalError"
            return
    if kind == "ssrbm":
        assert np.all(p.alpha >= ssrbm.ALPHA_MIN) and p.lam >= ssrbm.LAMBDA_MIN and np.all(p.phi >= 0)
    elif kind == "ssvis":
        assert np.all(p.alpha >= ssrbm.ALPHA_MIN)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 31), scale=st.floats(0.1, 5.0))
def test_proper_guard_gives_proper_models(seed, scale):
    rng = np.random.default_rng(seed)
    p = random_ssrbm(rng)
    wild = p.with_arrays({**p.arrays(), "W": rng.normal(0, scale, p.W.shape), "phi": np.zeros_like(p.phi)})
    assert is_proper(oracle.dense_spec(training.apply_constraints(wild, proper_guard=True)))


# --- gradient estimates -------------------------------------------------------------

@pytest.mark.parametrize("seed", range(3))
def test_cd_gradient_direction_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    p = random_ssrbm(rng)
    data = rng.normal(size=(10, 2, 2))
    ref = oracle.tied_loglik_grad(p, data.reshape(10, -1))
    est = training.cd_gradient(np.repeat(data, 1000, axis=0), p, TrainConfig("CD", k=100), rng)
    a = np.concatenate([np.ravel(ref[k]) for k in ref])
    b = np.concatenate([np.ravel(est[k]) for k in ref])
    assert a @ b / (np.linalg.norm(a) * np.linalg.norm(b)) > 0.95


def test_pcd_beats_cd_on_two_modes(tiny_training_runs):
    wins = sum(tiny_training_runs[s, "PCD"][1] > tiny_training_runs[s, "CD"][1] for s in range(5))
    assert wins >= 3


def _mode_switches(params, data, algo, seed, sep):
    r = np.random.default_rng(100 + seed)
    cfg = TrainConfig(algo, learning_rate=0.0, fast_rate=0.1, n_chains=20, restart_prob=0.0,
                      fast_params=("b", "mu"))
    pool = training.init_pool(params, cfg, r)
    mode = np.sign(np.einsum("nij,ij->n", pool.chains, MODE_PATTERN))
    switches = 0
    for _ in range(10_000):
        params, pool = UPDATES[algo](data[r.integers(0, len(data), 20)], params, pool, cfg, r)
        z = np.einsum("nij,ij->n", pool.chains, MODE_PATTERN)
        new = np.where(z > sep, 1.0, np.where(z < -sep, -1.0, mode))
        switches += int(np.sum(new != mode))
        mode = new
    return switches


def test_fpcd_switches_modes_more_than_pcd():
    sep, wins = 2.5, 0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        data = bimodal(rng, 500, sep=sep)
        p = ssrbm.init_params(tiny_geometry(), rng, w_scale=0.1)
        cfg = TrainConfig("CD", learning_rate=5e-3, minibatch=20, updates=3000, epoch_updates=3000,
                          lr_scale=TINY_LR_SCALE)
        p, _ = training.train_layer(p, lambda r: data[r.integers(0, len(data), 20)], cfg, rng)
        wins += _mode_switches(p, data, "FPCD", seed, sep) > _mode_switches(p, data, "PCD", seed, sep)
    assert wins >= 3


# --- train_layer ----------------------------------------------------------------------

def _train_once(seed, algo="FPCD"):
    rng = np.random.default_rng(seed)
    data = bimodal(rng, 100)
    p = ssrbm.init_params(tiny_geometry(), rng, w_scale=0.1)
    cfg = TrainConfig(algo, learning_rate=1e-3, minibatch=10, n_chains=10, updates=25, epoch_updates=10)
    log = io.StringIO()
    p, hist = training.train_layer(p, lambda r: data[r.integers(0, 100, 10)], cfg, rng,
                                   val_fn=lambda r: data[:10], log=log, label="layer 1 ssrbm")
    return p, hist, log.getvalue()


def test_training_log_format():
    _, hist, text = _train_once(0)
    lines = text.splitlines()
    assert lines[0] == "# layer 1 ssrbm (FPCD-1)"
    assert lines[1] == training.LOG_HEADER
    assert lines[1].split("\t") == ["update", "epoch", "free_energy_train", "free_energy_val",
                                    "recon_err", "wall_ms"]
    rows = [line.split("\t") for line in lines[2:]]
    assert [int(r[0]) for r in rows] == [10, 20, 25]
    assert [int(r[1]) for r in rows] == [0, 1, 2]
    assert all(len(r) == 6 and all(np.isfinite(float(x)) for x in r) for r in rows)
    assert len(hist) == 3


@pytest.mark.parametrize("algo", ["CD", "PCD", "FPCD"])
def test_training_is_seed_deterministic(algo):
    p1, h1, log1 = _train_once(4, algo)
    p2, h2, log2 = _train_once(4, algo)
    assert _same(p1, p2)
    strip = lambda text: [line.rsplit("\t", 1)[0] for line in text.splitlines()]  # noqa: E731
    assert strip(log1) == strip(log2)


# --- DBN orchestration -------------------------------------------------------------------

def test_default_orderings_and_presets():
    assert training.default_algorithms(1) == ["FPCD"]
    assert training.default_algorithms(2) == ["CD", "PCD"]
    assert training.default_algorithms(3) == ["CD", "CD", "PCD"]
    single = training.default_layer_specs(3)
    assert [(s.kind, s.filters, s.kernel) for s in single] == [("ssrbm", 32, 11), ("ssvis", 128, 2), ("brbm", 128, 2)]
    assert single[0].tilings == 11
    multi = training.default_layer_specs(3, "multi-texture")
    assert [s.filters for s in multi] == [96, 256, 256] and [s.kernel for s in multi[1:]] == [2, 2]
    with pytest.raises(ConfigError):
        training.default_layer_specs(4)
    with pytest.raises(ConfigError):
        training.default_layer_specs(1, "huge")
