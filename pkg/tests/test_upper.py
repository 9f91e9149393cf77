import numpy as np
import pytest

from conftest import TINY_CONV, random_brbm, random_ssvis
from tssrbm import oracle, ssrbm, upper
from tssrbm.errors import DimensionError
from tssrbm.tiling import build_conv_geometry, build_tiled_geometry


def maps(x, shape):
    return np.asarray(x, dtype=float).reshape(shape)


@pytest.mark.parametrize("c,s,k", TINY_CONV)
@pytest.mark.parametrize("bias_shift", [True, False])
def test_second_layer_conditionals_match_oracle(c, s, k, bias_shift):
    rng = np.random.default_rng(c * 100 + s * 10 + k + bias_shift)
    for _ in range(4):
        p = random_ssvis(rng, c, s, k, filters=2, bias_shift=bias_shift)
        spec = oracle.dense_spec(p)
        n, m = spec.dims["N"], spec.dims["M"]
        sv, hv = rng.normal(size=n), rng.integers(0, 2, n).astype(float)
        gv = rng.integers(0, 2, m).astype(float)
        ins, outs = p.geom.input_shape, p.geom.output_shape

        ref = oracle.exact_conditionals(spec, s=sv, h=hv)["g"]
        got = upper.g_activation(maps(sv, ins), maps(hv, ins), p)
        np.testing.assert_allclose(got.ravel(), ref, atol=1e-10)

        ref = oracle.exact_conditionals(spec, g=gv)["h"]
        np.testing.assert_allclose(upper.h_activation(maps(gv, outs), p).ravel(), ref, atol=1e-10)

        ref = oracle.exact_conditionals(spec, h=hv, g=gv)
        got = upper.slab_mean2(maps(hv, ins), maps(gv, outs), p).ravel()
        np.testing.assert_allclose(got, ref["s_mean"], atol=1e-10)
        np.testing.assert_allclose(np.diag(ref["s_cov"]), 1 / np.repeat(p.alpha, s * s),
                                   atol=1e-10)


def test_second_layer_energy_and_free_energy(rng):
    for bias_shift in (True, False):
        p = random_ssvis(rng, 1, 2, 2, filters=2, bias_shift=bias_shift)
        spec = oracle.dense_spec(p)
        ins, outs = p.geom.input_shape, p.geom.output_shape
        sv, hv = rng.normal(size=4), rng.integers(0, 2, 4).astype(float)
        gv = rng.integers(0, 2, 2).astype(float)
        e = upper.energy2(maps(sv, ins), maps(hv, ins), maps(gv, outs), p)
        assert np.isclose(e, oracle.ssvis_energy(spec, sv, hv, gv), atol=1e-12)
        f = upper.free_energy2(maps(sv, ins), maps(hv, ins), p)
        assert np.isclose(-f, oracle.exact_log_unnormalized(spec, (sv, hv)), atol=1e-10)


def test_zero_weights_spike_probability():
    """With U = 0 the top-down drive vanishes and the spike bias alone sets P(h|g)."""
    geom = build_conv_geometry(2, 2, 2, 1)
    p = upper.SsVisRbmParams(geom, np.zeros(geom.kernel_shape), np.zeros(1),
                             alpha=np.array([2.0, 0.5]), mu=np.array([1.5, -1.0]),
                             b=np.array([0.3, -0.2]))
    g = np.ones(geom.output_shape)
    expit = lambda x: 1 / (1 + np.exp(-x))
    got = upper.h_activation(g, p)[:, 0, 0]
    np.testing.assert_allclose(got, expit(p.b), atol=1e-14)
    p.bias_shift = False
    got = upper.h_activation(g, p)[:, 0, 0]
    np.testing.assert_allclose(got, expit(0.5 * p.alpha * p.mu ** 2 + p.b), atol=1e-14)


def test_second_layer_grad_stats_finite_differences(rng):
    p = random_ssvis(rng, 2, 3, 2, filters=2)
    ins, outs = p.geom.input_shape, p.geom.output_shape
    s, h = rng.normal(size=ins), rng.integers(0, 2, ins).astype(float)
    g = rng.integers(0, 2, outs).astype(float)
    stats = upper.energy_grad_stats2(s, h, g, p)
    base, eps = p.arrays(), 1e-6
    for name, arr in base.items():
        for idx in list(np.ndindex(arr.shape))[:5]:
            vals = []
            for sign in (1, -1):
                pert = {k: np.array(a, dtype=float) for k, a in base.items()}
                pert[name][idx] += sign * eps
                vals.append(upper.energy2(s, h, g, p.with_arrays(pert)))
            assert np.isclose(stats[name][idx], (vals[0] - vals[1]) / (2 * eps),
                              rtol=1e-6, atol=1e-7), (name, idx)


def test_expected_stats2_slab_variance_enters_alpha_only(rng):
    p = random_ssvis(rng, 2, 2, 1, filters=2)
    s = rng.normal(size=(3,) + p.geom.input_shape)
    h = np.ones_like(s)
    a = upper.expected_grad_stats2(s, h, p)
    b = upper.expected_grad_stats2(s, h, p, s_var=0.25)
    for k in a:
        if k == "alpha":
            np.testing.assert_allclose(b[k] - a[k], 0.5 * 0.25 * s.shape[2] * s.shape[3])
        else:
            np.testing.assert_array_equal(a[k], b[k])


def test_init_from_lower_copies_slab_parameters():
    g1 = build_tiled_geometry(13, 13, 3, 2, 3)
    p1 = ssrbm.init_params(g1, np.random.default_rng(0), alpha=1.5, mu=0.2, b=-0.7)
    geom = build_conv_geometry(6, g1.positions, 2, 5)
    p2 = upper.init_from_lower(p1, geom, np.random.default_rng(1))
    np.testing.assert_array_equal(p2.alpha, np.full(6, 1.5))
    np.testing.assert_array_equal(p2.mu, np.full(6, 0.2))
    np.testing.assert_array_equal(p2.b, np.full(6, -0.7))
    assert np.all(p2.rho == 0) and p2.U.shape == (5, 6, 2, 2)
    with pytest.raises(DimensionError):
        upper.init_from_lower(p1, build_conv_geometry(5, g1.positions, 2, 5),
                              np.random.default_rng(1))


def test_binary_rbm_conditionals_match_oracle(rng):
    for _ in range(10):
        p = random_brbm(rng)
        spec = oracle.dense_spec(p)
        v = rng.integers(0, 2, 4).astype(float)
        hv = rng.integers(0, 2, 3).astype(float)
        ins, outs = p.geom.input_shape, p.geom.output_shape
        ref = oracle.exact_conditionals(spec, v=v)["h"]
        np.testing.assert_allclose(upper.brbm_hidden_activation(maps(v, ins), p).ravel(), ref,
                                   atol=1e-10)
        ref = oracle.exact_conditionals(spec, h=hv)["v"]
        np.testing.assert_allclose(upper.brbm_visible_activation(maps(hv, outs), p).ravel(), ref,
                                   atol=1e-10)
        e = upper.brbm_energy(maps(v, ins), maps(hv, outs), p)
        assert np.isclose(e, oracle.brbm_energy(spec, v, hv), atol=1e-12)
        f = upper.brbm_free_energy(maps(v, ins), p)
        assert np.isclose(-f, oracle.exact_log_unnormalized(spec, v), atol=1e-10)


def test_binary_rbm_grad_stats(rng):
    p = random_brbm(rng, maps=2, size=3, kernel=2, filters=2)
    v = rng.integers(0, 2, p.geom.input_shape).astype(float)
    h = rng.integers(0, 2, p.geom.output_shape).astype(float)
    stats = upper.brbm_energy_grad_stats(v, h, p)
    base, eps = p.arrays(), 1e-6
    for name, arr in base.items():
        for idx in list(np.ndindex(arr.shape))[:5]:
            vals = []
            for sign in (1, -1):
                pert = {k: np.array(a, dtype=float) for k, a in base.items()}
                pert[name][idx] += sign * eps
                vals.append(upper.brbm_energy(v, h, p.with_arrays(pert)))
            assert np.isclose(stats[name][idx], (vals[0] - vals[1]) / (2 * eps), rtol=1e-6,
                              atol=1e-7)
    exp = upper.brbm_expected_grad_stats(v, p)
    q = upper.brbm_hidden_activation(v, p)
    np.testing.assert_allclose(exp["hbias"], -q.sum(axis=(1, 2)).reshape(-1), atol=1e-12)


def test_sweeps_are_deterministic_and_binary():
    p = random_ssvis(np.random.default_rng(0), 3, 4, 2, filters=2)
    s, h = upper.noise_chains2(5, p, np.random.default_rng(1))
    a = upper.gibbs_sweep2(s, h, p, np.random.default_rng(2))
    b = upper.gibbs_sweep2(s, h, p, np.random.default_rng(2))
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)
    assert set(np.unique(a[0])) <= {0.0, 1.0} and set(np.unique(a[1])) <= {0.0, 1.0}
    q = random_brbm(np.random.default_rng(0), 2, 3, 2, 2)
    v = upper.brbm_noise_chains(4, q, np.random.default_rng(3))
    h, v2 = upper.brbm_gibbs_sweep(v, q, np.random.default_rng(4))
    assert h.shape == (4,) + q.geom.output_shape and v2.shape == v.shape


def test_alpha_constraint_second_layer():
    p = random_ssvis(np.random.default_rng(0), 2, 1, 1, filters=1)
    p.alpha = np.array([-1.0, 3.0])
    fixed = upper.apply_constraints2(p)
    np.testing.assert_array_equal(fixed.alpha, [upper.ALPHA_MIN, 3.0])
