"""Exact reference computations for tiny models.

Every quantity is derived from a dense, term-by-term energy function and
nothing else: for each configuration of the binary variables the energy is
quadratic in the real variables, so its quadratic form is read off by
evaluating the energy at a handful of points and all integrals reduce to
Gaussian algebra. Binary variables are enumerated. None of this shares
code with the layer modules, which is the point.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import DimensionError, ImproperModelError

MAX_BINARY = 12


@dataclass
class TinyModelSpec:
    """Dense parameters of a tiny model.

    ``ssrbm``: W (N, D), b, mu, alpha (N,), lam (D,), phi (N, D).
    ``ssvis``: U (N, M), rho (M,), alpha, mu, b (N,), plus ``bias_shift``.
    ``brbm``:  W (D, M), vbias (D,), hbias (M,).
    """

    kind: str
    params: dict[str, np.ndarray]
    bias_shift: bool = True
    dims: dict[str, int] = field(init=False)

    def __post_init__(self):
        p = {k: np.array(v, dtype=np.float64) for k, v in self.params.items()}
        self.params = p
        if self.kind == "ssrbm":
            n, d = p["W"].shape
            self.dims = {"D": d, "N": n}
            nbin = n
        elif self.kind == "ssvis":
            n, m = p["U"].shape
            self.dims = {"N": n, "M": m}
            nbin = n + m
        elif self.kind == "brbm":
            d, m = p["W"].shape
            self.dims = {"D": d, "M": m}
            nbin = d + m
        else:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if nbin > MAX_BINARY:
            raise DimensionError(f"enumeration over 2^{nbin} states is too large")


def _configs(n):
    return np.array(list(itertools.product((0.0, 1.0), repeat=n))).reshape(-1, n)


# --- dense energies ---------------------------------------------------------

def ssrbm_energy(spec: TinyModelSpec, v, s, h) -> float:
    p = spec.params
    e = 0.0
    for i in range(spec.dims["N"]):
        e -= float(v @ p["W"][i]) * s[i] * h[i]
    prec = p["lam"].copy()
    for i in range(spec.dims["N"]):
        prec = prec + p["phi"][i] * h[i]
    e += 0.5 * float(np.sum(prec * v * v))
    for i in range(spec.dims["N"]):
        a, mu = p["alpha"][i], p["mu"][i]
        e += 0.5 * a * s[i] ** 2 - a * mu * s[i] * h[i] - p["b"][i] * h[i] \
            + 0.5 * a * mu ** 2 * h[i]
    return e


def ssvis_energy(spec: TinyModelSpec, s, h, g) -> float:
    p = spec.params
    e = 0.0
    for i in range(spec.dims["N"]):
        for j in range(spec.dims["M"]):
            e -= g[j] * p["U"][i, j] * s[i] * h[i]
    for j in range(spec.dims["M"]):
        e -= p["rho"][j] * g[j]
    for i in range(spec.dims["N"]):
        a, mu = p["alpha"][i], p["mu"][i]
        e += 0.5 * a * s[i] ** 2 - a * mu * s[i] * h[i] - p["b"][i] * h[i]
        if spec.bias_shift:
            e += 0.5 * a * mu ** 2 * h[i]
    return e


def brbm_energy(spec: TinyModelSpec, v, h) -> float:
    p = spec.params
    e = 0.0
    for i in range(spec.dims["D"]):
        for j in range(spec.dims["M"]):
            e -= v[i] * p["W"][i, j] * h[j]
    e -= float(v @ p["vbias"]) + float(h @ p["hbias"])
    return e


# --- quadratic forms --------------------------------------------------------

@dataclass
class Quadratic:
    """``E(x) = 1/2 x.J.x - l.x + c``."""

    J: np.ndarray
    l: np.ndarray
    c: float

    def chol(self):
        try:
            return np.linalg.cholesky(self.J)
        except np.linalg.LinAlgError:
            raise ImproperModelError("configuration with non-positive precision") from None

    def mean(self) -> np.ndarray:
        return np.linalg.solve(self.J, self.l)

    def cov(self) -> np.ndarray:
        return np.linalg.inv(self.J)

    def log_integral(self) -> float:
        """``log int exp(-E(x)) dx``."""
        n = self.l.size
        if n == 0:
            return -self.c
        L = self.chol()
        y = np.linalg.solve(L, self.l)
        return -self.c + 0.5 * float(y @ y) + 0.5 * n * np.log(2 * np.pi) \
            - float(np.sum(np.log(np.diag(L))))


def extract_quadratic(fn, n: int) -> Quadratic:
    """Read off the quadratic form of ``fn`` (exactly quadratic in ``x``)."""
    c = fn(np.zeros(n))
    eye = np.eye(n)
    plus = np.array([fn(eye[k]) for k in range(n)])
    minus = np.array([fn(-eye[k]) for k in range(n)])
    l = 0.5 * (minus - plus)
    J = np.empty((n, n))
    for k in range(n):
        J[k, k] = plus[k] + minus[k] - 2 * c
        for m in range(k + 1, n):
            J[k, m] = J[m, k] = fn(eye[k] + eye[m]) - plus[k] - plus[m] + c
    return Quadratic(J, l, c)


def _joint_quadratic(spec, *binary):
    """Quadratic form over all real variables for fixed binary ones."""
    if spec.kind == "ssrbm":
        (h,) = binary
        d = spec.dims["D"]
        return extract_quadratic(lambda x: ssrbm_energy(spec, x[:d], x[d:], h),
                                 d + spec.dims["N"])
    if spec.kind == "ssvis":
        h, g = binary
        return extract_quadratic(lambda s: ssvis_energy(spec, s, h, g), spec.dims["N"])
    raise ValueError("brbm has no real variables")


def _binary_states(spec):
    if spec.kind == "ssrbm":
        return [(h,) for h in _configs(spec.dims["N"])]
    if spec.kind == "ssvis":
        return [(h, g) for h in _configs(spec.dims["N"]) for g in _configs(spec.dims["M"])]
    return [(v, h) for v in _configs(spec.dims["D"]) for h in _configs(spec.dims["M"])]


def _state_log_weights(spec):
    states = _binary_states(spec)
    if spec.kind == "brbm":
        return states, np.array([-brbm_energy(spec, v, h) for v, h in states]), None
    quads = [_joint_quadratic(spec, *st) for st in states]
    return states, np.array([q.log_integral() for q in quads]), quads


def exact_log_partition(spec: TinyModelSpec) -> float:
    _, logw, _ = _state_log_weights(spec)
    return float(logsumexp(logw))


def exact_log_unnormalized(spec: TinyModelSpec, x) -> float:
    """Log of the unnormalized marginal of the visible layer at ``x``.

    ``x`` is ``v`` for ssrbm/brbm and a pair ``(s, h)`` for ssvis.
    """
    if spec.kind == "ssrbm":
        v = np.asarray(x, dtype=np.float64)
        terms = []
        for h in _configs(spec.dims["N"]):
            q = extract_quadratic(lambda s: ssrbm_energy(spec, v, s, h), spec.dims["N"])
            terms.append(q.log_integral())
        return float(logsumexp(terms))
    if spec.kind == "ssvis":
        s, h = (np.asarray(a, dtype=np.float64) for a in x)
        return float(logsumexp([-ssvis_energy(spec, s, h, g) for g in _configs(spec.dims["M"])]))
    v = np.asarray(x, dtype=np.float64)
    return float(logsumexp([-brbm_energy(spec, v, h) for h in _configs(spec.dims["M"])]))


def exact_loglik(spec: TinyModelSpec, data) -> float:
    """Mean log-likelihood of ``data`` (a sequence of visible configurations)."""
    log_z = exact_log_partition(spec)
    return float(np.mean([exact_log_unnormalized(spec, x) for x in data])) - log_z


def exact_marginal_v(spec: TinyModelSpec, grid) -> np.ndarray:
    """Density of the visible marginal at each row of ``grid`` (ssrbm only)."""
    if spec.kind != "ssrbm":
        raise ValueError("exact_marginal_v applies to ssrbm specs")
    grid = np.atleast_2d(np.asarray(grid, dtype=np.float64))
    log_z = exact_log_partition(spec)
    return np.exp([exact_log_unnormalized(spec, v) - log_z for v in grid])


# --- conditionals -----------------------------------------------------------

def _enumerate_probs(logits_by_state, states):
    logw = np.asarray(logits_by_state)
    w = np.exp(logw - logsumexp(logw))
    return np.asarray(states).T @ w


def exact_conditionals(spec: TinyModelSpec, **clamps) -> dict[str, np.ndarray]:
    """Exact conditional distribution tables by enumeration and Gaussian algebra.

    ssrbm: ``v`` -> P(h=1|v); ``v, h`` -> slab mean/cov; ``s, h`` -> visible mean/cov.
    ssvis: ``s, h`` -> P(g=1|s,h); ``g`` -> P(h=1|g); ``h, g`` -> slab mean/cov.
    brbm:  ``v`` -> P(h=1|v); ``h`` -> P(v=1|h).
    """
    c = {k: np.asarray(v, dtype=np.float64) for k, v in clamps.items()}
    keys = frozenset(c)
    if spec.kind == "ssrbm":
        n, d = spec.dims["N"], spec.dims["D"]
        if keys == {"v"}:
            hs = _configs(n)
            logw = [extract_quadratic(lambda s: ssrbm_energy(spec, c["v"], s, h), n).log_integral()
                    for h in hs]
            return {"h": _enumerate_probs(logw, hs)}
        if keys == {"v", "h"}:
            q = extract_quadratic(lambda s: ssrbm_energy(spec, c["v"], s, c["h"]), n)
            q.chol()
            return {"s_mean": q.mean(), "s_cov": q.cov()}
        if keys == {"s", "h"}:
            q = extract_quadratic(lambda v: ssrbm_energy(spec, v, c["s"], c["h"]), d)
            q.chol()
            return {"v_mean": q.mean(), "v_cov": q.cov()}
    elif spec.kind == "ssvis":
        n, m = spec.dims["N"], spec.dims["M"]
        if keys == {"s", "h"}:
            gs = _configs(m)
            return {"g": _enumerate_probs([-ssvis_energy(spec, c["s"], c["h"], g) for g in gs], gs)}
        if keys == {"g"}:
            hs = _configs(n)
            logw = [extract_quadratic(lambda s: ssvis_energy(spec, s, h, c["g"]), n).log_integral()
                    for h in hs]
            return {"h": _enumerate_probs(logw, hs)}
        if keys == {"h", "g"}:
            q = extract_quadratic(lambda s: ssvis_energy(spec, s, c["h"], c["g"]), n)
            q.chol()
            return {"s_mean": q.mean(), "s_cov": q.cov()}
    else:
        d, m = spec.dims["D"], spec.dims["M"]
        if keys == {"v"}:
            hs = _configs(m)
            return {"h": _enumerate_probs([-brbm_energy(spec, c["v"], h) for h in hs], hs)}
        if keys == {"h"}:
            vs = _configs(d)
            return {"v": _enumerate_probs([-brbm_energy(spec, v, c["h"]) for v in vs], vs)}
    raise ValueError(f"unsupported clamp set {sorted(keys)} for {spec.kind}")


def exact_binary_distribution(spec: TinyModelSpec) -> tuple[np.ndarray, np.ndarray]:
    """``(states, probabilities)`` of the binary variables' marginal.

    States are rows of ``h`` (ssrbm), ``(h, g)`` (ssvis) or ``(v, h)`` (brbm).
    """
    states, logw, _ = _state_log_weights(spec)
    rows = np.array([np.concatenate(st) for st in states])
    return rows, np.exp(logw - logsumexp(logw))


def exact_moments(spec: TinyModelSpec) -> dict[str, np.ndarray]:
    """Mean and covariance of the real variables under the model."""
    states, logw, quads = _state_log_weights(spec)
    if quads is None:
        raise ValueError("brbm has no real variables")
    w = np.exp(logw - logsumexp(logw))
    means = np.array([q.mean() for q in quads])
    mean = w @ means
    second = sum(wi * (q.cov() + np.outer(m, m)) for wi, q, m in zip(w, quads, means))
    return {"mean": mean, "cov": second - np.outer(mean, mean)}


def exact_expectation(spec: TinyModelSpec, fn):
    """``E_model[fn(...)]`` for ``fn`` quadratic in the real variables.

    ``fn`` receives ``(v, s, h)`` (ssrbm), ``(s, h, g)`` (ssvis) or
    ``(v, h)`` (brbm) and returns a dict of arrays. Per binary configuration
    the Gaussian expectation is taken with symmetric sigma points, which is
    exact for quadratics.
    """
    states, logw, quads = _state_log_weights(spec)
    w = np.exp(logw - logsumexp(logw))
    total = None

    def acc(weight, value):
        nonlocal total
        if total is None:
            total = {k: weight * np.asarray(v, dtype=np.float64) for k, v in value.items()}
        else:
            for k, v in value.items():
                total[k] = total[k] + weight * np.asarray(v, dtype=np.float64)

    for wi, st, q in zip(w, states, quads if quads is not None else [None] * len(states)):
        if q is None:
            acc(wi, fn(*st))
            continue
        m = q.mean()
        evals, evecs = np.linalg.eigh(q.cov())
        n = m.size

        def call(x):
            if spec.kind == "ssrbm":
                d = spec.dims["D"]
                return fn(x[:d], x[d:], st[0])
            return fn(x, st[0], st[1])

        acc(wi, call(m))
        for k in range(n):
            delta = np.sqrt(max(evals[k], 0.0)) * evecs[:, k]
            hi, lo, mid = call(m + delta), call(m - delta), call(m)
            acc(0.5 * wi, {key: hi[key] + lo[key] - 2 * np.asarray(mid[key]) for key in hi})
    return total


def exact_loglik_grad(spec: TinyModelSpec, data, eps: float = 1e-5) -> dict[str, np.ndarray]:
    """Central finite differences of :func:`exact_loglik` w.r.t. every dense parameter."""
    grads = {}
    for name, arr in spec.params.items():
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            vals = []
            for sign in (1.0, -1.0):
                p = {k: v.copy() for k, v in spec.params.items()}
                p[name][idx] += sign * eps
                vals.append(exact_loglik(TinyModelSpec(spec.kind, p, spec.bias_shift), data))
            g[idx] = (vals[0] - vals[1]) / (2 * eps)
        grads[name] = g
    return grads


def quadrature_log_partition(spec: TinyModelSpec, half_width: float = 12.0,
                             step: float = 0.1) -> float:
    """``log Z`` by brute-force summation over a dense uniform grid.

    Works for ssrbm (grid over ``(v, s)``) and ssvis (grid over ``s``) with at
    most three real dimensions. Independent of the Gaussian algebra above.
    """
    axis = np.arange(-half_width, half_width + step / 2, step)
    if spec.kind == "ssrbm":
        d, n = spec.dims["D"], spec.dims["N"]
        dim = d + n
    elif spec.kind == "ssvis":
        n, dim = spec.dims["N"], spec.dims["N"]
    else:
        raise ValueError("no real variables to integrate")
    if dim > 3:
        raise DimensionError("dense quadrature limited to 3 real dimensions")
    mesh = np.stack(np.meshgrid(*([axis] * dim), indexing="ij"), axis=-1).reshape(-1, dim)
    p = spec.params
    logs = []
    for st in _binary_states(spec):
        if spec.kind == "ssrbm":
            (h,) = st
            v, s = mesh[:, :d], mesh[:, d:]
            e = -np.einsum("kd,nd,kn->k", v, p["W"], s * h)
            prec = p["lam"] + h @ p["phi"]
            e += 0.5 * np.sum(prec * v * v, axis=1)
            e += np.sum(0.5 * p["alpha"] * s ** 2 - p["alpha"] * p["mu"] * s * h
                        - p["b"] * h + 0.5 * p["alpha"] * p["mu"] ** 2 * h, axis=1)
        else:
            h, g = st
            s = mesh
            e = -np.einsum("kn,nm,m->k", s * h, p["U"], g) - float(p["rho"] @ g)
            e += np.sum(0.5 * p["alpha"] * s ** 2 - p["alpha"] * p["mu"] * s * h - p["b"] * h, axis=1)
            if spec.bias_shift:
                e += float(np.sum(0.5 * p["alpha"] * p["mu"] ** 2 * h))
        logs.append(logsumexp(-e) + dim * np.log(step))
    return float(logsumexp(logs))


# --- dense views of weight-shared layers -----------------------------------

def from_ssrbm(params) -> TinyModelSpec:
    """Dense spec of a tiled ssRBM, units in (tiling, filter, row, col) order."""
    g = params.geom
    n_units, d = g.n_units, g.n_pixels
    W = np.zeros((n_units, d))
    phi = np.zeros((n_units, d))
    b = np.zeros(n_units)
    mu = np.zeros(n_units)
    alpha = np.zeros(n_units)
    for t in range(g.num_tilings):
        for f in range(g.filters_per_tiling):
            for r in range(g.positions):
                for c in range(g.positions):
                    i = g.unit_index(t, f, r, c)
                    y0, x0 = t + r * g.kernel, t + c * g.kernel
                    for a in range(g.kernel):
                        for e in range(g.kernel):
                            pix = (y0 + a) * g.image_width + (x0 + e)
                            W[i, pix] = params.W[t, f, a, e]
                            phi[i, pix] = params.phi[t, f]
                    b[i], mu[i], alpha[i] = params.b[t, f], params.mu[t, f], params.alpha[t, f]
    return TinyModelSpec("ssrbm", {"W": W, "b": b, "mu": mu, "alpha": alpha,
                                   "lam": np.full(d, params.lam), "phi": phi})


def _dense_conv(kernels, geom):
    """Dense (inputs, outputs) matrix of a stride-1 valid convolution."""
    c_in, size, k, n_out = geom.input_maps, geom.map_size, geom.kernel, geom.output_filters
    o = size - k + 1
    mat = np.zeros((c_in * size * size, n_out * o * o))
    for gi in range(n_out):
        for r in range(o):
            for q in range(o):
                j = (gi * o + r) * o + q
                for ci in range(c_in):
                    for a in range(k):
                        for e in range(k):
                            i = (ci * size + r + a) * size + q + e
                            mat[i, j] = kernels[gi, ci, a, e]
    return mat


def from_ssvis(params) -> TinyModelSpec:
    geom = params.geom
    per_map = geom.map_size ** 2
    rep = lambda x: np.repeat(x, per_map)
    return TinyModelSpec("ssvis", {"U": _dense_conv(params.U, geom),
                                   "rho": np.repeat(params.rho, geom.output_size ** 2),
                                   "alpha": rep(params.alpha), "mu": rep(params.mu),
                                   "b": rep(params.b)},
                         bias_shift=params.bias_shift)


def from_brbm(params) -> TinyModelSpec:
    geom = params.geom
    return TinyModelSpec("brbm", {"W": _dense_conv(params.W, geom),
                                  "vbias": np.repeat(params.vbias, geom.map_size ** 2),
                                  "hbias": np.repeat(params.hbias, geom.output_size ** 2)})


def dense_spec(params) -> TinyModelSpec:
    kind = type(params).__name__
    if kind == "SsRbmParams":
        return from_ssrbm(params)
    if kind == "SsVisRbmParams":
        return from_ssvis(params)
    if kind == "BinaryRbmParams":
        return from_brbm(params)
    raise TypeError(f"no dense view for {kind}")


def tied_loglik_grad(params, data, eps: float = 1e-5) -> dict[str, np.ndarray]:
    """Finite-difference log-likelihood gradient w.r.t. the shared parameters.

    ``data`` holds flattened visible configurations in the dense ordering.
    """
    base = params.arrays()
    grads = {}
    for name, arr in base.items():
        arr = np.asarray(arr, dtype=np.float64)
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            vals = []
            for sign in (1.0, -1.0):
                pert = {k: np.array(v, dtype=np.float64) for k, v in base.items()}
                pert[name][idx] += sign * eps
                vals.append(exact_loglik(dense_spec(params.with_arrays(pert)), data))
            g[idx] = (vals[0] - vals[1]) / (2 * eps)
        grads[name] = g
    return grads
