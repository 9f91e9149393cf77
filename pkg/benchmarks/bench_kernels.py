"""Time the compiled and pure-Python tiled-convolution kernels.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Both backends are run on the same inputs; outputs are checked to agree
before timings are reported.
"""

import argparse
import timeit

import numpy as np

from tssrbm import ssrbm, tiling

CASES = [
    # (label, image side, kernel, tilings, filters, batch)
    ("stripe 54px, 8 filters", 54, 11, 11, 8, 64),
    ("protocol 98px, 32 filters", 98, 11, 11, 32, 16),
    ("small 13px, k3 T2", 13, 3, 2, 4, 64),
]


def _ops(geom, batch, rng):
    v = rng.normal(size=(batch,) + geom.image_shape)
    w = rng.normal(size=geom.kernel_shape)
    c = rng.normal(size=(batch,) + geom.unit_shape)
    p = ssrbm.init_params(geom, rng)
    return {
        "forward": lambda: tiling.tiled_forward(v, w, geom),
        "adjoint": lambda: tiling.tiled_adjoint(c, w, geom),
        "weight_grad": lambda: tiling.tiled_weight_grad(v, c, geom),
        "field_sumsq": lambda: tiling.field_sumsq(v, geom),
        "gibbs_sweep": lambda: ssrbm.gibbs_sweep(v, p, np.random.default_rng(0)),
    }


def _time(fn, repeat):
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not tiling.ext_available():
        print("compiled extension not built; only the python backend can run")
        return 1
    print(f"{'case':28s} {'op':12s} {'python ms':>10s} {'ext ms':>10s} {'speedup':>8s}")
    for label, side, k, t, f, batch in CASES:
        geom = tiling.build_tiled_geometry(side, side, k, t, f)
        ops = _ops(geom, batch, np.random.default_rng(0))
        for name, fn in ops.items():
            times = {}
            results = {}
            for backend in ("python", "ext"):
                tiling.set_backend(backend)
                results[backend] = fn()
                times[backend] = _time(fn, args.repeat)
            a, b = (np.asarray(results[x][-1] if isinstance(results[x], tuple) else results[x])
                    for x in ("python", "ext"))
            if not np.allclose(a, b, rtol=1e-10, atol=1e-10):
                raise SystemExit(f"backends disagree on {name} for {label}")
            print(f"{label:28s} {name:12s} {1e3 * times['python']:10.2f} {1e3 * times['ext']:10.2f} "
                  f"{times['python'] / times['ext']:7.1f}x")
    tiling.set_backend("auto")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
