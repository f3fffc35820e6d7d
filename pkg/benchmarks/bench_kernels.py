"""Time the compiled kernels against the NumPy fallback.

Run ``python3 benchmarks/bench_kernels.py``; shapes mirror the filter presets
(a width-50 network on one-dimensional batches and a width-200 network on
Lorenz-96 batches).
"""

import argparse
import timeit

import numpy as np

from score_assim.kernels import available_backends
from score_assim.neural import init_params


def cases(rng):
    out = []
    for d, width, batch in ((1, 50, 128), (1, 50, 2000), (10, 200, 1000)):
        p = init_params(d, width, rng)
        x = rng.standard_normal((batch, d + 1))
        up = rng.standard_normal((batch, d))
        label = f"d={d} width={width} batch={batch}"
        out.append((f"mlp_forward       {label}", lambda k, p=p, x=x: k.mlp_forward(p.flat, p.dims, x)))

        def train(k, p=p, x=x, up=up):
            _, a1, a2 = k.mlp_forward_cache(p.flat, p.dims, x)
            k.mlp_backward(p.flat, p.dims, x, a1, a2, up)

        out.append((f"forward+backward  {label}", train))
    w = rng.random(20_000)
    w /= w.sum()
    out.append(("systematic_resample M=20000", lambda k: k.systematic_resample(w, 0.37)))
    x = rng.standard_normal((2000, 100))
    out.append(("lorenz96_drift    M=2000 d=100", lambda k: k.lorenz96_drift(x, 8.0, True)))
    return out


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--number", type=int, default=50)
    args = parser.parse_args(argv)
    backends = available_backends()
    if "cython" not in backends:
        print("compiled extension not built; only the NumPy fallback is available")
    names = list(backends)
    print(f"{'kernel':<44}" + "".join(f"{n + ' [us]':>16}" for n in names) + f"{'speedup':>10}")
    for label, fn in cases(np.random.default_rng(0)):
        times = {}
        for name, mod in backends.items():
            best = min(timeit.repeat(lambda: fn(mod), repeat=args.repeat, number=args.number))
            times[name] = best / args.number * 1e6
        speed = times["python"] / times["cython"] if "cython" in times else float("nan")
        print(f"{label:<44}" + "".join(f"{times[n]:>16.1f}" for n in names) + f"{speed:>10.2f}")


if __name__ == "__main__":
    main()
