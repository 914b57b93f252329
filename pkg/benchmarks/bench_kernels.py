"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--size N] [--repeat R]
"""

import argparse
import timeit

import numpy as np

from vitptq import kernels


def cases(n, rng):
    x = rng.normal(size=(n, 64)).astype(np.float32)
    w = rng.normal(size=(64, n)).astype(np.float32)
    v = rng.normal(size=w.shape).astype(np.float32)
    g = np.ones_like(x)
    s = np.full(64, 0.05, dtype=np.float32)
    zp = np.zeros(64, dtype=np.int64)
    code = kernels.fake_quant_forward(x, 0.05, 4, 0, 7)[1]
    return {
        "round_half_away": lambda: kernels.round_half_away(x),
        "fake_quant_forward": lambda: kernels.fake_quant_forward(x, 0.05, 4, 0, 7),
        "fake_quant_per_channel": lambda: kernels.fake_quant_forward(w, s, zp, -4, 3, axis=0),
        "adaround_forward": lambda: kernels.adaround_forward(w, v, s, zp, -4, 3, 1.1, -0.1, axis=0),
        "gelu_forward": lambda: kernels.gelu_forward(x),
        "fake_quant_backward": lambda: kernels.fake_quant_backward(x, g, code, 0.05, 4, 0, 7),
        "gelu_backward": lambda: kernels.gelu_backward(x, g),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=4096, help="rows of the (N, 64) test tensors")
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    backends = kernels.available_backends()
    if "native" not in backends:
        print("compiled kernels not built; only the numpy fallback is available")
    rng = np.random.default_rng(0)
    fns = cases(args.size, rng)
    times = {}
    for b in backends:
        with kernels.backend(b):
            for name, fn in fns.items():
                fn()
                times[name, b] = min(timeit.repeat(fn, number=1, repeat=args.repeat))
    print(f"{'kernel':<24}" + "".join(f"{b + ' ms':>12}" for b in backends) + ("   speedup" if len(backends) > 1 else ""))
    for name in fns:
        row = f"{name:<24}" + "".join(f"{times[name, b] * 1e3:>12.3f}" for b in backends)
        if len(backends) > 1:
            row += f"{times[name, 'numpy'] / times[name, 'native']:>10.2f}x"
        print(row)


if __name__ == "__main__":
    main()
