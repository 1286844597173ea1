"""Compare the compiled and pure-numpy MLP kernels.

    python3 benchmarks/bench_kernels.py [--hidden 256 256] [--repeat 5] [--json out.json]

Times ``mlp_forward`` and ``mlp_mse_grad`` at several batch sizes for both
backends and checks that they agree numerically.
"""

import argparse
import json
import sys
import timeit

import numpy as np

from cul_lab.nn import Architecture, _kernels_py, init_params

try:
    from cul_lab.nn import _kernels as _compiled
except ImportError:
    _compiled = None


def bench(fn, number, repeat):
    times = timeit.repeat(fn, number=number, repeat=repeat)
    return min(times) / number


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--hidden", type=int, nargs=2, default=[256, 256])
    p.add_argument("--batches", type=int, nargs="+", default=[1, 24, 256, 4096])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--json", help="also write results to this file")
    args = p.parse_args(argv)
    if _compiled is None:
        print("compiled extension not available; build with `pip install -e .`", file=sys.stderr)
        return 1

    arch = Architecture(hidden=tuple(args.hidden))
    rng = np.random.default_rng(0)
    theta = init_params(arch, rng, out_scale=1.0)
    h1, h2 = arch.hidden
    results = []
    print(f"architecture {arch.n_in}-{h1}-{h2}-{arch.data_dim}, {arch.n_params} parameters")
    print(f"{'kernel':<14}{'batch':>7}{'python us':>12}{'compiled us':>13}{'speedup':>9}{'max diff':>11}")
    for B in args.batches:
        X = rng.standard_normal((B, arch.n_in))
        Y = rng.standard_normal((B, arch.data_dim))
        number = max(1, 20000 // (B * 10))
        cases = {
            "mlp_forward": lambda m: m.mlp_forward(theta, X, h1, h2, arch.data_dim),
            "mlp_mse_grad": lambda m: m.mlp_mse_grad(theta, X, Y, h1, h2, arch.data_dim),
        }
        for name, call in cases.items():
            ref, out = call(_kernels_py), call(_compiled)
            if isinstance(ref, tuple):
                diff = max(abs(ref[0] - out[0]), float(np.max(np.abs(ref[1] - out[1]))))
            else:
                diff = float(np.max(np.abs(ref - out)))
            tp = bench(lambda: call(_kernels_py), number, args.repeat) * 1e6
            tc = bench(lambda: call(_compiled), number, args.repeat) * 1e6
            results.append({"kernel": name, "batch": B, "python_us": tp, "compiled_us": tc,
                            "speedup": tp / tc, "max_abs_diff": diff})
            print(f"{name:<14}{B:>7}{tp:>12.1f}{tc:>13.1f}{tp / tc:>9.2f}{diff:>11.1e}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
