"""Time the numba and numpy Langevin kernels on the same chain.

    python benchmarks/bench_sgld.py [--repeats 5]
"""

import argparse
import time

import numpy as np

from eowsoftmax import kernels
from eowsoftmax.model import EowClassifier

CASES = {
    # name: (widths, num_classes, batch, stage, steps)
    "toy-2d": ([2, 16, 16], 2, 64, 0, 100),
    "mnist-mlp": ([784, 128, 128, 128], 10, 64, 2, 100),
}


def run_case(widths, k, batch, stage, steps, backend, repeats):
    rng = np.random.default_rng(0)
    model = EowClassifier(widths, k, rng=rng)
    d = model.stage_width(stage)
    z0 = np.abs(rng.standard_normal((batch, d)))
    noise = rng.standard_normal((steps, batch, d))
    args = (model.theta, model.layout, stage, noise, 2.0, 1e-3, 100.0, 1.0)
    out = kernels.sgld_run(z0.copy(), *args, backend=backend)  # warm-up / jit compile
    times = []
    for _ in range(repeats):
        t = time.perf_counter()
        kernels.sgld_run(z0.copy(), *args, backend=backend)
        times.append(time.perf_counter() - t)
    return min(times), out[0]


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()
    print(f"{'case':<12} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8} {'max |dz|':>10}")
    for name, case in CASES.items():
        t_np, z_np = run_case(*case, "numpy", args.repeats)
        t_nb, z_nb = run_case(*case, "numba", args.repeats)
        print(f"{name:<12} {1e3 * t_np:>10.2f} {1e3 * t_nb:>10.2f} {t_np / t_nb:>8.2f} "
              f"{np.max(np.abs(z_np - z_nb)):>10.1e}")


if __name__ == "__main__":
    main()
