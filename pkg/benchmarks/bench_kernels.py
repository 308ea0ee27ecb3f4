"""Time the numba kernels against the pure-numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Reports per-call times for the rain splat (forward and backward), the
sub-pixel translation, max pooling, and a full 64x64 S=20 attack.
"""
import argparse
import time

import numpy as np

from rainforge import _accel, kernels
from rainforge.attack import AttackConfig, attack_classifier
from rainforge.rain import Bounds, random_factors
from rainforge.victim import ToyClassifier


def timeit(fn, repeat):
    fn()  # warm-up: triggers numba compilation
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def cases(rng):
    h = w = 64
    n, steps = 40, 8
    ys = rng.integers(0, h, n).astype(np.int64)
    xs = rng.integers(0, w, n).astype(np.int64)
    amp = rng.uniform(0.7, 1.0, n)
    kern = rng.uniform(0, 0.3, (n, steps + 1))
    g = rng.normal(size=(h, w))
    img = rng.random((h, w, 3))
    pool_in = rng.normal(size=(1, 32, 32, 16))
    pool_out, arg = kernels.maxpool_forward(pool_in)
    pool_g = rng.normal(size=pool_out.shape)

    clf = ToyClassifier.init(seed=0, input_size=64)
    clean = rng.random((64, 64, 3)).astype(np.float32)
    f0 = random_factors(64, 64, Bounds(), seed=0)
    cfg = AttackConfig(iterations=20)

    return {
        "splat forward 64x64": lambda: kernels.splat_forward(ys, xs, amp, kern, 0.7, 1.3, h, w),
        "splat backward 64x64": lambda: kernels.splat_backward(ys, xs, amp, kern, 0.7, 1.3, g),
        "translate forward 64x64x3": lambda: kernels.translate_forward(img, 2.3, -1.6),
        "translate backward 64x64x3": lambda: kernels.translate_backward(img, 2.3, -1.6, img),
        "maxpool forward 32x32x16": lambda: kernels.maxpool_forward(pool_in),
        "maxpool backward 32x32x16": lambda: kernels.maxpool_backward(arg, pool_g, pool_in.shape),
        "attack 64x64, S=20": lambda: attack_classifier(clean, 0, clf, f0, cfg),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare (pip install rainforge[fast])")

    table = cases(np.random.default_rng(0))
    print(f"{'kernel':32s} {'numba':>11s} {'numpy':>11s} {'speedup':>8s}")
    for name, fn in table.items():
        repeat = max(1, args.repeat // 10) if name.startswith("attack") else args.repeat
        _accel.set_enabled(True)
        fast = timeit(fn, repeat)
        _accel.set_enabled(False)
        slow = timeit(fn, repeat)
        print(f"{name:32s} {fast * 1e3:9.3f}ms {slow * 1e3:9.3f}ms {slow / fast:7.1f}x")
    _accel.set_enabled(True)


if __name__ == "__main__":
    main()
