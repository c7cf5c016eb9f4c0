"""Time the numpy and compiled pairwise kernels on pattern-sized inputs.

    python benchmarks/bench_kernels.py [--repeat 20]
"""

import argparse
import time

import numpy as np

from match2 import kernels

SHAPES = [(8, 24, 24, 100), (32, 24, 24, 256)]  # (batch*layers, m, n, w)


def _time(fn, args, repeat):
    fn(*args)
    start = time.perf_counter()
    for _ in range(repeat):
        fn(*args)
    return (time.perf_counter() - start) / repeat


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    rng = np.random.default_rng(0)
    backends = {name: kernels.get_backend(name) for name in kernels.available_backends()}
    print(f"{'kernel':<22} {'shape':<18} " + " ".join(f"{b:>10}" for b in backends) + "   speedup")
    for n, m, k, w in SHAPES:
        x = rng.normal(size=(n, m, w)).astype(np.float32)
        y = rng.normal(size=(n, k, w)).astype(np.float32)
        p = np.exp(x) / np.exp(x).sum(-1, keepdims=True)
        q = np.exp(y) / np.exp(y).sum(-1, keepdims=True)
        coef = rng.normal(size=(n, m, k)).astype(np.float32)
        dist = backends["python"].pairwise_l2(x, y)
        cases = {
            "pairwise_l1": (x, y),
            "pairwise_l1_backward": (x, y, coef),
            "pairwise_l2": (x, y),
            "pairwise_l2_backward": (x, y, dist, coef),
            "pairwise_jsd": (p, q),
            "pairwise_jsd_backward": (p, q, coef),
        }
        for name, inputs in cases.items():
            times = {b: _time(getattr(mod, name), inputs, args.repeat) for b, mod in backends.items()}
            speed = f"{times['python'] / times['cython']:8.2f}x" if "cython" in times else ""
            cells = " ".join(f"{t * 1e3:8.2f}ms" for t in times.values())
            print(f"{name:<22} {str((n, m, k, w)):<18} {cells} {speed}")


if __name__ == "__main__":
    main()
