"""Compare the compiled and numpy kernels for the fused aggregation + ASL step.

Usage: python benchmarks/bench_kernels.py [--repeat 20] [--epoch]

Prints best-of-N wall time per call for a few batch shapes, and optionally
the time for one full training epoch with each backend.
"""

import argparse
import time

import numpy as np

from dualprompt import kernels


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_kernel(repeat):
    rng = np.random.default_rng(0)
    backends = kernels.available_backends()
    print(f"{'B':>5} {'R':>5} {'M':>5} {'mode':>17} " + " ".join(f"{b:>12}" for b in backends) + "   speedup")
    for B, R, M in [(32, 64, 20), (256, 64, 20), (32, 196, 80)]:
        pos = rng.uniform(-1, 1, (B, R, M))
        neg = rng.uniform(-1, 1, (B, R, M))
        labels = rng.choice([-1, 0, 1], (B, M)).astype(np.int8)
        for mode in ("softmax_weighted", "average", "max"):
            t = {}
            for b in backends:
                t[b] = best_of(lambda: kernels.fused_aggregate_asl(pos, neg, labels, mode, 0.1, 0.01, 1.0, 2.0, 0.05,
                                                                   backend=b), repeat)
            speed = f"{t['python'] / t['compiled']:8.2f}x" if "compiled" in t else "       -"
            print(f"{B:>5} {R:>5} {M:>5} {mode:>17} " + " ".join(f"{t[b] * 1e3:10.3f}ms" for b in backends)
                  + f"  {speed}")


def bench_epoch():
    from dualprompt import ClassifierConfig, PromptConfig, ToyEncoders, TrainConfig, make_catalog, synth_dataset, train

    cat = make_catalog(20, 32, 0)
    ds = synth_dataset(2000, cat, (8, 8), (1, 3), 0.1, seed=1)
    enc = ToyEncoders.build("aligned", 32)
    cfg = TrainConfig(lr0=0.02, epochs=1, classifier=ClassifierConfig(spatial_temp=0.1), prompt=PromptConfig(16, 16, 32))
    for b in kernels.available_backends():
        t0 = time.perf_counter()
        train(cfg, ds, enc, backend=b)
        print(f"one epoch, 2000 images, backend {b:>8}: {time.perf_counter() - t0:.2f}s")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--epoch", action="store_true", help="also time a full training epoch per backend")
    args = ap.parse_args()
    print(f"default backend: {kernels.BACKEND}")
    bench_kernel(args.repeat)
    if args.epoch:
        bench_epoch()


if __name__ == "__main__":
    main()
