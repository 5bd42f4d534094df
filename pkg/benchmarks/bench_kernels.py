"""Side-by-side timing of the convolution backends.

Runs forward and backward passes of the 3D convolution and transposed
convolution kernels on training-shaped workloads, once per available
backend, and prints milliseconds, GFLOP/s, and the maximum absolute
difference between backend outputs. Thread count for the compiled
backend follows VOXSYNTH_THREADS.

Usage: python benchmarks/bench_kernels.py [--repeats N] [--quick]
"""

import argparse
import time

import numpy as np

from voxsynth.kernels import compiled_backend, numpy_backend, thread_count

CASES = [
    ("enc 8ch 32^3 k3", dict(b=1, ci=8, co=8, d=32, k=3, s=1, p=1)),
    ("enc 16ch 16^3 k3", dict(b=1, ci=16, co=16, d=16, k=3, s=1, p=1)),
    ("down 8->16 s2", dict(b=1, ci=8, co=16, d=32, k=3, s=2, p=1)),
    ("head 8->1 k1", dict(b=1, ci=8, co=1, d=32, k=1, s=1, p=0)),
]

QUICK_CASES = CASES[:2]


def conv_flops(b, ci, co, od, k):
    return 2.0 * b * co * od ** 3 * ci * k ** 3


def best_of(fn, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def run_case(name, cfg, repeats):
    b, ci, co, d, k, s, p = (cfg[key] for key in ("b", "ci", "co", "d", "k", "s", "p"))
    rng = np.random.default_rng(0)
    x = rng.normal(size=(b, ci, d, d, d)).astype(np.float32)
    w = rng.normal(size=(co, ci, k, k, k)).astype(np.float32) * 0.1
    bias = rng.normal(size=(co,)).astype(np.float32)
    od = (d + 2 * p - k) // s + 1
    gout = rng.normal(size=(b, co, od, od, od)).astype(np.float32)
    fyi = conv_flops(b, ci, co, od, k)

    rows = []
    outs = {}
    for backend in (numpy_backend, compiled_backend):
        if backend is None:
            continue
        fwd = lambda: backend.conv3d_forward(x, w, bias, (s, s, s), (p, p, p))
        bwd = lambda: backend.conv3d_backward(x, w, (s, s, s), (p, p, p), gout)
        t_f, out = best_of(fwd, repeats)
        t_b, grads = best_of(bwd, repeats)
        outs[backend.NAME] = (out, grads)
        rows.append((backend.NAME, t_f, fyi / t_f / 1e9, t_b, 3 * fyi / t_b / 1e9))

    diff = 0.0
    if len(outs) == 2:
        a, b_ = outs["numpy"], outs["compiled"]
        diff = max(
            float(np.max(np.abs(a[0] - b_[0]))),
            max(float(np.max(np.abs(ga - gb))) for ga, gb in zip(a[1][:2], b_[1][:2])),
        )
    print(f"\n{name}  (out {od}^3, {fyi / 1e9:.3f} GFLOP fwd)")
    for nm, t_f, gf_f, t_b, gf_b in rows:
        print(f"  {nm:9s} fwd {t_f * 1e3:8.2f} ms ({gf_f:5.1f} GF/s)   "
              f"bwd {t_b * 1e3:8.2f} ms ({gf_b:5.1f} GF/s)")
    if len(outs) == 2:
        print(f"  max |numpy - compiled| = {diff:.3e}")


def run_tconv(repeats):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 16, 8, 8, 8)).astype(np.float32)
    w = rng.normal(size=(8, 16, 2, 2, 2)).astype(np.float32) * 0.1
    gout = rng.normal(size=(1, 8, 16, 16, 16)).astype(np.float32)
    print("\ntconv 16->8ch 8^3 -> 16^3 k2 s2")
    for backend in (numpy_backend, compiled_backend):
        if backend is None:
            continue
        t_f, _ = best_of(lambda: backend.tconv3d_forward(x, w, None, (2, 2, 2), (0, 0, 0)), repeats)
        t_b, _ = best_of(lambda: backend.tconv3d_backward(x, w, (2, 2, 2), (0, 0, 0), gout), repeats)
        print(f"  {backend.NAME:9s} fwd {t_f * 1e3:8.2f} ms   bwd {t_b * 1e3:8.2f} ms")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--quick", action="store_true", help="run only the two smallest cases")
    args = ap.parse_args()
    print(f"threads for compiled backend: {thread_count()}")
    if compiled_backend is None:
        print("compiled backend not built; timing numpy only")
    for name, cfg in (QUICK_CASES if args.quick else CASES):
        run_case(name, cfg, args.repeats)
    if not args.quick:
        run_tconv(args.repeats)


if __name__ == "__main__":
    main()
