"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py            # layer shapes at 64x64 input
    python benchmarks/bench_kernels.py --full     # the 128x128 network's shapes

Each row reports the best of ``--repeat`` runs per backend and the speedup.
Outputs are compared bitwise as a side check.
"""

import argparse
import time

import numpy as np

from elacnn import kernels
from elacnn.optim import AdamState


def cases(size, batch):
    rng = np.random.default_rng(0)
    f32 = np.float32
    x = rng.random((batch, size, size, 3), dtype=f32)
    w1 = rng.standard_normal((5, 5, 3, 32)).astype(f32) * f32(0.1)
    w2 = rng.standard_normal((5, 5, 32, 32)).astype(f32) * f32(0.05)
    b = np.zeros(32, f32)
    h1 = kernels.conv2d_forward(x, w1, b)
    h2 = kernels.conv2d_forward(h1, w2, b)
    g2 = rng.standard_normal(h2.shape).astype(f32)
    pooled, _ = kernels.maxpool2_forward(h2)
    flat = pooled.reshape(batch, -1)
    wd = rng.standard_normal((flat.shape[1], 256)).astype(f32) * f32(0.01)
    gd = rng.standard_normal((batch, 256)).astype(f32)
    consts = AdamState(m=[], v=[], t=1).constants(f32)

    def adam():
        p, m, v = wd.copy(), np.zeros_like(wd), np.zeros_like(wd)
        kernels.adam_outer(p, m, v, flat, gd, batch, consts)
        return p

    return [
        ("conv1 forward", lambda: kernels.conv2d_forward(x, w1, b)),
        ("conv2 forward", lambda: kernels.conv2d_forward(h1, w2, b)),
        ("conv2 grad weights", lambda: kernels.conv2d_grad_weights(h1, g2, 5, 5)[0]),
        ("conv2 grad input", lambda: kernels.conv2d_grad_input(g2, w2)),
        ("maxpool forward", lambda: kernels.maxpool2_forward(h2)[0]),
        ("dense forward", lambda: kernels.dense_forward(flat, wd)),
        ("dense grad input", lambda: kernels.dense_grad_input(wd, gd)),
        ("adam outer update", adam),
    ]


def best_of(fn, repeat):
    times, out = [], None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--full", action="store_true", help="use the 128x128 input shapes")
    ap.add_argument("--batch", type=int, default=2)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if not kernels.compiled_available():
        raise SystemExit("compiled kernels are not built; run `pip install -e .` first")

    size = 128 if args.full else 64
    print(f"input {size}x{size}x3, batch {args.batch}, best of {args.repeat}")
    print(f"{'kernel':<20} {'compiled ms':>12} {'python ms':>12} {'speedup':>9}  same")
    for name, fn in cases(size, args.batch):
        with kernels.use_backend("compiled"):
            fast, a = best_of(fn, args.repeat)
        with kernels.use_backend("python"):
            slow, b = best_of(fn, args.repeat)
        same = np.asarray(a).tobytes() == np.asarray(b).tobytes()
        print(f"{name:<20} {fast * 1e3:>12.2f} {slow * 1e3:>12.2f} {slow / fast:>8.1f}x  {same}")


if __name__ == "__main__":
    main()
