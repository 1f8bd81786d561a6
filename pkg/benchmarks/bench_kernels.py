"""Compiled vs numpy kernels: agreement check and timings.

    python benchmarks/bench_kernels.py [--repeat 20]

The end-to-end row times one forward+backward step of a small model with
whichever backend ``dspr.kernels`` selected (run with ``DSPR_PURE=1`` to
compare).
"""

import argparse
import timeit

import numpy as np

from dspr import _pure
from dspr.kernels import BACKEND

try:
    from dspr import _kernels
except ImportError:
    _kernels = None


def cases(rng):
    x = rng.normal(size=(32 * 6, 24))
    g = rng.normal(size=(32 * 6, 24))
    tau = rng.uniform(1, 20, size=(32, 24, 6))
    return [
        ("moving_average (192x24, k=25)", lambda m: m.moving_average(x, 25)),
        ("moving_average_adjoint", lambda m: m.moving_average_adjoint(g, 25)),
        ("window_bias (32x24x6, Q=1)", lambda m: m.window_bias(tau, 1)),
        ("window_bias (32x24x6, Q=24)", lambda m: m.window_bias(tau, 24)),
    ]


def check_agreement(rng) -> None:
    for name, fn in cases(rng):
        a, b = fn(_pure), fn(_kernels)
        a = a if isinstance(a, tuple) else (a,)
        b = b if isinstance(b, tuple) else (b,)
        for u, v in zip(a, b):
            err = np.max(np.abs(np.asarray(u) - np.asarray(v)))
            if err > 1e-12:
                raise SystemExit(f"{name}: backends disagree (max abs diff {err:.3e})")


def bench_step(repeat: int) -> float:
    from dspr import tensor as T
    from dspr.data import gen_transport_delay, split_windows
    from dspr.model import dspr_loss
    from dspr.training import build_model

    ds = gen_transport_delay(T=2000, seed=0)
    sp = split_windows(ds, 24, 4)
    m = build_model(ds, 24, 4, "full", seed=0, d_model=32, trend_d_model=32, trend_depth=2)
    b = sp.train.take(np.arange(32))

    def step():
        m.params.zero_grad()
        T.backward(dspr_loss(m(b.X, b.time_feats), b.Y, m.prior, m.cfg))

    step()
    return min(timeit.repeat(step, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    if _kernels is not None:
        check_agreement(rng)
    print(f"{'kernel':34s} {'numpy [us]':>12s} {'compiled [us]':>14s} {'speedup':>8s}")
    for name, fn in cases(rng):
        tp = min(timeit.repeat(lambda: fn(_pure), number=10, repeat=args.repeat)) / 10 * 1e6
        if _kernels is None:
            print(f"{name:34s} {tp:12.1f} {'n/a':>14s} {'':>8s}")
            continue
        tc = min(timeit.repeat(lambda: fn(_kernels), number=10, repeat=args.repeat)) / 10 * 1e6
        print(f"{name:34s} {tp:12.1f} {tc:14.1f} {tp / tc:7.1f}x")
    t = bench_step(max(3, args.repeat // 4))
    print(f"train step, B=32 L=24 D=32 ({BACKEND} backend): {t * 1e3:.1f} ms")


if __name__ == "__main__":
    main()
