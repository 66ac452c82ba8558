#!/usr/bin/env python3
"""Relative timing of the compiled and numpy kernel backends.

Measures the three convolution shapes of the default 68-landmark network
(forward and backward), 2x2 pooling, and a full single-image forward pass.
Each entry is the best of --repeats runs; the speedup column divides the
numpy time by the compiled time.

Usage:
    python3 benchmarks/bench_kernels.py [--batch 8] [--repeats 5]
"""
import argparse
import time

import numpy as np

from sdnface import backend, nn
from sdnface.model import build_network, default_spec, forward


def best_ms(fn, repeats):
    runs = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        runs.append((time.perf_counter() - t0) * 1000.0)
    return min(runs)


def conv_cases(batch, rng):
    cases = []
    for label, ch, side in (("group1 32ch 64x64", 32, 64),
                            ("group2 64ch 32x32", 64, 32),
                            ("group3 128ch 16x16", 128, 16)):
        x = rng.standard_normal((batch, ch, side, side)).astype(np.float32)
        w = (rng.standard_normal((ch, ch, 3, 3)) * 0.1).astype(np.float32)
        p = nn.ConvParams(w, np.zeros(ch, dtype=np.float32), stride=1, padding=1)
        up = rng.standard_normal((batch, ch, side, side)).astype(np.float32)
        cases.append((label, x, p, up))
    return cases


def main():
    ap = argparse.ArgumentParser(
        description="compare the compiled and numpy kernel backends")
    ap.add_argument("--batch", type=int, default=8,
                    help="batch size for the conv/pool cases")
    ap.add_argument("--repeats", type=int, default=5,
                    help="runs per measurement; the best is reported")
    args = ap.parse_args()

    names = backend.available()
    if "compiled" not in names:
        print("note: compiled kernels are not built in this install; "
              "timing numpy only")

    rng = np.random.default_rng(0)
    cases = conv_cases(args.batch, rng)
    xpool = rng.standard_normal((args.batch, 32, 64, 64)).astype(np.float32)
    ws = build_network(default_spec(68))
    ximg = rng.standard_normal((1, 1, 64, 64)).astype(np.float32)

    results = {}
    for bk in names:
        backend.select(bk)

        def add(label, fn):
            results.setdefault(label, {})[bk] = best_ms(fn, args.repeats)

        for label, x, p, up in cases:
            add(f"conv {label} forward", lambda: nn.conv2d(x, p))
            add(f"conv {label} backward", lambda: nn.conv2d_grad(x, p, up))
        add("maxpool 32ch 64x64 forward", lambda: nn.maxpool2x2(xpool))
        add("single-image forward, default 68-landmark net",
            lambda: forward(ws, ximg))
    backend.select("auto")

    width = max(len(k) for k in results)
    print(f"\nkernel benchmark  batch={args.batch}  repeats={args.repeats}  "
          f"(best-of ms)\n")
    header = f"{'op':<{width}}"
    for bk in names:
        header += f"  {bk:>10}"
    if len(names) == 2:
        header += f"  {'speedup':>8}"
    print(header)
    for label, times in results.items():
        line = f"{label:<{width}}"
        for bk in names:
            line += f"  {times[bk]:10.2f}"
        if len(names) == 2:
            line += f"  {times['numpy'] / times['compiled']:7.1f}x"
        print(line)


if __name__ == "__main__":
    main()
