#!/usr/bin/env python3
"""Time the numba kernels against the pure-numpy fallback.

Covers conv2d forward+backward at the shapes the desk-scale model uses, NMS
on random boxes, and one full training step.  Each case is warmed up once
(so numba compilation is excluded) and then timed as the best of ``--repeat``.

Usage:
    python benchmarks/bench_kernels.py [--repeat 20] [--batch 8]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from hyolo import _kernels
from hyolo.losses import LossConfig, assign_targets, detection_loss
from hyolo.model import STRIDE, ModelSpec, build_model
from hyolo.taxonomy import example_taxonomy
from hyolo.tensor import Tensor


def best_of(fn, repeat: int) -> float:
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def conv_case(n, c, h, o, stride):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(n, c, h, h))
    w = rng.normal(size=(o, c, 3, 3))
    b = rng.normal(size=o)

    def run():
        out, ctx = _kernels.conv2d_forward(x, w, b, stride, 1)
        _kernels.conv2d_backward(x, w, np.ones_like(out), stride, 1, ctx)
    return run


def nms_case(m):
    rng = np.random.default_rng(0)
    xy = rng.uniform(0, 1, (m, 2))
    wh = rng.uniform(0.02, 0.3, (m, 2))
    x1, y1 = xy[:, 0], xy[:, 1]
    x2, y2 = x1 + wh[:, 0], y1 + wh[:, 1]
    order = np.argsort(-rng.uniform(size=m), kind="stable")
    return lambda: _kernels.nms_indices(x1, y1, x2, y2, order, 0.5)


def train_step_case(batch):
    tax = example_taxonomy()
    model = build_model("V4", tax, ModelSpec(), seed=0)
    rng = np.random.default_rng(0)
    images = rng.uniform(size=(batch, 3, 64, 64))
    labels = [[(tax.leaf_path(tax.leaves[i % len(tax.leaves)]), (0.3 + 0.1 * (i % 4), 0.5, 0.2, 0.2))
               for i in range(3)] for _ in range(batch)]
    targets = assign_targets(labels, (8, 8), STRIDE, 8)
    cfg = LossConfig(alpha=25.0)

    def run():
        head = model(Tensor(images))
        loss, _ = detection_loss(head.level_logits, head.box_map, targets, tax, cfg)
        model.zero_grad()
        loss.backward()
    return run


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--batch", type=int, default=8)
    args = ap.parse_args(argv)
    if not _kernels.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    b = args.batch
    cases = {
        f"conv 3->16 64px s2 (B={b})": conv_case(b, 3, 64, 16, 2),
        f"conv 16->32 32px s2 (B={b})": conv_case(b, 16, 32, 32, 2),
        f"conv 32->32 8px s1 (B={b})": conv_case(b, 32, 8, 32, 1),
        "nms 200 boxes": nms_case(200),
        "nms 2000 boxes": nms_case(2000),
        f"train step V4 (B={b})": train_step_case(b),
    }
    print(f"{'case':34s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    prev = _kernels.backend()
    try:
        for name, fn in cases.items():
            _kernels.set_backend("numpy")
            t_np = best_of(fn, args.repeat)
            _kernels.set_backend("numba")
            t_nb = best_of(fn, args.repeat)
            print(f"{name:34s} {t_np * 1e3:10.3f} {t_nb * 1e3:10.3f} {t_np / t_nb:7.2f}x")
    finally:
        _kernels.set_backend(prev)


if __name__ == "__main__":
    main()
