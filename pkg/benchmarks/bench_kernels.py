"""Benchmark the compiled kernel backend against the NumPy fallback.

Times each hot kernel on transformer-shaped inputs, then a full
forward+backward+AdamW training step of a small ViT under each backend.

Usage: python benchmarks/bench_kernels.py [--repeat 200]
"""

import argparse
import time

import numpy as np

from vpl import _kernels
from vpl import adaptation as A
from vpl import tensor as T
from vpl.backbone import Backbone, BackboneConfig
from vpl.trainlab import TrainConfig, make_optimizer


def timeit(fn, repeat):
    fn()  # warm-up
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t0) / repeat


def kernel_cases(rng):
    x2d = rng.normal(size=(512, 256))
    gy2d = rng.normal(size=(512, 256))
    gain = rng.normal(size=256)
    bias = rng.normal(size=256)
    labels = rng.integers(0, 256, size=512)
    y2d = _kernels._numpy.softmax2d_fwd(x2d)
    _, mean, rstd = _kernels._numpy.layernorm2d_fwd(x2d, gain, bias, 1e-5)
    p = rng.normal(size=1 << 16)
    g = rng.normal(size=1 << 16)
    m = np.zeros(1 << 16)
    v = np.zeros(1 << 16)
    return [
        ("gelu_fwd", lambda k: k.gelu_fwd(x2d)),
        ("gelu_bwd", lambda k: k.gelu_bwd(x2d, gy2d)),
        ("softmax2d_fwd", lambda k: k.softmax2d_fwd(x2d)),
        ("softmax2d_bwd", lambda k: k.softmax2d_bwd(y2d, gy2d)),
        ("layernorm2d_fwd", lambda k: k.layernorm2d_fwd(x2d, gain, bias, 1e-5)),
        ("layernorm2d_bwd", lambda k: k.layernorm2d_bwd(x2d, gain, mean, rstd, gy2d)),
        ("cross_entropy2d_fwd", lambda k: k.cross_entropy2d_fwd(x2d, labels)),
        ("adamw_step", lambda k: k.adamw_step(p.copy(), g, m.copy(), v.copy(),
                                              1e-3, 0.9, 0.999, 1e-8, 1e-4, 1)),
    ]


def train_step_case(backend, repeat, rng):
    _kernels.set_backend(backend)
    cfg = BackboneConfig(image_size=16, patch_size=4, in_channels=1, dim=64,
                         depth=4, heads=4, num_classes=4)
    model = A.build_plan("adapter", Backbone.init(cfg, seed=0), num_classes=4, seed=0)
    params = model.trainable_parameters()
    opt = make_optimizer(TrainConfig(steps=1, batch_size=8))
    x = rng.normal(size=(8, 1, 16, 16))
    labels = rng.integers(0, 4, size=8)

    def step():
        loss = T.cross_entropy(model.forward(x), labels)
        for p in params:
            p.value.zero_grad()
        loss.backward()
        opt.step(params)

    return timeit(step, max(repeat // 10, 5))


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=200)
    args = parser.parse_args()
    rng = np.random.default_rng(0)

    backends = _kernels.available_backends()
    if "cython" not in backends:
        print("compiled backend not built; only numpy timings follow")

    print(f"{'kernel':24s}" + "".join(f"{b:>14s}" for b in backends) + f"{'speedup':>10s}")
    for name, fn in kernel_cases(rng):
        times = {}
        for b in backends:
            mod = _kernels._BACKENDS[b]
            times[b] = timeit(lambda: fn(mod), args.repeat)
        row = f"{name:24s}" + "".join(f"{times[b] * 1e6:>12.1f}us" for b in backends)
        if len(backends) == 2:
            row += f"{times['numpy'] / times['cython']:>9.2f}x"
        print(row)

    print()
    prev = _kernels.get_backend()
    for b in backends:
        dt = train_step_case(b, args.repeat, np.random.default_rng(1))
        print(f"adapter train step ({b:6s}): {dt * 1e3:8.2f} ms")
    _kernels.set_backend(prev)


if __name__ == "__main__":
    main()
