"""Time the compiled kernels against the NumPy fallback.

    python3 benchmarks/bench_kernels.py [--batch 10] [--repeat 5]

Each kernel is timed on first-block shapes at full input size (convolution
unfolds also at the second block), then a whole backbone forward and backward is timed with each
backend swapped in.
"""
import argparse
import time

import numpy as np

from halluaudio import kernels
from halluaudio.backbone import BackboneSpec, init_backbone
from halluaudio.kernels import _numpy

try:
    from halluaudio.kernels import _cy
except ImportError:
    _cy = None


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(batch, rng):
    C, H, W = 64, 160, 128
    x = rng.standard_normal((batch, C, H, W)).astype(np.float32)
    x1 = rng.standard_normal((batch, 1, H, W)).astype(np.float32)
    x2 = rng.standard_normal((batch, C, H // 4, W // 4)).astype(np.float32)
    cols = _numpy.im2col3x3(x1)
    cols2 = _numpy.im2col3x3(x2)
    pooled, idx = _numpy.maxpool4_forward(x)
    x3 = x.reshape(batch, C, H * W)
    mean, var = _numpy.bn_stats(x3)
    inv = 1.0 / np.sqrt(var + 1e-5)
    gamma = np.ones(C, np.float32)
    beta = np.zeros(C, np.float32)
    xhat, y = _numpy.bn_normalize(x3, mean, inv, gamma, beta)
    flat = x.reshape(-1)
    relu = _numpy.relu_forward(flat)
    return [
        ("im2col3x3", lambda m: m.im2col3x3(x1)),
        ("col2im3x3", lambda m: m.col2im3x3(cols, H, W)),
        ("im2col3x3 64ch", lambda m: m.im2col3x3(x2)),
        ("col2im3x3 64ch", lambda m: m.col2im3x3(cols2, H // 4, W // 4)),
        ("maxpool4_forward", lambda m: m.maxpool4_forward(x)),
        ("maxpool4_backward", lambda m: m.maxpool4_backward(pooled, idx, H, W)),
        ("bn_stats", lambda m: m.bn_stats(x3)),
        ("bn_normalize", lambda m: m.bn_normalize(x3, mean, inv, gamma, beta)),
        ("bn_backward", lambda m: m.bn_backward(y, xhat, gamma, inv)),
        ("relu_forward", lambda m: m.relu_forward(flat)),
        ("relu_backward", lambda m: m.relu_backward(flat, relu)),
    ]


def backbone_step(batch, rng):
    net = init_backbone(BackboneSpec(), 0).train()
    x = rng.standard_normal((batch, 160, 128)).astype(np.float32)

    def step(_):
        net.zero_grad()
        out = net.forward(x)
        net.backward(np.ones_like(out))
    return step


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--batch", type=int, default=10)
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    backends = [("numpy", _numpy)] + ([("cython", _cy)] if _cy is not None else [])
    if _cy is None:
        print("compiled extension not built; run `python3 setup.py build_ext --inplace`")
    rng = np.random.default_rng(0)

    print(f"{'kernel':<20}" + "".join(f"{name:>12}" for name, _ in backends) + f"{'speedup':>10}")
    rows = kernel_cases(args.batch, rng)
    rows.append(("backbone fwd+bwd", backbone_step(args.batch, rng)))
    saved = kernels._impl
    try:
        for label, fn in rows:
            times = []
            for _, mod in backends:
                kernels._impl = mod  # the wrappers dispatch through this module global
                fn(mod)
                times.append(best_of(lambda: fn(mod), args.repeat))
            ratio = f"{times[0] / times[1]:>9.1f}x" if len(times) == 2 else ""
            print(f"{label:<20}" + "".join(f"{t * 1e3:>10.1f}ms" for t in times) + ratio)
    finally:
        kernels._impl = saved


if __name__ == "__main__":
    main()
