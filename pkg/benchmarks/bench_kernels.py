"""Time the compiled and pure-numpy kernel backends on training-sized inputs.

    python benchmarks/bench_kernels.py [--batch 256] [--latents 4096] [--repeat 20]
"""

import argparse
import timeit

import numpy as np

from jumpsae import _kernels_py

try:
    from jumpsae import _ext
except ImportError:
    _ext = None


def bench(impl, z, theta, grad, bits, repeat):
    cases = {
        "jumprelu_forward": lambda: impl.jumprelu_forward(z, theta),
        "jumprelu_backward": lambda: impl.jumprelu_backward(z, theta, grad, 1e-3, 1e-3 / z.shape[0]),
        "bf16_round_bits": lambda: impl.bf16_round_bits(bits),
    }
    return {name: min(timeit.repeat(fn, number=1, repeat=repeat)) for name, fn in cases.items()}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--batch", type=int, default=256)
    ap.add_argument("--latents", type=int, default=4096)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    z = rng.normal(scale=0.05, size=(args.batch, args.latents))
    theta = np.full(args.latents, 0.02)
    grad = rng.normal(size=z.shape)
    bits = rng.standard_normal(args.batch * args.latents).astype(np.float32).view(np.uint32)

    backends = {"python": _kernels_py}
    if _ext is not None:
        backends["compiled"] = _ext
    results = {name: bench(impl, z, theta, grad, bits, args.repeat) for name, impl in backends.items()}

    print(f"batch {args.batch} x latents {args.latents}, best of {args.repeat}")
    print(f"{'kernel':<20}" + "".join(f"{name:>14}" for name in backends) + ("   speedup" if _ext else ""))
    for kernel in results["python"]:
        row = f"{kernel:<20}" + "".join(f"{results[b][kernel] * 1e3:>12.3f}ms" for b in backends)
        if _ext is not None:
            row += f"{results['python'][kernel] / results['compiled'][kernel]:>9.2f}x"
        print(row)
    if _ext is None:
        print("compiled extension not built; only the python backend was timed")


if __name__ == "__main__":
    main()
