"""Numba versus pure-numpy kernels, one kernel at a time and for a whole training step.

Shapes match the default model on a batch of 256 windows (T=8, N=17, C=128,
8 heads). The training step runs in a child process per backend because the
backend is chosen from POSEPRIOR_DISABLE_NUMBA at import time.

    python benchmarks/bench_kernels.py [--repeats 5] [--batch 256] [--dtype float32]
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from poseprior import _kernels as K

STEP_SNIPPET = """
import json, sys, timeit
import numpy as np
from poseprior import _kernels, stt
from poseprior.trainer import loss_and_grads, normalize_confidence
batch, repeats, dtype = int(sys.argv[1]), int(sys.argv[2]), sys.argv[3]
cfg = stt.STTConfig()
rng = np.random.default_rng(0)
params = stt.init_params(cfg, 0, dtype=dtype)
x = rng.uniform(0, 1, (batch, 8, 17, 2)).astype(dtype)
w = normalize_confidence(rng.uniform(0.5, 1, (batch, 8, 17))).astype(dtype)
run = lambda: loss_and_grads(params, cfg, x, x, w, training=True, seed=0)
run()
print(json.dumps({"backend": _kernels.backend(), "seconds": min(timeit.repeat(run, number=1, repeat=repeats))}))
"""


def best(fn, repeats):
    fn()  # compile / warm caches
    return min(timeit.repeat(fn, number=1, repeat=repeats))


def kernel_cases(batch: int, dtype):
    rng = np.random.default_rng(0)
    t, n, c, heads = 8, 17, 128, 8
    rows = batch * t * n
    x = rng.standard_normal((rows, c)).astype(dtype)
    gamma, beta = np.ones(c, dtype), np.zeros(c, dtype)
    h = rng.standard_normal((rows, 4 * c)).astype(dtype)
    spatial = [rng.standard_normal((batch * t * heads, n, c // heads)).astype(dtype) for _ in range(4)]
    temporal = [rng.standard_normal((batch * n * heads, t, c // heads)).astype(dtype) for _ in range(4)]
    scale = 1.0 / np.sqrt(c // heads)

    def cases(kernels):
        _, xhat, rstd = kernels["layer_norm_fwd"](x, gamma, beta, 1e-5)
        _, th = kernels["gelu_fwd"](h)
        _, ps = kernels["attention_fwd"](*spatial[:3], scale)
        _, pt = kernels["attention_fwd"](*temporal[:3], scale)
        return {
            "layer_norm fwd": lambda: kernels["layer_norm_fwd"](x, gamma, beta, 1e-5),
            "layer_norm bwd": lambda: kernels["layer_norm_bwd"](x, xhat, rstd, gamma),
            "gelu fwd": lambda: kernels["gelu_fwd"](h),
            "gelu bwd": lambda: kernels["gelu_bwd"](h, h, th),
            "spatial attention fwd": lambda: kernels["attention_fwd"](*spatial[:3], scale),
            "spatial attention bwd": lambda: kernels["attention_bwd"](spatial[3], *spatial[:3], ps, scale),
            "temporal attention fwd": lambda: kernels["attention_fwd"](*temporal[:3], scale),
            "temporal attention bwd": lambda: kernels["attention_bwd"](temporal[3], *temporal[:3], pt, scale),
        }

    return cases


def training_step(backend: str, batch: int, repeats: int, dtype: str) -> float:
    env = dict(os.environ)
    env.pop("POSEPRIOR_DISABLE_NUMBA", None)
    if backend == "numpy":
        env["POSEPRIOR_DISABLE_NUMBA"] = "1"
    out = subprocess.run(
        [sys.executable, "-c", STEP_SNIPPET, str(batch), str(repeats), dtype],
        env=env, check=True, capture_output=True, text=True,
    )
    result = json.loads(out.stdout.strip().splitlines()[-1])
    assert result["backend"] == backend, result
    return result["seconds"]


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--batch", type=int, default=256)
    ap.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    args = ap.parse_args(argv)
    if not K.NUMBA_AVAILABLE:
        print("numba is not importable; nothing to compare", file=sys.stderr)
        return 1

    dtype = np.dtype(args.dtype)
    make = kernel_cases(args.batch, dtype)
    numpy_cases, numba_cases = make(K.NUMPY_KERNELS), make(K.NUMBA_KERNELS)
    print(f"{'kernel':<26}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name in numpy_cases:
        a = best(numpy_cases[name], args.repeats) * 1e3
        b = best(numba_cases[name], args.repeats) * 1e3
        print(f"{name:<26}{a:>10.1f}{b:>10.1f}{a / b:>8.2f}x")

    a = training_step("numpy", args.batch, max(2, args.repeats // 2), args.dtype)
    b = training_step("numba", args.batch, max(2, args.repeats // 2), args.dtype)
    print(f"{'training step':<26}{a * 1e3:>10.0f}{b * 1e3:>10.0f}{a / b:>8.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
