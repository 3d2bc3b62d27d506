"""Compare the compiled kernels with the numpy fallback.

Times each kernel on shapes taken from the default model (H=64, 4 heads,
FFN 256, batch 32 x 40 tokens) plus one full training step, and checks the
two backends agree bitwise. BLAS ``@`` is listed for reference only; it uses
a different summation order and is not bitwise comparable.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--json out.json]
"""
from __future__ import annotations

import argparse
import json
import platform
import time

import numpy as np

from camlmlab import kernels


def best_time(fn, repeat: int) -> float:
    fn()
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def max_ulp(a, b) -> float:
    """Largest difference in units of the last place of the larger magnitude."""
    spacing = np.spacing(np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / spacing))


def cases(dtype):
    rng = np.random.default_rng(0)
    b, n, h, heads, f = 32, 40, 64, 4, 256
    x = rng.standard_normal((b * n, h)).astype(dtype)
    w = rng.standard_normal((h, f)).astype(dtype)
    q = rng.standard_normal((b * heads, n, h // heads)).astype(dtype)
    k = rng.standard_normal((b * heads, h // heads, n)).astype(dtype)
    scores = rng.standard_normal((b, heads, n, n)).astype(dtype)
    allowed = (rng.random((b, n, n)) < 0.6).astype(np.uint8)
    allowed[:, np.arange(n), np.arange(n)] = 1
    probs = kernels.masked_softmax_fwd(scores, allowed)
    g = rng.standard_normal(probs.shape).astype(dtype)
    act = rng.standard_normal(b * n * f).astype(dtype)
    return {
        "matmul [1280x64]@[64x256]": lambda: kernels.matmul(x, w),
        "bmm 128x[40x16]@[16x40]": lambda: kernels.bmm(q, k),
        "softmax fwd 32x4x40x40": lambda: kernels.masked_softmax_fwd(scores, allowed),
        "softmax bwd 32x4x40x40": lambda: kernels.masked_softmax_bwd(probs, g),
        "gelu fwd 327680": lambda: kernels.gelu_fwd(act),
    }


def train_step_case():
    from camlmlab.corpus import CorpusConfig, build_corpora
    from camlmlab.model import ModelConfig
    from camlmlab.trainer import DataStream, OptimizerState, TrainConfig, train_step
    from camlmlab.model import init_params
    from camlmlab.objectives import ObjectiveKind

    corpora = build_corpora(CorpusConfig(parallel_pairs=500, mono_per_lang=500, heldout_pairs=8))
    mc = ModelConfig(dtype="float32")
    tc = TrainConfig(total_steps=1000, warmup_steps=10)
    stream = DataStream(corpora, tc, mc)
    params = init_params(mc, 0)
    state = OptimizerState.zeros_like(params)
    counter = iter(range(10**6))
    return lambda: train_step(params, state, ObjectiveKind.CAMLM, stream, next(counter))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json")
    args = ap.parse_args(argv)
    if not kernels.compiled_available():
        raise SystemExit("compiled extension not built; run: pip install -e . --no-build-isolation")
    results = []
    for dtype in (np.float32, np.float64):
        for name, fn in cases(dtype).items():
            row = {"kernel": name, "dtype": np.dtype(dtype).name}
            outs = {}
            for backend in ("cython", "python"):
                kernels.use_backend(backend)
                row[backend + "_ms"] = best_time(fn, args.repeat) * 1e3
                outs[backend] = fn()
            a, b = outs["cython"], outs["python"]
            a = a[0] if isinstance(a, tuple) else a
            b = b[0] if isinstance(b, tuple) else b
            row["bitwise_equal"] = bool(np.array_equal(a, b))
            row["max_ulp"] = max_ulp(a, b)
            row["speedup"] = row["python_ms"] / row["cython_ms"]
            results.append(row)
    kernels.use_backend("cython")
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1280, 64)).astype(np.float32)
    w = rng.standard_normal((64, 256)).astype(np.float32)
    blas_ms = best_time(lambda: x @ w, args.repeat) * 1e3
    step = {}
    for backend in ("cython", "python"):
        kernels.use_backend(backend)
        step[backend + "_ms"] = best_time(train_step_case(), max(3, args.repeat // 4)) * 1e3
    kernels.use_backend("cython")

    print(f"{'kernel':28s} {'dtype':8s} {'cython ms':>10s} {'python ms':>10s} {'speedup':>8s}  bitwise  max ulp")
    for r in results:
        print(
            f"{r['kernel']:28s} {r['dtype']:8s} {r['cython_ms']:10.3f} {r['python_ms']:10.3f}"
            f" {r['speedup']:8.2f}  {str(r['bitwise_equal']):7s}  {r['max_ulp']:.0f}"
        )
    print(f"\nBLAS reference, float32 matmul [1280x64]@[64x256]: {blas_ms:.3f} ms")
    print(
        f"CAMLM train step (batch 32, float32): cython {step['cython_ms']:.1f} ms,"
        f" python {step['python_ms']:.1f} ms ({step['python_ms'] / step['cython_ms']:.2f}x)"
    )
    print(f"host: {platform.processor() or platform.machine()}, numpy {np.__version__}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"kernels": results, "blas_ms": blas_ms, "train_step": step}, fh, indent=1)


if __name__ == "__main__":
    main()
