"""Pure numpy versions of the compiled kernels.

Summation order matches ``_kernels.pyx`` term for term: matmul accumulates
``out = out + a[:, p] * b[p]`` for p = 0, 1, ..., so both backends produce the
same bits for matrix products. Softmax sums run through ``cumsum``, which is
sequential, rather than ``sum``, which is pairwise.
"""
from __future__ import annotations

import numpy as np


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    if b.shape[0] != k:
        raise ValueError(f"matmul inner extents differ: {k} vs {b.shape[0]}")
    out = np.zeros((m, b.shape[1]), dtype=a.dtype)
    for p in range(k):
        out = out + a[:, p : p + 1] * b[p]
    return out


def bmm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    nb, m, k = a.shape
    if b.shape[0] != nb or b.shape[1] != k:
        raise ValueError("bmm shape mismatch")
    out = np.zeros((nb, m, b.shape[2]), dtype=a.dtype)
    for p in range(k):
        out = out + a[:, :, p : p + 1] * b[:, p : p + 1, :]
    return out


def masked_softmax_fwd(scores: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    mask = allowed.astype(bool)[:, None, :, :]
    masked = np.where(mask, scores, -np.inf)
    mx = masked.max(axis=-1, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0)
    # exp in double, like the compiled kernel; libm and numpy may still differ by an ulp
    e = np.where(mask, np.exp((masked - mx).astype(np.float64)), 0).astype(scores.dtype)
    total = np.cumsum(e, axis=-1)[..., -1:]
    total = np.where(total > 0, total, 1)
    return np.where(mask, e / total, 0).astype(scores.dtype)


def masked_softmax_bwd(probs: np.ndarray, grad: np.ndarray) -> np.ndarray:
    dot = np.cumsum(probs * grad, axis=-1)[..., -1:]
    return probs * (grad - dot)


GELU_C = 0.7978845608028654
GELU_K = 0.044715
GELU_K3 = 3 * 0.044715


def gelu_fwd(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x64 = x.astype(np.float64)
    t = np.tanh(GELU_C * (x64 + GELU_K * x64 * x64 * x64)).astype(x.dtype)
    dt = x.dtype.type
    return dt(0.5) * x * (dt(1) + t), t


def gelu_bwd(x: np.ndarray, t: np.ndarray, grad: np.ndarray) -> np.ndarray:
    dt = x.dtype.type
    return grad * (dt(0.5) * (dt(1) + t) + dt(0.5) * x * (dt(1) - t * t) * dt(GELU_C) * (dt(1) + dt(GELU_K3) * x * x))
