# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels.

Every reduction runs in a fixed sequential order (k = 0, 1, ...), one output
element at a time, so a result never depends on the extent of the other axes.
That is what makes padded batches and appended placeholders bitwise neutral.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, tanh

cnp.import_array()

ctypedef fused real:
    float
    double


cdef inline void _tile32(const real* a, const real* b, real* out, Py_ssize_t i, Py_ssize_t rows,
                          Py_ssize_t jb, Py_ssize_t k, Py_ssize_t n) noexcept nogil:
    # rows x 32 output tile held in locals; each element sums p = 0..k-1 in order
    cdef real acc[4][32]
    cdef real a0, a1, a2, a3
    cdef const real* br
    cdef Py_ssize_t p, j, r
    for r in range(4):
        for j in range(32):
            acc[r][j] = 0
    if rows == 4:
        for p in range(k):
            br = b + p * n + jb
            a0 = a[i * k + p]
            a1 = a[(i + 1) * k + p]
            a2 = a[(i + 2) * k + p]
            a3 = a[(i + 3) * k + p]
            for j in range(32):
                acc[0][j] = acc[0][j] + a0 * br[j]
                acc[1][j] = acc[1][j] + a1 * br[j]
                acc[2][j] = acc[2][j] + a2 * br[j]
                acc[3][j] = acc[3][j] + a3 * br[j]
    else:
        for p in range(k):
            br = b + p * n + jb
            a0 = a[i * k + p]
            for j in range(32):
                acc[0][j] = acc[0][j] + a0 * br[j]
    for r in range(rows):
        for j in range(32):
            out[(i + r) * n + jb + j] = acc[r][j]


cdef inline void _tile8(const real* a, const real* b, real* out, Py_ssize_t i, Py_ssize_t rows,
                          Py_ssize_t jb, Py_ssize_t k, Py_ssize_t n) noexcept nogil:
    # rows x 8 output tile held in locals; each element sums p = 0..k-1 in order
    cdef real acc[4][8]
    cdef real a0, a1, a2, a3
    cdef const real* br
    cdef Py_ssize_t p, j, r
    for r in range(4):
        for j in range(8):
            acc[r][j] = 0
    if rows == 4:
        for p in range(k):
            br = b + p * n + jb
            a0 = a[i * k + p]
            a1 = a[(i + 1) * k + p]
            a2 = a[(i + 2) * k + p]
            a3 = a[(i + 3) * k + p]
            for j in range(8):
                acc[0][j] = acc[0][j] + a0 * br[j]
                acc[1][j] = acc[1][j] + a1 * br[j]
                acc[2][j] = acc[2][j] + a2 * br[j]
                acc[3][j] = acc[3][j] + a3 * br[j]
    else:
        for p in range(k):
            br = b + p * n + jb
            a0 = a[i * k + p]
            for j in range(8):
                acc[0][j] = acc[0][j] + a0 * br[j]
    for r in range(rows):
        for j in range(8):
            out[(i + r) * n + jb + j] = acc[r][j]


cdef inline void _mm_block(const real* a, const real* b, real* out,
                           Py_ssize_t m, Py_ssize_t k, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i = 0, rows, jb, j, p, r
    cdef real acc
    while i < m:
        rows = 4 if i + 4 <= m else 1
        jb = 0
        while jb + 32 <= n:
            _tile32(a, b, out, i, rows, jb, k, n)
            jb += 32
        while jb + 8 <= n:
            _tile8(a, b, out, i, rows, jb, k, n)
            jb += 8
        for r in range(rows):
            for j in range(jb, n):
                acc = 0
                for p in range(k):
                    acc = acc + a[(i + r) * k + p] * b[p * n + j]
                out[(i + r) * n + j] = acc
        i += rows


def matmul(real[:, ::1] a, real[:, ::1] b):
    cdef Py_ssize_t m = a.shape[0], k = a.shape[1], n = b.shape[1]
    if b.shape[0] != k:
        raise ValueError(f"matmul inner extents differ: {k} vs {b.shape[0]}")
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((m, n), dtype=dtype)
    cdef real[:, ::1] o = out
    if m == 0 or n == 0 or k == 0:
        return out
    with nogil:
        _mm_block(&a[0, 0], &b[0, 0], &o[0, 0], m, k, n)
    return out


def bmm(real[:, :, ::1] a, real[:, :, ::1] b):
    cdef Py_ssize_t nb = a.shape[0], m = a.shape[1], k = a.shape[2], n = b.shape[2]
    cdef Py_ssize_t t
    if b.shape[0] != nb or b.shape[1] != k:
        raise ValueError("bmm shape mismatch")
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((nb, m, n), dtype=dtype)
    cdef real[:, :, ::1] o = out
    if nb == 0 or m == 0 or n == 0 or k == 0:
        return out
    with nogil:
        for t in range(nb):
            _mm_block(&a[t, 0, 0], &b[t, 0, 0], &o[t, 0, 0], m, k, n)
    return out


def masked_softmax_fwd(real[:, :, :, ::1] scores, cnp.uint8_t[:, :, ::1] allowed):
    """scores [B, heads, n, m], allowed [B, n, m] shared across heads."""
    cdef Py_ssize_t nb = scores.shape[0], nh = scores.shape[1]
    cdef Py_ssize_t n = scores.shape[2], m = scores.shape[3]
    cdef Py_ssize_t b, h, i, j
    cdef real mx, total, e
    cdef bint seen
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((nb, nh, n, m), dtype=dtype)
    cdef real[:, :, :, ::1] o = out
    with nogil:
        for b in range(nb):
            for h in range(nh):
                for i in range(n):
                    seen = False
                    mx = 0
                    for j in range(m):
                        if allowed[b, i, j]:
                            if not seen or scores[b, h, i, j] > mx:
                                mx = scores[b, h, i, j]
                                seen = True
                    if not seen:
                        continue
                    total = 0
                    for j in range(m):
                        if allowed[b, i, j]:
                            e = exp(scores[b, h, i, j] - mx)
                            o[b, h, i, j] = e
                            total = total + e
                    for j in range(m):
                        if allowed[b, i, j]:
                            o[b, h, i, j] = o[b, h, i, j] / total
    return out


def masked_softmax_bwd(real[:, :, :, ::1] probs, real[:, :, :, ::1] grad):
    cdef Py_ssize_t nb = probs.shape[0], nh = probs.shape[1]
    cdef Py_ssize_t n = probs.shape[2], m = probs.shape[3]
    cdef Py_ssize_t b, h, i, j
    cdef real dot
    dtype = np.float32 if real is float else np.float64
    out = np.empty((nb, nh, n, m), dtype=dtype)
    cdef real[:, :, :, ::1] o = out
    with nogil:
        for b in range(nb):
            for h in range(nh):
                for i in range(n):
                    dot = 0
                    for j in range(m):
                        dot = dot + probs[b, h, i, j] * grad[b, h, i, j]
                    for j in range(m):
                        o[b, h, i, j] = probs[b, h, i, j] * (grad[b, h, i, j] - dot)
    return out


cdef double GELU_C = 0.7978845608028654
cdef double GELU_K = 0.044715
cdef double GELU_K3 = 3 * 0.044715


def gelu_fwd(real[::1] x):
    """Returns (gelu(x), tanh term) over a flat array."""
    cdef Py_ssize_t i, n = x.shape[0]
    dtype = np.float32 if real is float else np.float64
    out = np.empty(n, dtype=dtype)
    th = np.empty(n, dtype=dtype)
    cdef real[::1] o = out
    cdef real[::1] t = th
    cdef real v
    with nogil:
        for i in range(n):
            v = x[i]
            t[i] = <real>tanh(GELU_C * (v + GELU_K * v * v * v))
            o[i] = <real>0.5 * v * (<real>1 + t[i])
    return out, th


def gelu_bwd(real[::1] x, real[::1] th, real[::1] grad):
    cdef Py_ssize_t i, n = x.shape[0]
    dtype = np.float32 if real is float else np.float64
    out = np.empty(n, dtype=dtype)
    cdef real[::1] o = out
    cdef real v, t
    with nogil:
        for i in range(n):
            v = x[i]
            t = th[i]
            o[i] = grad[i] * (
                <real>0.5 * (<real>1 + t)
                + <real>0.5 * v * (<real>1 - t * t) * <real>GELU_C * (<real>1 + <real>GELU_K3 * v * v)
            )
    return out
