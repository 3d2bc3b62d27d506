"""Differentiable operations on :class:`~camlmlab.tensor.Tensor`.

Only the broadcasting patterns the encoder needs are supported: elementwise
ops take equal shapes, and ``add_bias`` broadcasts a vector over the last
axis. Matrix products and masked softmax go through :mod:`camlmlab.kernels`.
"""
from __future__ import annotations

import numpy as np

from camlmlab import kernels
from camlmlab.errors import DegenerateRowError, DimensionError, LabelError
from camlmlab.tensor import Tensor, make_result

def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return make_result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return make_result(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: {x.shape} vs bias {b.shape}")

    def bw(g):
        return g, g.reshape(-1, b.shape[0]).sum(axis=0)

    return make_result(x.data + b.data, (x, b), bw, "add_bias")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """[m, k] @ [k, n] -> [m, n]."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    if a.dtype != b.dtype:
        raise DimensionError(f"matmul: dtype {a.dtype} vs {b.dtype}")

    def bw(g):
        g = np.ascontiguousarray(g)
        ga = kernels.matmul(g, np.ascontiguousarray(b.data.T)) if a.requires_grad else None
        gb = kernels.matmul(np.ascontiguousarray(a.data.T), g) if b.requires_grad else None
        return ga, gb

    return make_result(kernels.matmul(a.data, b.data), (a, b), bw, "matmul")


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched product over shared leading axes: [..., m, k] @ [..., k, n]."""
    if a.ndim < 3 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"bmm: {a.shape} @ {b.shape}")
    lead = a.shape[:-2]
    m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]
    a3 = a.data.reshape(-1, m, k)
    b3 = b.data.reshape(-1, k, n)

    def bw(g):
        g3 = np.ascontiguousarray(g.reshape(-1, m, n))
        ga = gb = None
        if a.requires_grad:
            ga = kernels.bmm(g3, np.ascontiguousarray(b3.transpose(0, 2, 1))).reshape(a.shape)
        if b.requires_grad:
            gb = kernels.bmm(np.ascontiguousarray(a3.transpose(0, 2, 1)), g3).reshape(b.shape)
        return ga, gb

    return make_result(kernels.bmm(a3, b3).reshape(*lead, m, n), (a, b), bw, "bmm")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x [..., in] @ w [in, out] (+ b)."""
    lead = x.shape[:-1]
    y = matmul(reshape(x, (-1, x.shape[-1])), w)
    if b is not None:
        y = add_bias(y, b)
    return reshape(y, (*lead, w.shape[1]))


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return make_result(out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def embedding(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` indexed by integer array ``ids``."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return make_result(table.data[ids], (table,), bw, "embedding")


def take_rows(x: Tensor, rows) -> Tensor:
    """x [N, H] -> x[rows] [len(rows), H]."""
    rows = np.asarray(rows, dtype=np.int64)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, rows, g)
        return (gx,)

    return make_result(x.data[rows], (x,), bw, "take_rows")


def take(x: Tensor, flat_index) -> Tensor:
    """Gather elements of ``x`` by flat index into a 1-D tensor."""
    flat_index = np.asarray(flat_index, dtype=np.int64)

    def bw(g):
        gx = np.zeros(x.size, dtype=x.dtype)
        np.add.at(gx, flat_index, g)
        return (gx.reshape(x.shape),)

    return make_result(x.data.reshape(-1)[flat_index], (x,), bw, "take")


def _softmax_layout(scores: np.ndarray, allowed: np.ndarray):
    allowed = np.asarray(allowed, dtype=bool)
    if scores.ndim == 2:
        s4, a3 = scores[None, None], allowed.reshape(1, *allowed.shape[-2:])
    elif scores.ndim == 3:
        s4, a3 = scores[:, None], allowed
    elif scores.ndim == 4:
        s4, a3 = scores, allowed
    else:
        raise DimensionError(f"masked_softmax: unsupported rank {scores.ndim}")
    if a3.shape != (s4.shape[0], *s4.shape[2:]):
        raise DimensionError(f"masked_softmax: scores {scores.shape} vs allowed {allowed.shape}")
    return np.ascontiguousarray(s4), a3


def masked_softmax(scores: Tensor, allowed) -> Tensor:
    """Softmax of each row over its allowed columns; disallowed entries are exactly 0.

    ``scores`` is [n, m], [B, n, m] or [B, heads, n, m]; ``allowed`` is the
    boolean [n, m] or [B, n, m] visibility shared across heads.
    """
    s4, a3 = _softmax_layout(scores.data, allowed)
    empty = ~a3.any(axis=-1)
    if empty.any():
        b, i = np.argwhere(empty)[0]
        raise DegenerateRowError(f"visibility row {i} (batch {b}) allows no position")
    probs = kernels.masked_softmax_fwd(s4, np.ascontiguousarray(a3, dtype=np.uint8))

    def bw(g):
        g4 = np.ascontiguousarray(g.reshape(probs.shape))
        return (kernels.masked_softmax_bwd(probs, g4).reshape(scores.shape),)

    return make_result(probs.reshape(scores.shape), (scores,), bw, "masked_softmax")


def gelu(x: Tensor) -> Tensor:
    """0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    flat = x.data.reshape(-1)
    out, t = kernels.gelu_fwd(flat)

    def bw(g):
        return (kernels.gelu_bwd(flat, t, np.ascontiguousarray(g).reshape(-1)).reshape(x.shape),)

    return make_result(out.reshape(x.shape), (x,), bw, "gelu")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    h = x.shape[-1]
    if gain.shape != (h,) or bias.shape != (h,):
        raise DimensionError(f"layer_norm: last extent {h} vs gain {gain.shape}, bias {bias.shape}")
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def bw(g):
        g2 = g.reshape(-1, h)
        gg = (g2 * xhat.reshape(-1, h)).sum(axis=0) if gain.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gain.data
            gx = rstd * (
                gxhat
                - gxhat.mean(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, gg, gb

    return make_result(out.astype(x.dtype, copy=False), (x, gain, bias), bw, "layer_norm")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return make_result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy_logits(logits: Tensor, labels) -> Tensor:
    """Mean over rows of -log softmax(logits)[label]."""
    labels = np.asarray(labels, dtype=np.int64)
    n, v = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"cross_entropy: {n} rows but {labels.shape} labels")
    if n == 0:
        raise DimensionError("cross_entropy: no rows")
    if labels.min() < 0 or labels.max() >= v:
        bad = int(labels[(labels < 0) | (labels >= v)][0])
        raise LabelError(f"label {bad} outside [0, {v})")
    logp = log_softmax_rows(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return make_result(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "cross_entropy")


def sum(x: Tensor) -> Tensor:  # noqa: A001
    return make_result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.full_like(x.data, g),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.size
    return make_result(
        np.asarray(x.data.mean(), dtype=x.dtype), (x,), lambda g: (np.full_like(x.data, g / n),), "mean"
    )


def softplus(x: Tensor) -> Tensor:
    d = x.data
    out = np.logaddexp(0.0, d)

    def bw(g):
        return (g * 0.5 * (1.0 + np.tanh(0.5 * d)),)

    return make_result(out.astype(x.dtype, copy=False), (x,), bw, "softplus")


def l2_normalize(x: Tensor) -> Tensor:
    """Scale each row of [N, H] to unit Euclidean norm."""
    d = x.data
    norm = np.sqrt((d * d).sum(axis=-1, keepdims=True))
    if (norm == 0).any():
        raise FloatingPointError(f"zero-norm row {int(np.argmax(norm[:, 0] == 0))}")
    y = d / norm

    def bw(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return make_result(y, (x,), bw, "l2_normalize")
