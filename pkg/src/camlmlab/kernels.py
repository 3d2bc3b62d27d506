"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise, or when
``CAMLMLAB_BACKEND=python`` is set, the numpy fallback is used. Both expose
``matmul``, ``bmm``, ``masked_softmax_fwd``/``_bwd`` and ``gelu_fwd``/``_bwd``.
"""
from __future__ import annotations

import os
import types

from camlmlab import _fallback


def _load() -> tuple[types.ModuleType, str]:
    if os.environ.get("CAMLMLAB_BACKEND", "").lower() == "python":
        return _fallback, "python"
    try:
        from camlmlab import _kernels
    except ImportError:
        return _fallback, "python"
    return _kernels, "cython"


_impl, BACKEND = _load()


def use_backend(name: str) -> None:
    """Switch backends at runtime (tests and the benchmark use this)."""
    global _impl, BACKEND
    if name == "python":
        _impl, BACKEND = _fallback, "python"
    elif name == "cython":
        from camlmlab import _kernels

        _impl, BACKEND = _kernels, "cython"
    else:
        raise ValueError(f"unknown backend {name!r}")


def compiled_available() -> bool:
    try:
        from camlmlab import _kernels  # noqa: F401
    except ImportError:
        return False
    return True


def matmul(a, b):
    return _impl.matmul(a, b)


def bmm(a, b):
    return _impl.bmm(a, b)


def masked_softmax_fwd(scores, allowed):
    return _impl.masked_softmax_fwd(scores, allowed)


def masked_softmax_bwd(probs, grad):
    return _impl.masked_softmax_bwd(probs, grad)


def gelu_fwd(x):
    return _impl.gelu_fwd(x)


def gelu_bwd(x, t, grad):
    return _impl.gelu_bwd(x, t, grad)
