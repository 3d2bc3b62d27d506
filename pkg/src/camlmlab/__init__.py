"""Cross-attention masked language modelling at desk scale.

A small numpy autodiff engine with compiled kernels, synthetic cipher-language
corpora, a pre-norm transformer encoder, the MMLM/TLM/CAMLM/BTMLM objectives,
a deterministic trainer and the evaluation harness.
"""
from camlmlab.kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
