"""Pre-norm transformer encoder over an arbitrary visibility matrix.

Every head of every layer uses the batch's one ``allowed`` matrix. Token,
position and language embeddings are summed at the input; the output head is
tied to the token table and evaluated only at prediction positions.
"""
from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterator

import numpy as np

from camlmlab import ops
from camlmlab.batch import MaskedBatch, PackedBatch, collate
from camlmlab.errors import CheckpointError, ConfigError
from camlmlab.tensor import Tensor, no_grad

MAGIC = b"CAMLMLAB1"


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    hidden: int = 64
    heads: int = 4
    ffn: int = 256
    vocab_size: int = 520
    n_langs: int = 2
    max_positions: int = 64
    dropout: float = 0.0
    dtype: str = "float64"

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.layers < 0 or self.hidden < 1 or self.ffn < 1:
            raise ConfigError("layers, hidden and ffn must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def middle_layer(self) -> int:
        return math.ceil(self.layers / 2)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


class Params:
    """Named parameter tensors plus the config that shaped them."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "Params":
        return Params(
            self.config, {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.tensors.items()}
        )

    def checksum(self) -> int:
        crc = 0
        for name, t in self.tensors.items():
            crc = zlib.crc32(name.encode(), crc)
            crc = zlib.crc32(np.ascontiguousarray(t.data).tobytes(), crc)
        return crc

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    h, f = config.hidden, config.ffn
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (config.vocab_size, h),
        "pos_emb": (config.max_positions, h),
        "lang_emb": (config.n_langs, h),
    }
    for i in range(config.layers):
        p = f"blocks.{i}."
        shapes.update(
            {
                p + "ln1.gain": (h,),
                p + "ln1.bias": (h,),
                p + "attn.wq": (h, h),
                p + "attn.bq": (h,),
                p + "attn.wk": (h, h),
                p + "attn.wv": (h, h),
                p + "attn.bv": (h,),
                p + "attn.wo": (h, h),
                p + "attn.bo": (h,),
                p + "ln2.gain": (h,),
                p + "ln2.bias": (h,),
                p + "ffn.w1": (h, f),
                p + "ffn.b1": (f,),
                p + "ffn.w2": (f, h),
                p + "ffn.b2": (h,),
            }
        )
    shapes["final_ln.gain"] = (h,)
    shapes["final_ln.bias"] = (h,)
    shapes["out_bias"] = (config.vocab_size,)
    return shapes


def is_gain(name: str) -> bool:
    return name.endswith(".gain")


def is_bias(name: str) -> bool:
    return name.endswith(("bias", ".bq", ".bv", ".bo", ".b1", ".b2"))


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_params(config: ModelConfig, seed: int, std: float = 0.02) -> Params:
    """Truncated-normal weights (cut at two standard deviations), zero biases, unit gains."""
    rng = np.random.default_rng(seed)
    dtype = config.np_dtype
    tensors = {}
    for name, shape in param_shapes(config).items():
        if is_gain(name):
            data = np.ones(shape)
        elif is_bias(name):
            data = np.zeros(shape)
        else:
            data = _truncated_normal(rng, shape, std)
        tensors[name] = Tensor(data.astype(dtype), requires_grad=True)
    return Params(config, tensors)


@dataclass
class EncoderOutput:
    """``hidden[0]`` is the embedding sum; ``hidden[l]`` the residual stream after block ``l``."""

    hidden: list[Tensor]
    logits: Tensor | None


def _check_ids(params: Params, pb: PackedBatch) -> None:
    c = params.config
    if pb.tokens.size and (pb.tokens.min() < 0 or pb.tokens.max() >= c.vocab_size):
        raise IndexError(f"token id out of range [0, {c.vocab_size})")
    if pb.pos_ids.size and pb.pos_ids.max() >= c.max_positions:
        raise IndexError(f"position id {int(pb.pos_ids.max())} exceeds max_positions {c.max_positions}")
    if pb.lang_ids.size and (pb.lang_ids.min() < 0 or pb.lang_ids.max() >= c.n_langs):
        raise IndexError(f"language id out of range [0, {c.n_langs})")


def _attention(params: Params, x: Tensor, allowed: np.ndarray, prefix: str, rate: float, rng) -> Tensor:
    c = params.config
    b, n, h = x.shape
    a, d = c.heads, c.hidden // c.heads

    def heads(w, bias, axes):
        b_t = None if bias is None else params[prefix + bias]
        y = ops.reshape(ops.linear(x, params[prefix + w], b_t), (b, n, a, d))
        return ops.transpose(y, axes)

    # no key bias: it shifts each score row by a constant, which softmax cancels
    q = heads("wq", "bq", (0, 2, 1, 3))
    kt = heads("wk", None, (0, 2, 3, 1))
    v = heads("wv", "bv", (0, 2, 1, 3))
    scores = ops.scale(ops.bmm(q, kt), 1.0 / math.sqrt(d))
    probs = ops.dropout(ops.masked_softmax(scores, allowed), rate, rng)
    ctx = ops.reshape(ops.transpose(ops.bmm(probs, v), (0, 2, 1, 3)), (b, n, h))
    return ops.linear(ctx, params[prefix + "wo"], params[prefix + "bo"])


def forward(
    params: Params,
    batch: MaskedBatch | PackedBatch,
    *,
    dropout_rng: np.random.Generator | None = None,
    stop_at_layer: int | None = None,
) -> EncoderOutput:
    """Run the encoder.

    A single :class:`MaskedBatch` yields ``[n, H]`` hidden states; a
    :class:`PackedBatch` yields ``[B, n, H]``. With ``stop_at_layer`` the
    remaining blocks and the output head are skipped and ``logits`` is None.
    """
    single = isinstance(batch, MaskedBatch)
    pb = collate([batch]) if single else batch
    _check_ids(params, pb)
    c = params.config
    rate = c.dropout if dropout_rng is not None else 0.0
    b, n = pb.tokens.shape
    x = ops.add(
        ops.add(ops.embedding(params["tok_emb"], pb.tokens), ops.embedding(params["pos_emb"], pb.pos_ids)),
        ops.embedding(params["lang_emb"], pb.lang_ids),
    )
    hidden = [x]
    last = c.layers if stop_at_layer is None else stop_at_layer
    for i in range(last):
        p = f"blocks.{i}."
        h = ops.layer_norm(x, params[p + "ln1.gain"], params[p + "ln1.bias"])
        x = ops.add(x, ops.dropout(_attention(params, h, pb.allowed, p + "attn.", rate, dropout_rng), rate, dropout_rng))
        h = ops.layer_norm(x, params[p + "ln2.gain"], params[p + "ln2.bias"])
        f = ops.linear(ops.gelu(ops.linear(h, params[p + "ffn.w1"], params[p + "ffn.b1"])), params[p + "ffn.w2"], params[p + "ffn.b2"])
        x = ops.add(x, ops.dropout(f, rate, dropout_rng))
        hidden.append(x)
    logits = None
    if stop_at_layer is None:
        final = ops.layer_norm(x, params["final_ln.gain"], params["final_ln.bias"])
        rows = ops.take_rows(ops.reshape(final, (b * n, c.hidden)), pb.predict)
        logits = ops.add_bias(ops.matmul(rows, ops.transpose(params["tok_emb"], (1, 0))), params["out_bias"])
    if single:
        hidden = [ops.reshape(t, (n, c.hidden)) for t in hidden]
    return EncoderOutput(hidden, logits)


def pooling_matrix(pb: PackedBatch) -> np.ndarray:
    """[B, B*n] weights averaging each sequence's content positions."""
    b, n = pb.tokens.shape
    counts = pb.content.sum(axis=1)
    if (counts == 0).any():
        raise ValueError(f"sequence {int(np.argmax(counts == 0))} has no content position to pool")
    w = np.zeros((b, b * n))
    for i in range(b):
        w[i, i * n : (i + 1) * n] = pb.content[i] / counts[i]
    return w


def pool_middle_layer_packed(params: Params, pb: PackedBatch) -> Tensor:
    """Differentiable [B, H] mean of the middle-layer states over content positions."""
    layer = params.config.middle_layer
    out = forward(params, pb, stop_at_layer=layer)
    b, n = pb.tokens.shape
    states = ops.reshape(out.hidden[layer], (b * n, params.config.hidden))
    w = Tensor(pooling_matrix(pb).astype(params.config.np_dtype))
    return ops.matmul(w, states)


def pool_middle_layer(params: Params, batch: MaskedBatch) -> Tensor:
    """Mean of layer ceil(L/2) states over non-pad, non-[CLS], non-[SEP] positions."""
    pooled = pool_middle_layer_packed(params, collate([batch]))
    return ops.reshape(pooled, (params.config.hidden,))


# -- checkpoint files ---------------------------------------------------------


def save_checkpoint(path, params: Params, extra: dict[str, np.ndarray] | None = None, meta: dict | None = None) -> None:
    """Write ``MAGIC``, a length-prefixed JSON header, then little-endian float32 data.

    The header's manifest lists (section, name, shape, offset); ``data_bytes``
    and ``crc32`` let readers detect truncation and corruption.
    """
    entries = [("model", k, t.data) for k, t in params.items()]
    entries += [("extra", k, v) for k, v in (extra or {}).items()]
    manifest, blobs, offset = [], [], 0
    for section, name, arr in entries:
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"section": section, "name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    data = b"".join(blobs)
    header = {
        "format": 1,
        "config": asdict(params.config),
        "tensors": manifest,
        "data_bytes": len(data),
        "crc32": zlib.crc32(data),
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + data)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[Params, dict[str, np.ndarray], dict]:
    """Inverse of :func:`save_checkpoint`; returns (params, extra tensors, meta)."""
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic")
    pos = len(MAGIC)
    if len(raw) < pos + 8:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", raw[pos : pos + 8])
    pos += 8
    try:
        header = json.loads(raw[pos : pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    data = raw[pos + hlen :]
    if len(data) != header["data_bytes"]:
        raise CheckpointError(f"{path}: expected {header['data_bytes']} data bytes, found {len(data)}")
    if zlib.crc32(data) != header["crc32"]:
        raise CheckpointError(f"{path}: checksum mismatch")
    config = ModelConfig.from_dict(header["config"])
    tensors, extra = {}, {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=entry["offset"]).reshape(entry["shape"])
        arr = arr.astype(config.np_dtype)
        if entry["section"] == "model":
            tensors[entry["name"]] = Tensor(arr, requires_grad=True)
        else:
            extra[entry["name"]] = arr
    expected = param_shapes(config)
    if list(tensors) != list(expected) or any(tensors[k].shape != expected[k] for k in expected):
        raise CheckpointError(f"{path}: tensor manifest does not match the model config")
    return Params(config, tensors), extra, header.get("meta", {})


def forward_no_grad(params: Params, batch, **kw) -> EncoderOutput:
    with no_grad():
        return forward(params, batch, **kw)
