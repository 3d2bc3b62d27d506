"""Batch containers shared by the objectives and the encoder."""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Sequence

import numpy as np

from camlmlab.corpus import MASK, PAD
from camlmlab.errors import DegenerateRowError


class Segment(IntEnum):
    SRC = 0
    TGT = 1
    PSEUDO = 2
    SPECIAL = 3


@dataclass
class MaskedBatch:
    """One laid-out sequence with its visibility matrix and prediction targets.

    ``allowed[i, j]`` is true when query position ``i`` may attend to key
    position ``j``. ``labels`` is ``None`` for generation batches.
    """

    tokens: np.ndarray
    pos_ids: np.ndarray
    lang_ids: np.ndarray
    allowed: np.ndarray
    predict_positions: np.ndarray
    labels: np.ndarray | None
    segment: np.ndarray

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.pos_ids = np.asarray(self.pos_ids, dtype=np.int64)
        self.lang_ids = np.asarray(self.lang_ids, dtype=np.int64)
        self.allowed = np.asarray(self.allowed, dtype=bool)
        self.predict_positions = np.asarray(self.predict_positions, dtype=np.int64)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
        self.segment = np.asarray(self.segment, dtype=np.int8)
        n = len(self.tokens)
        if self.allowed.shape != (n, n):
            raise ValueError(f"allowed is {self.allowed.shape}, expected {(n, n)}")
        empty = np.flatnonzero(~self.allowed.any(axis=1))
        if empty.size:
            raise DegenerateRowError(f"visibility row {int(empty[0])} allows no position")

    def __len__(self) -> int:
        return len(self.tokens)

    def rows(self, one_based: bool = False) -> list[set[int]]:
        """Visible column set of every row."""
        off = 1 if one_based else 0
        return [set((np.flatnonzero(r) + off).tolist()) for r in self.allowed]


@dataclass
class PackedBatch:
    """Several sequences padded to a common length.

    ``predict`` holds flat indices into the ``[B * n]`` position grid;
    ``content`` flags non-pad, non-special positions (used for pooling).
    """

    tokens: np.ndarray
    pos_ids: np.ndarray
    lang_ids: np.ndarray
    allowed: np.ndarray
    predict: np.ndarray
    labels: np.ndarray | None
    content: np.ndarray
    lengths: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.tokens.shape

    @property
    def n_tokens(self) -> int:
        return int(self.lengths.sum())


def collate(batches: Sequence[MaskedBatch]) -> PackedBatch:
    """Right-pad to the longest sequence.

    Pad columns are invisible to real rows and pad rows see only themselves,
    so padding never changes a real position's result.
    """
    if not batches:
        raise ValueError("collate needs at least one batch")
    b = len(batches)
    lengths = np.array([len(x) for x in batches], dtype=np.int64)
    n = int(lengths.max())
    tokens = np.full((b, n), PAD, dtype=np.int64)
    pos = np.zeros((b, n), dtype=np.int64)
    lang = np.zeros((b, n), dtype=np.int64)
    allowed = np.zeros((b, n, n), dtype=bool)
    content = np.zeros((b, n), dtype=bool)
    predict, labels = [], []
    has_labels = all(x.labels is not None for x in batches)
    diag = np.arange(n)
    for i, x in enumerate(batches):
        m = len(x)
        tokens[i, :m] = x.tokens
        pos[i, :m] = x.pos_ids
        lang[i, :m] = x.lang_ids
        allowed[i, :m, :m] = x.allowed
        allowed[i, diag[m:], diag[m:]] = True
        content[i, :m] = (x.segment != Segment.SPECIAL) & (x.tokens != PAD)
        predict.append(i * n + x.predict_positions)
        if has_labels:
            labels.append(x.labels)
    return PackedBatch(
        tokens=tokens,
        pos_ids=pos,
        lang_ids=lang,
        allowed=allowed,
        predict=np.concatenate(predict).astype(np.int64),
        labels=np.concatenate(labels).astype(np.int64) if has_labels else None,
        content=content,
        lengths=lengths,
    )


def is_mask(tokens: np.ndarray) -> np.ndarray:
    return np.asarray(tokens) == MASK
