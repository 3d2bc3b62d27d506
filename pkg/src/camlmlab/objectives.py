"""Batch builders and losses for MMLM, TLM, CAMLM and the two BTMLM stages.

Each objective is a token layout plus a visibility matrix:

* MMLM: ``[CLS] s [SEP]``, full visibility.
* TLM: ``[CLS] src [SEP] tgt [SEP]``, full visibility.
* CAMLM: same layout; masked tokens of one sentence see only the other.
* BTMLM stage 1: ``[CLS] s [SEP]`` plus placeholder masks that see the
  source and themselves; stage 2: ``[CLS] s [SEP] P [SEP]``, full visibility,
  loss on the masked tokens of ``s`` only.

In pair batches the target's position ids restart at 1 by default, so
``y_j`` shares a position with ``x_j``. BTMLM batches number the whole
sequence continuously, so placeholders follow the source.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from camlmlab import ops
from camlmlab.batch import MaskedBatch, PackedBatch, Segment, collate
from camlmlab.corpus import CLS, MASK, N_SPECIALS, SEP, MonoSentence, SentencePair, Vocabulary
from camlmlab.model import Params, forward
from camlmlab.tensor import Tensor, no_grad


class ObjectiveKind(str, Enum):
    MMLM = "mmlm"
    TLM = "tlm"
    CAMLM = "camlm"
    BTMLM = "btmlm"


@dataclass(frozen=True)
class MaskingPolicy:
    mask_rate: float = 0.15
    mask_frac: float = 0.8
    random_frac: float = 0.1
    keep_frac: float = 0.1
    seed: int = 0

    def __post_init__(self):
        total = self.mask_frac + self.random_frac + self.keep_frac
        if abs(total - 1.0) > 1e-9 or min(self.mask_frac, self.random_frac, self.keep_frac) < 0:
            raise ValueError(f"replacement fractions must be non-negative and sum to 1, got {total}")
        if not 0.0 <= self.mask_rate <= 1.0:
            raise ValueError(f"mask_rate must be in [0, 1], got {self.mask_rate}")


MASK_ONLY = MaskingPolicy(mask_frac=1.0, random_frac=0.0, keep_frac=0.0)


def apply_masking(
    tokens: Sequence[int],
    policy: MaskingPolicy,
    rng: np.random.Generator | None = None,
    vocab: Vocabulary = Vocabulary(),
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """BERT-style corruption: returns (corrupted tokens, positions, labels).

    The number of masked positions is ``mask_rate * n`` with stochastic
    rounding, never below one. Special tokens are never chosen. Random
    replacements come from the original token's language.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size == 0:
        raise ValueError("cannot mask an empty token list")
    rng = np.random.default_rng(policy.seed) if rng is None else rng
    eligible = np.flatnonzero(tokens >= N_SPECIALS)
    if eligible.size == 0:
        raise ValueError("no maskable (content) token")
    target = policy.mask_rate * eligible.size
    k = int(np.floor(target + rng.random()))
    k = min(max(k, 1), eligible.size)
    positions = np.sort(rng.choice(eligible, size=k, replace=False))
    labels = tokens[positions].copy()
    corrupted = tokens.copy()
    draws = rng.random(k)
    replacements = rng.random(k)
    for pos, lab, u, r in zip(positions, labels, draws, replacements):
        if u < policy.mask_frac:
            corrupted[pos] = MASK
        elif u < policy.mask_frac + policy.random_frac:
            lo, hi = vocab.lang_range(vocab.lang_of(int(lab)))
            corrupted[pos] = lo + int(r * (hi - lo))
    return corrupted, positions, labels


def _check_len(n: int, max_len: int, what: str) -> None:
    if n > max_len:
        raise ValueError(f"{what} needs {n} positions, exceeds max_len {max_len}")


def build_mmlm_batch(
    s: MonoSentence,
    policy: MaskingPolicy,
    rng: np.random.Generator | None = None,
    vocab: Vocabulary = Vocabulary(),
    max_len: int = 64,
) -> MaskedBatch:
    n = len(s) + 2
    _check_len(n, max_len, "MMLM batch")
    corrupted, pos, labels = apply_masking(s.tokens, policy, rng, vocab)
    return MaskedBatch(
        tokens=np.concatenate([[CLS], corrupted, [SEP]]),
        pos_ids=np.arange(n),
        lang_ids=np.full(n, s.lang),
        allowed=np.ones((n, n), dtype=bool),
        predict_positions=pos + 1,
        labels=labels,
        segment=[Segment.SPECIAL] + [Segment.SRC] * len(s) + [Segment.SPECIAL],
    )


def sentence_batch(s: MonoSentence, max_len: int = 64) -> MaskedBatch:
    """Unmasked ``[CLS] s [SEP]`` with full visibility (for pooling)."""
    n = len(s) + 2
    _check_len(n, max_len, "sentence")
    return MaskedBatch(
        tokens=np.concatenate([[CLS], s.tokens, [SEP]]),
        pos_ids=np.arange(n),
        lang_ids=np.full(n, s.lang),
        allowed=np.ones((n, n), dtype=bool),
        predict_positions=np.zeros(0, dtype=np.int64),
        labels=np.zeros(0, dtype=np.int64),
        segment=[Segment.SPECIAL] + [Segment.SRC] * len(s) + [Segment.SPECIAL],
    )


def _pair_layout(p: SentencePair, src_tokens, tgt_tokens):
    s, t = len(p.src), len(p.tgt)
    tokens = np.concatenate([[CLS], src_tokens, [SEP], tgt_tokens, [SEP]])
    lang = np.array([p.src.lang] * (s + 2) + [p.tgt.lang] * (t + 1))
    segment = [Segment.SPECIAL] + [Segment.SRC] * s + [Segment.SPECIAL] + [Segment.TGT] * t + [Segment.SPECIAL]
    src_idx = np.arange(0, s + 2)
    tgt_idx = np.arange(s + 2, s + t + 3)
    return tokens, lang, segment, src_idx, tgt_idx


def pair_pos_ids(src_len: int, tgt_len: int, positions: str = "reset") -> np.ndarray:
    """Position ids for ``[CLS] src [SEP] tgt [SEP]``.

    "reset" restarts the count for the target, so ``y_j`` shares its
    position id with ``x_j``; "continuous" numbers the whole sequence.
    """
    if positions == "continuous":
        return np.arange(src_len + tgt_len + 3)
    if positions == "reset":
        return np.concatenate([np.arange(src_len + 2), np.arange(1, tgt_len + 2)])
    raise ValueError(f"unknown pair position scheme {positions!r}")


def _mask_pair(p, policy, rng, vocab, sides):
    s_tok, s_pos, s_lab = np.asarray(p.src.tokens), np.zeros(0, np.int64), np.zeros(0, np.int64)
    t_tok, t_pos, t_lab = np.asarray(p.tgt.tokens), np.zeros(0, np.int64), np.zeros(0, np.int64)
    if "src" in sides:
        s_tok, s_pos, s_lab = apply_masking(p.src.tokens, policy, rng, vocab)
    if "tgt" in sides:
        t_tok, t_pos, t_lab = apply_masking(p.tgt.tokens, policy, rng, vocab)
    return s_tok, s_pos + 1, s_lab, t_tok, t_pos + len(p.src) + 2, t_lab


def build_tlm_batch(
    p: SentencePair,
    policy: MaskingPolicy,
    rng: np.random.Generator | None = None,
    vocab: Vocabulary = Vocabulary(),
    max_len: int = 64,
    mask_sides: Sequence[str] = ("src", "tgt"),
    positions: str = "reset",
) -> MaskedBatch:
    n = len(p.src) + len(p.tgt) + 3
    _check_len(n, max_len, "TLM batch")
    rng = np.random.default_rng(policy.seed) if rng is None else rng
    s_tok, s_pos, s_lab, t_tok, t_pos, t_lab = _mask_pair(p, policy, rng, vocab, mask_sides)
    tokens, lang, segment, _, _ = _pair_layout(p, s_tok, t_tok)
    return MaskedBatch(
        tokens=tokens,
        pos_ids=pair_pos_ids(len(p.src), len(p.tgt), positions),
        lang_ids=lang,
        allowed=np.ones((n, n), dtype=bool),
        predict_positions=np.concatenate([s_pos, t_pos]),
        labels=np.concatenate([s_lab, t_lab]),
        segment=segment,
    )


def camlm_attention_mask(
    src_idx: Sequence[int],
    tgt_idx: Sequence[int],
    masked_src: Sequence[int],
    masked_tgt: Sequence[int],
    mode: str = "strict",
    n: int | None = None,
) -> np.ndarray:
    """Visibility matrix for cross-attention masked LM (0-based positions).

    strict: a masked source row sees the unmasked target positions and
    itself; a masked target row the unmasked source positions and itself; an
    unmasked row sees the unmasked positions of its own segment. No masked
    row can then reach its own segment's content through any number of layers.

    figure: a masked row sees the whole other segment and itself; an unmasked
    row sees its whole own segment.
    """
    src, tgt = set(map(int, src_idx)), set(map(int, tgt_idx))
    msrc, mtgt = set(map(int, masked_src)), set(map(int, masked_tgt))
    if src & tgt:
        raise ValueError(f"source and target segments overlap at {sorted(src & tgt)}")
    if not msrc <= src or not mtgt <= tgt:
        raise ValueError("masked positions must lie inside their own segment")
    if mode not in ("strict", "figure"):
        raise ValueError(f"unknown CAMLM mask mode {mode!r}")
    if n is None:
        n = max(src | tgt) + 1
    allowed = np.zeros((n, n), dtype=bool)
    src_l, tgt_l = sorted(src), sorted(tgt)
    keep_src, keep_tgt = sorted(src - msrc), sorted(tgt - mtgt)
    for i in range(n):
        allowed[i, i] = True
        if mode == "strict":
            if i in msrc:
                allowed[i, keep_tgt] = True
            elif i in mtgt:
                allowed[i, keep_src] = True
            elif i in src:
                allowed[i, keep_src] = True
            elif i in tgt:
                allowed[i, keep_tgt] = True
        else:
            if i in msrc:
                allowed[i, tgt_l] = True
            elif i in mtgt:
                allowed[i, src_l] = True
            elif i in src:
                allowed[i, src_l] = True
            elif i in tgt:
                allowed[i, tgt_l] = True
    return allowed


def build_camlm_batch(
    p: SentencePair,
    policy: MaskingPolicy,
    mode: str = "strict",
    rng: np.random.Generator | None = None,
    vocab: Vocabulary = Vocabulary(),
    max_len: int = 64,
    positions: str = "reset",
) -> MaskedBatch:
    """Both directions in one batch: predict positions are M_src then M_tgt."""
    n = len(p.src) + len(p.tgt) + 3
    _check_len(n, max_len, "CAMLM batch")
    rng = np.random.default_rng(policy.seed) if rng is None else rng
    s_tok, s_pos, s_lab, t_tok, t_pos, t_lab = _mask_pair(p, policy, rng, vocab, ("src", "tgt"))
    tokens, lang, segment, src_idx, tgt_idx = _pair_layout(p, s_tok, t_tok)
    return MaskedBatch(
        tokens=tokens,
        pos_ids=pair_pos_ids(len(p.src), len(p.tgt), positions),
        lang_ids=lang,
        allowed=camlm_attention_mask(src_idx, tgt_idx, s_pos, t_pos, mode, n),
        predict_positions=np.concatenate([s_pos, t_pos]),
        labels=np.concatenate([s_lab, t_lab]),
        segment=segment,
    )


def btmlm_stage1_mask(n_src: int, n_placeholders: int) -> np.ndarray:
    """Source rows see the source; placeholder rows see the source and themselves."""
    n = n_src + n_placeholders
    allowed = np.zeros((n, n), dtype=bool)
    allowed[:, :n_src] = True
    idx = np.arange(n_src, n)
    allowed[idx, idx] = True
    return allowed


def pseudo_count(length: int, prob: float) -> int:
    return max(1, int(round(prob * length)))


def build_btmlm_stage1_batch(s: MonoSentence, p: int, tgt_lang: int, max_len: int = 64) -> MaskedBatch:
    """``[CLS] s [SEP]`` followed by ``p`` placeholder masks in ``tgt_lang``; no labels."""
    if p < 1:
        raise ValueError("need at least one placeholder")
    n_src = len(s) + 2
    n = n_src + p
    _check_len(n, max_len, "BTMLM stage-1 batch")
    return MaskedBatch(
        tokens=np.concatenate([[CLS], s.tokens, [SEP], np.full(p, MASK)]),
        pos_ids=np.arange(n),
        lang_ids=np.array([s.lang] * n_src + [tgt_lang] * p),
        allowed=btmlm_stage1_mask(n_src, p),
        predict_positions=np.arange(n_src, n),
        labels=None,
        segment=[Segment.SPECIAL] + [Segment.SRC] * len(s) + [Segment.SPECIAL] + [Segment.PSEUDO] * p,
    )


def generate_pseudo_tokens(
    params: Params,
    batches: MaskedBatch | Sequence[MaskedBatch],
    vocab: Vocabulary,
    decode: str = "argmax",
    temperature: float = 1.0,
    rng: np.random.Generator | None = None,
    restrict: bool = True,
) -> list[int] | list[list[int]]:
    """One no-grad forward pass over stage-1 batches; one token per placeholder.

    With ``restrict`` the choice is limited to the placeholder language's
    content range.
    """
    single = isinstance(batches, MaskedBatch)
    items = [batches] if single else list(batches)
    pb = collate(items)
    with no_grad():
        logits = forward(params, pb).logits.data.astype(np.float64)
    placeholder_lang = pb.lang_ids.reshape(-1)[pb.predict]
    if restrict:
        masked = np.full_like(logits, -np.inf)
        for lang in np.unique(placeholder_lang):
            lo, hi = vocab.lang_range(int(lang))
            rows = placeholder_lang == lang
            masked[np.ix_(rows, np.arange(lo, hi))] = logits[np.ix_(rows, np.arange(lo, hi))]
        logits = masked
    if decode == "argmax":
        ids = logits.argmax(axis=1)
    elif decode == "sample":
        if rng is None:
            raise ValueError("sampling needs an rng")
        z = logits / temperature
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        ids = np.array([rng.choice(p.shape[1], p=row) for row in p])
    else:
        raise ValueError(f"unknown decode {decode!r}")
    out, start = [], 0
    for item in items:
        k = len(item.predict_positions)
        out.append([int(t) for t in ids[start : start + k]])
        start += k
    return out[0] if single else out


def build_btmlm_stage2_batch(
    s: MonoSentence,
    policy: MaskingPolicy,
    pseudo: Sequence[int],
    tgt_lang: int,
    rng: np.random.Generator | None = None,
    vocab: Vocabulary = Vocabulary(),
    max_len: int = 64,
) -> MaskedBatch:
    """``[CLS] corrupted(s) [SEP] P [SEP]``; only masked tokens of ``s`` are predicted."""
    if len(pseudo) < 1:
        raise ValueError("stage 2 needs at least one pseudo token")
    n_src = len(s) + 2
    n = n_src + len(pseudo) + 1
    _check_len(n, max_len, "BTMLM stage-2 batch")
    corrupted, pos, labels = apply_masking(s.tokens, policy, rng, vocab)
    return MaskedBatch(
        tokens=np.concatenate([[CLS], corrupted, [SEP], np.asarray(pseudo, dtype=np.int64), [SEP]]),
        pos_ids=np.arange(n),
        lang_ids=np.array([s.lang] * n_src + [tgt_lang] * (len(pseudo) + 1)),
        allowed=np.ones((n, n), dtype=bool),
        predict_positions=pos + 1,
        labels=labels,
        segment=[Segment.SPECIAL]
        + [Segment.SRC] * len(s)
        + [Segment.SPECIAL]
        + [Segment.PSEUDO] * len(pseudo)
        + [Segment.SPECIAL],
    )


def objective_loss(params: Params, batch: MaskedBatch | PackedBatch, dropout_rng=None) -> Tensor:
    """Mean negative log-likelihood over the batch's prediction positions."""
    labels = batch.labels
    if labels is None:
        raise ValueError("batch has no labels (generation batch?)")
    out = forward(params, batch, dropout_rng=dropout_rng)
    return ops.cross_entropy_logits(out.logits, labels)
