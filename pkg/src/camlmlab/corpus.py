"""Synthetic cipher-language corpora with known ground-truth alignment.

Language 0 is the base language. Every other language ``k`` is a token
bijection of the base (plus adjacent-pair swaps), so each parallel pair comes
with its exact translation. Token frequencies follow a Zipf law over ranks;
the rank order of language ``k`` is the base rank order pushed through its
bijection, so monolingual and parallel text share one distribution.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from camlmlab.errors import ConfigError, CorpusFormatError

PAD, MASK, CLS, SEP = 0, 1, 2, 3
N_SPECIALS = 4

# Stream ids mixed into per-sentence seeds.
_PARALLEL, _HELDOUT, _MONO = 1, 2, 16


@dataclass(frozen=True)
class Vocabulary:
    n_langs: int = 2
    content_size: int = 258

    def __post_init__(self):
        if not 1 <= self.n_langs <= 8:
            raise ConfigError(f"n_langs must be in [1, 8], got {self.n_langs}")
        if self.content_size < 1:
            raise ConfigError("content_size must be positive")

    @property
    def size(self) -> int:
        return N_SPECIALS + self.n_langs * self.content_size

    def lang_range(self, lang: int) -> tuple[int, int]:
        """Half-open id range ``[lo, hi)`` of a language's content tokens."""
        if not 0 <= lang < self.n_langs:
            raise ValueError(f"unknown language {lang}")
        lo = N_SPECIALS + lang * self.content_size
        return lo, lo + self.content_size

    def lang_of(self, token: int) -> int:
        if token < N_SPECIALS or token >= self.size:
            raise ValueError(f"token {token} is not a content token")
        return (token - N_SPECIALS) // self.content_size


@dataclass(frozen=True)
class MonoSentence:
    tokens: tuple[int, ...]
    lang: int

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class SentencePair:
    src: MonoSentence
    tgt: MonoSentence
    aligned: bool = True


@dataclass(frozen=True)
class CipherSpec:
    """Bijection from ``src_lang`` content tokens onto ``tgt_lang`` content tokens.

    ``table[i]`` is the target id of source id ``lo_src + i``.
    """

    src_lang: int
    tgt_lang: int
    table: tuple[int, ...]
    swap_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "table", tuple(int(t) for t in self.table))
        if not 0.0 <= self.swap_prob <= 0.5:
            raise ConfigError(f"swap_prob must be in [0, 0.5], got {self.swap_prob}")
        if len(set(self.table)) != len(self.table):
            raise ConfigError("cipher table is not a bijection")

    @classmethod
    def random(cls, vocab: Vocabulary, src_lang: int, tgt_lang: int, swap_prob: float, seed: int) -> "CipherSpec":
        rng = np.random.default_rng([seed, src_lang, tgt_lang])
        lo, _ = vocab.lang_range(tgt_lang)
        return cls(src_lang, tgt_lang, tuple(lo + rng.permutation(vocab.content_size)), swap_prob, seed)

    @classmethod
    def offset(cls, vocab: Vocabulary, src_lang: int, tgt_lang: int, swap_prob: float = 0.0, seed: int = 0):
        lo, _ = vocab.lang_range(tgt_lang)
        return cls(src_lang, tgt_lang, tuple(range(lo, lo + vocab.content_size)), swap_prob, seed)

    def map_tokens(self, tokens: Iterable[int], vocab: Vocabulary) -> list[int]:
        lo, hi = vocab.lang_range(self.src_lang)
        out = []
        for t in tokens:
            if not lo <= t < hi:
                raise ValueError(f"token {t} outside source language {self.src_lang} range [{lo}, {hi})")
            out.append(self.table[t - lo])
        return out


def zipf_probs(size: int, zipf_s: float) -> np.ndarray:
    """P(rank r) proportional to (r + 1)^-s; s = 0 is uniform."""
    w = np.arange(1, size + 1, dtype=np.float64) ** -float(zipf_s)
    return w / w.sum()


def gen_mono_sentence(
    lang: int,
    length_range: tuple[int, int],
    zipf_s: float,
    seed,
    vocab: Vocabulary = Vocabulary(),
    rank_table: np.ndarray | None = None,
) -> MonoSentence:
    """Sample one sentence; ``seed`` is anything ``np.random.default_rng`` accepts.

    ``rank_table[r]`` is the token of rank ``r``; by default the language's
    ids in increasing order.
    """
    lo_len, hi_len = length_range
    if lo_len < 1 or lo_len > hi_len:
        raise ValueError(f"empty length range {length_range}")
    if rank_table is None:
        lo, hi = vocab.lang_range(lang)
        rank_table = np.arange(lo, hi)
    rng = np.random.default_rng(seed)
    n = int(rng.integers(lo_len, hi_len + 1))
    ranks = rng.choice(len(rank_table), size=n, p=zipf_probs(len(rank_table), zipf_s))
    return MonoSentence(tuple(np.asarray(rank_table)[ranks]), lang)


def cipher_translate(
    s: MonoSentence, spec: CipherSpec, vocab: Vocabulary = Vocabulary(), rng: np.random.Generator | None = None
) -> MonoSentence:
    """Map tokens through the bijection, then swap disjoint adjacent pairs.

    Pair ``(2i, 2i+1)`` swaps independently with ``spec.swap_prob``. Without
    an explicit ``rng`` the swaps are seeded by ``(spec.seed, s.tokens)``.
    """
    if s.lang != spec.src_lang:
        raise ValueError(f"sentence language {s.lang} is not the cipher source {spec.src_lang}")
    out = spec.map_tokens(s.tokens, vocab)
    if rng is None:
        digest = zlib.crc32(np.asarray(s.tokens, dtype=np.int64).tobytes())
        rng = np.random.default_rng([spec.seed, digest])
    swaps = rng.random(len(out) // 2) < spec.swap_prob
    for i in np.flatnonzero(swaps):
        out[2 * i], out[2 * i + 1] = out[2 * i + 1], out[2 * i]
    return MonoSentence(tuple(out), spec.tgt_lang)


@dataclass
class CorpusConfig:
    n_langs: int = 2
    content_size: int = 258
    parallel_pairs: int = 20000
    mono_per_lang: int = 40000
    heldout_pairs: int = 256
    length_min: int = 6
    length_max: int = 18
    zipf_s: float = 1.1
    swap_prob: float = 0.1
    seed: int = 0
    parallel_file: str = "parallel.txt"
    heldout_file: str = "heldout.txt"
    mono_file: str = "mono.{lang}.txt"

    def validate(self) -> None:
        for name in ("parallel_pairs", "mono_per_lang", "heldout_pairs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.parallel_pairs + self.mono_per_lang + self.heldout_pairs == 0:
            raise ConfigError("corpus sizes are all zero")
        if self.n_langs < 2 and (self.parallel_pairs or self.heldout_pairs):
            raise ConfigError("parallel data needs at least two languages")
        if not 1 <= self.length_min <= self.length_max:
            raise ConfigError(f"bad length range [{self.length_min}, {self.length_max}]")
        if "{lang}" not in self.mono_file:
            raise ConfigError("mono_file must contain '{lang}'")

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary(self.n_langs, self.content_size)

    @property
    def length_range(self) -> tuple[int, int]:
        return self.length_min, self.length_max

    def ciphers(self) -> dict[int, CipherSpec]:
        """One bijection from the base language onto each other language."""
        return {
            k: CipherSpec.random(self.vocab, 0, k, self.swap_prob, self.seed) for k in range(1, self.n_langs)
        }

    def output_names(self) -> list[str]:
        names = [self.parallel_file, self.heldout_file] + [
            self.mono_file.format(lang=k) for k in range(self.n_langs)
        ]
        return names


@dataclass
class Corpora:
    config: CorpusConfig
    ciphers: dict[int, CipherSpec]
    parallel: list[SentencePair] = field(default_factory=list)
    heldout: list[SentencePair] = field(default_factory=list)
    mono: dict[int, list[MonoSentence]] = field(default_factory=dict)

    @property
    def vocab(self) -> Vocabulary:
        return self.config.vocab

    def rank_table(self, lang: int) -> np.ndarray:
        if lang == 0:
            lo, hi = self.vocab.lang_range(0)
            return np.arange(lo, hi)
        return np.asarray(self.ciphers[lang].table)

    def translate(self, s: MonoSentence, tgt_lang: int, rng=None) -> MonoSentence:
        return cipher_translate(s, self.ciphers[tgt_lang], self.vocab, rng)


def _pair(config: CorpusConfig, ciphers, stream: int, i: int) -> SentencePair:
    vocab = config.vocab
    tgt_lang = 1 + i % (config.n_langs - 1)
    src = gen_mono_sentence(0, config.length_range, config.zipf_s, [config.seed, stream, i, 0], vocab)
    rng = np.random.default_rng([config.seed, stream, i, 1])
    return SentencePair(src, cipher_translate(src, ciphers[tgt_lang], vocab, rng))


def build_corpora(config: CorpusConfig) -> Corpora:
    """Generate all sentences in memory; every sentence has its own derived seed."""
    config.validate()
    ciphers = config.ciphers()
    corp = Corpora(config, ciphers)
    corp.parallel = [_pair(config, ciphers, _PARALLEL, i) for i in range(config.parallel_pairs)]
    seen = {p.src.tokens for p in corp.parallel}
    i = 0
    while len(corp.heldout) < config.heldout_pairs:
        pair = _pair(config, ciphers, _HELDOUT, i)
        i += 1
        if pair.src.tokens not in seen:
            seen.add(pair.src.tokens)
            corp.heldout.append(pair)
    for lang in range(config.n_langs):
        table = corp.rank_table(lang)
        corp.mono[lang] = [
            gen_mono_sentence(
                lang, config.length_range, config.zipf_s, [config.seed, _MONO + lang, j], config.vocab, table
            )
            for j in range(config.mono_per_lang)
        ]
    return corp


def gen_corpora(config: CorpusConfig, out_dir) -> dict[str, Path]:
    """Write parallel, held-out and per-language monolingual files plus a manifest."""
    config.validate()
    names = config.output_names() + ["corpus.json"]
    if len(set(names)) != len(names):
        raise ConfigError(f"overlapping output paths: {names}")
    corp = build_corpora(config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"parallel": out / config.parallel_file, "heldout": out / config.heldout_file}
    write_corpus(paths["parallel"], corp.parallel)
    write_corpus(paths["heldout"], corp.heldout)
    for lang, sents in corp.mono.items():
        paths[f"mono.{lang}"] = out / config.mono_file.format(lang=lang)
        write_corpus(paths[f"mono.{lang}"], sents)
    manifest = {
        "config": asdict(config),
        "ciphers": {str(k): list(c.table) for k, c in corp.ciphers.items()},
    }
    paths["manifest"] = out / "corpus.json"
    paths["manifest"].write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return paths


def load_corpora(data_dir) -> Corpora:
    """Read a directory written by :func:`gen_corpora`."""
    root = Path(data_dir)
    manifest = json.loads((root / "corpus.json").read_text(encoding="utf-8"))
    config = CorpusConfig(**manifest["config"])
    ciphers = {
        int(k): CipherSpec(0, int(k), tuple(v), config.swap_prob, config.seed) for k, v in manifest["ciphers"].items()
    }
    corp = Corpora(config, ciphers)
    corp.parallel = list(read_corpus(root / config.parallel_file))
    corp.heldout = list(read_corpus(root / config.heldout_file))
    for lang in range(config.n_langs):
        corp.mono[lang] = list(read_corpus(root / config.mono_file.format(lang=lang)))
    return corp


def format_line(item: MonoSentence | SentencePair) -> str:
    if isinstance(item, SentencePair):
        return f"{format_line(item.src)}\t{format_line(item.tgt)}"
    return f"lang={item.lang}\t" + " ".join(str(t) for t in item.tokens)


def write_corpus(path, items: Iterable[MonoSentence | SentencePair]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for item in items:
            fh.write(format_line(item) + "\n")


def _parse_sentence(lang_field: str, ids_field: str, path, lineno) -> MonoSentence:
    if not lang_field.startswith("lang="):
        raise CorpusFormatError(path, lineno, f"expected 'lang=<id>', got {lang_field!r}")
    try:
        lang = int(lang_field[5:])
    except ValueError:
        raise CorpusFormatError(path, lineno, f"non-integer language id {lang_field[5:]!r}") from None
    parts = ids_field.split(" ")
    try:
        tokens = tuple(int(p) for p in parts)
    except ValueError:
        bad = next(p for p in parts if not p.lstrip("-").isdigit())
        raise CorpusFormatError(path, lineno, f"non-integer token {bad!r}") from None
    return MonoSentence(tokens, lang)


def read_corpus(path) -> Iterator[MonoSentence | SentencePair]:
    """Yield sentences (2-field lines) or pairs (4-field lines)."""
    with open(path, "r", encoding="utf-8", newline="\n") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw[:-1] if raw.endswith("\n") else raw
            fields = line.split("\t")
            if len(fields) == 2:
                yield _parse_sentence(fields[0], fields[1], path, lineno)
            elif len(fields) == 4:
                yield SentencePair(
                    _parse_sentence(fields[0], fields[1], path, lineno),
                    _parse_sentence(fields[2], fields[3], path, lineno),
                )
            else:
                raise CorpusFormatError(path, lineno, f"expected 2 or 4 tab-separated fields, got {len(fields)}")
