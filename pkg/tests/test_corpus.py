import math

import numpy as np
import pytest

from camlmlab.corpus import (
    CipherSpec,
    CorpusConfig,
    MonoSentence,
    SentencePair,
    Vocabulary,
    build_corpora,
    cipher_translate,
    gen_corpora,
    gen_mono_sentence,
    load_corpora,
    read_corpus,
    write_corpus,
    zipf_probs,
)
from camlmlab.errors import ConfigError, CorpusFormatError

VOCAB = Vocabulary(2, 258)


class TestVocabulary:
    def test_ranges_disjoint_and_exclude_specials(self):
        v = Vocabulary(3, 10)
        ranges = [v.lang_range(k) for k in range(3)]
        assert ranges[0][0] == 4
        for (lo1, hi1), (lo2, hi2) in zip(ranges, ranges[1:]):
            assert hi1 == lo2
        assert ranges[-1][1] == v.size == 34

    def test_lang_of(self):
        assert VOCAB.lang_of(4) == 0
        assert VOCAB.lang_of(4 + 258) == 1
        with pytest.raises(ValueError):
            VOCAB.lang_of(1)


class TestMonoSentence:
    def test_same_seed_same_sentence(self):
        a = gen_mono_sentence(0, (6, 18), 1.1, 42, VOCAB)
        b = gen_mono_sentence(0, (6, 18), 1.1, 42, VOCAB)
        assert a == b

    def test_fixed_length(self):
        for seed in range(20):
            assert len(gen_mono_sentence(1, (5, 5), 1.1, seed, VOCAB)) == 5

    def test_tokens_in_language_range(self):
        lo, hi = VOCAB.lang_range(1)
        s = gen_mono_sentence(1, (30, 30), 1.1, 7, VOCAB)
        assert all(lo <= t < hi for t in s.tokens)

    def test_empty_length_range(self):
        with pytest.raises(ValueError):
            gen_mono_sentence(0, (5, 4), 1.1, 0, VOCAB)

    def test_zipf_zero_is_uniform_chi_square(self):
        # 10^5 draws over 258 ids; the chi-square statistic has mean 257 and sd sqrt(514)
        v = VOCAB
        counts = np.zeros(v.content_size)
        lo, _ = v.lang_range(0)
        drawn = 0
        seed = 0
        while drawn < 100_000:
            s = gen_mono_sentence(0, (50, 50), 0.0, seed, v)
            for t in s.tokens:
                counts[t - lo] += 1
            drawn += 50
            seed += 1
        expected = drawn / v.content_size
        chi2 = float(((counts - expected) ** 2 / expected).sum())
        dof = v.content_size - 1
        assert abs(chi2 - dof) < 3 * math.sqrt(2 * dof)

    def test_zipf_probs_normalised_and_decreasing(self):
        p = zipf_probs(258, 1.1)
        assert p.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(np.diff(p) < 0)


class TestCipher:
    def test_identity_no_swap(self):
        v = Vocabulary(2, 5)
        lo, _ = v.lang_range(0)
        spec = CipherSpec(0, 0, tuple(range(lo, lo + 5)), 0.0)
        s = MonoSentence((4, 6, 8), 0)
        out = cipher_translate(s, spec, v)
        assert out.tokens == s.tokens

    def test_offset_map(self):
        spec = CipherSpec.offset(VOCAB, 0, 1)
        out = cipher_translate(MonoSentence((10, 11), 0), spec, VOCAB)
        assert out.tokens == (10 + 258, 11 + 258)
        assert out.lang == 1

    def test_swap_rate_monte_carlo(self):
        # each of 10^5 disjoint pairs swaps with probability 0.5; sd of the rate is 0.0016
        spec = CipherSpec.offset(VOCAB, 0, 1, swap_prob=0.5)
        rng = np.random.default_rng(0)
        lo, _ = VOCAB.lang_range(0)
        s = MonoSentence(tuple(lo + np.arange(2 * 1000) % 258), 0)
        swapped = total = 0
        for _ in range(100):
            out = np.array(cipher_translate(s, spec, VOCAB, rng).tokens)
            mapped = np.array(spec.map_tokens(s.tokens, VOCAB))
            swapped += int((out[0::2] != mapped[0::2]).sum())
            total += len(out) // 2
        assert total == 100_000
        assert abs(swapped / total - 0.5) < 0.01

    def test_bijection_required(self):
        with pytest.raises(ConfigError):
            CipherSpec(0, 1, (300, 300), 0.0)

    def test_swap_prob_range(self):
        with pytest.raises(ConfigError):
            CipherSpec.offset(VOCAB, 0, 1, swap_prob=0.6)

    def test_token_outside_source_range(self):
        spec = CipherSpec.offset(VOCAB, 0, 1)
        with pytest.raises(ValueError):
            cipher_translate(MonoSentence((300,), 0), spec, VOCAB)

    def test_deterministic_without_rng(self):
        spec = CipherSpec.random(VOCAB, 0, 1, 0.3, seed=5)
        s = gen_mono_sentence(0, (12, 12), 1.1, 3, VOCAB)
        assert cipher_translate(s, spec, VOCAB) == cipher_translate(s, spec, VOCAB)

    def test_multiset_preserved(self):
        spec = CipherSpec.random(VOCAB, 0, 1, 0.4, seed=1)
        s = gen_mono_sentence(0, (15, 15), 1.1, 9, VOCAB)
        out = cipher_translate(s, spec, VOCAB, np.random.default_rng(0))
        assert sorted(out.tokens) == sorted(spec.map_tokens(s.tokens, VOCAB))


class TestCorpora:
    def test_zero_swap_heldout_is_exact_translation(self):
        cfg = CorpusConfig(parallel_pairs=50, mono_per_lang=10, heldout_pairs=20, swap_prob=0.0)
        corp = build_corpora(cfg)
        spec = corp.ciphers[1]
        for p in corp.heldout:
            assert list(p.tgt.tokens) == spec.map_tokens(p.src.tokens, cfg.vocab)

    def test_heldout_disjoint_from_training(self):
        corp = build_corpora(CorpusConfig(parallel_pairs=300, mono_per_lang=10, heldout_pairs=50, length_max=7))
        train = {p.src.tokens for p in corp.parallel}
        assert not any(p.src.tokens in train for p in corp.heldout)

    def test_mono_distribution_follows_rank_table(self):
        corp = build_corpora(CorpusConfig(parallel_pairs=0, mono_per_lang=3000, heldout_pairs=0))
        table = corp.rank_table(1)
        counts = {}
        for s in corp.mono[1]:
            for t in s.tokens:
                counts[t] = counts.get(t, 0) + 1
        assert max(counts, key=counts.get) == table[0]

    def test_gen_writes_requested_counts_and_is_reproducible(self, tmp_path):
        cfg = CorpusConfig(parallel_pairs=1000, mono_per_lang=30, heldout_pairs=16)
        paths = gen_corpora(cfg, tmp_path / "a")
        gen_corpora(cfg, tmp_path / "b")
        assert len(paths["parallel"].read_text().splitlines()) == 1000
        for name in ("parallel.txt", "heldout.txt", "mono.0.txt", "mono.1.txt", "corpus.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_load_round_trip(self, tmp_path):
        cfg = CorpusConfig(parallel_pairs=40, mono_per_lang=25, heldout_pairs=8)
        gen_corpora(cfg, tmp_path)
        corp, loaded = build_corpora(cfg), load_corpora(tmp_path)
        assert loaded.parallel == corp.parallel
        assert loaded.heldout == corp.heldout
        assert loaded.mono == corp.mono
        assert loaded.ciphers == corp.ciphers

    def test_overlapping_outputs(self, tmp_path):
        cfg = CorpusConfig(parallel_pairs=4, mono_per_lang=4, heldout_pairs=2, heldout_file="parallel.txt")
        with pytest.raises(ConfigError):
            gen_corpora(cfg, tmp_path)

    def test_rewrite_is_byte_identical(self, tmp_path):
        cfg = CorpusConfig(parallel_pairs=30, mono_per_lang=30, heldout_pairs=4)
        gen_corpora(cfg, tmp_path)
        for name in ("parallel.txt", "mono.1.txt"):
            items = list(read_corpus(tmp_path / name))
            write_corpus(tmp_path / ("copy." + name), items)
            assert (tmp_path / name).read_bytes() == (tmp_path / ("copy." + name)).read_bytes()

    def test_four_languages(self):
        corp = build_corpora(CorpusConfig(n_langs=4, parallel_pairs=9, mono_per_lang=3, heldout_pairs=3))
        assert {p.tgt.lang for p in corp.parallel} == {1, 2, 3}
        assert sorted(corp.mono) == [0, 1, 2, 3]


class TestCorpusFiles:
    def test_round_trip(self, tmp_path):
        items = [
            MonoSentence((5, 6, 7), 0),
            SentencePair(MonoSentence((5,), 0), MonoSentence((300, 301), 1)),
        ]
        write_corpus(tmp_path / "c.txt", items)
        assert list(read_corpus(tmp_path / "c.txt")) == items
        assert (tmp_path / "c.txt").read_text() == "lang=0\t5 6 7\nlang=0\t5\tlang=1\t300 301\n"

    def test_empty_file(self, tmp_path):
        (tmp_path / "e.txt").write_text("")
        assert list(read_corpus(tmp_path / "e.txt")) == []

    def test_bad_token_names_line(self, tmp_path):
        (tmp_path / "bad.txt").write_text("lang=0\t5 6\nlang=0\t5 x 7\n")
        with pytest.raises(CorpusFormatError) as err:
            list(read_corpus(tmp_path / "bad.txt"))
        assert err.value.lineno == 2
        assert "x" in str(err.value)

    def test_bad_field_count(self, tmp_path):
        (tmp_path / "bad.txt").write_text("lang=0\t5\tlang=1\n")
        with pytest.raises(CorpusFormatError):
            list(read_corpus(tmp_path / "bad.txt"))
