import os

import numpy as np
import pytest

from camlmlab.corpus import CorpusConfig, MonoSentence, SentencePair, Vocabulary, build_corpora
from camlmlab.model import ModelConfig, init_params

# 4 specials + 2 x 3 content ids; tiny models use vocab_size 11, so id 10 is a
# spare embedding row that substitution tests also exercise
TINY_VOCAB = Vocabulary(2, 3)


def tiny_model_config(**kw) -> ModelConfig:
    base = dict(layers=1, hidden=8, heads=2, ffn=16, vocab_size=11, n_langs=2, max_positions=16, dtype="float64")
    base.update(kw)
    return ModelConfig(**base)


def random_pair(rng, vocab: Vocabulary, src_len: int, tgt_len: int) -> SentencePair:
    lo0, hi0 = vocab.lang_range(0)
    lo1, hi1 = vocab.lang_range(1)
    src = MonoSentence(tuple(int(t) for t in rng.integers(lo0, hi0, src_len)), 0)
    tgt = MonoSentence(tuple(int(t) for t in rng.integers(lo1, hi1, tgt_len)), 1)
    return SentencePair(src, tgt)


@pytest.fixture(scope="session")
def small_corpora():
    return build_corpora(CorpusConfig(parallel_pairs=400, mono_per_lang=400, heldout_pairs=32, seed=3))


@pytest.fixture
def tiny_config():
    return tiny_model_config()


@pytest.fixture
def tiny_params(tiny_config):
    return init_params(tiny_config, seed=0, std=0.3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_report_header(config):
    from camlmlab import kernels

    return f"camlmlab kernels: {kernels.BACKEND} (CAMLMLAB_BACKEND={os.environ.get('CAMLMLAB_BACKEND', '')!r})"


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(ACCEPTANCE_LINES[number])


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
