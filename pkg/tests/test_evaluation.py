import math

import numpy as np
import pytest

from camlmlab.corpus import MonoSentence, SentencePair
from camlmlab.evaluation import (
    EXPERIMENTS,
    AblationGrid,
    AblationRow,
    FinetuneConfig,
    ProbeResult,
    RetrievalReport,
    center_rows,
    embed_sentences,
    format_table,
    hardest_negative_finetune,
    hardest_negative_loss_from_embeddings,
    make_probe_task,
    masked_perplexity,
    mono_eval_set,
    ppl_sweep,
    read_grid,
    retrieval_eval,
    retrieval_from_embeddings,
    run_ablation_row,
    train_logistic_head,
    transfer_probe,
    write_grid,
    write_ppl_table,
    PplCurve,
)
from camlmlab.model import ModelConfig, init_params, pool_middle_layer
from camlmlab.objectives import ObjectiveKind, sentence_batch
from camlmlab.tensor import tensor
from camlmlab.trainer import TrainConfig

from conftest import tiny_model_config


def softplus(x):
    return math.log1p(math.exp(-abs(x))) + max(x, 0.0)


def fake_row(exp_id, seed, top1=0.5, gap=0.1, ms=10.0):
    return AblationRow(
        exp_id=exp_id,
        objectives=[o.value for o in EXPERIMENTS[exp_id]],
        seed=seed,
        init_checksum=123,
        retrieval={"top1_ab": top1, "top1_ba": top1, "mrr_ab": top1, "mrr_ba": top1, "n_pairs": 8},
        acc_a=0.9,
        acc_b=0.9 - gap,
        gap=gap,
        mean_step_ms=ms,
    )


class TestRetrieval:
    def test_rigged_orthogonal(self):
        e = np.eye(6)
        r = retrieval_from_embeddings(e, e.copy())
        assert r.top1_ab == r.top1_ba == 1.0 and r.mrr == 1.0 and r.n_pairs == 6

    def test_identical_embeddings_tie_break(self):
        e = np.ones((8, 3))
        r = retrieval_from_embeddings(e, e)
        # every query picks candidate 0, so only query 0 is a hit
        assert r.top1_ab == r.top1_ba == 1 / 8
        # MRR under lowest-index tie-break: query i ranks i + 1
        assert r.mrr_ab == pytest.approx(np.mean(1 / np.arange(1, 9)))

    def test_rotation_invariance(self, rng):
        a = rng.standard_normal((30, 8))
        b = a + 0.8 * rng.standard_normal((30, 8))
        q, _ = np.linalg.qr(rng.standard_normal((8, 8)))
        r1 = retrieval_from_embeddings(a, b)
        r2 = retrieval_from_embeddings(a @ q, b @ q)
        assert (r1.top1_ab, r1.top1_ba) == (r2.top1_ab, r2.top1_ba)
        assert r1.mrr == pytest.approx(r2.mrr, abs=1e-12)

    def test_scale_invariance(self, rng):
        a = rng.standard_normal((10, 4))
        b = rng.standard_normal((10, 4))
        assert retrieval_from_embeddings(a, b) == retrieval_from_embeddings(3 * a, 0.5 * b)

    def test_brute_force_oracle(self, rng):
        a = rng.standard_normal((12, 5))
        b = a + rng.standard_normal((12, 5))
        r = retrieval_from_embeddings(a, b)
        hits = 0
        for i in range(12):
            cos = [a[i] @ b[j] / (np.linalg.norm(a[i]) * np.linalg.norm(b[j])) for j in range(12)]
            hits += int(np.argmax(cos) == i)
        assert r.top1_ab == hits / 12

    def test_zero_norm_names_sentence(self):
        a = np.ones((3, 2))
        b = np.ones((3, 2))
        b[2] = 0
        with pytest.raises(ValueError, match="sentence 2 on side B"):
            retrieval_from_embeddings(a, b)

    def test_needs_two_pairs(self):
        with pytest.raises(ValueError):
            retrieval_from_embeddings(np.ones((1, 2)), np.ones((1, 2)))

    def test_report_needs_pairs(self):
        with pytest.raises(ValueError):
            RetrievalReport(0, 0, 0, 0, 0)

    def test_random_init_is_chance(self, small_corpora):
        params = init_params(ModelConfig(dtype="float32", vocab_size=small_corpora.vocab.size), 0)
        r = retrieval_eval(params, small_corpora.heldout, center=False)
        n = len(small_corpora.heldout)
        sd = math.sqrt((1 / n) * (1 - 1 / n) / n)
        assert r.top1 <= 1 / n + 3 * sd

    def test_random_init_centered_no_better_than_length(self, small_corpora):
        # centering leaves the shared position signal, so sentence length is the
        # only information a random encoder can match on
        heldout = small_corpora.heldout
        lengths = np.array([len(p.tgt) for p in heldout])
        assert all(len(p.src) == len(p.tgt) for p in heldout)
        oracle = float(np.mean([1 / np.sum(lengths == k) for k in lengths]))
        for seed in range(3):
            params = init_params(ModelConfig(dtype="float32", vocab_size=small_corpora.vocab.size), seed)
            assert retrieval_eval(params, heldout).top1 <= oracle

    def test_embed_matches_pooling(self, tiny_params, rng):
        sents = [MonoSentence(tuple(int(t) for t in rng.integers(4, 10, k)), 0) for k in (3, 7, 1)]
        emb = embed_sentences(tiny_params, sents, batch_size=2)
        for s, row in zip(sents, emb):
            np.testing.assert_allclose(row, pool_middle_layer(tiny_params, sentence_batch(s)).data, atol=1e-13)

    def test_callable_embedder(self):
        pairs = [SentencePair(MonoSentence((4 + i,), 0), MonoSentence((7 + i,), 1)) for i in range(3)]
        r = retrieval_eval(lambda sents: np.eye(3)[[t.tokens[0] % 3 - 1 for t in sents]], pairs)
        assert r.top1 == 1.0


class TestCentering:
    def test_center_rows(self, rng):
        x = rng.standard_normal((6, 3)) + 5.0
        np.testing.assert_allclose(center_rows(x).mean(axis=0), 0.0, atol=1e-14)
        ref = rng.standard_normal((4, 3))
        np.testing.assert_allclose(center_rows(x, ref), x - ref.mean(axis=0), atol=1e-14)

    def test_shared_language_offset_is_removed(self, rng):
        # matched sentences share a small signal; each language adds a large constant vector
        n = 16
        signal = 0.1 * rng.standard_normal((n, 8))
        off_a, off_b = 5.0 * rng.standard_normal(8), 5.0 * rng.standard_normal(8)
        noise = 0.01 * rng.standard_normal((n, 8))
        table = {("a", i): signal[i] + off_a for i in range(n)} | {("b", i): signal[i] + off_b + noise[i] for i in range(n)}
        pairs = [SentencePair(MonoSentence((4 + i,), 0), MonoSentence((4 + i,), 1)) for i in range(n)]
        embed = lambda sents: np.stack([table[("ab"[s.lang], s.tokens[0] - 4)] for s in sents])
        assert retrieval_eval(embed, pairs).top1 == 1.0
        raw = retrieval_eval(embed, pairs, center=False)
        assert raw.top1 < 1.0
        a = embed([p.src for p in pairs])
        b = embed([p.tgt for p in pairs])
        assert raw == retrieval_from_embeddings(a, b)

    def test_probe_offset_is_removed(self, small_corpora):
        task = make_probe_task(small_corpora, n_train=100, n_test=200)

        def embed(sents):
            y = task.labels(sents).astype(float)
            shift = 0.0 if sents[0].lang == 0 else 3.0
            return np.stack([y + shift, np.ones_like(y)], axis=1)

        assert transfer_probe(embed, task).acc_b == 1.0
        assert transfer_probe(embed, task, center=False).acc_b < 0.6


class TestHardestNegative:
    def test_value_oracle(self, rng):
        a = rng.standard_normal((5, 4))
        b = rng.standard_normal((5, 4))
        tau = 0.05
        loss = hardest_negative_loss_from_embeddings(tensor(a), tensor(b), tau).item()
        an = a / np.linalg.norm(a, axis=1, keepdims=True)
        bn = b / np.linalg.norm(b, axis=1, keepdims=True)
        s = an @ bn.T
        terms = []
        for i in range(5):
            j = max((j for j in range(5) if j != i), key=lambda j: s[i, j])
            # BCE(sigmoid(z), 1) = softplus(-z); BCE(sigmoid(z), 0) = softplus(z)
            terms.append(softplus(-s[i, i] / tau) + softplus(s[i, j] / tau))
        assert loss == pytest.approx(np.mean(terms), rel=1e-12)

    def test_aligned_orthogonal_batch_is_small(self):
        e = np.eye(4)
        loss = hardest_negative_loss_from_embeddings(tensor(e), tensor(e), 0.05).item()
        assert loss == pytest.approx(softplus(-20.0) + softplus(0.0), rel=1e-12)

    def test_duplicate_pair_finite(self):
        a = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.5, 0.5]])
        loss = hardest_negative_loss_from_embeddings(tensor(a, requires_grad=True), tensor(a.copy()), 0.05)
        assert math.isfinite(loss.item())

    def test_needs_two_rows(self):
        with pytest.raises(ValueError):
            hardest_negative_loss_from_embeddings(tensor(np.ones((1, 2))), tensor(np.ones((1, 2))))

    def test_fixed_batch_descent(self, small_corpora):
        mc = tiny_model_config(layers=2, hidden=16, heads=2, ffn=32, vocab_size=small_corpora.vocab.size, max_positions=32)
        params = init_params(mc, 0, std=0.1)
        cfg = FinetuneConfig(steps=10, batch_size=8, lr=1e-4)
        tuned, losses = hardest_negative_finetune(params, small_corpora.parallel, cfg, fixed_batch=True)
        assert all(b < a for a, b in zip(losses, losses[1:]))
        # the input params are left untouched
        assert params.checksum() == init_params(mc, 0, std=0.1).checksum()
        assert tuned.checksum() != params.checksum()

    def test_batch_too_small(self, small_corpora, tiny_params):
        with pytest.raises(ValueError):
            hardest_negative_finetune(tiny_params, small_corpora.parallel, FinetuneConfig(batch_size=3))


class TestProbe:
    def test_task_labels_survive_translation(self, small_corpora):
        task = make_probe_task(small_corpora, n_train=100, n_test=200)
        np.testing.assert_array_equal(task.labels(task.test_a), task.labels(task.test_b))
        assert all(s.lang == 1 for s in task.test_b)
        rate = task.labels(task.train_a).mean()
        assert 0.35 < rate < 0.65

    def test_class_sets_are_images(self, small_corpora):
        task = make_probe_task(small_corpora, n_train=10, n_test=10)
        cipher = small_corpora.ciphers[1]
        lo, _ = small_corpora.vocab.lang_range(0)
        assert {cipher.table[t - lo] for t in task.class_a} == set(task.class_b)

    def test_identical_embeddings_majority(self, small_corpora):
        task = make_probe_task(small_corpora, n_train=100, n_test=200)
        res = transfer_probe(lambda sents: np.ones((len(sents), 3)), task)
        y = task.labels(task.test_a)
        majority = max(y.mean(), 1 - y.mean())
        assert res.acc_a == pytest.approx(majority) and res.gap == 0.0

    def test_oracle_embeddings(self, small_corpora):
        task = make_probe_task(small_corpora, n_train=100, n_test=200)

        def embed(sents):
            y = task.labels(sents).astype(float)
            return np.stack([y, np.ones_like(y)], axis=1)

        res = transfer_probe(embed, task)
        assert res.acc_a == 1.0 and res.acc_b == 1.0 and res.gap == 0.0

    def test_head_deterministic(self, rng):
        x = rng.standard_normal((50, 4))
        y = (x[:, 0] > 0).astype(int)
        h1, h2 = train_logistic_head(x, y), train_logistic_head(x, y)
        np.testing.assert_array_equal(h1[0], h2[0])

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            train_logistic_head(np.ones((5, 2)), np.zeros(5))

    def test_gap(self):
        assert ProbeResult(0.9, 0.7).gap == pytest.approx(0.2)


class TestPerplexity:
    def test_uniform_model(self, small_corpora):
        mc = ModelConfig(layers=1, hidden=8, heads=2, ffn=8, vocab_size=small_corpora.vocab.size)
        params = init_params(mc, 0)
        for _, t in params.items():
            t.data[:] = 0
        ppl = masked_perplexity(params, mono_eval_set(small_corpora, 16))
        assert ppl == pytest.approx(mc.vocab_size, rel=1e-9)

    def test_untrained_near_vocab(self, small_corpora):
        params = init_params(ModelConfig(vocab_size=small_corpora.vocab.size), 0)
        ppl = masked_perplexity(params, mono_eval_set(small_corpora, 32))
        # small random logits: close to uniform, never better than the unigram bound
        assert abs(ppl - params.config.vocab_size) / params.config.vocab_size < 0.1

    def test_eval_set(self, small_corpora):
        sents = mono_eval_set(small_corpora)
        assert len(sents) == 2 * len(small_corpora.heldout)
        assert len(mono_eval_set(small_corpora, 5)) == 5

    def test_sweep_rows(self, small_corpora, tmp_path):
        mc = ModelConfig(layers=1, hidden=16, heads=2, ffn=32, vocab_size=small_corpora.vocab.size, dtype="float32")
        tc = TrainConfig(total_steps=6, warmup_steps=1, batch_size=4, btmlm_start_step=0, checkpoint_every=100)
        curves = ppl_sweep(tc, mc, small_corpora, (0.05, 0.2), eval_every=3, n_eval=16, out_dir=tmp_path)
        assert [c.prob for c in curves] == [0.05, 0.2]
        assert all(c.steps == [0, 3, 6] for c in curves)
        lines = (tmp_path / "ppl_sweep.tsv").read_text().splitlines()
        assert lines[0] == "prob\tstep\tppl" and len(lines) == 1 + 2 * 3

    def test_sweep_bad_proportion(self, small_corpora):
        with pytest.raises(ValueError):
            ppl_sweep(TrainConfig(), ModelConfig(), small_corpora, (0.6,))

    def test_table_format(self, tmp_path):
        write_ppl_table([PplCurve(0.1, [0, 5], [500.0, 40.5])], tmp_path / "t.tsv")
        assert (tmp_path / "t.tsv").read_text() == "prob\tstep\tppl\n0.10\t0\t500.000000\n0.10\t5\t40.500000\n"


class TestAblation:
    def test_experiment_sets(self):
        assert EXPERIMENTS["exp0"] == ()
        assert set(EXPERIMENTS["exp5"]) == set(ObjectiveKind)
        assert len(EXPERIMENTS) == 6

    def test_majority(self):
        grid = AblationGrid([fake_row("exp1", s) for s in (0, 1, 2)])
        assert grid.majority(lambda s: s != 0)
        assert not grid.majority(lambda s: s == 0)

    def test_duplicate_rows_rejected(self):
        with pytest.raises(ValueError):
            AblationGrid([fake_row("exp1", 0), fake_row("exp1", 0)])

    def test_overhead_ratio(self):
        grid = AblationGrid([fake_row("exp5", 0, ms=15.0), fake_row("exp2", 0, ms=10.0)])
        assert grid.overhead_ratio() == 1.5

    def test_write_read_round_trip(self, tmp_path):
        grid = AblationGrid([fake_row(e, 0) for e in EXPERIMENTS], {"processor": "x86_64", "cpu_count": 1})
        paths = write_grid(grid, tmp_path)
        back = read_grid(paths["jsonl"])
        assert back.rows == grid.rows and back.hardware == grid.hardware
        text = paths["text"].read_text()
        assert "step-time ratio" in text and "x86_64" in text
        assert len([l for l in text.splitlines() if l.split()[:1] and l.split()[0] in EXPERIMENTS]) == 6

    def test_row_cache_and_shared_init(self, small_corpora, tmp_path):
        mc = ModelConfig(layers=1, hidden=16, heads=2, ffn=32, vocab_size=small_corpora.vocab.size, dtype="float32")
        tc = TrainConfig(total_steps=4, warmup_steps=1, batch_size=4, btmlm_start_step=0, checkpoint_every=100)
        task = make_probe_task(small_corpora, n_train=50, n_test=50)
        r0 = run_ablation_row("exp0", 0, tc, mc, small_corpora, tmp_path, task)
        r1 = run_ablation_row("exp1", 0, tc, mc, small_corpora, tmp_path, task)
        assert r0.init_checksum == r1.init_checksum
        assert r0.mean_step_ms == 0.0 and r1.mean_step_ms > 0
        assert set(r1.raw) == {"top1", "acc_a", "acc_b", "gap"}
        again = run_ablation_row("exp1", 0, tc, mc, small_corpora, tmp_path, task)
        assert again == r1

    def test_format_table(self):
        text = format_table(["a", "bb"], [[1, 0.5], ["xyz", 2]])
        assert text.splitlines() == ["a    bb", "---  ------", "1    0.5000", "xyz  2"]
