"""Evaluation: cross-lingual retrieval, hardest-negative retrieval fine-tuning,
a synthetic transfer probe, masked-LM perplexity sweeps and the objective
ablation grid.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import platform
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from camlmlab import kernels, ops
from camlmlab.batch import collate
from camlmlab.corpus import Corpora, MonoSentence, SentencePair, gen_mono_sentence
from camlmlab.model import ModelConfig, Params, init_params, load_checkpoint, pool_middle_layer_packed
from camlmlab.objectives import MASK_ONLY, ObjectiveKind, build_mmlm_batch, objective_loss, sentence_batch
from camlmlab.tensor import Tensor, backward, no_grad
from camlmlab.trainer import OptimizerState, TrainConfig, adam_step, clip_gradients, run_training, summarize_records

log = logging.getLogger(__name__)

Embedder = Callable[[Sequence[MonoSentence]], np.ndarray]


# -- retrieval ----------------------------------------------------------------


@dataclass
class RetrievalReport:
    top1_ab: float
    top1_ba: float
    mrr_ab: float
    mrr_ba: float
    n_pairs: int

    def __post_init__(self):
        if self.n_pairs <= 0:
            raise ValueError("retrieval report needs at least one pair")

    @property
    def top1(self) -> float:
        """Mean of both directions."""
        return 0.5 * (self.top1_ab + self.top1_ba)

    @property
    def mrr(self) -> float:
        return 0.5 * (self.mrr_ab + self.mrr_ba)


def embed_sentences(params: Params, sentences: Sequence[MonoSentence], batch_size: int = 64) -> np.ndarray:
    """Middle-layer mean-pooled embeddings, float64 ``[N, H]``."""
    out = []
    max_len = params.config.max_positions
    with no_grad():
        for i in range(0, len(sentences), batch_size):
            pb = collate([sentence_batch(s, max_len) for s in sentences[i : i + batch_size]])
            out.append(pool_middle_layer_packed(params, pb).data.astype(np.float64))
    return np.concatenate(out) if out else np.zeros((0, params.config.hidden))


def _unit_rows(x: np.ndarray, side: str) -> np.ndarray:
    norms = np.sqrt(np.sum(x * x, axis=1))
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ValueError(f"sentence {int(zero[0])} on side {side} has a zero-norm embedding")
    return x / norms[:, None]


def _direction(sim: np.ndarray) -> tuple[float, float]:
    n = sim.shape[0]
    idx = np.arange(n)
    hits = sim.argmax(axis=1) == idx
    diag = sim[idx, idx]
    better = (sim > diag[:, None]).sum(axis=1)
    tied_before = ((sim == diag[:, None]) & (idx[None, :] < idx[:, None])).sum(axis=1)
    ranks = 1 + better + tied_before
    return float(hits.mean()), float(np.mean(1.0 / ranks))


def retrieval_from_embeddings(emb_a: np.ndarray, emb_b: np.ndarray) -> RetrievalReport:
    """Cosine nearest neighbour in both directions; pair ``i`` is the match of query ``i``.

    Ties go to the lowest candidate index.
    """
    emb_a = np.asarray(emb_a, dtype=np.float64)
    emb_b = np.asarray(emb_b, dtype=np.float64)
    if emb_a.shape != emb_b.shape or emb_a.ndim != 2:
        raise ValueError(f"embedding shapes differ: {emb_a.shape} vs {emb_b.shape}")
    if emb_a.shape[0] < 2:
        raise ValueError("retrieval needs at least 2 pairs")
    sim = _unit_rows(emb_a, "A") @ _unit_rows(emb_b, "B").T
    top_ab, mrr_ab = _direction(sim)
    top_ba, mrr_ba = _direction(np.ascontiguousarray(sim.T))
    return RetrievalReport(top_ab, top_ba, mrr_ab, mrr_ba, emb_a.shape[0])


def center_rows(x: np.ndarray, ref: np.ndarray | None = None) -> np.ndarray:
    """Subtract the centroid of ``ref`` (default: of ``x`` itself) from every row."""
    x = np.asarray(x, dtype=np.float64)
    ref = x if ref is None else np.asarray(ref, dtype=np.float64)
    return x - ref.mean(axis=0, keepdims=True)


def retrieval_eval(params: Params | Embedder, pairs: Sequence[SentencePair], center: bool = True) -> RetrievalReport:
    """Held-out retrieval; with ``center`` each language's embeddings are shifted to zero mean first.

    The per-language centroid carries language identity (language and
    position embeddings, frequent tokens) that swamps raw cosine similarity.
    """
    embed = params if callable(params) else (lambda sents: embed_sentences(params, sents))
    a, b = embed([p.src for p in pairs]), embed([p.tgt for p in pairs])
    if center:
        a, b = center_rows(a), center_rows(b)
    return retrieval_from_embeddings(a, b)


# -- hardest-negative fine-tuning ---------------------------------------------


def hardest_negative_loss_from_embeddings(a: Tensor, b: Tensor, tau: float = 0.05) -> Tensor:
    """Mean over rows of softplus(-s_ii/tau) + softplus(s_ij*/tau).

    ``s`` is the cosine matrix of ``a`` against ``b`` and ``j*`` the most
    similar non-matching column of row ``i``. The selection is made on the
    values; gradients flow through the selected entries.
    """
    n = a.shape[0]
    if n < 2:
        raise ValueError("need at least 2 rows for an in-batch negative")
    s = ops.matmul(ops.l2_normalize(a), ops.transpose(ops.l2_normalize(b), (1, 0)))
    off = s.data.astype(np.float64).copy()
    off[np.arange(n), np.arange(n)] = -np.inf
    hardest = off.argmax(axis=1)
    rows = np.arange(n)
    pos = ops.take(s, rows * n + rows)
    neg = ops.take(s, rows * n + hardest)
    terms = ops.add(ops.softplus(ops.scale(pos, -1.0 / tau)), ops.softplus(ops.scale(neg, 1.0 / tau)))
    return ops.mean(terms)


def hardest_negative_loss(params: Params, pairs: Sequence[SentencePair], tau: float = 0.05) -> Tensor:
    max_len = params.config.max_positions
    a = pool_middle_layer_packed(params, collate([sentence_batch(p.src, max_len) for p in pairs]))
    b = pool_middle_layer_packed(params, collate([sentence_batch(p.tgt, max_len) for p in pairs]))
    return hardest_negative_loss_from_embeddings(a, b, tau)


@dataclass
class FinetuneConfig:
    steps: int = 200
    batch_size: int = 32
    lr: float = 5e-5
    tau: float = 0.05
    clip_norm: float = 1.0
    seed: int = 0


def hardest_negative_finetune(
    params: Params,
    pairs: Sequence[SentencePair],
    config: FinetuneConfig = FinetuneConfig(),
    fixed_batch: bool = False,
) -> tuple[Params, list[float]]:
    """Adam on the hardest-negative loss over random in-batch groups of pairs.

    Returns a fine-tuned copy and the per-step losses. With ``fixed_batch``
    the first ``batch_size`` pairs are reused every step.
    """
    if config.batch_size < 4:
        raise ValueError(f"hardest-negative batches need >= 4 pairs, got {config.batch_size}")
    if len(pairs) < config.batch_size:
        raise ValueError(f"{len(pairs)} pairs cannot fill a batch of {config.batch_size}")
    params = params.copy()
    state = OptimizerState.zeros_like(params)
    opt = TrainConfig(peak_lr=config.lr, weight_decay=0.0, warmup_steps=0, total_steps=max(config.steps, 1))
    rng = np.random.default_rng([config.seed, 17])
    losses = []
    for _ in range(config.steps):
        if fixed_batch:
            batch = pairs[: config.batch_size]
        else:
            batch = [pairs[i] for i in rng.choice(len(pairs), config.batch_size, replace=False)]
        params.zero_grad()
        loss = hardest_negative_loss(params, batch, config.tau)
        backward(loss)
        grads = {k: t.grad for k, t in params.items() if t.grad is not None}
        clip_gradients(grads, config.clip_norm)
        adam_step(params, grads, state, config.lr, opt)
        params.zero_grad()
        losses.append(float(loss.item()))
    return params, losses


# -- transfer probe -----------------------------------------------------------


@dataclass
class ProbeTask:
    """Binary task: does the sentence contain a token of the class set?

    ``class_a`` lives in language A; ``class_b`` is its image under the
    cipher, so labels survive translation.
    """

    class_a: frozenset[int]
    class_b: frozenset[int]
    train_a: list[MonoSentence]
    test_a: list[MonoSentence]
    test_b: list[MonoSentence]

    def label(self, s: MonoSentence) -> int:
        cls = self.class_a if s.lang == 0 else self.class_b
        return int(any(t in cls for t in s.tokens))

    def labels(self, sents: Sequence[MonoSentence]) -> np.ndarray:
        return np.array([self.label(s) for s in sents], dtype=np.int64)


def make_probe_task(
    corpora: Corpora, n_train: int = 500, n_test: int = 500, target_rate: float = 0.5, seed: int = 0
) -> ProbeTask:
    """Pick mid-frequency class tokens so roughly ``target_rate`` of sentences are positive."""
    cfg = corpora.config
    vocab = corpora.vocab
    from camlmlab.corpus import zipf_probs

    probs = zipf_probs(vocab.content_size, cfg.zipf_s)
    mean_len = 0.5 * (cfg.length_min + cfg.length_max)
    mass = 1.0 - (1.0 - target_rate) ** (1.0 / mean_len)
    rng = np.random.default_rng([seed, 23])
    order = rng.permutation(np.arange(10, vocab.content_size))
    chosen, total = [], 0.0
    for r in order:
        if total >= mass:
            break
        chosen.append(int(r))
        total += probs[r]
    table_a, table_b = corpora.rank_table(0), corpora.rank_table(1)
    class_a = frozenset(int(table_a[r]) for r in chosen)
    class_b = frozenset(int(table_b[r]) for r in chosen)

    def draw(stream, n):
        return [
            gen_mono_sentence(0, cfg.length_range, cfg.zipf_s, [cfg.seed, 900 + stream, seed, j], vocab)
            for j in range(n)
        ]

    train_a = draw(0, n_train)
    test_a = draw(1, n_test)
    trng = np.random.default_rng([seed, 29])
    test_b = [corpora.translate(s, 1, trng) for s in test_a]
    return ProbeTask(class_a, class_b, train_a, test_a, test_b)


def train_logistic_head(x: np.ndarray, y: np.ndarray, steps: int = 200, lr: float = 0.1, l2: float = 1e-4):
    """Full-batch Adam on mean logistic loss; returns (w, b, mean, std) for standardized inputs."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(np.unique(y)) < 2:
        raise ValueError("probe training data has a single class")
    mu = x.mean(axis=0)
    sd = x.std(axis=0) + 1e-8
    z = (x - mu) / sd
    w = np.zeros(z.shape[1])
    b = 0.0
    m = np.zeros(z.shape[1] + 1)
    v = np.zeros(z.shape[1] + 1)
    b1, b2, eps = 0.9, 0.999, 1e-8
    for t in range(1, steps + 1):
        p = 1.0 / (1.0 + np.exp(-(z @ w + b)))
        g = np.concatenate([z.T @ (p - y) / len(y) + l2 * w, [np.mean(p - y)]])
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        step = lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        w -= step[:-1]
        b -= step[-1]
    return w, b, mu, sd


def _accuracy(head, x: np.ndarray, y: np.ndarray) -> float:
    w, b, mu, sd = head
    pred = ((np.asarray(x, dtype=np.float64) - mu) / sd) @ w + b > 0
    return float(np.mean(pred == y.astype(bool)))


@dataclass
class ProbeResult:
    acc_a: float
    acc_b: float

    @property
    def gap(self) -> float:
        return self.acc_a - self.acc_b


def transfer_probe(params: Params | Embedder, task: ProbeTask, steps: int = 200, center: bool = True) -> ProbeResult:
    """Train a logistic head on language-A embeddings; test on A and on the translated B set.

    With ``center`` language A is centered on the mean of all its (unlabeled)
    probe sentences and language B on the mean of the B test set.
    """
    embed = params if callable(params) else (lambda sents: embed_sentences(params, sents))
    train_a, test_a, test_b = embed(task.train_a), embed(task.test_a), embed(task.test_b)
    if center:
        ref_a = np.concatenate([train_a, test_a])
        train_a, test_a, test_b = center_rows(train_a, ref_a), center_rows(test_a, ref_a), center_rows(test_b)
    head = train_logistic_head(train_a, task.labels(task.train_a), steps=steps)
    acc_a = _accuracy(head, test_a, task.labels(task.test_a))
    acc_b = _accuracy(head, test_b, task.labels(task.test_b))
    return ProbeResult(acc_a, acc_b)


# -- perplexity ---------------------------------------------------------------


def mono_eval_set(corpora: Corpora, n: int | None = None) -> list[MonoSentence]:
    """Held-out monolingual sentences: both sides of the held-out pairs."""
    sents = [p.src for p in corpora.heldout] + [p.tgt for p in corpora.heldout]
    return sents if n is None else sents[:n]


def masked_perplexity(params: Params, sentences: Sequence[MonoSentence], seed: int = 0, batch_size: int = 128) -> float:
    """exp(mean NLL) over mask-only corrupted positions, fixed corruption per seed."""
    rng = np.random.default_rng([seed, 31])
    items = [build_mmlm_batch(s, MASK_ONLY, rng, vocab=_vocab_of(params), max_len=params.config.max_positions) for s in sentences]
    total, count = 0.0, 0
    with no_grad():
        for i in range(0, len(items), batch_size):
            pb = collate(items[i : i + batch_size])
            k = len(pb.labels)
            total += float(objective_loss(params, pb).item()) * k
            count += k
    return math.exp(total / count)


def _vocab_of(params: Params):
    from camlmlab.corpus import N_SPECIALS, Vocabulary

    c = params.config
    return Vocabulary(c.n_langs, (c.vocab_size - N_SPECIALS) // c.n_langs)


@dataclass
class PplCurve:
    prob: float
    steps: list[int]
    ppl: list[float]

    @property
    def initial(self) -> float:
        return self.ppl[0]

    @property
    def final(self) -> float:
        return self.ppl[-1]


def ppl_sweep(
    train_config: TrainConfig,
    model_config: ModelConfig,
    corpora: Corpora,
    proportions: Sequence[float] = (0.05, 0.10, 0.15, 0.20),
    eval_every: int = 100,
    n_eval: int = 256,
    out_dir=None,
) -> list[PplCurve]:
    """One training run per pseudo-token proportion, held-out masked PPL every ``eval_every`` steps."""
    if not proportions or any(not 0.0 < p <= 0.5 for p in proportions):
        raise ValueError(f"proportions must lie in (0, 0.5], got {list(proportions)}")
    eval_set = mono_eval_set(corpora, n_eval)
    curves = []
    for prob in proportions:
        cfg = replace(train_config, pseudo_prob=prob)
        steps, ppl = [], []

        def on_step(step, params):
            if step % eval_every == 0 or step == cfg.total_steps:
                steps.append(step)
                ppl.append(masked_perplexity(params, eval_set))

        run_dir = None if out_dir is None else Path(out_dir) / f"p{int(round(prob * 100)):02d}"
        run_training(cfg, model_config, corpora, run_dir=run_dir, on_step=on_step)
        curves.append(PplCurve(prob, steps, ppl))
    if out_dir is not None:
        write_ppl_table(curves, Path(out_dir) / "ppl_sweep.tsv")
    return curves


def write_ppl_table(curves: Sequence[PplCurve], path) -> None:
    """Long-format TSV: prob, step, ppl (one line per evaluation point)."""
    lines = ["prob\tstep\tppl"]
    for c in curves:
        lines += [f"{c.prob:.2f}\t{s}\t{p:.6f}" for s, p in zip(c.steps, c.ppl)]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- ablation grid ------------------------------------------------------------

EXPERIMENTS: dict[str, tuple[ObjectiveKind, ...]] = {
    "exp0": (),
    "exp1": (ObjectiveKind.MMLM,),
    "exp2": (ObjectiveKind.MMLM, ObjectiveKind.TLM),
    "exp3": (ObjectiveKind.MMLM, ObjectiveKind.CAMLM),
    "exp4": (ObjectiveKind.MMLM, ObjectiveKind.BTMLM, ObjectiveKind.CAMLM),
    "exp5": (ObjectiveKind.MMLM, ObjectiveKind.BTMLM, ObjectiveKind.CAMLM, ObjectiveKind.TLM),
}


# bump when evaluation changes so cached grid rows are recomputed
EVAL_VERSION = 2


def config_for(base: TrainConfig, objectives: Sequence[ObjectiveKind], seed: int) -> TrainConfig:
    on = set(objectives)
    return replace(
        base,
        w_mmlm=1.0 if ObjectiveKind.MMLM in on else 0.0,
        w_tlm=1.0 if ObjectiveKind.TLM in on else 0.0,
        w_camlm=1.0 if ObjectiveKind.CAMLM in on else 0.0,
        w_btmlm=1.0 if ObjectiveKind.BTMLM in on else 0.0,
        seed=seed,
        init_seed=seed,
    )


@dataclass
class AblationRow:
    exp_id: str
    objectives: list[str]
    seed: int
    init_checksum: int
    retrieval: dict
    acc_a: float
    acc_b: float
    gap: float
    mean_step_ms: float = 0.0
    train_seconds: float = 0.0
    config_key: str = ""
    # the same metrics without per-language centering
    raw: dict = field(default_factory=dict)

    @property
    def top1(self) -> float:
        return 0.5 * (self.retrieval["top1_ab"] + self.retrieval["top1_ba"])


@dataclass
class AblationGrid:
    rows: list[AblationRow] = field(default_factory=list)
    hardware: dict = field(default_factory=dict)

    def __post_init__(self):
        keys = [(r.exp_id, r.seed) for r in self.rows]
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate (exp id, seed) rows in grid")

    def row(self, exp_id: str, seed: int) -> AblationRow:
        for r in self.rows:
            if r.exp_id == exp_id and r.seed == seed:
                return r
        raise KeyError((exp_id, seed))

    @property
    def seeds(self) -> list[int]:
        return sorted({r.seed for r in self.rows})

    def majority(self, predicate: Callable[[int], bool]) -> bool:
        """True when ``predicate(seed)`` holds for a strict majority of seeds."""
        votes = [bool(predicate(s)) for s in self.seeds]
        return sum(votes) * 2 > len(votes)

    def overhead_ratio(self, seed: int | None = None) -> float:
        """Mean step time of the four-objective row over the MMLM+TLM row."""
        seeds = self.seeds if seed is None else [seed]
        full = np.mean([self.row("exp5", s).mean_step_ms for s in seeds])
        base = np.mean([self.row("exp2", s).mean_step_ms for s in seeds])
        return float(full / base)

    def to_records(self) -> list[dict]:
        out = []
        for r in self.rows:
            d = asdict(r)
            d["top1"] = r.top1
            out.append(d)
        return out


def hardware_context() -> dict:
    return {
        "machine": platform.machine(),
        "processor": platform.processor() or platform.machine(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "cpu_count": os.cpu_count(),
        "kernel_backend": kernels.BACKEND,
    }


def _config_key(train: TrainConfig, model: ModelConfig, corpora: Corpora, extra: dict) -> str:
    blob = json.dumps(
        {"train": asdict(train), "model": asdict(model), "corpus": asdict(corpora.config), "extra": extra},
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def run_ablation_row(
    exp_id: str,
    seed: int,
    base: TrainConfig,
    model_config: ModelConfig,
    corpora: Corpora,
    out_dir=None,
    probe_task: ProbeTask | None = None,
    reuse: bool = True,
) -> AblationRow:
    """Train (unless exp0) and evaluate one grid row; cached by config hash in ``out_dir``."""
    objectives = EXPERIMENTS[exp_id]
    cfg = config_for(base, objectives, seed) if objectives else replace(base, seed=seed, init_seed=seed)
    key = _config_key(cfg, model_config, corpora, {"exp": exp_id, "trained": bool(objectives), "eval": EVAL_VERSION})
    row_dir = None if out_dir is None else Path(out_dir) / f"seed{seed}" / exp_id
    row_file = None if row_dir is None else row_dir / "row.json"
    if reuse and row_file is not None and row_file.exists():
        cached = json.loads(row_file.read_text(encoding="utf-8"))
        if cached.get("config_key") == key:
            return AblationRow(**cached)
    init = init_params(model_config, seed)
    t0 = time.perf_counter()
    mean_ms = 0.0
    if objectives:
        if row_dir is not None and row_dir.exists():
            for stale in (row_dir / "checkpoints").glob("*.ckpt"):
                stale.unlink()
        result = run_training(cfg, model_config, corpora, run_dir=row_dir, params=init)
        params = result.params
        mean_ms = float(np.mean([r["elapsed_ms"] for r in result.records]))
    else:
        params = init
    train_seconds = time.perf_counter() - t0
    task = probe_task or make_probe_task(corpora)
    rep = retrieval_eval(params, corpora.heldout)
    probe = transfer_probe(params, task)
    rep_raw = retrieval_eval(params, corpora.heldout, center=False)
    probe_raw = transfer_probe(params, task, center=False)
    row = AblationRow(
        exp_id=exp_id,
        objectives=[o.value for o in objectives],
        seed=seed,
        init_checksum=init.checksum(),
        retrieval=asdict(rep),
        acc_a=probe.acc_a,
        acc_b=probe.acc_b,
        gap=probe.gap,
        mean_step_ms=mean_ms,
        train_seconds=train_seconds,
        config_key=key,
        raw={"top1": rep_raw.top1, "acc_a": probe_raw.acc_a, "acc_b": probe_raw.acc_b, "gap": probe_raw.gap},
    )
    if row_file is not None:
        row_dir.mkdir(parents=True, exist_ok=True)
        row_file.write_text(json.dumps(asdict(row), sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return row


def _row_worker(args):
    exp_id, seed, base, model_config, corpora, out_dir = args
    return run_ablation_row(exp_id, seed, base, model_config, corpora, out_dir)


def ablation_run(
    base: TrainConfig,
    model_config: ModelConfig,
    corpora: Corpora,
    seeds: Sequence[int] = (0,),
    out_dir=None,
    experiments: Sequence[str] = tuple(EXPERIMENTS),
    jobs: int = 1,
) -> AblationGrid:
    """Every (experiment, seed) row from the same per-seed init; rows may run in worker processes."""
    tasks = [(e, s, base, model_config, corpora, out_dir) for s in seeds for e in experiments]
    if jobs > 1:
        import multiprocessing as mp

        with mp.get_context("spawn").Pool(jobs) as pool:
            rows = pool.map(_row_worker, tasks)
    else:
        rows = [_row_worker(t) for t in tasks]
    grid = AblationGrid(rows, hardware_context())
    if out_dir is not None:
        write_grid(grid, out_dir)
    return grid


# -- reports ------------------------------------------------------------------


def format_table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    """Aligned-column text table; floats get 4 decimals."""
    cells = [[f"{v:.4f}" if isinstance(v, float) else str(v) for v in row] for row in rows]
    widths = [max(len(h), *(len(r[i]) for r in cells)) if cells else len(h) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    return "\n".join(lines)


def grid_summary(grid: AblationGrid) -> str:
    header = ["exp", "seed", "objectives", "top1", "top1_ab", "top1_ba", "mrr", "acc_a", "acc_b", "gap", "top1_raw", "gap_raw", "step_ms"]
    rows = [
        [
            r.exp_id,
            r.seed,
            "+".join(r.objectives) or "(random init)",
            r.top1,
            r.retrieval["top1_ab"],
            r.retrieval["top1_ba"],
            0.5 * (r.retrieval["mrr_ab"] + r.retrieval["mrr_ba"]),
            r.acc_a,
            r.acc_b,
            r.gap,
            r.raw.get("top1", float("nan")),
            r.raw.get("gap", float("nan")),
            r.mean_step_ms,
        ]
        for r in sorted(grid.rows, key=lambda r: (r.exp_id, r.seed))
    ]
    text = format_table(header, rows)
    ids = {r.exp_id for r in grid.rows}
    if {"exp5", "exp2"} <= ids:
        hw = grid.hardware
        text += (
            f"\n\nstep-time ratio full/(mmlm+tlm): {grid.overhead_ratio():.3f}x"
            f"\nhardware: {hw.get('processor')} ({hw.get('cpu_count')} cpu), python {hw.get('python')},"
            f" numpy {hw.get('numpy')}, kernels {hw.get('kernel_backend')}"
        )
    return text + "\n"


def write_grid(grid: AblationGrid, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"jsonl": out / "grid.jsonl", "text": out / "grid.txt"}
    with open(paths["jsonl"], "w", encoding="utf-8") as fh:
        for rec in grid.to_records():
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        fh.write(json.dumps({"hardware": grid.hardware}, sort_keys=True) + "\n")
    paths["text"].write_text(grid_summary(grid), encoding="utf-8")
    return paths


def read_grid(path) -> AblationGrid:
    rows, hw = [], {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        rec = json.loads(line)
        if "hardware" in rec:
            hw = rec["hardware"]
            continue
        rec.pop("top1", None)
        rows.append(AblationRow(**rec))
    return AblationGrid(rows, hw)


def training_summary(records: list[dict]) -> str:
    """Text summary of a metrics log: per-objective steps, tail loss, step time."""
    summary = summarize_records(records)
    header = ["objective", "steps", "tail_loss", "mean_step_ms", "tokens_per_s"]
    rows = [[k, v["steps"], v["tail_loss"], v["mean_step_ms"], v["tokens_per_s"]] for k, v in sorted(summary.items())]
    text = format_table(header, rows)
    if records:
        text += f"\n\nsteps logged: {len(records)}  final loss: {records[-1]['loss']:.4f}"
    return text + "\n"


def load_params(path) -> Params:
    params, _, _ = load_checkpoint(path)
    return params
