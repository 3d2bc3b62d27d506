"""Optimization loop: Adam, warmup/linear-decay schedule, objective mixing,
checkpointing and a line-delimited metrics log.

All randomness at step ``t`` is drawn from generators seeded by
``(seed, t, ...)``, so a run resumed from a checkpoint replays exactly the
batches an uninterrupted run would have seen.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable

import numpy as np

from camlmlab import ops
from camlmlab.batch import PackedBatch, collate
from camlmlab.corpus import Corpora, MonoSentence, SentencePair
from camlmlab.errors import CheckpointError, ConfigError, NonFiniteError
from camlmlab.model import ModelConfig, Params, init_params, is_bias, is_gain, load_checkpoint, save_checkpoint
from camlmlab.objectives import (
    MaskingPolicy,
    ObjectiveKind,
    build_btmlm_stage1_batch,
    build_btmlm_stage2_batch,
    build_camlm_batch,
    build_mmlm_batch,
    build_tlm_batch,
    generate_pseudo_tokens,
    objective_loss,
    pseudo_count,
)
from camlmlab.tensor import Tensor, backward

log = logging.getLogger(__name__)

OBJECTIVES = (ObjectiveKind.MMLM, ObjectiveKind.TLM, ObjectiveKind.CAMLM, ObjectiveKind.BTMLM)
METRICS_FILE = "metrics.jsonl"
CHECKPOINT_DIR = "checkpoints"


@dataclass
class TrainConfig:
    peak_lr: float = 3e-4
    warmup_steps: int = 300
    total_steps: int = 3000
    batch_size: int = 32
    beta1: float = 0.98
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    w_mmlm: float = 1.0
    w_tlm: float = 1.0
    w_camlm: float = 1.0
    w_btmlm: float = 1.0
    btmlm_start_step: int | None = None
    mixing: str = "round_robin"
    mask_rate: float = 0.15
    camlm_mode: str = "strict"
    pair_positions: str = "reset"
    pseudo_prob: float = 0.15
    pseudo_decode: str = "argmax"
    restrict_pseudo: bool = True
    checkpoint_every: int = 500
    seed: int = 0
    init_seed: int | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError(f"need 0 <= warmup_steps < total_steps, got {self.warmup_steps}, {self.total_steps}")
        ws = self.weights()
        if any(w < 0 for w in ws.values()) or not any(w > 0 for w in ws.values()):
            raise ConfigError(f"objective weights must be >= 0 and not all zero: {ws}")
        if self.mixing not in ("round_robin", "sum"):
            raise ConfigError(f"unknown mixing {self.mixing!r}")
        if self.pair_positions not in ("reset", "continuous"):
            raise ConfigError(f"unknown pair_positions {self.pair_positions!r}")
        if self.camlm_mode not in ("strict", "figure"):
            raise ConfigError(f"unknown camlm_mode {self.camlm_mode!r}")
        if self.batch_size < 1 or self.checkpoint_every < 1:
            raise ConfigError("batch_size and checkpoint_every must be positive")

    def weights(self) -> dict[ObjectiveKind, float]:
        return {
            ObjectiveKind.MMLM: self.w_mmlm,
            ObjectiveKind.TLM: self.w_tlm,
            ObjectiveKind.CAMLM: self.w_camlm,
            ObjectiveKind.BTMLM: self.w_btmlm,
        }

    @property
    def btmlm_start(self) -> int:
        if self.btmlm_start_step is None:
            return int(0.3 * self.total_steps)
        return self.btmlm_start_step

    @property
    def policy(self) -> MaskingPolicy:
        return MaskingPolicy(mask_rate=self.mask_rate)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Params) -> "OptimizerState":
        return cls(
            {k: np.zeros_like(t.data) for k, t in params.items()},
            {k: np.zeros_like(t.data) for k, t in params.items()},
        )


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup from 0 to ``peak_lr``, then linear decay to 0 at ``total_steps``."""
    if not 0 <= step <= config.total_steps:
        raise ValueError(f"step {step} outside [0, {config.total_steps}]")
    if config.warmup_steps and step < config.warmup_steps:
        return config.peak_lr * step / config.warmup_steps
    return config.peak_lr * (config.total_steps - step) / (config.total_steps - config.warmup_steps)


def adam_step(
    params: Params, grads: dict[str, np.ndarray], state: OptimizerState, lr: float, config: TrainConfig
) -> OptimizerState:
    """Bias-corrected Adam with decoupled weight decay, in place.

    Layer-norm gains and bias vectors are not decayed.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise NonFiniteError(f"non-finite gradient in {name} ({bad} entries) at step {state.step + 1}")
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        dtype = p.data.dtype.type
        if g is not None:
            m = state.m[name] = dtype(b1) * state.m[name] + dtype(1.0 - b1) * g
            v = state.v[name] = dtype(b2) * state.v[name] + dtype(1.0 - b2) * g * g
            update = (m / dtype(c1)) / (np.sqrt(v / dtype(c2)) + dtype(config.eps))
        else:
            update = None
        decay = config.weight_decay if not (is_gain(name) or is_bias(name)) else 0.0
        new = p.data
        if decay:
            new = new - dtype(lr * decay) * new
        if update is not None:
            new = new - dtype(lr) * update
        p.data = np.ascontiguousarray(new, dtype=p.data.dtype)
    return state


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their global norm is at most ``max_norm``; returns the pre-clip norm."""
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = (grads[k] * grads[k].dtype.type(factor)).astype(grads[k].dtype)
    return total


def objective_schedule(config: TrainConfig) -> list[ObjectiveKind]:
    """Smooth weighted round-robin over enabled objectives.

    Every step each active objective earns its weight in credit; the richest
    one runs and pays the total active weight. Counts track the weights
    exactly (largest-remainder). BTMLM is inactive before ``btmlm_start``.
    """
    weights = config.weights()
    credit = {k: 0.0 for k in OBJECTIVES}
    out = []
    for t in range(config.total_steps):
        active = [k for k in OBJECTIVES if weights[k] > 0 and (k != ObjectiveKind.BTMLM or t >= config.btmlm_start)]
        if not active:
            raise ConfigError(f"no objective enabled at step {t}")
        total = sum(weights[k] for k in active)
        for k in active:
            credit[k] += weights[k]
        pick = max(active, key=lambda k: credit[k])
        credit[pick] -= total
        out.append(pick)
    return out


class DataStream:
    """Deterministic batch factory over in-memory corpora."""

    def __init__(self, corpora: Corpora, config: TrainConfig, model_config: ModelConfig):
        self.corpora = corpora
        self.config = config
        self.model_config = model_config
        self.vocab = corpora.vocab
        self.mono: list[MonoSentence] = [s for lang in sorted(corpora.mono) for s in corpora.mono[lang]]
        self.pairs: list[SentencePair] = list(corpora.parallel)
        if not self.mono and (config.w_mmlm > 0 or config.w_btmlm > 0):
            raise ConfigError("monolingual objectives enabled but no monolingual data")
        if not self.pairs and (config.w_tlm > 0 or config.w_camlm > 0):
            raise ConfigError("parallel objectives enabled but no parallel data")

    def rng(self, step: int, objective: ObjectiveKind) -> np.random.Generator:
        return np.random.default_rng([self.config.seed, step, OBJECTIVES.index(objective)])

    def batch(self, objective: ObjectiveKind, step: int, params: Params) -> PackedBatch:
        cfg, vocab, max_len = self.config, self.vocab, self.model_config.max_positions
        rng = self.rng(step, objective)
        policy = cfg.policy
        if objective in (ObjectiveKind.MMLM, ObjectiveKind.BTMLM):
            sents = [self.mono[i] for i in rng.integers(0, len(self.mono), cfg.batch_size)]
        else:
            pairs = [self.pairs[i] for i in rng.integers(0, len(self.pairs), cfg.batch_size)]
        if objective == ObjectiveKind.MMLM:
            items = [build_mmlm_batch(s, policy, rng, vocab, max_len) for s in sents]
        elif objective == ObjectiveKind.TLM:
            items = [build_tlm_batch(p, policy, rng, vocab, max_len, positions=cfg.pair_positions) for p in pairs]
        elif objective == ObjectiveKind.CAMLM:
            items = [build_camlm_batch(p, policy, cfg.camlm_mode, rng, vocab, max_len, positions=cfg.pair_positions) for p in pairs]
        else:
            items = self._btmlm(sents, params, rng)
        return collate(items)

    def _btmlm(self, sents, params, rng):
        cfg, vocab, max_len = self.config, self.vocab, self.model_config.max_positions
        langs = list(range(vocab.n_langs))
        targets = []
        for s in sents:
            others = [k for k in langs if k != s.lang]
            targets.append(others[0] if len(others) == 1 else int(rng.choice(others)))
        stage1 = [
            build_btmlm_stage1_batch(s, pseudo_count(len(s), cfg.pseudo_prob), t, max_len)
            for s, t in zip(sents, targets)
        ]
        pseudo = generate_pseudo_tokens(
            params, stage1, vocab, decode=cfg.pseudo_decode, rng=rng, restrict=cfg.restrict_pseudo
        )
        return [
            build_btmlm_stage2_batch(s, cfg.policy, p, t, rng, vocab, max_len)
            for s, p, t in zip(sents, pseudo, targets)
        ]


def _dropout_rng(config: TrainConfig, model_config: ModelConfig, step: int):
    if model_config.dropout <= 0:
        return None
    return np.random.default_rng([config.seed, step, 99])


def train_step(
    params: Params,
    state: OptimizerState,
    objective: ObjectiveKind | str,
    stream: DataStream,
    step: int,
) -> tuple[float, dict]:
    """One optimizer update on one scheduled objective (or the weighted sum, with mixing="sum")."""
    cfg = stream.config
    t0 = time.perf_counter()
    params.zero_grad()
    if objective == "sum":
        active = [
            k for k, w in cfg.weights().items() if w > 0 and (k != ObjectiveKind.BTMLM or step >= cfg.btmlm_start)
        ]
        wsum = sum(cfg.weights()[k] for k in active)
        loss, tokens = None, 0
        for k in active:
            pb = stream.batch(k, step, params)
            tokens += pb.n_tokens
            term = ops.scale(objective_loss(params, pb, _dropout_rng(cfg, params.config, step)), cfg.weights()[k] / wsum)
            loss = term if loss is None else ops.add(loss, term)
        name = "sum"
    else:
        objective = ObjectiveKind(objective)
        pb = stream.batch(objective, step, params)
        tokens = pb.n_tokens
        loss = objective_loss(params, pb, _dropout_rng(cfg, params.config, step))
        name = objective.value
    backward(loss)
    grads = {k: t.grad for k, t in params.items() if t.grad is not None}
    grad_norm = clip_gradients(grads, cfg.clip_norm)
    lr = lr_at(step + 1, cfg)
    adam_step(params, grads, state, lr, cfg)
    params.zero_grad()
    elapsed = (time.perf_counter() - t0) * 1000.0
    record = {
        "step": step + 1,
        "objective": name,
        "loss": float(loss.item()),
        "lr": lr,
        "grad_norm": grad_norm,
        "tokens": tokens,
        "elapsed_ms": round(elapsed, 3),
    }
    return record["loss"], record


def checkpoint_path(run_dir, step: int) -> Path:
    return Path(run_dir) / CHECKPOINT_DIR / f"step_{step:07d}.ckpt"


def save_train_checkpoint(path, params: Params, state: OptimizerState, config: TrainConfig) -> None:
    extra = {f"opt.m.{k}": v for k, v in state.m.items()}
    extra.update({f"opt.v.{k}": v for k, v in state.v.items()})
    meta = {"kind": "train", "step": state.step, "train_config": asdict(config)}
    save_checkpoint(path, params, extra, meta)


def load_train_checkpoint(path) -> tuple[Params, OptimizerState, dict]:
    params, extra, meta = load_checkpoint(path)
    if meta.get("kind") != "train":
        raise CheckpointError(f"{path}: not a training checkpoint")
    state = OptimizerState(
        {k: extra[f"opt.m.{k}"] for k in params},
        {k: extra[f"opt.v.{k}"] for k in params},
        int(meta["step"]),
    )
    return params, state, meta


def latest_checkpoint(run_dir) -> Path | None:
    found = sorted((Path(run_dir) / CHECKPOINT_DIR).glob("step_*.ckpt"))
    return found[-1] if found else None


def read_metrics(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def strip_wallclock(records: Iterable[dict]) -> list[dict]:
    return [{k: v for k, v in r.items() if k != "elapsed_ms"} for r in records]


@dataclass
class TrainResult:
    params: Params
    state: OptimizerState
    records: list[dict]
    run_dir: Path | None = None

    @property
    def final_checkpoint(self) -> Path | None:
        return None if self.run_dir is None else checkpoint_path(self.run_dir, self.state.step)


def run_training(
    config: TrainConfig,
    model_config: ModelConfig,
    corpora: Corpora,
    run_dir=None,
    resume: bool = False,
    stop_after: int | None = None,
    params: Params | None = None,
    on_step=None,
) -> TrainResult:
    """Train for ``config.total_steps`` steps.

    With ``run_dir`` set, metrics go to ``metrics.jsonl`` (one record per
    step) and checkpoints to ``checkpoints/`` every ``checkpoint_every`` steps
    and at the end. ``resume`` continues from the latest checkpoint there.
    ``stop_after`` halts early (after writing a checkpoint), which is how the
    resume tests simulate an interruption. ``on_step(step, params)`` is
    called before the first update (step 0 of a fresh run) and after each.
    """
    schedule = objective_schedule(config)
    stream = DataStream(corpora, config, model_config)
    start, records = 0, []
    state = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        (run_dir / CHECKPOINT_DIR).mkdir(parents=True, exist_ok=True)
    if resume:
        ckpt = latest_checkpoint(run_dir) if run_dir is not None else None
        if ckpt is not None:
            params, state, _ = load_train_checkpoint(ckpt)
            start = state.step
            records = [r for r in read_metrics(run_dir / METRICS_FILE) if r["step"] <= start]
            log.info("resumed from %s at step %d", ckpt, start)
    if state is None:
        if params is None:
            seed = config.seed if config.init_seed is None else config.init_seed
            params = init_params(model_config, seed)
        else:
            params = params.copy()
        state = OptimizerState.zeros_like(params)
    metrics_fh = None
    if run_dir is not None:
        metrics_fh = open(run_dir / METRICS_FILE, "w", encoding="utf-8", newline="\n")
        for r in records:
            metrics_fh.write(json.dumps(r, sort_keys=True) + "\n")
    end = config.total_steps if stop_after is None else min(stop_after, config.total_steps)
    if on_step is not None and start == 0:
        on_step(0, params)
    try:
        for step in range(start, end):
            objective = "sum" if config.mixing == "sum" else schedule[step]
            _, record = train_step(params, state, objective, stream, step)
            records.append(record)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(record, sort_keys=True) + "\n")
                done = step + 1
                if done % config.checkpoint_every == 0 or done == end:
                    metrics_fh.flush()
                    save_train_checkpoint(checkpoint_path(run_dir, done), params, state, config)
            if on_step is not None:
                on_step(step + 1, params)
            if (step + 1) % 100 == 0:
                log.info("step %d %s loss %.4f", step + 1, record["objective"], record["loss"])
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    return TrainResult(params, state, records, run_dir)


def summarize_records(records: list[dict]) -> dict:
    """Per-objective step counts, mean loss over the last 10% of steps and mean step time."""
    out: dict[str, dict] = {}
    tail_from = int(0.9 * len(records))
    for i, r in enumerate(records):
        d = out.setdefault(r["objective"], {"steps": 0, "ms": 0.0, "tail_loss": [], "tokens": 0})
        d["steps"] += 1
        d["ms"] += r.get("elapsed_ms", 0.0)
        d["tokens"] += r.get("tokens", 0)
        if i >= tail_from:
            d["tail_loss"].append(r["loss"])
    return {
        k: {
            "steps": d["steps"],
            "mean_step_ms": d["ms"] / d["steps"],
            "tokens_per_s": d["tokens"] / (d["ms"] / 1000.0) if d["ms"] else 0.0,
            "tail_loss": float(np.mean(d["tail_loss"])) if d["tail_loss"] else float("nan"),
        }
        for k, d in out.items()
    }


def tensor_from(params: Params, name: str) -> Tensor:
    return params[name]
