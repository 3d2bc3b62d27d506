"""``camlmlab`` command line.

Exit codes: 0 success, 2 configuration or usage error, 3 I/O error,
4 refused for safety (would overwrite a run directory).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from camlmlab import evaluation as ev
from camlmlab.config import RunConfig, apply_overrides, load_config, parse_config, render_config, resolve_seed
from camlmlab.corpus import CorpusFormatError, gen_corpora, load_corpora
from camlmlab.errors import CheckpointError, ConfigError
from camlmlab.objectives import btmlm_stage1_mask, camlm_attention_mask
from camlmlab.trainer import METRICS_FILE, read_metrics, run_training

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_SAFETY = 0, 2, 3, 4
CONFIG_ECHO = "config.ini"
REPORTS = "reports"

log = logging.getLogger("camlmlab")


class SafetyError(Exception):
    pass


def _config(args, seed_sections=("train",)) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    cfg = apply_overrides(cfg, getattr(args, "set", None) or [])
    return resolve_seed(cfg, getattr(args, "seed", None), seed_sections)


def _load_data(path):
    if path is None:
        raise ConfigError("--data is required")
    if not (Path(path) / "corpus.json").exists():
        raise FileNotFoundError(f"no corpus.json under {path}")
    return load_corpora(path)


# -- subcommands --------------------------------------------------------------


def cmd_gen_corpus(args) -> int:
    cfg = _config(args, ("corpus",))
    paths = gen_corpora(cfg.corpus, args.out)
    for key, p in paths.items():
        print(f"{key}\t{p}")
    return EXIT_OK


def cmd_train(args) -> int:
    run_dir = Path(args.run_dir)
    echo = run_dir / CONFIG_ECHO
    if args.resume:
        if args.config is None and echo.exists():
            cfg = parse_config(echo.read_text(encoding="utf-8"))
        else:
            cfg = _config(args)
    else:
        if run_dir.exists() and any(run_dir.iterdir()):
            raise SafetyError(f"{run_dir} is not empty; pass --resume to continue it")
        cfg = _config(args)
    corpora = _load_data(args.data)
    run_dir.mkdir(parents=True, exist_ok=True)
    if echo.exists() and args.resume:
        if parse_config(echo.read_text(encoding="utf-8")) != cfg:
            raise ConfigError(f"config differs from the echo in {echo}; refusing to resume")
    else:
        echo.write_text(render_config(cfg), encoding="utf-8")
    result = run_training(cfg.train, cfg.model, corpora, run_dir=run_dir, resume=args.resume, stop_after=args.stop_after)
    reports = run_dir / REPORTS
    reports.mkdir(exist_ok=True)
    text = ev.training_summary(result.records)
    (reports / "summary.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    print(f"checkpoint\t{result.final_checkpoint}")
    return EXIT_OK


def _parse_index_list(text: str) -> list[int]:
    if not text:
        return []
    try:
        return [int(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"bad index list {text!r}") from None


def visibility_grid(objective: str, src_len: int, tgt_len: int, masked_src, masked_tgt, mode: str):
    """Visibility matrix and 1-based row labels for the bare geometry (no special tokens)."""
    if src_len < 1 or tgt_len < 0:
        raise ConfigError("--src-len must be >= 1 and --tgt-len >= 0")
    n = src_len + tgt_len
    src = list(range(1, src_len + 1))
    tgt = list(range(src_len + 1, n + 1))
    for name, idx, seg in (("--masked-src", masked_src, src), ("--masked-tgt", masked_tgt, tgt)):
        if len(set(idx)) != len(idx):
            raise ConfigError(f"{name} has duplicate positions")
        outside = sorted(set(idx) - set(seg))
        if outside:
            raise ConfigError(f"{name} positions {outside} are outside their segment {seg[:1] + seg[-1:]}")
    labels = [f"x{i}" for i in src] + [f"y{i}" for i in tgt]
    if objective == "mmlm":
        if tgt_len:
            raise ConfigError("mmlm takes a single sentence; use --tgt-len 0")
        allowed = np.ones((n, n), dtype=bool)
    elif objective == "tlm":
        allowed = np.ones((n, n), dtype=bool)
    elif objective == "camlm":
        if not masked_src and not masked_tgt:
            raise ConfigError("camlm needs at least one masked position")
        allowed = camlm_attention_mask(
            [i - 1 for i in src], [i - 1 for i in tgt], [i - 1 for i in masked_src], [i - 1 for i in masked_tgt], mode, n
        )
    elif objective == "btmlm-stage1":
        if tgt_len < 1:
            raise ConfigError("btmlm-stage1 needs --tgt-len >= 1 placeholders")
        if masked_src or masked_tgt:
            raise ConfigError("btmlm-stage1 takes no masked positions")
        allowed = btmlm_stage1_mask(src_len, tgt_len)
        labels = [f"x{i}" for i in src] + [f"M{i}" for i in tgt]
    else:
        raise ConfigError(f"unknown objective {objective!r}")
    masked = set(masked_src) | set(masked_tgt)
    labels = [f"M{i}" if i in masked else lab for i, lab in enumerate(labels, start=1)]
    return allowed, labels


def render_grid(allowed: np.ndarray, labels: list[str]) -> str:
    w = max(len(s) for s in labels)
    lines = [" " * (w + 1) + " ".join(s.rjust(w) for s in labels)]
    for lab, row in zip(labels, allowed):
        lines.append(lab.rjust(w) + " " + " ".join(str(int(v)).rjust(w) for v in row))
    return "\n".join(lines)


def cmd_inspect_mask(args) -> int:
    allowed, labels = visibility_grid(
        args.objective,
        args.src_len,
        args.tgt_len,
        _parse_index_list(args.masked_src),
        _parse_index_list(args.masked_tgt),
        args.mode,
    )
    print(render_grid(allowed, labels))
    return EXIT_OK


def _write_records(out, name: str, records: list[dict], text: str) -> None:
    if out is None:
        return
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"{name}.jsonl", "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    (out / f"{name}.txt").write_text(text, encoding="utf-8")


def cmd_eval(args) -> int:
    cfg = _config(args)
    corpora = _load_data(args.data)
    if args.checkpoint is None:
        from camlmlab.model import init_params

        params = init_params(cfg.model, cfg.train.seed)
        source = f"random init (seed {cfg.train.seed})"
    else:
        params = ev.load_params(args.checkpoint)
        source = str(args.checkpoint)
    if args.suite == "retrieval":
        rep = ev.retrieval_eval(params, corpora.heldout, center=cfg.eval.center)
        rec = {"suite": "retrieval", "source": source, "top1": rep.top1, "mrr": rep.mrr, **asdict(rep)}
        text = ev.format_table(
            ["source", "pairs", "top1_ab", "top1_ba", "mrr_ab", "mrr_ba"],
            [[source, rep.n_pairs, rep.top1_ab, rep.top1_ba, rep.mrr_ab, rep.mrr_ba]],
        )
    elif args.suite == "probe":
        task = ev.make_probe_task(corpora, n_train=cfg.eval.probe_train)
        res = ev.transfer_probe(params, task, steps=cfg.eval.probe_steps, center=cfg.eval.center)
        rec = {"suite": "probe", "source": source, "acc_a": res.acc_a, "acc_b": res.acc_b, "gap": res.gap}
        text = ev.format_table(["source", "acc_a", "acc_b", "gap"], [[source, res.acc_a, res.acc_b, res.gap]])
    elif args.suite == "ppl":
        ppl = ev.masked_perplexity(params, ev.mono_eval_set(corpora))
        rec = {"suite": "ppl", "source": source, "ppl": ppl}
        text = ev.format_table(["source", "ppl"], [[source, ppl]])
    else:
        before = ev.retrieval_eval(params, corpora.heldout, center=cfg.eval.center)
        tuned, losses = ev.hardest_negative_finetune(params, corpora.parallel, cfg.eval.finetune(cfg.train.seed))
        after = ev.retrieval_eval(tuned, corpora.heldout, center=cfg.eval.center)
        rec = {
            "suite": "finetune",
            "source": source,
            "top1_before": before.top1,
            "top1_after": after.top1,
            "first_loss": losses[0] if losses else None,
            "last_loss": losses[-1] if losses else None,
        }
        text = ev.format_table(["source", "top1_before", "top1_after"], [[source, before.top1, after.top1]])
        if args.out is not None:
            from camlmlab.model import save_checkpoint

            Path(args.out).mkdir(parents=True, exist_ok=True)
            save_checkpoint(Path(args.out) / "finetuned.ckpt", tuned, meta={"kind": "finetune", "source": source})
    print(text)
    _write_records(args.out, args.suite, [rec], text + "\n")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    corpora = _load_data(args.data)
    train = replace(cfg.train, total_steps=cfg.eval.ppl_steps, warmup_steps=min(cfg.train.warmup_steps, cfg.eval.ppl_steps - 1))
    curves = ev.ppl_sweep(train, cfg.model, corpora, cfg.eval.ppl_proportions, cfg.eval.ppl_eval_every, out_dir=args.out)
    rows = [[f"{c.prob:.2f}", c.initial, c.final, len(c.steps)] for c in curves]
    print(ev.format_table(["prob", "ppl_initial", "ppl_final", "points"], rows))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    corpora = _load_data(args.data)
    seeds = _parse_index_list(args.seeds) if args.seeds else list(cfg.eval.seeds)
    grid = ev.ablation_run(cfg.train, cfg.model, corpora, seeds=seeds, out_dir=args.out, jobs=args.jobs)
    print(ev.grid_summary(grid), end="")
    return EXIT_OK


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    metrics = run_dir / METRICS_FILE
    grid_file = run_dir / "grid.jsonl"
    parts = []
    if metrics.exists() and metrics.stat().st_size > 0:
        parts.append(ev.training_summary(read_metrics(metrics)))
    if grid_file.exists():
        parts.append(ev.grid_summary(ev.read_grid(grid_file)))
    if not parts:
        raise FileNotFoundError(f"no metrics log or grid under {run_dir}")
    text = "\n".join(parts)
    reports = run_dir / REPORTS
    reports.mkdir(exist_ok=True)
    (reports / "summary.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="camlmlab", description="Cross-attention masked LM laboratory")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
        sp.add_argument("--seed", type=int, help="overrides the config seed and $CAMLMLAB_SEED")
        if data:
            sp.add_argument("--data", help="corpus directory written by gen-corpus")

    sp = sub.add_parser("gen-corpus", help="write synthetic parallel and monolingual corpora")
    common(sp, data=False)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_corpus)

    sp = sub.add_parser("train", help="pretrain an encoder")
    common(sp)
    sp.add_argument("--run-dir", required=True)
    sp.add_argument("--resume", action="store_true")
    sp.add_argument("--stop-after", type=int, help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("inspect-mask", help="print an attention visibility grid")
    sp.add_argument("--objective", required=True, choices=["mmlm", "tlm", "camlm", "btmlm-stage1"])
    sp.add_argument("--src-len", type=int, required=True)
    sp.add_argument("--tgt-len", type=int, default=0, help="target length, or placeholder count for btmlm-stage1")
    sp.add_argument("--masked-src", default="", help="1-based positions, comma separated")
    sp.add_argument("--masked-tgt", default="", help="1-based positions continuing after the source")
    sp.add_argument("--mode", choices=["strict", "figure"], default="strict")
    sp.set_defaults(func=cmd_inspect_mask)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", help="omit for a random-init model")
    sp.add_argument("--suite", required=True, choices=["retrieval", "probe", "ppl", "finetune"])
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep", help="pseudo-token proportion perplexity sweep")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("ablate", help="train and evaluate the objective ablation grid")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seeds", help="comma separated; default from [eval] seeds")
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("report", help="render logs in a run directory as text")
    sp.add_argument("--run-dir", required=True)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SafetyError as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return EXIT_SAFETY
    except (OSError, CorpusFormatError, CheckpointError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
