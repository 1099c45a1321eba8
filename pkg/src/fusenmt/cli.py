"""Command-line interface: pretrain, train, translate, evaluate, experiment.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError
from .config import ConfigError, ExperimentConfig
from .data import EOS, CorpusError
from .evaluate import bleu

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4

log = logging.getLogger("fusenmt")


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.out_dir = str(args.out)
    return cfg


def cmd_pretrain(args) -> int:
    from .train import prepare_task, pretrain_teacher_for, save_teacher_checkpoint

    cfg = _load_config(args)
    out = Path(cfg.out_dir or "runs/teacher")
    out.mkdir(parents=True, exist_ok=True)
    data = prepare_task(cfg)
    teacher, info = pretrain_teacher_for(cfg, data)
    ckpt = out / "teacher.ckpt"
    save_teacher_checkpoint(ckpt, teacher, data.src_vocab, info, cfg)
    data.src_vocab.save(out / "vocab.src.txt")
    summary = {k: v for k, v in info.items() if k != "loss_history"}
    (out / "pretrain_summary.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    print(f"teacher checkpoint: {ckpt}")
    print(f"final loss {info['final_loss']:.4f}, masked accuracy {info['masked_accuracy']:.3f}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import Trainer, load_teacher_checkpoint, prepare_task

    cfg = _load_config(args)
    if args.strategy is not None:
        strategies = {s.strip() for s in args.strategy.split(",") if s.strip()}
        cfg = cfg.with_strategy(strategies)
    out = Path(cfg.out_dir or "runs/train")
    out.mkdir(parents=True, exist_ok=True)
    data = prepare_task(cfg)
    teacher = None
    if cfg.needs_teacher:
        if not args.teacher:
            raise ConfigError("the chosen strategies need --teacher CHECKPOINT")
        teacher, _ = load_teacher_checkpoint(args.teacher, data.src_vocab)
    trainer = Trainer(cfg, data, teacher=teacher)
    history = trainer.run(metrics_path=out / "metrics.jsonl", ckpt_dir=out)
    try:
        from .plots import plot_training_curves

        plot_training_curves(out / "metrics.jsonl", out / "curves.png")
    except ValueError:
        pass
    final = history[-1] if history else None
    if final is not None:
        print(f"trained {trainer.step_count} steps; final loss {final.loss:.4f}")
    if trainer.best_bleu >= 0:
        print(f"best validation BLEU {trainer.best_bleu:.2f}")
    print(f"checkpoints in {out}")
    return EXIT_OK


def cmd_translate(args) -> int:
    from .train import load_translation_system

    system, header, src_vocab, tgt_vocab = load_translation_system(args.model)
    cfg_model = header["config"]["model"]
    in_path, out_path = Path(args.input), Path(args.output)
    if not in_path.exists():
        raise CorpusError(f"input file not found: {in_path}")
    lines = in_path.read_text(encoding="utf-8").splitlines()
    outputs = []
    for line in lines:
        words = line.split()
        if not words:
            outputs.append("")
            continue
        ids = src_vocab.encode(words) + [EOS]
        hyp = system.translate_ids(ids, beam=args.beam, length_penalty=args.lenpen,
                                   max_len=cfg_model["max_len"])
        outputs.append(" ".join(tgt_vocab.decode(hyp)))
    out_path.write_text("".join(o + "\n" for o in outputs), encoding="utf-8")
    print(f"translated {len(lines)} line(s) -> {out_path}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    hyp_path, ref_path = Path(args.hyp), Path(args.ref)
    for p in (hyp_path, ref_path):
        if not p.exists():
            raise CorpusError(f"file not found: {p}")
    hyps = hyp_path.read_text(encoding="utf-8").splitlines()
    refs = ref_path.read_text(encoding="utf-8").splitlines()
    try:
        score = bleu(hyps, refs)
    except ValueError as exc:
        raise CorpusError(str(exc)) from exc
    print(f"BLEU = {score:.2f}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    from .experiment import run_grid

    try:
        payload = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"grid config not found: {args.config}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.config} is not valid JSON: {exc}") from exc
    out = Path(args.out or "runs/experiment")
    rows, aggregated, failures = run_grid(payload, out)
    print((out / "results.txt").read_text(encoding="utf-8"))
    print(f"results: {out / 'results.tsv'} ({len(rows)} runs, {failures} failed)")
    if failures:
        print(f"{failures} cell run(s) failed; see runs.tsv", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fusenmt",
        description="Desk-scale NMT with LM distillation, gated fusion, and rate-scheduled training")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="pretrain a teacher LM on monolingual text")
    p.add_argument("--config", required=True, help="experiment config (JSON)")
    p.add_argument("--seed", type=int, help="override config seed")
    p.add_argument("--out", help="output directory")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("train", help="train the translation model")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--strategy", help="comma list from {ad, ds, sched}; empty for baseline")
    p.add_argument("--teacher", help="teacher checkpoint (needed by ad/ds/sched)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("translate", help="decode a file of source sentences")
    p.add_argument("--model", required=True, help="model checkpoint")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--beam", type=int, default=8)
    p.add_argument("--lenpen", type=float, default=0.6)
    p.set_defaults(fn=cmd_translate)

    p = sub.add_parser("evaluate", help="corpus BLEU of a hypothesis file against a reference file")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("experiment", help="run an ablation grid and render the results table")
    p.add_argument("--config", required=True, help="grid config (JSON)")
    p.add_argument("--out", help="output directory")
    p.set_defaults(fn=cmd_experiment)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CorpusError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # anything else is a runtime failure
        log.exception("unhandled failure")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
