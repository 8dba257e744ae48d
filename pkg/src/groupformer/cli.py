"""Command line entry point: ``groupformer <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .harness import (
    ExperimentConfig,
    cmd_build_corpus,
    cmd_chat,
    cmd_compare_strategies,
    cmd_eval,
    cmd_latency,
    cmd_train,
)


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    data = cfg.data
    for flag, fieldname in (("corpus", "corpus_path"), ("lexicon", "lexicon_path"),
                            ("n_dialogues", "n_dialogues"), ("max_turns", "max_turns"),
                            ("overfit", "overfit_samples")):
        val = getattr(args, flag, None)
        if val is not None:
            data = replace(data, **{fieldname: val})
    cfg = replace(cfg, data=data)
    if getattr(args, "strategy", None):
        cfg = replace(cfg, strategy=args.strategy)
    train = cfg.train
    for flag in ("max_steps", "peak_lr", "batch_size"):
        val = getattr(args, flag, None)
        if val is not None:
            train = replace(train, **{flag: val})
    cfg = replace(cfg, train=train)
    if getattr(args, "seed", None) is not None:
        s = args.seed
        cfg = replace(
            cfg,
            model=replace(cfg.model, seed=s),
            train=replace(cfg.train, seed=s),
            decode=replace(cfg.decode, sampling=replace(cfg.decode.sampling, seed=s)),
        )
    lat = cfg.decode.latency
    for flag, fieldname in (("R", "R"), ("mode", "mode"), ("step_ms", "fixed_step_ms")):
        val = getattr(args, flag, None)
        if val is not None:
            lat = replace(lat, **{fieldname: val})
    return replace(cfg, decode=replace(cfg.decode, latency=lat))


def _emit(obj, out: str | None) -> None:
    text = json.dumps(obj, indent=2, default=str)
    if out:
        Path(out).write_text(text + "\n")
    print(text)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--corpus", help="corpus JSONL path")
    p.add_argument("--lexicon", help="lexicon JSON path")
    p.add_argument("--strategy", choices=("group", "reduce"))
    p.add_argument("--overfit", type=int, metavar="N", help="train/eval on an N-sample memorization set")
    p.add_argument("--out", help="write the JSON result here")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="groupformer", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-corpus", help="generate a synthetic dialogue corpus")
    _common(p)
    p.add_argument("--n-dialogues", type=int)
    p.add_argument("--max-turns", type=int)
    p.add_argument("--lexicon-out")

    p = sub.add_parser("train", help="train a model")
    _common(p)
    p.add_argument("--out-dir")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--peak-lr", type=float)
    p.add_argument("--batch-size", type=int)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--check", action="store_true", help="exit 1 if any report check fails")
    p.add_argument("--n-eval", type=int)

    p = sub.add_parser("chat", help="run a scripted multi-turn speech chat")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--script", required=True, help='JSON list of user turns or {"turns": [...]}')

    for name, helptext in (("latency", "first-audio latency report"),):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--R", type=int, help="vocoder receptive field")
        p.add_argument("--mode", choices=("measured", "fixed"))
        p.add_argument("--step-ms", type=float)

    p = sub.add_parser("compare", help="compare group and reduce strategies")
    p.add_argument("--config-group")
    p.add_argument("--config-reduce")
    p.add_argument("--checkpoint-group", required=True)
    p.add_argument("--checkpoint-reduce", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--overfit", type=int)
    p.add_argument("--R", type=int)
    p.add_argument("--mode", choices=("measured", "fixed"))
    p.add_argument("--step-ms", type=float)
    p.add_argument("--out")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return _run(args)
    except (FileNotFoundError, ValueError) as exc:
        print(f"groupformer {args.command}: {exc}", file=sys.stderr)
        return 2


def _run(args) -> int:

    if args.command == "build-corpus":
        cfg = _load_config(args)
        if args.seed is not None:
            cfg = replace(cfg, data=replace(cfg.data, corpus_seed=args.seed))
        out = args.out or cfg.data.corpus_path or "corpus.jsonl"
        stats = cmd_build_corpus(cfg, out, args.lexicon_out)
        print(json.dumps(stats, indent=2))
        return 0
    if args.command == "train":
        cfg = _load_config(args)
        _, records = cmd_train(cfg, args.out_dir)
        _emit({"final": records[-1] if records else None, "out_dir": args.out_dir or cfg.out_dir}, args.out)
        return 0
    if args.command == "eval":
        cfg = _load_config(args)
        report = cmd_eval(cfg, args.checkpoint, args.n_eval)
        _emit(report.to_json(), args.out)
        if args.check and not report.ok:
            failed = [k for k, v in report.checks.items() if not v]
            print(f"failed checks: {failed}", file=sys.stderr)
            return 1
        return 0
    if args.command == "chat":
        cfg = _load_config(args)
        _emit(cmd_chat(cfg, args.checkpoint, args.script), args.out)
        return 0
    if args.command == "latency":
        cfg = _load_config(args)
        _emit(cmd_latency(cfg, args.checkpoint), args.out)
        return 0
    if args.command == "compare":
        cfgs = []
        for path, strategy in ((args.config_group, "group"), (args.config_reduce, "reduce")):
            ns = argparse.Namespace(config=path, seed=args.seed, overfit=args.overfit, strategy=strategy,
                                    R=args.R, mode=args.mode, step_ms=args.step_ms)
            cfgs.append(_load_config(ns))
        _emit(cmd_compare_strategies(cfgs[0], cfgs[1], (args.checkpoint_group, args.checkpoint_reduce)), args.out)
        return 0
    return 2


if __name__ == "__main__":
    raise SystemExit(main())
