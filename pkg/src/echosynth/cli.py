"""Command-line entry point.

Subcommands cover the whole workflow in order: ``datagen``,
``train-tokenizer``, ``train-generator``, ``generate``, ``evaluate``,
``inspect-tokens``. Every subcommand takes ``--config`` (flat key = value
file), ``--seed``, ``--out``, and repeatable ``--set key=value`` overrides.
Failures print one machine-parsable ``error: <category>: <message>`` line on
standard error and exit nonzero (config 2, missing-input 3, training 4,
evaluation 5).
"""

from __future__ import annotations

import argparse
import sys

from .config import ConfigError, load_config
from .pipeline import (PipelineError, cmd_datagen, cmd_evaluate,
                       cmd_generate, cmd_inspect_tokens, cmd_train_generator,
                       cmd_train_tokenizer)

EXIT_CODES = {"config": 2, "missing-input": 3, "training": 4, "evaluation": 5}


def _common_flags(sp: argparse.ArgumentParser, out_required: bool = True):
    sp.add_argument("--config", default=None,
                    help="flat key = value config file")
    sp.add_argument("--seed", type=int, default=None,
                    help="override the config seed")
    sp.add_argument("--out", required=out_required,
                    default=None, help="output directory")
    sp.add_argument("--set", action="append", default=[], dest="sets",
                    metavar="KEY=VALUE", help="override one config key")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="echosynth",
        description="ECG-conditioned echocardiography video generation "
                    "at desk scale")
    sub = p.add_subparsers(dest="command", required=True)

    _common_flags(sub.add_parser(
        "datagen", help="generate the paired synthetic corpus"))
    _common_flags(sub.add_parser(
        "train-tokenizer", help="stage 1: train the video tokenizer"))
    _common_flags(sub.add_parser(
        "train-generator",
        help="stage 2: train the token generator (frozen tokenizer)"))
    _common_flags(sub.add_parser(
        "evaluate", help="reconstruction + EF agreement on held-out clips"))

    g = sub.add_parser("generate", help="sample a video from an ECG")
    _common_flags(g)
    g.add_argument("--mode", default=None,
                   choices=["ecg_only", "first_frame", "continuation"])
    g.add_argument("--clip", default=None,
                   help="corpus clip id supplying the conditioning")
    g.add_argument("--chunks", type=int, default=None,
                   help="extra extrapolated windows to stitch on")

    it = sub.add_parser("inspect-tokens",
                        help="tokenize a clip and dump the token grid")
    _common_flags(it, out_required=False)
    it.add_argument("--clip", required=True,
                    help="corpus clip id or a frames directory")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.sets, args.seed)
        if args.command == "generate":
            over = {}
            if args.mode is not None:
                over["sample.mode"] = args.mode
            if args.clip is not None:
                over["sample.clip"] = args.clip
            if args.chunks is not None:
                over["sample.chunks"] = args.chunks
            if over:
                cfg = cfg.with_overrides(**over)

        if args.command == "datagen":
            cmd_datagen(cfg, args.out)
        elif args.command == "train-tokenizer":
            cmd_train_tokenizer(cfg, args.out)
        elif args.command == "train-generator":
            cmd_train_generator(cfg, args.out)
        elif args.command == "generate":
            cmd_generate(cfg, args.out)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, args.out)
        elif args.command == "inspect-tokens":
            cmd_inspect_tokens(cfg, args.clip, args.out)
    except ConfigError as exc:
        return _fail("config", exc)
    except PipelineError as exc:
        return _fail(exc.category, exc)
    return 0


def _fail(category: str, exc: Exception) -> int:
    print(f"error: {category}: {exc}", file=sys.stderr)
    return EXIT_CODES.get(category, 1)


if __name__ == "__main__":
    sys.exit(main())
