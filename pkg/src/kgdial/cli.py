"""Command-line pipeline driver.

Subcommands cover the whole flow: synth (materialize the bundled
mini-corpus), augment, train-detect, train-select, train-generate,
decode, ensemble, tune-consensus, evaluate. Exit codes: 0 ok, 2 config
error, 3 missing-dependency error.
"""

from __future__ import annotations

import argparse
import sys

from . import pipeline
from .pipeline import (ConfigError, DependencyError, EXIT_CONFIG,
                       EXIT_DEPENDENCY, EXIT_OK, load_config)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default="", help="flat key=value config file")
    parser.add_argument("--seed", type=int, default=None, help="override seed")
    parser.add_argument("--stage-overrides", nargs="*", default=[],
                        metavar="KEY=VALUE", help="per-run config overrides")


def _config(args) -> pipeline.PipelineConfig:
    overrides = list(args.stage_overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return load_config(args.config, overrides)


def cmd_synth(args) -> int:
    import os

    from .corpus import save_corpus, save_knowledge_base
    from .synth import MiniCorpusConfig, build_mini_corpus, save_lexicon

    os.makedirs(args.output, exist_ok=True)
    config = MiniCorpusConfig(n_dialogues=args.dialogues, seed=args.seed or 0)
    dialogues, kb, lexicon = build_mini_corpus(config)
    save_corpus(dialogues, os.path.join(args.output, "logs.json"),
                os.path.join(args.output, "labels.json"))
    save_knowledge_base(kb, os.path.join(args.output, "knowledge.json"))
    save_lexicon(lexicon, os.path.join(args.output, "lexicon.tsv"))
    print(f"wrote {len(dialogues)} dialogues, {len(kb)} snippets to {args.output}")
    return EXIT_OK


def _run_stage(args, runner) -> int:
    config = _config(args)
    outputs = runner(config)
    for path in outputs:
        print(path)
    return EXIT_OK


def cmd_ensemble(args) -> int:
    config = _config(args)
    outputs = pipeline.stage_ensemble(config, args.predictions, args.base)
    for path in outputs:
        print(path)
    return EXIT_OK


def cmd_tune_consensus(args) -> int:
    config = _config(args)
    outputs = pipeline.stage_tune_consensus(config, args.pools, args.references)
    for path in outputs:
        print(path)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    config = _config(args)
    outputs = pipeline.stage_evaluate(config, args.predictions, args.references)
    for path in outputs:
        print(path)
    with open(outputs[1], encoding="utf-8") as fh:
        print(fh.read().rstrip())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kgdial",
        description="knowledge-grounded dialogue pipeline for spoken input")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write the bundled synthetic mini-corpus")
    p.add_argument("--output", required=True)
    p.add_argument("--dialogues", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    for name, runner in [
        ("augment", pipeline.stage_augment),
        ("train-detect", pipeline.stage_train_detect),
        ("train-select", pipeline.stage_train_select),
        ("train-generate", pipeline.stage_train_generate),
        ("decode", pipeline.stage_decode),
    ]:
        p = sub.add_parser(name)
        _add_common(p)
        p.set_defaults(func=lambda a, r=runner: _run_stage(a, r))

    p = sub.add_parser("ensemble", help="error-fixing detection ensemble")
    _add_common(p)
    p.add_argument("--predictions", nargs="+", required=True)
    p.add_argument("--base", required=True, help="base system file name")
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("tune-consensus")
    _add_common(p)
    p.add_argument("--pools", required=True, help="line-delimited pool records")
    p.add_argument("--references", required=True,
                   help="JSON mapping turn_id to reference text")
    p.set_defaults(func=cmd_tune_consensus)

    p = sub.add_parser("evaluate")
    _add_common(p)
    p.add_argument("--predictions", required=True)
    p.add_argument("--references", required=True)
    p.set_defaults(func=cmd_evaluate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY


if __name__ == "__main__":
    sys.exit(main())
