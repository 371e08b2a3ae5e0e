"""
===============================================================================
Project   : mvprompt
Module    : app/main.py
Created   : 2025-11-11
Author    : Florian
Purpose   : This is the command-line entry point of mvprompt
            (`python -m app.main <command>`).

@docstyle: google
@language: english
@voice: imperative
===============================================================================
"""


import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

from pydantic import ValidationError

from app.core.errors import MvpError, TupleParseError
from app.core.logging import setup_logging
from app.core.schemas import CategorySet, Strategy, Task
from app.helpers.lexicon import build_lexicon, iter_spans
from app.helpers.permutation_helper import default_permutation, permutation_from_id
from app.services.dataset_service import load_categories
from app.services.eval_service import format_table, report
from app.services.grammar_service import TupleSchema, check_output, export_ebnf
from app.services.run_service import cmd_lint, cmd_run, cmd_sweep, format_sweep, load_run_config

logger = logging.getLogger(__name__)


def _int_list(value: str) -> list[int]:
    try:
        return [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got '{value}'")


def _categories(value: str) -> CategorySet:
    """Reads categories from a JSON file, or from a comma-separated list."""
    if Path(value).is_file():
        return load_categories(Path(value))
    return CategorySet(categories=tuple(c.strip() for c in value.split(",") if c.strip()))


# ------------------------------
#  COMMANDS
# ------------------------------

def _run(args: argparse.Namespace) -> int:
    backend = {
        "kind": args.backend,
        "oracle_path": args.oracle,
        "base_url": args.base_url,
        "model": args.model,
        "top_logprobs": args.top_logprobs,
    }
    overrides = {
        "task": args.task,
        "instances": args.instances,
        "categories": args.categories,
        "pool": args.pool,
        "dataset": args.dataset,
        "strategy": args.strategy,
        "m": args.m,
        "k": args.k,
        "seeds": args.seeds,
        "template_dir": args.template_dir,
        "output_dir": args.output_dir,
        "max_in_flight": args.max_in_flight,
        "eff_quantile": args.eff_quantile,
        "prefix_grouping": False if args.no_prefix_grouping else None,
        "guided": False if args.no_guided else None,
        "backend": {k: v for k, v in backend.items() if v is not None} or None,
    }
    config = load_run_config(args.config, overrides)
    summary = cmd_run(config)
    if summary.report is not None:
        print(format_table(summary.report), end="")
    for seed, ledger in summary.ledgers.items():
        print(f"seed {seed} ledger: {json.dumps(ledger.model_dump(mode='json'), sort_keys=True)}")
    return 0


def _eval(args: argparse.Namespace) -> int:
    result = report(args.run, args.gold, Task.of(args.task) if args.task else None)
    print(format_table(result), end="")
    return 0


def _sweep(args: argparse.Namespace) -> int:
    results = cmd_sweep(args.run, args.gold, args.m, Task.of(args.task) if args.task else None)
    print(format_sweep(results), end="")
    return 0


def _lint(args: argparse.Namespace) -> int:
    warnings = cmd_lint(args.instances, args.categories, Task.of(args.task))
    for warning in warnings:
        print(warning)
    return 0


def _lexicon(args: argparse.Namespace) -> int:
    lexicon = build_lexicon(args.sentence)
    print(" | ".join(t.text for t in lexicon.tokens))
    print(f"{len(lexicon.tokens)} tokens, {lexicon.span_count} spans, {len(lexicon.spans)} distinct")
    if args.spans:
        for i, j, text in iter_spans(lexicon):
            print(f"{i}\t{j}\t{text}")
    return 0


def _grammar(args: argparse.Namespace) -> int:
    task = Task.of(args.task)
    permutation = permutation_from_id(task, args.permutation) if args.permutation else default_permutation(task)
    schema = TupleSchema(permutation=permutation, lexicon=build_lexicon(args.sentence),
                         categories=_categories(args.categories))
    if args.grammar_command == "export":
        print(export_ebnf(schema), end="")
        return 0

    check = check_output(args.output, schema)
    if check.accepted:
        print(f"✅ {check.message}")
        for t in sorted(check.tuples, key=lambda t: t.sort_key()):
            print(json.dumps(t.to_json(), ensure_ascii=False))
        return 0
    print(f"❌ rejected at byte {check.offset} (1-based): {check.message}")
    return TupleParseError.exit_code


# ------------------------------
#  PARSER
# ------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvprompt", description="Multi-view prompting for aspect-based sentiment analysis")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING (default: LOG_LEVEL or INFO)")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment")
    run.add_argument("--config", type=Path, help="run configuration (JSON)")
    run.add_argument("--task", choices=["TASD", "ASQP", "tasd", "asqp"])
    run.add_argument("--instances", type=Path)
    run.add_argument("--categories", type=Path)
    run.add_argument("--pool", type=Path, help="labelled demonstration pool")
    run.add_argument("--dataset", help="dataset name (default: instances file stem)")
    run.add_argument("--strategy", choices=[s.value for s in Strategy])
    run.add_argument("--m", type=int)
    run.add_argument("--k", type=int, help="number of demonstrations")
    run.add_argument("--seeds", type=_int_list, help="e.g. 1,2,3")
    run.add_argument("--template-dir", type=Path)
    run.add_argument("--output-dir", type=Path)
    run.add_argument("--max-in-flight", type=int)
    run.add_argument("--eff-quantile", type=float)
    run.add_argument("--no-prefix-grouping", action="store_true", help="recompute every prompt prefix")
    run.add_argument("--no-guided", action="store_true", help="decode without the tuple grammar")
    run.add_argument("--backend", choices=["oracle", "remote"])
    run.add_argument("--oracle", type=Path, help="oracle configuration (JSON)")
    run.add_argument("--base-url")
    run.add_argument("--model")
    run.add_argument("--top-logprobs", type=int)
    run.set_defaults(handler=_run)

    ev = sub.add_parser("eval", help="score a run directory")
    ev.add_argument("--run", type=Path, required=True)
    ev.add_argument("--gold", type=Path, required=True)
    ev.add_argument("--task", help="task (default: from the run's config.json)")
    ev.set_defaults(handler=_eval)

    sweep = sub.add_parser("sweep", help="re-aggregate stored views for several m")
    sweep.add_argument("--run", type=Path, required=True)
    sweep.add_argument("--gold", type=Path, required=True)
    sweep.add_argument("--m", type=_int_list, required=True, help="e.g. 1,3,5")
    sweep.add_argument("--task")
    sweep.set_defaults(handler=_sweep)

    lint = sub.add_parser("lint", help="check gold tuples against the grammar")
    lint.add_argument("--instances", type=Path, required=True)
    lint.add_argument("--categories", type=Path, required=True)
    lint.add_argument("--task", required=True)
    lint.set_defaults(handler=_lint)

    lex = sub.add_parser("lexicon", help="show the tokens and spans of a sentence")
    lex.add_argument("sentence")
    lex.add_argument("--spans", action="store_true", help="list every span")
    lex.set_defaults(handler=_lexicon)

    grammar = sub.add_parser("grammar", help="grammar diagnostics")
    grammar_sub = grammar.add_subparsers(dest="grammar_command", required=True)
    for name, helptext in (("check", "validate an output string"), ("export", "print the EBNF grammar")):
        cmd = grammar_sub.add_parser(name, help=helptext)
        if name == "check":
            cmd.add_argument("output")
        cmd.add_argument("--sentence", required=True)
        cmd.add_argument("--categories", required=True, help="JSON file or comma-separated list")
        cmd.add_argument("--task", required=True)
        cmd.add_argument("--permutation", help="e.g. at-ac-p (default: natural order)")
        cmd.set_defaults(handler=_grammar)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    """
    Parses the command line and runs the selected command.

    Returns:
        int: 0 on success, the error's exit code otherwise (2 configuration,
            3 backend or grammar, 4 evaluation, 130 interrupted).
    """
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        return args.handler(args)
    except MvpError as e:
        logger.error(f"❌ {type(e).__name__}: {e.detail}")
        return e.exit_code
    except ValidationError as e:
        logger.error(f"❌ Invalid configuration: {e}")
        return 2
    except KeyboardInterrupt:
        logger.warning("⚠️ Interrupted")
        return 130


if __name__ == "__main__":
    sys.exit(main())
