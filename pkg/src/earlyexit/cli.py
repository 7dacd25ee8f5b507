"""Command line entry point: gen-model, profile, eval, report.

Exit codes: 0 success, 1 runtime or data error, 2 usage error. A JSON file
passed with ``--config`` supplies defaults that explicit flags override;
``ADEE_SEED`` overrides ``--seed`` when set.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from .bench import Policy, evaluate, load_dataset, load_task, save_task, split_dataset, write_dataset
from .errors import EarlyExitError
from .fixtures import planted_examples, planted_model, waymo_task
from .model import ModelConfig
from .planted import build_random_model
from .profiler import MODES, dumps_report, profile_task
from .reports import emit_report, load_eval_results, render_eval_csv, render_eval_markdown, \
    render_exit_layer_table, write_text
from .weights import load_model, save_model

log = logging.getLogger("earlyexit")


def _default_jobs() -> int:
    return os.cpu_count() or 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="earlyexit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file with default flag values")
        p.add_argument("--seed", type=int, default=0)

    g = sub.add_parser("gen-model", help="write a planted or random toy model")
    common(g)
    g.add_argument("--layers", type=int, required=True)
    g.add_argument("--plant", type=int, help="layer where labels become decodable")
    g.add_argument("--distractor-layer", type=int,
                   help="layer above the plant that overwrites one key's answer")
    g.add_argument("--out", required=True)
    g.add_argument("--vocab-size", type=int, default=32, help="random models only")
    g.add_argument("--d-model", type=int, default=32, help="random models only")
    g.add_argument("--heads", type=int, default=4)
    g.add_argument("--d-ff", type=int, default=64, help="random models only")
    g.add_argument("--max-seq", type=int, default=32, help="random models only")
    g.add_argument("--task-out", help="also write the matching task file")
    g.add_argument("--dataset-out", help="also write a matching JSONL dataset")
    g.add_argument("--examples-per-class", type=int, default=27)

    p = sub.add_parser("profile", help="select the optimal exit layer for a task")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--mode", choices=MODES, default="staged")
    p.add_argument("--patience", type=int, default=2)
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--out", help="report path (default stdout)")

    e = sub.add_parser("eval", help="compare full inference with an early-exit policy")
    common(e)
    e.add_argument("--model", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--task", required=True)
    e.add_argument("--policy", choices=("full", "fixed", "dynamic"), default="fixed")
    e.add_argument("--exit-layer", type=int)
    e.add_argument("--profile", help="profile report supplying the exit layer")
    e.add_argument("--threshold", type=float)
    e.add_argument("--format", choices=("md", "csv", "json"), default="json")
    e.add_argument("--timing", action="store_true",
                   help="include wall-clock latency (makes output machine dependent)")
    e.add_argument("--jobs", type=int, default=None)
    e.add_argument("--out", help="output path (default stdout)")

    r = sub.add_parser("report", help="render json reports as tables")
    r.add_argument("inputs", nargs="+")
    r.add_argument("--format", choices=("md", "csv"), default="md")
    r.add_argument("--out")
    r.add_argument("--config", help=argparse.SUPPRESS)
    return parser


def _config_defaults(parser: argparse.ArgumentParser, argv: List[str]) -> None:
    """Apply ``--config`` values as subcommand defaults before parsing."""
    path = None
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            path = argv[i + 1]
        elif tok.startswith("--config="):
            path = tok.split("=", 1)[1]
    if path is None:
        return
    try:
        with open(path, encoding="utf-8") as fh:
            defaults = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        parser.error(f"cannot read config {path}: {exc}")
    if not isinstance(defaults, dict):
        parser.error(f"config {path} must hold a JSON object")
    defaults = {k.replace("-", "_"): v for k, v in defaults.items()}
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    command = next((t for t in argv if t in subparsers.choices), None)
    if command is None:
        return
    sub = subparsers.choices[command]
    sub.set_defaults(**defaults)
    for action in sub._actions:
        if action.dest in defaults:
            action.required = False


def parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    argv = sys.argv[1:] if argv is None else [str(a) for a in argv]
    parser = build_parser()
    _config_defaults(parser, argv)
    args = parser.parse_args(argv)
    if os.environ.get("ADEE_SEED") and hasattr(args, "seed"):
        try:
            args.seed = int(os.environ["ADEE_SEED"])
        except ValueError:
            parser.error("ADEE_SEED must be an integer")
    _check(parser, args)
    return args


def _check(parser: argparse.ArgumentParser, args) -> None:
    if args.command == "gen-model":
        if args.layers < 1:
            parser.error("--layers must be >= 1")
        if args.plant is not None and not 1 <= args.plant <= args.layers:
            parser.error(f"--plant {args.plant} must lie in [1, {args.layers}]")
        if args.distractor_layer is not None:
            if args.plant is None:
                parser.error("--distractor-layer requires --plant")
            if not args.plant < args.distractor_layer <= args.layers:
                parser.error("--distractor-layer must lie above --plant and <= --layers")
        if (args.task_out or args.dataset_out) and args.plant is None:
            parser.error("--task-out/--dataset-out require --plant")
    if args.command == "eval" and args.policy == "fixed" \
            and args.profile is None and args.exit_layer is None:
        parser.error("--policy fixed needs --profile or --exit-layer")
    if getattr(args, "seed", 0) is not None and getattr(args, "seed", 0) < 0:
        parser.error("--seed must be >= 0")


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        write_text(out, text)
    else:
        sys.stdout.write(text)


def cmd_gen_model(args) -> int:
    if args.plant is not None:
        model = planted_model(args.layers, args.plant, args.seed, args.distractor_layer)
    else:
        cfg = ModelConfig(args.layers, args.d_model, args.heads, args.d_ff,
                          args.vocab_size, args.max_seq)
        model = build_random_model(cfg, args.seed)
    save_model(model, args.out)
    if args.task_out or args.dataset_out:
        task = waymo_task()
        if args.task_out:
            save_task(task, args.task_out)
        if args.dataset_out:
            examples = planted_examples(task, args.examples_per_class, args.seed,
                                        single_distracted=args.distractor_layer is not None)
            write_dataset(examples, args.dataset_out)
    return 0


def _load_inputs(args):
    model = load_model(args.model)
    task = load_task(args.task)
    examples = load_dataset(args.dataset, task, model.config.vocab_size, model.config.d_model)
    return model, task, examples


def cmd_profile(args) -> int:
    model, task, examples = _load_inputs(args)
    profiling, held_out = split_dataset(examples, args.seed)
    report = profile_task(model, profiling, task.match_spec, args.mode,
                          jobs=args.jobs or _default_jobs(), patience=args.patience)
    report = {"model": Path(args.model).stem, **report,
              "seed": args.seed, "split": {"profiling": len(profiling), "eval": len(held_out)}}
    _emit(dumps_report(report), args.out)
    return 0


def cmd_eval(args) -> int:
    model, task, examples = _load_inputs(args)
    _, held_out = split_dataset(examples, args.seed)
    if not held_out:
        raise EarlyExitError("evaluation split is empty; need at least 9 examples in a class")
    if args.policy == "fixed":
        if args.exit_layer is not None:
            policy = Policy.fixed(args.exit_layer)
        else:
            with open(args.profile, encoding="utf-8") as fh:
                policy = Policy.fixed(json.load(fh)["optimal_layer"])
    elif args.policy == "dynamic":
        policy = Policy.dynamic(args.threshold)
    else:
        policy = Policy.full()
    jobs = args.jobs or _default_jobs()
    results = [evaluate(model, held_out, task, Policy.full(), jobs)]
    if policy.kind != "full":
        results.append(evaluate(model, held_out, task, policy, jobs))
    _emit(emit_report(results, args.format, timing=args.timing), args.out)
    return 0


def _read_reports(paths):
    profiles, evals = [], []
    for path in paths:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        items = data if isinstance(data, list) else [data]
        for item in items:
            if isinstance(item, dict) and item.get("kind") == "eval":
                evals.append(item)
            elif isinstance(item, dict) and "optimal_layer" in item:
                profiles.append(item)
            else:
                raise EarlyExitError(f"{path}: not a profile or eval report")
    return profiles, evals


def cmd_report(args) -> int:
    try:
        profiles, evals = _read_reports(args.inputs)
    except json.JSONDecodeError as exc:
        raise EarlyExitError(f"unreadable report: {exc}") from exc
    if not profiles and not evals:
        raise EarlyExitError("no results")
    parts = []
    if profiles:
        parts.append(render_exit_layer_table(profiles, args.format))
    for payload in evals:
        results = load_eval_results(payload)
        timing = bool(payload.get("timing"))
        render = render_eval_markdown if args.format == "md" else render_eval_csv
        parts.append(render(results, timing))
    _emit(("\n" if args.format == "md" else "").join(parts), args.out)
    return 0


COMMANDS = {"gen-model": cmd_gen_model, "profile": cmd_profile, "eval": cmd_eval,
            "report": cmd_report}


def main(argv: Optional[List[str]] = None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (EarlyExitError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
