"""Command-line front end.

Verbs: `expand` runs the whole pipeline; `decode`, `plan`, `rank`,
`score` and `eval` run one stage against a shared run directory;
`ablate` sweeps a (list size, occurrences) grid.

Configuration precedence: built-in defaults, then `--config` JSON, then
`--set key=value` overrides, then explicit flags. The only thing read
from the environment is the API key for the remote ranker.

Exit codes: 0 success, 2 config error, 3 data error, 4 degraded-list
fraction above the configured threshold, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigError, DataError, ListExpandError
from .metrics import report_to_text
from .pipeline import (
    RunConfig,
    RunPaths,
    load_candidates,
    load_plan_lists,
    load_results,
    resolve_run_dir,
    run_ablation,
    run_expand,
    stage_decode,
    stage_eval,
    stage_plan,
    stage_rank,
    stage_score,
)
from .ranker import TranscriptStore
from .corpus import load_queries, load_vocabulary

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DEGRADED = 4


def _add_common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--vocab", help="vocabulary JSONL file")
    parser.add_argument("--queries", help="query JSONL file")
    parser.add_argument("--out", help="output root for timestamped run dirs")
    parser.add_argument("--run-dir", help="explicit run directory (enables resume)")
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE",
                        help="dotted config override, e.g. sampler.occurrences=3")
    # decoder
    parser.add_argument("--width", type=int, help="beam width")
    parser.add_argument("--num-candidates", type=int,
                        help="candidates to decode per query")
    parser.add_argument("--scorer", choices=("heuristic", "uniform"),
                        help="token scorer for decoding")
    parser.add_argument("--include-seeds", action="store_true", default=None,
                        help="let seed entities appear among candidates")
    # sampler
    parser.add_argument("--list-size", type=int,
                        help="entities per sample list")
    parser.add_argument("--occurrences", type=int,
                        help="sample lists each entity appears in")
    parser.add_argument("--plan-seed", help="sampling seed")
    # ranker
    parser.add_argument("--ranker",
                        choices=("perfect-oracle", "noisy-oracle", "remote-chat"),
                        help="ranker kind")
    parser.add_argument("--swap-rate", type=float,
                        help="noisy oracle adjacent-swap rate in [0,1]")
    parser.add_argument("--ranker-seed", help="noisy oracle rng seed")
    parser.add_argument("--base-url", help="chat endpoint base URL")
    parser.add_argument("--model", help="chat model name")
    parser.add_argument("--timeout", type=float, help="request timeout seconds")
    parser.add_argument("--max-attempts", type=int,
                        help="total attempts per request")
    parser.add_argument("--temperature", type=float, help="sampling temperature")
    parser.add_argument("--api-key-env",
                        help="environment variable holding the API key")
    # metrics / execution
    parser.add_argument("--cutoffs", help="comma-separated K values, e.g. 10,20,50,100")
    parser.add_argument("--max-in-flight", type=int,
                        help="concurrent ranking requests")
    parser.add_argument("--degraded-threshold", type=float,
                        help="degraded fraction above which the run exits 4")
    parser.add_argument("--strict-degraded", action="store_true", default=None,
                        help="exclude degraded lists from aggregation")
    parser.add_argument("-v", "--verbose", action="count", default=0)


def _deep_update(target: dict, updates: dict) -> dict:
    for key, value in updates.items():
        if isinstance(value, dict) and isinstance(target.get(key), dict):
            _deep_update(target[key], value)
        else:
            target[key] = value
    return target


def _apply_override(config: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set expects KEY=VALUE, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = config
    parts = key.strip().split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set path {key!r} crosses a non-object value")
    node[parts[-1]] = value


def build_config(args: argparse.Namespace) -> RunConfig:
    data = RunConfig().to_dict()
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            file_data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        _deep_update(data, file_data)
    for assignment in args.overrides:
        _apply_override(data, assignment)

    flat = {
        "vocab": ("vocab_path",),
        "queries": ("queries_path",),
        "out": ("out_dir",),
        "run_dir": ("run_dir",),
        "width": ("decoder", "width"),
        "num_candidates": ("decoder", "num_candidates"),
        "scorer": ("decoder", "scorer"),
        "include_seeds": ("decoder", "include_seeds"),
        "list_size": ("sampler", "list_size"),
        "occurrences": ("sampler", "occurrences"),
        "plan_seed": ("sampler", "seed"),
        "ranker": ("ranker", "kind"),
        "swap_rate": ("ranker", "swap_rate"),
        "ranker_seed": ("ranker", "seed"),
        "base_url": ("ranker", "base_url"),
        "model": ("ranker", "model"),
        "timeout": ("ranker", "timeout"),
        "max_attempts": ("ranker", "max_attempts"),
        "temperature": ("ranker", "temperature"),
        "api_key_env": ("ranker", "api_key_env"),
        "max_in_flight": ("max_in_flight",),
        "degraded_threshold": ("degraded_threshold",),
        "strict_degraded": ("strict_degraded",),
    }
    for arg_name, path_parts in flat.items():
        value = getattr(args, arg_name, None)
        if value is None:
            continue
        node = data
        for part in path_parts[:-1]:
            node = node[part]
        node[path_parts[-1]] = value
    if getattr(args, "cutoffs", None):
        try:
            data["cutoffs"] = [int(k) for k in str(args.cutoffs).split(",") if k]
        except ValueError as exc:
            raise ConfigError(f"bad --cutoffs value {args.cutoffs!r}") from exc

    try:
        config = RunConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    config.validate()
    return config


def _require_run_dir(config: RunConfig, verb: str) -> None:
    if not config.run_dir:
        raise ConfigError(f"`{verb}` needs --run-dir so stages can share state")


def _load_inputs(config: RunConfig):
    vocab = load_vocabulary(config.vocab_path)
    queries = load_queries(config.queries_path, vocab)
    return vocab, queries


def _degradation_exit(config: RunConfig, degraded: int, total: int) -> int:
    if total and degraded / total > config.degraded_threshold:
        print(f"degraded lists: {degraded}/{total} exceeds threshold "
              f"{config.degraded_threshold}", file=sys.stderr)
        return EXIT_DEGRADED
    return EXIT_OK


def cmd_expand(config: RunConfig) -> int:
    manifest = run_expand(config)
    print(f"run directory: {manifest.run_dir}")
    counts = manifest.counts
    print(f"queries: {counts['queries']}  lists: {counts['lists']}  "
          f"ranked new: {counts['ranked_new']}  reused: {counts['reused']}  "
          f"degraded: {counts['degraded']}")
    if manifest.metrics_summary:
        paths = RunPaths(manifest.run_dir)
        payload = json.loads(paths.metrics.read_text(encoding="utf-8"))
        ks = payload["cutoffs"]
        combined = payload["partitions"]["combined"]
        line = "  ".join(
            f"MAP@{k}={combined['map'][str(k)] * 100:.2f}" for k in ks
        )
        print(line)
    return _degradation_exit(config, counts["degraded"], counts["lists"])


def cmd_decode(config: RunConfig) -> int:
    _require_run_dir(config, "decode")
    paths = resolve_run_dir(config)
    vocab, queries = _load_inputs(config)
    candidates = stage_decode(config, vocab, queries, paths)
    total = sum(len(c) for c in candidates.values())
    print(f"decoded {total} candidates over {len(candidates)} queries "
          f"-> {paths.candidates}")
    return EXIT_OK


def cmd_plan(config: RunConfig) -> int:
    _require_run_dir(config, "plan")
    paths = resolve_run_dir(config)
    candidates = load_candidates(paths)
    plans = stage_plan(config, candidates, paths)
    lists = sum(len(plan.lists) for plan in plans.values())
    print(f"planned {lists} sample lists -> {paths.plan}")
    return EXIT_OK


def cmd_rank(config: RunConfig) -> int:
    _require_run_dir(config, "rank")
    paths = resolve_run_dir(config)
    vocab, queries = _load_inputs(config)
    lists_by_query = load_plan_lists(paths)
    counts = stage_rank(config, vocab, queries, lists_by_query, paths)
    print(f"ranked {counts['ranked_new']} lists "
          f"({counts['reused']} reused) -> {paths.transcripts}")
    planned = {
        sample.list_id
        for lists in lists_by_query.values() for sample in lists
    }
    records = TranscriptStore(paths.transcripts).load()
    degraded = sum(
        1 for list_id in planned
        if records.get(list_id, {}).get("degraded")
    )
    return _degradation_exit(config, degraded, len(planned))


def cmd_score(config: RunConfig) -> int:
    _require_run_dir(config, "score")
    paths = resolve_run_dir(config)
    vocab = load_vocabulary(config.vocab_path)
    candidates = load_candidates(paths)
    lists_by_query = load_plan_lists(paths)
    results, degraded = stage_score(config, vocab, candidates,
                                    lists_by_query, paths)
    print(f"scored {len(results)} queries ({degraded} degraded lists) "
          f"-> {paths.result}")
    return EXIT_OK


def cmd_eval(config: RunConfig) -> int:
    _require_run_dir(config, "eval")
    paths = resolve_run_dir(config)
    _, queries = _load_inputs(config)
    results = load_results(paths)
    report = stage_eval(config, results, queries, paths)
    if report is None:
        print("no ground truth available; nothing to evaluate")
        return EXIT_DATA
    print(report_to_text(report))
    print(f"metrics -> {paths.metrics}")
    return EXIT_OK


def cmd_ablate(config: RunConfig, args: argparse.Namespace) -> int:
    try:
        list_sizes = [int(v) for v in args.list_sizes.split(",") if v]
        occurrence_values = [int(v) for v in args.occurrence_values.split(",") if v]
    except ValueError as exc:
        raise ConfigError(f"bad ablation grid: {exc}") from exc
    if not list_sizes or not occurrence_values:
        raise ConfigError("ablation needs at least one list size and one "
                          "occurrence value")
    report = run_ablation(config, list_sizes, occurrence_values)
    print(f"ablation report: {report['base_run_dir']}/ablation.json")
    for cell in report["cells"]:
        if "error" in cell:
            print(f"  n={cell['list_size']} o={cell['occurrences']}: "
                  f"FAILED ({cell['error']})")
        else:
            tau = cell["mean_kendall_tau"]
            tau_text = f"{tau:.4f}" if tau is not None else "n/a"
            print(f"  n={cell['list_size']} o={cell['occurrences']}: "
                  f"tau={tau_text}")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="listexpand",
        description="Entity set expansion via balanced listwise ranking",
    )
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb, help_text in (
        ("expand", "run the full pipeline"),
        ("decode", "generate candidates for every query"),
        ("plan", "build balanced sample lists from decoded candidates"),
        ("rank", "rank pending sample lists into the transcript store"),
        ("score", "aggregate transcripts into the final ordering"),
        ("eval", "compute MAP@K / P@K from results and ground truth"),
        ("ablate", "sweep a (list size, occurrences) grid"),
    ):
        verb_parser = sub.add_parser(verb, help=help_text)
        _add_common_flags(verb_parser)
        if verb == "ablate":
            verb_parser.add_argument("--list-sizes", default="3,5,7",
                                     help="comma-separated list sizes")
            verb_parser.add_argument("--occurrence-values", default="2,5,10",
                                     help="comma-separated occurrence counts")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose > 1 else
        logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        config = build_config(args)
        if args.verb == "expand":
            return cmd_expand(config)
        if args.verb == "decode":
            return cmd_decode(config)
        if args.verb == "plan":
            return cmd_plan(config)
        if args.verb == "rank":
            return cmd_rank(config)
        if args.verb == "score":
            return cmd_score(config)
        if args.verb == "eval":
            return cmd_eval(config)
        if args.verb == "ablate":
            return cmd_ablate(config, args)
        raise ConfigError(f"unknown verb {args.verb!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ListExpandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
