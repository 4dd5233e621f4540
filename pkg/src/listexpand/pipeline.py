"""End-to-end orchestration: decode, plan, rank, score, evaluate.

Every stage reads its inputs from and writes its outputs to a single run
directory, so the pipeline can be driven stage by stage from the CLI or
all at once by `run_expand`. Decoding and planning are pure functions of
the config, which makes reruns cheap and safe: a rerun rebuilds them,
verifies the plan digest against anything already on disk, and reuses
every ranked list found in the transcript store. Aggregation always
recomputes from transcripts at scoring time, never from in-memory state,
so an interrupted ranking stage can simply be rerun.

Run directory layout:

    candidates.jsonl   decoded candidates per query
    plan.jsonl         one sample list per line
    transcripts.jsonl  one ranking outcome per line
    result.json        final expansion ordering per query
    metrics.json       MAP@K / P@K report (when ground truth exists)
    manifest.json      config snapshot, digests, timings, counts
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import httpx

from . import __version__
from .aggregator import (
    EntityScore,
    ExpansionResult,
    Provenance,
    ScoreTable,
    finalize,
    result_to_dict,
)
from .corpus import Query, Vocabulary, load_queries, load_vocabulary
from .decoder import (
    CandidateSet,
    HeuristicScorer,
    ScoredEntity,
    TokenScorer,
    UniformScorer,
    decode,
)
from .errors import ConfigError, DataError, StageError
from .metrics import (
    DEFAULT_CUTOFFS,
    MetricsReport,
    evaluate,
    kendall_tau,
    report_to_dict,
)
from .ranker import RankerConfig, TranscriptStore, make_ranker, resolve_ranking
from .sampler import (
    SamplePlan,
    build_plan,
    plan_digest,
    sample_list_from_record,
    sample_list_to_record,
)
from .trie import PrefixTrie

logger = logging.getLogger(__name__)

SCORER_KINDS = ("heuristic", "uniform")


@dataclass
class DecoderSettings:
    width: int = 5
    num_candidates: int = 100
    scorer: str = "heuristic"
    include_seeds: bool = False


@dataclass
class SamplerSettings:
    list_size: int = 5
    occurrences: int = 10
    seed: int | str = 0


@dataclass
class RunConfig:
    vocab_path: str = ""
    queries_path: str = ""
    out_dir: str = "runs"
    run_dir: str | None = None
    decoder: DecoderSettings = field(default_factory=DecoderSettings)
    sampler: SamplerSettings = field(default_factory=SamplerSettings)
    ranker: RankerConfig = field(default_factory=RankerConfig)
    cutoffs: tuple[int, ...] = DEFAULT_CUTOFFS
    max_in_flight: int = 4
    degraded_threshold: float = 1.0
    strict_degraded: bool = False

    def validate(self) -> None:
        if not self.vocab_path:
            raise ConfigError("vocab_path is required")
        if not self.queries_path:
            raise ConfigError("queries_path is required")
        for name, value in (
            ("decoder.width", self.decoder.width),
            ("decoder.num_candidates", self.decoder.num_candidates),
            ("sampler.list_size", self.sampler.list_size),
            ("sampler.occurrences", self.sampler.occurrences),
            ("max_in_flight", self.max_in_flight),
        ):
            if int(value) < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value}")
        if self.sampler.list_size < 2:
            raise ConfigError("sampler.list_size must be >= 2")
        if self.decoder.scorer not in SCORER_KINDS:
            raise ConfigError(
                f"unknown scorer {self.decoder.scorer!r}; expected one of "
                f"{SCORER_KINDS}"
            )
        if not self.cutoffs or any(int(k) < 1 for k in self.cutoffs):
            raise ConfigError("cutoffs must be positive integers")
        if not 0.0 <= self.degraded_threshold <= 1.0:
            raise ConfigError("degraded_threshold must lie in [0, 1]")
        self.ranker.validate()

    def to_dict(self) -> dict:
        data = asdict(self)
        data["cutoffs"] = list(self.cutoffs)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(data)
        if "decoder" in kwargs:
            kwargs["decoder"] = DecoderSettings(**kwargs["decoder"])
        if "sampler" in kwargs:
            kwargs["sampler"] = SamplerSettings(**kwargs["sampler"])
        if "ranker" in kwargs:
            kwargs["ranker"] = RankerConfig(**kwargs["ranker"])
        if "cutoffs" in kwargs:
            kwargs["cutoffs"] = tuple(int(k) for k in kwargs["cutoffs"])
        return cls(**kwargs)


@dataclass
class RunManifest:
    run_dir: str
    engine_version: str
    config: dict
    plan_digest: str
    timings: dict[str, float]
    counts: dict[str, int]
    padded: dict[str, list[str]]
    degraded_fraction: float
    metrics_summary: dict | None

    def to_dict(self) -> dict:
        return {
            "run_dir": self.run_dir,
            "engine_version": self.engine_version,
            "config": self.config,
            "plan_digest": self.plan_digest,
            "timings": self.timings,
            "counts": self.counts,
            "padded": self.padded,
            "degraded_fraction": self.degraded_fraction,
            "metrics_summary": self.metrics_summary,
        }


class RunPaths:
    def __init__(self, run_dir: str | Path):
        self.run_dir = Path(run_dir)
        self.candidates = self.run_dir / "candidates.jsonl"
        self.plan = self.run_dir / "plan.jsonl"
        self.transcripts = self.run_dir / "transcripts.jsonl"
        self.result = self.run_dir / "result.json"
        self.metrics = self.run_dir / "metrics.json"
        self.manifest = self.run_dir / "manifest.json"

    def ensure(self) -> "RunPaths":
        try:
            self.run_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"run directory {self.run_dir} is not "
                              f"writable: {exc}") from exc
        return self


def resolve_run_dir(config: RunConfig) -> RunPaths:
    if config.run_dir:
        return RunPaths(config.run_dir).ensure()
    base = Path(config.out_dir)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    candidate = base / f"run-{stamp}"
    suffix = 0
    while candidate.exists():
        suffix += 1
        candidate = base / f"run-{stamp}-{suffix}"
    return RunPaths(candidate).ensure()


def _dump_json(path: Path, payload: dict) -> None:
    text = json.dumps(payload, ensure_ascii=False, sort_keys=True, indent=2)
    path.write_text(text + "\n", encoding="utf-8")


def _derived_plan_seed(config: RunConfig, query_id: str) -> str:
    return f"{config.sampler.seed}:{query_id}"


def make_scorer(config: RunConfig, vocab: Vocabulary) -> TokenScorer:
    if config.decoder.scorer == "uniform":
        return UniformScorer()
    return HeuristicScorer(vocab)


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def stage_decode(config: RunConfig, vocab: Vocabulary, queries: Sequence[Query],
                 paths: RunPaths) -> dict[str, CandidateSet]:
    trie = PrefixTrie.build(vocab)
    scorer = make_scorer(config, vocab)
    candidates: dict[str, CandidateSet] = {}
    with paths.candidates.open("w", encoding="utf-8") as handle:
        for query in queries:
            cset = decode(
                query, trie, scorer,
                width=config.decoder.width,
                num_candidates=config.decoder.num_candidates,
                include_seeds=config.decoder.include_seeds,
            )
            candidates[query.query_id] = cset
            record = {
                "query_id": cset.query_id,
                "clamped": cset.clamped,
                "items": [
                    {"entity_id": item.entity_id, "score": item.score}
                    for item in cset.items
                ],
            }
            handle.write(json.dumps(record, ensure_ascii=False, sort_keys=True))
            handle.write("\n")
    return candidates


def load_candidates(paths: RunPaths) -> dict[str, CandidateSet]:
    if not paths.candidates.exists():
        raise StageError("plan", "candidates.jsonl not found; run decode first",
                         checkpoint="none")
    candidates: dict[str, CandidateSet] = {}
    with paths.candidates.open("r", encoding="utf-8") as handle:
        for line in handle:
            if not line.strip():
                continue
            record = json.loads(line)
            cset = CandidateSet(
                query_id=str(record["query_id"]),
                items=[
                    ScoredEntity(str(item["entity_id"]), float(item["score"]))
                    for item in record["items"]
                ],
                clamped=bool(record.get("clamped", False)),
            )
            candidates[cset.query_id] = cset
    return candidates


def stage_plan(config: RunConfig, candidates: dict[str, CandidateSet],
               paths: RunPaths) -> dict[str, SamplePlan]:
    plans: dict[str, SamplePlan] = {}
    for query_id in sorted(candidates):
        plans[query_id] = build_plan(
            candidates[query_id],
            list_size=config.sampler.list_size,
            occurrences=config.sampler.occurrences,
            seed=_derived_plan_seed(config, query_id),
        )
    fresh_digest = plan_digest(plans[qid] for qid in sorted(plans))
    if paths.plan.exists():
        on_disk = _digest_of_plan_file(paths.plan)
        if on_disk != fresh_digest:
            raise StageError(
                "plan",
                "existing plan.jsonl does not match the plan derived from this "
                "config; use a fresh run directory or delete the stale plan "
                "and transcripts",
                checkpoint="plan",
            )
    else:
        with paths.plan.open("w", encoding="utf-8") as handle:
            for query_id in sorted(plans):
                for sample in plans[query_id].lists:
                    handle.write(json.dumps(sample_list_to_record(sample),
                                            ensure_ascii=False, sort_keys=True))
                    handle.write("\n")
    return plans


def _digest_of_plan_file(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("r", encoding="utf-8") as handle:
        for line in handle:
            if not line.strip():
                continue
            sample = sample_list_from_record(json.loads(line))
            digest.update(json.dumps(sample_list_to_record(sample),
                                     sort_keys=True).encode("utf-8"))
            digest.update(b"\n")
    return digest.hexdigest()


def load_plan_lists(paths: RunPaths) -> dict[str, list[SampleList]]:
    if not paths.plan.exists():
        raise StageError("rank", "plan.jsonl not found; run plan first",
                         checkpoint="decode")
    lists: dict[str, list[SampleList]] = {}
    with paths.plan.open("r", encoding="utf-8") as handle:
        for line in handle:
            if not line.strip():
                continue
            sample = sample_list_from_record(json.loads(line))
            lists.setdefault(sample.query_id, []).append(sample)
    return lists


def stage_rank(config: RunConfig, vocab: Vocabulary, queries: Sequence[Query],
               lists_by_query: dict[str, Sequence[SampleList]],
               paths: RunPaths, *, client: httpx.Client | None = None,
               sleep=time.sleep) -> dict[str, int]:
    store = TranscriptStore(paths.transcripts)
    existing = store.load()
    by_id = {q.query_id: q for q in queries}
    pending = []
    reused = 0
    for query_id in sorted(lists_by_query):
        query = by_id.get(query_id)
        if query is None:
            raise DataError(f"plan references unknown query {query_id!r}")
        ranker = None
        for sample in lists_by_query[query_id]:
            if sample.list_id in existing:
                reused += 1
                continue
            if ranker is None:
                ranker = make_ranker(config.ranker, query=query, vocab=vocab,
                                     client=client, sleep=sleep)
            pending.append((ranker, sample))

    new_degraded = 0
    if pending:
        def _work(item):
            ranker, sample = item
            outcome = ranker.rank(sample)
            store.append(sample.list_id, outcome)
            return outcome.degraded

        with ThreadPoolExecutor(max_workers=config.max_in_flight) as pool:
            for degraded in pool.map(_work, pending):
                new_degraded += int(degraded)

    return {
        "reused": reused,
        "ranked_new": len(pending),
        "new_degraded": new_degraded,
    }


def stage_score(config: RunConfig, vocab: Vocabulary,
                candidates: dict[str, CandidateSet],
                lists_by_query: dict[str, Sequence[SampleList]],
                paths: RunPaths) -> tuple[list[ExpansionResult], int]:
    """Rebuild every ranking from the transcript store and aggregate.

    Returns the per-query results plus the total degraded-list count.
    Accumulation happens only here, from transcripts, so resumed and
    interrupted runs can never double-count a list.
    """
    store = TranscriptStore(paths.transcripts)
    records = store.load()
    surface_of = {e.entity_id: e.surface for e in vocab.entities}
    results: list[ExpansionResult] = []
    total_degraded = 0
    for query_id in sorted(lists_by_query):
        table = ScoreTable(candidates[query_id].ids())
        query_degraded = 0
        for sample in lists_by_query[query_id]:
            record = records.get(sample.list_id)
            if record is None:
                raise StageError(
                    "score",
                    f"list {sample.list_id!r} has no transcript; ranking is "
                    "incomplete",
                    checkpoint="rank",
                )
            ranked, _, parse_degraded = resolve_ranking(
                record.get("response"), sample, surface_of
            )
            degraded = bool(record.get("degraded", False)) or parse_degraded
            query_degraded += int(degraded)
            if degraded and config.strict_degraded:
                table.degraded_lists += 1
                continue
            table.accumulate(ranked, degraded=degraded)
        total_degraded += query_degraded
        provenance = Provenance(
            plan_seed=_derived_plan_seed(config, query_id),
            ranker_kind=config.ranker.kind,
            degraded_lists=query_degraded,
        )
        results.append(finalize(table, candidates[query_id], provenance))
    payload = {"queries": [result_to_dict(r) for r in results]}
    _dump_json(paths.result, payload)
    return results, total_degraded


def load_results(paths: RunPaths) -> list[ExpansionResult]:
    if not paths.result.exists():
        raise StageError("eval", "result.json not found; run score first",
                         checkpoint="score")
    payload = json.loads(paths.result.read_text(encoding="utf-8"))
    results = []
    for record in payload["queries"]:
        ranking = tuple(
            EntityScore(
                entity_id=str(row["entity_id"]),
                position_sum=int(row["position_sum"]),
                scored_occurrences=int(row["scored_occurrences"]),
                mean_position=row["mean_position"],
                flagged=bool(row.get("flagged", False)),
            )
            for row in record["ranking"]
        )
        prov = record["provenance"]
        results.append(ExpansionResult(
            query_id=str(record["query_id"]),
            ranking=ranking,
            provenance=Provenance(
                plan_seed=prov["plan_seed"],
                ranker_kind=prov["ranker_kind"],
                degraded_lists=int(prov["degraded_lists"]),
            ),
        ))
    return results


def stage_eval(config: RunConfig, results: Sequence[ExpansionResult],
               queries: Sequence[Query], paths: RunPaths) -> MetricsReport | None:
    with_truth = {q.query_id for q in queries if q.ground_truth is not None}
    scoreable = [r for r in results if r.query_id in with_truth]
    if not scoreable:
        logger.info("no ground truth available; skipping metrics")
        return None
    report = evaluate(scoreable, queries, config.cutoffs)
    _dump_json(paths.metrics, report_to_dict(report))
    return report


# ---------------------------------------------------------------------------
# Full pipeline
# ---------------------------------------------------------------------------

def run_expand(config: RunConfig, *, client: httpx.Client | None = None,
               sleep=time.sleep) -> RunManifest:
    """Execute the full pipeline into a run directory.

    Rerunning against the same directory reuses every list already in
    the transcript store; with a complete store no ranker is invoked at
    all and the outputs are reproduced byte-for-byte.
    """
    config.validate()
    paths = resolve_run_dir(config)
    timings: dict[str, float] = {}

    def timed(stage, fn):
        started = time.perf_counter()
        try:
            value = fn()
        except Exception:
            logger.error("stage %r failed in %s", stage, paths.run_dir)
            raise
        timings[stage] = round(time.perf_counter() - started, 6)
        return value

    vocab = timed("load", lambda: load_vocabulary(config.vocab_path))
    queries = load_queries(config.queries_path, vocab)
    candidates = timed("decode", lambda: stage_decode(config, vocab, queries, paths))
    plans = timed("plan", lambda: stage_plan(config, candidates, paths))
    digest = plan_digest(plans[qid] for qid in sorted(plans))
    lists_by_query = {qid: plan.lists for qid, plan in plans.items()}
    rank_counts = timed("rank", lambda: stage_rank(
        config, vocab, queries, lists_by_query, paths, client=client, sleep=sleep))
    results, degraded = timed("score", lambda: stage_score(
        config, vocab, candidates, lists_by_query, paths))
    report = timed("eval", lambda: stage_eval(config, results, queries, paths))

    lists_total = sum(len(plan.lists) for plan in plans.values())
    summary = None
    if report is not None:
        combined = report.partitions["combined"]
        summary = {
            "map": {str(k): combined.map_at[k] for k in report.cutoffs},
            "p": {str(k): combined.p_at[k] for k in report.cutoffs},
            "query_count": combined.query_count,
        }
    manifest = RunManifest(
        run_dir=str(paths.run_dir),
        engine_version=__version__,
        config=config.to_dict(),
        plan_digest=digest,
        timings=timings,
        counts={
            "queries": len(queries),
            "candidates": sum(len(c) for c in candidates.values()),
            "lists": lists_total,
            "reused": rank_counts["reused"],
            "ranked_new": rank_counts["ranked_new"],
            "degraded": degraded,
        },
        padded={
            qid: list(plans[qid].padded_ids)
            for qid in sorted(plans) if plans[qid].padded_ids
        },
        degraded_fraction=degraded / lists_total if lists_total else 0.0,
        metrics_summary=summary,
    )
    _dump_json(paths.manifest, manifest.to_dict())
    return manifest


# ---------------------------------------------------------------------------
# Ablation grid
# ---------------------------------------------------------------------------

def _tau_against_truth(result_order: Sequence[str], query: Query) -> float | None:
    if query.ground_truth is None:
        return None
    seeds = set(query.seeds)
    truth_order = [eid for eid in query.ground_truth if eid not in seeds]
    common = set(truth_order) & set(result_order)
    if len(common) < 2:
        return None
    order_a = [eid for eid in result_order if eid in common]
    order_b = [eid for eid in truth_order if eid in common]
    return kendall_tau(order_a, order_b)


def run_ablation(config: RunConfig, list_sizes: Sequence[int],
                 occurrence_values: Sequence[int], *,
                 client: httpx.Client | None = None,
                 sleep=time.sleep) -> dict:
    """Grid over (list size, occurrences); each cell is a full run with a
    derived seed. Failures are recorded and the grid continues."""
    config.validate()
    if config.ranker.kind == "remote-chat":
        logger.warning("ablation with a remote ranker issues one full run of "
                       "requests per grid cell; this can be expensive")
    base = resolve_run_dir(config)
    vocab = load_vocabulary(config.vocab_path)
    queries = load_queries(config.queries_path, vocab)
    by_id = {q.query_id: q for q in queries}

    cells = []
    for list_size in sorted(set(int(n) for n in list_sizes)):
        for occurrences in sorted(set(int(o) for o in occurrence_values)):
            cell_dir = base.run_dir / f"cell-n{list_size}-o{occurrences}"
            cell_config = replace(
                config,
                run_dir=str(cell_dir),
                sampler=SamplerSettings(
                    list_size=list_size,
                    occurrences=occurrences,
                    seed=f"{config.sampler.seed}:n{list_size}:o{occurrences}",
                ),
            )
            cell: dict = {"list_size": list_size, "occurrences": occurrences,
                          "run_dir": str(cell_dir)}
            try:
                manifest = run_expand(cell_config, client=client, sleep=sleep)
                result_docs = json.loads(
                    (cell_dir / "result.json").read_text(encoding="utf-8")
                )["queries"]
                taus = []
                for record in result_docs:
                    ids = [row["entity_id"] for row in record["ranking"]]
                    tau = _tau_against_truth(ids, by_id[record["query_id"]])
                    if tau is not None:
                        taus.append(tau)
                cell["mean_kendall_tau"] = (
                    sum(taus) / len(taus) if taus else None
                )
                cell["map"] = (manifest.metrics_summary or {}).get("map")
                cell["padded_queries"] = sorted(manifest.padded)
                cell["degraded"] = manifest.counts["degraded"]
            except Exception as exc:
                logger.error("ablation cell n=%d o=%d failed: %s",
                             list_size, occurrences, exc)
                cell["error"] = str(exc)
            cells.append(cell)
    report = {"base_run_dir": str(base.run_dir), "cells": cells}
    _dump_json(base.run_dir / "ablation.json", report)
    return report
