"""Retrieval quality metrics: MAP@K, P@K, Kendall tau.

AP@K normalizes by min(K, |truth|), so a ranking whose prefix is exactly
the truth set scores 1.0 at every K. P@K always divides by K, even when
fewer than K entities were returned. Seeds are stripped from both the
ranking and the truth before scoring: they were given, not retrieved.

Reports are split by seed-set size (3 vs 5) with a combined row that is
the query-count-weighted average of the partitions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

from .aggregator import ExpansionResult
from .corpus import Query
from .errors import DataError, IntegrityError

logger = logging.getLogger(__name__)

DEFAULT_CUTOFFS = (10, 20, 50, 100)


def precision_at_k(ranked: Sequence[str], truth: Iterable[str], k: int) -> float:
    """Fraction of the top-k positions holding a truth member."""
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    truth_set = set(truth)
    hits = sum(1 for entity_id in ranked[:k] if entity_id in truth_set)
    return hits / k


def average_precision_at_k(ranked: Sequence[str], truth: Iterable[str],
                           k: int) -> float:
    """Mean of Precision@i over hit positions i <= k, normalized by
    min(k, |truth|)."""
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    truth_set = set(truth)
    if not truth_set:
        raise DataError("average precision needs a non-empty truth set")
    hits = 0
    precision_sum = 0.0
    for index, entity_id in enumerate(ranked[:k], start=1):
        if entity_id in truth_set:
            hits += 1
            precision_sum += hits / index
    return precision_sum / min(k, len(truth_set))


def kendall_tau(order_a: Sequence[str], order_b: Sequence[str]) -> float:
    """Rank correlation between two orderings of the same elements.

    +1 for identical orders, -1 for full reversal. Orders must be
    permutations of one another; pairs are counted via inversion counting
    (merge sort), so large lists stay cheap.
    """
    if sorted(order_a) != sorted(order_b):
        raise DataError("kendall_tau needs two orderings of the same elements")
    m = len(order_a)
    if m < 2:
        return 1.0
    rank_b = {eid: i for i, eid in enumerate(order_b)}
    sequence = [rank_b[eid] for eid in order_a]
    inversions = _count_inversions(sequence)
    pairs = m * (m - 1) // 2
    return 1.0 - 2.0 * inversions / pairs


def _count_inversions(sequence: list[int]) -> int:
    if len(sequence) < 2:
        return 0
    mid = len(sequence) // 2
    left, right = sequence[:mid], sequence[mid:]
    count = _count_inversions(left) + _count_inversions(right)
    merged = []
    i = j = 0
    while i < len(left) and j < len(right):
        if left[i] <= right[j]:
            merged.append(left[i])
            i += 1
        else:
            merged.append(right[j])
            j += 1
            count += len(left) - i
    merged.extend(left[i:])
    merged.extend(right[j:])
    sequence[:] = merged
    return count


@dataclass(frozen=True)
class PartitionMetrics:
    query_count: int
    map_at: dict[int, float]
    p_at: dict[int, float]
    per_query_ap: dict[str, dict[int, float]]


@dataclass(frozen=True)
class MetricsReport:
    cutoffs: tuple[int, ...]
    partitions: dict[str, PartitionMetrics]  # keys: "seed3", "seed5", "combined"
    skipped_queries: tuple[str, ...]


def _strip_seeds(query: Query, ranked: Sequence[str]) -> tuple[list[str], list[str]]:
    seeds = set(query.seeds)
    truth = [eid for eid in (query.ground_truth or ()) if eid not in seeds]
    cleaned = [eid for eid in ranked if eid not in seeds]
    return cleaned, truth


def _partition(label_queries: list[tuple[Query, list[str], list[str]]],
               cutoffs: Sequence[int]) -> PartitionMetrics:
    per_query_ap: dict[str, dict[int, float]] = {}
    map_at: dict[int, float] = {}
    p_at: dict[int, float] = {}
    for k in cutoffs:
        ap_values = []
        p_values = []
        for query, ranked, truth in label_queries:
            ap = average_precision_at_k(ranked, truth, k)
            ap_values.append(ap)
            p_values.append(precision_at_k(ranked, truth, k))
            per_query_ap.setdefault(query.query_id, {})[k] = ap
        count = len(label_queries)
        map_at[k] = sum(ap_values) / count if count else 0.0
        p_at[k] = sum(p_values) / count if count else 0.0
    return PartitionMetrics(
        query_count=len(label_queries),
        map_at=map_at,
        p_at=p_at,
        per_query_ap=per_query_ap,
    )


def evaluate(results: Sequence[ExpansionResult], queries: Sequence[Query],
             cutoffs: Sequence[int] = DEFAULT_CUTOFFS) -> MetricsReport:
    """Score expansion results against their queries' ground truth.

    Every result must match a query; every matched query must carry
    ground truth. Queries whose truth is empty after seed exclusion are
    skipped with a warning and do not count toward any average.
    """
    cutoffs = tuple(sorted(set(int(k) for k in cutoffs)))
    if not cutoffs or cutoffs[0] < 1:
        raise DataError("cutoffs must be positive integers")
    by_id: dict[str, Query] = {q.query_id: q for q in queries}
    scored: list[tuple[Query, list[str], list[str]]] = []
    skipped: list[str] = []
    for result in results:
        query = by_id.get(result.query_id)
        if query is None:
            raise IntegrityError(
                f"result for query {result.query_id!r} has no matching query"
            )
        if query.ground_truth is None:
            raise DataError(
                f"query {query.query_id!r} has no ground truth; metrics "
                "cannot be computed"
            )
        ranked, truth = _strip_seeds(query, result.ordered_ids())
        if not truth:
            logger.warning("query %s: truth is empty after seed exclusion; "
                           "skipping", query.query_id)
            skipped.append(query.query_id)
            continue
        scored.append((query, ranked, truth))
    partitions = {
        "seed3": _partition([t for t in scored if len(t[0].seeds) == 3], cutoffs),
        "seed5": _partition([t for t in scored if len(t[0].seeds) == 5], cutoffs),
        "combined": _partition(scored, cutoffs),
    }
    return MetricsReport(
        cutoffs=cutoffs,
        partitions=partitions,
        skipped_queries=tuple(skipped),
    )


def report_to_dict(report: MetricsReport) -> dict:
    return {
        "cutoffs": list(report.cutoffs),
        "partitions": {
            label: {
                "query_count": part.query_count,
                "map": {str(k): part.map_at[k] for k in report.cutoffs},
                "p": {str(k): part.p_at[k] for k in report.cutoffs},
                "per_query_ap": {
                    qid: {str(k): v for k, v in by_k.items()}
                    for qid, by_k in sorted(part.per_query_ap.items())
                },
            }
            for label, part in report.partitions.items()
        },
        "skipped_queries": list(report.skipped_queries),
    }


def report_to_text(report: MetricsReport) -> str:
    """Fixed-width table: one row per partition, MAP then P columns."""
    headers = ["partition", "queries"]
    headers += [f"MAP@{k}" for k in report.cutoffs]
    headers += [f"P@{k}" for k in report.cutoffs]
    rows = []
    for label in ("seed3", "seed5", "combined"):
        part = report.partitions[label]
        row = [label, str(part.query_count)]
        if part.query_count:
            row += [f"{part.map_at[k] * 100:.2f}" for k in report.cutoffs]
            row += [f"{part.p_at[k] * 100:.2f}" for k in report.cutoffs]
        else:
            row += ["-"] * (2 * len(report.cutoffs))
        rows.append(row)
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(headers)]
    lines = ["  ".join(h.rjust(widths[i]) for i, h in enumerate(headers))]
    for row in rows:
        lines.append("  ".join(cell.rjust(widths[i]) for i, cell in enumerate(row)))
    return "\n".join(lines)
