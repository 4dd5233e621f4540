"""Position-sum score aggregation over ranked lists.

Each ranked list contributes its 1-based positions: the entity ranked
first in a list gains 1, the entity ranked last in a list of n gains n.
Accumulation is a commutative integer merge, so lists can arrive in any
order (or from parallel workers) without changing the outcome.

The final ordering sorts by mean position ascending. The mean, not the
raw sum, keeps padded entities with one extra occurrence comparable to
the rest; with uniform occurrences the two sorts agree. Ties break by
decoder score descending, then id ascending.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

from .decoder import CandidateSet
from .errors import IntegrityError
from .ranker import RankedList


@dataclass
class _Cell:
    total: int = 0
    count: int = 0
    degraded: int = 0


class ScoreTable:
    """Accumulates per-entity position sums for one query's candidates."""

    def __init__(self, candidate_ids: Iterable[str]):
        self._cells: dict[str, _Cell] = {eid: _Cell() for eid in candidate_ids}
        self.degraded_lists = 0

    def accumulate(self, ranked: RankedList, *, degraded: bool = False) -> None:
        """Add one ranked list. Position i (1-based) adds i to the entity
        ranked there."""
        if degraded:
            self.degraded_lists += 1
        for position, entity_id in enumerate(ranked.positions, start=1):
            cell = self._cells.get(entity_id)
            if cell is None:
                raise IntegrityError(
                    f"ranked list {ranked.list_id!r} names entity "
                    f"{entity_id!r} outside the candidate set"
                )
            cell.total += position
            cell.count += 1
            if degraded:
                cell.degraded += 1

    def merge(self, other: "ScoreTable") -> None:
        """Fold a partial table from another worker into this one."""
        for entity_id, cell in other._cells.items():
            mine = self._cells.get(entity_id)
            if mine is None:
                raise IntegrityError(f"merge saw unknown entity {entity_id!r}")
            mine.total += cell.total
            mine.count += cell.count
            mine.degraded += cell.degraded
        self.degraded_lists += other.degraded_lists

    def cell(self, entity_id: str) -> tuple[int, int, int]:
        cell = self._cells[entity_id]
        return cell.total, cell.count, cell.degraded

    def total_scored_occurrences(self) -> int:
        return sum(cell.count for cell in self._cells.values())


@dataclass(frozen=True)
class EntityScore:
    entity_id: str
    position_sum: int
    scored_occurrences: int
    mean_position: float | None
    flagged: bool = False  # true when nothing scored this entity


@dataclass(frozen=True)
class Provenance:
    plan_seed: int | str
    ranker_kind: str
    degraded_lists: int


@dataclass(frozen=True)
class ExpansionResult:
    query_id: str
    ranking: tuple[EntityScore, ...]
    provenance: Provenance

    def ordered_ids(self) -> list[str]:
        return [score.entity_id for score in self.ranking]


def accumulate(table: ScoreTable, ranked: RankedList, *,
               degraded: bool = False) -> ScoreTable:
    table.accumulate(ranked, degraded=degraded)
    return table


def finalize(table: ScoreTable, candidates: CandidateSet,
             provenance: Provenance | None = None) -> ExpansionResult:
    """Produce the final expansion ordering from an accumulated table.

    Entities that no surviving list scored (possible when degraded lists
    are excluded) sort last and are flagged.
    """
    decoder_score = candidates.scores_by_id()

    def sort_key(entity_id: str):
        total, count, _ = table.cell(entity_id)
        mean = total / count if count else float("inf")
        return (mean, -decoder_score.get(entity_id, float("-inf")), entity_id)

    ordered = sorted((item.entity_id for item in candidates.items), key=sort_key)
    scores = []
    for entity_id in ordered:
        total, count, _ = table.cell(entity_id)
        scores.append(EntityScore(
            entity_id=entity_id,
            position_sum=total,
            scored_occurrences=count,
            mean_position=total / count if count else None,
            flagged=count == 0,
        ))
    if provenance is None:
        provenance = Provenance(plan_seed=0, ranker_kind="unknown",
                                degraded_lists=table.degraded_lists)
    return ExpansionResult(
        query_id=candidates.query_id,
        ranking=tuple(scores),
        provenance=provenance,
    )


def result_to_dict(result: ExpansionResult) -> dict:
    """JSON document for one query, deterministic for identical inputs."""
    return {
        "query_id": result.query_id,
        "ranking": [
            {
                "entity_id": s.entity_id,
                "position_sum": s.position_sum,
                "scored_occurrences": s.scored_occurrences,
                "mean_position": s.mean_position,
                "flagged": s.flagged,
            }
            for s in result.ranking
        ],
        "provenance": {
            "plan_seed": result.provenance.plan_seed,
            "ranker_kind": result.provenance.ranker_kind,
            "degraded_lists": result.provenance.degraded_lists,
        },
    }
