"""Balanced sampling of candidate entities into fixed-size ranking lists.

Every list holds `list_size` distinct entities and every candidate lands
in exactly `occurrences` lists, so per-list positions can later be summed
into a comparable global score. When `occurrences * candidate_count` is
not divisible by `list_size`, the shortfall is topped up by giving one
extra occurrence each to the best-scored candidates (the entities most
likely to matter at the top of the final ranking), which keeps the
max/min occurrence spread at one.

Construction: shuffle `occurrences` copies of the candidate ids, append
one shuffled copy of the padded ids, cut the stream into lists, then
repair within-list duplicates by swapping forward into later lists.
Nearly-saturated configurations (lists almost as large as the candidate
pool) can defeat that repair, so after the reshuffle budget the builder
switches to dealing slots by remaining occurrence count, which cannot
fail. The whole procedure is a pure function of (candidates, list_size,
occurrences, seed).
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
from dataclasses import dataclass
from typing import Iterable, NamedTuple

from .decoder import CandidateSet
from .errors import DataError, InsufficientCandidatesError, PlanRepairError

logger = logging.getLogger(__name__)

MAX_REPAIR_ATTEMPTS = 16


@dataclass(frozen=True)
class SampleList:
    """One listwise comparison unit: n distinct entity ids in their
    presentation order, before any ranking."""

    list_id: str
    query_id: str
    members: tuple[str, ...]


@dataclass(frozen=True)
class SamplePlan:
    query_id: str
    lists: tuple[SampleList, ...]
    list_size: int
    occurrences: int
    seed: int | str
    padded_ids: tuple[str, ...]

    def occurrence_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for sample in self.lists:
            for entity_id in sample.members:
                counts[entity_id] = counts.get(entity_id, 0) + 1
        return counts


class PadPolicy(NamedTuple):
    extra_ids: tuple[str, ...]
    total_slots: int
    list_count: int


def pad_policy(candidates: CandidateSet, list_size: int,
               occurrences: int) -> PadPolicy:
    """Decide which candidates absorb the residual slots.

    With N candidates, o*N slots fill only floor(o*N / n) whole lists;
    the remaining n - (o*N mod n) slots go one each to the best-scored
    candidates, for ceil(o*N / n) lists total. Divisible inputs need no
    padding.
    """
    count = len(candidates)
    base_slots = occurrences * count
    remainder = base_slots % list_size
    if remainder == 0:
        return PadPolicy((), base_slots, base_slots // list_size)
    extra = list_size - remainder
    extra_ids = tuple(item.entity_id for item in candidates.items[:extra])
    total = base_slots + extra
    return PadPolicy(extra_ids, total, total // list_size)


def _deal_balanced(ids: list[str], counts: dict[str, int], list_size: int,
                   list_count: int, rng: random.Random) -> list[list[str]]:
    """Build lists by always taking the ids with the most remaining
    occurrences (ties in shuffled order).

    Always completes when max count <= list_count, which the padding
    arithmetic guarantees: any id with remaining equal to the number of
    lists left must be picked now, and at most `list_size` ids can be in
    that state at once.
    """
    remaining = dict(counts)
    lists: list[list[str]] = []
    for _ in range(list_count):
        order = [eid for eid in ids if remaining[eid] > 0]
        rng.shuffle(order)
        order.sort(key=lambda eid: -remaining[eid])
        chosen = order[:list_size]
        if len(chosen) < list_size:
            raise PlanRepairError(
                "balanced dealing ran out of distinct entities; "
                "occurrence accounting is inconsistent"
            )
        for eid in chosen:
            remaining[eid] -= 1
        rng.shuffle(chosen)
        lists.append(chosen)
    return lists


def _repair_duplicates(slots: list[str], list_size: int) -> bool:
    """Swap within-list duplicates forward into later lists.

    A swap is legal when it leaves both lists duplicate-free. Returns
    False when some duplicate cannot be placed (possible pathologically
    for small candidate pools); the caller retries with a derived seed.
    """
    list_count = len(slots) // list_size
    for j in range(list_count):
        start, end = j * list_size, (j + 1) * list_size
        position = start
        while position < end:
            value = slots[position]
            current = slots[start:end]
            if current.count(value) <= 1:
                position += 1
                continue
            repaired = False
            for q in range(end, len(slots)):
                other = slots[q]
                if other in current:
                    continue
                other_start = (q // list_size) * list_size
                other_end = other_start + list_size
                if value in slots[other_start:q] or value in slots[q + 1:other_end]:
                    continue
                slots[position], slots[q] = other, value
                repaired = True
                break
            if not repaired:
                return False
            position += 1
    return True


def build_plan(candidates: CandidateSet, list_size: int, occurrences: int,
               seed: int | str) -> SamplePlan:
    """Partition candidates into balanced sample lists, deterministically."""
    count = len(candidates)
    if list_size < 2:
        raise DataError(f"list_size must be >= 2, got {list_size}")
    if occurrences < 1:
        raise DataError(f"occurrences must be >= 1, got {occurrences}")
    if count < list_size:
        raise InsufficientCandidatesError(
            f"{count} candidates cannot fill a list of {list_size}"
        )

    ids = candidates.ids()
    policy = pad_policy(candidates, list_size, occurrences)
    if policy.extra_ids:
        logger.info(
            "query %s: padding %d residual slots with top-scored candidates",
            candidates.query_id, len(policy.extra_ids),
        )

    for attempt in range(MAX_REPAIR_ATTEMPTS):
        rng = random.Random(f"{seed}:{attempt}" if attempt else str(seed))
        slots: list[str] = []
        for _ in range(occurrences):
            block = ids[:]
            rng.shuffle(block)
            slots.extend(block)
        if policy.extra_ids:
            pad_block = list(policy.extra_ids)
            rng.shuffle(pad_block)
            slots.extend(pad_block)
        if _repair_duplicates(slots, list_size):
            lists = tuple(
                SampleList(
                    list_id=f"{candidates.query_id}/{j:05d}",
                    query_id=candidates.query_id,
                    members=tuple(slots[j * list_size:(j + 1) * list_size]),
                )
                for j in range(policy.list_count)
            )
            return SamplePlan(
                query_id=candidates.query_id,
                lists=lists,
                list_size=list_size,
                occurrences=occurrences,
                seed=seed,
                padded_ids=policy.extra_ids,
            )
        logger.debug(
            "query %s: duplicate repair failed on attempt %d, reshuffling",
            candidates.query_id, attempt + 1,
        )

    # Shuffle-and-repair can starve when lists are nearly as large as the
    # candidate pool (N < 2n-1). A balanced plan still exists for every
    # N >= n, so fall back to dealing by remaining occurrence counts.
    logger.info(
        "query %s: falling back to balanced dealing after %d reshuffle "
        "attempts (N=%d, n=%d, o=%d)",
        candidates.query_id, MAX_REPAIR_ATTEMPTS, count, list_size, occurrences,
    )
    counts = {eid: occurrences for eid in ids}
    for eid in policy.extra_ids:
        counts[eid] += 1
    rng = random.Random(f"{seed}:deal")
    dealt = _deal_balanced(ids, counts, list_size, policy.list_count, rng)
    lists = tuple(
        SampleList(
            list_id=f"{candidates.query_id}/{j:05d}",
            query_id=candidates.query_id,
            members=tuple(members),
        )
        for j, members in enumerate(dealt)
    )
    return SamplePlan(
        query_id=candidates.query_id,
        lists=lists,
        list_size=list_size,
        occurrences=occurrences,
        seed=seed,
        padded_ids=policy.extra_ids,
    )


def sample_list_to_record(sample: SampleList) -> dict:
    return {
        "list_id": sample.list_id,
        "query_id": sample.query_id,
        "members": list(sample.members),
    }


def sample_list_from_record(record: dict) -> SampleList:
    try:
        return SampleList(
            list_id=str(record["list_id"]),
            query_id=str(record["query_id"]),
            members=tuple(str(m) for m in record["members"]),
        )
    except KeyError as exc:
        raise DataError(f"sample list record missing field {exc.args[0]!r}") from exc


def plan_digest(plans: Iterable[SamplePlan]) -> str:
    """Stable hash of the serialized lists; used to detect plan drift on
    resume."""
    digest = hashlib.sha256()
    for plan in plans:
        for sample in plan.lists:
            line = json.dumps(sample_list_to_record(sample), sort_keys=True)
            digest.update(line.encode("utf-8"))
            digest.update(b"\n")
    return digest.hexdigest()
