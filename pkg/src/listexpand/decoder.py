"""Candidate generation: prefix-constrained beam search over a token scorer.

A scorer assigns a finite log-score to each allowed next step for a
(query, prefix) pair. Steps are tokens from the trie plus END (None),
meaning "terminate the prefix as a complete entity". Because allowed
steps always come from the trie, any scorer, however adversarial, can
only ever produce vocabulary entities.

Beam mechanics: the beam holds partial prefixes in score order. When a
beam item sits on a terminal node, its completion (cumulative score plus
the END step score) is banked into the candidate pool and the item keeps
competing only through its token extensions. The beam keeps the best
`width` token extensions each step and the search runs until the beam
exhausts, which is guaranteed because every step deepens all prefixes in
a finite trie.

A width-w pass banks at most w completions per depth level, so narrow
beams on shallow tries can find fewer than `num_candidates` entities;
the decoder warns and returns what it found. With width at least the
vocabulary size nothing is ever pruned and the result matches
`exhaustive_decode` exactly.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Protocol, Sequence

from .corpus import Query, Vocabulary
from .errors import DecodeError, OracleRefusedError
from .trie import PrefixTrie

logger = logging.getLogger(__name__)

# None marks the end-of-entity step in an allowed-step set.
Step = str | None

DEFAULT_ORACLE_CAP = 10_000


class TokenScorer(Protocol):
    """Contract for pluggable next-step scoring.

    Implementations must return a finite log-score for every step in
    `steps` and be deterministic for a fixed (query, prefix, steps)
    unless they declare themselves stochastic.
    """

    def score_steps(self, query: Query, prefix: tuple[str, ...],
                    steps: Sequence[str | None]) -> Mapping[str | None, float]:
        ...


@dataclass(frozen=True)
class ScoredEntity:
    entity_id: str
    score: float


@dataclass
class CandidateSet:
    """Decoded candidates for one query, best first."""

    query_id: str
    items: list[ScoredEntity] = field(default_factory=list)
    clamped: bool = False

    def ids(self) -> list[str]:
        return [item.entity_id for item in self.items]

    def scores_by_id(self) -> dict[str, float]:
        return {item.entity_id: item.score for item in self.items}

    def __len__(self) -> int:
        return len(self.items)


class UniformScorer:
    """Every allowed step gets the same log-score. Useful as a null model:
    cumulative scores then depend only on path length."""

    def __init__(self, step_logp: float = math.log(0.5)):
        self.step_logp = step_logp

    def score_steps(self, query, prefix, steps):
        return {step: self.step_logp for step in steps}


class HeuristicScorer:
    """Deterministic offline stand-in for a real language model.

    Token steps score by corpus frequency with a bonus for tokens that
    also appear in the query's seed surfaces; END carries a fixed cost so
    termination competes with continuation. No randomness anywhere.
    """

    def __init__(self, vocab: Vocabulary, seed_bonus: float = 1.0,
                 end_logp: float = math.log(0.5)):
        self._vocab = vocab
        self.seed_bonus = seed_bonus
        self.end_logp = end_logp
        counts: dict[str, int] = {}
        total = 0
        for entity in vocab.entities:
            for token in entity.tokens:
                counts[token] = counts.get(token, 0) + 1
                total += 1
        self._counts = counts
        self._total = max(total, 1)
        self._seed_tokens: dict[str, frozenset[str]] = {}

    def _tokens_for(self, query: Query) -> frozenset[str]:
        cached = self._seed_tokens.get(query.query_id)
        if cached is None:
            tokens: set[str] = set()
            for seed_id in query.seeds:
                entity = self._vocab.get(seed_id)
                if entity is not None:
                    tokens.update(entity.tokens)
            cached = frozenset(tokens)
            self._seed_tokens[query.query_id] = cached
        return cached

    def score_steps(self, query, prefix, steps):
        seed_tokens = self._tokens_for(query)
        scores: dict[str | None, float] = {}
        for step in steps:
            if step is None:
                scores[step] = self.end_logp
            else:
                base = math.log((self._counts.get(step, 0) + 1) / (self._total + 1))
                scores[step] = base + (self.seed_bonus if step in seed_tokens else 0.0)
        return scores


def _checked_scores(scorer: TokenScorer, query: Query, prefix: tuple[str, ...],
                    steps: list[str | None]) -> Mapping[str | None, float]:
    try:
        scores = scorer.score_steps(query, prefix, steps)
    except Exception as exc:
        raise DecodeError(
            f"scorer failed at prefix {list(prefix)}: {exc}", prefix=prefix
        ) from exc
    for step in steps:
        value = scores.get(step)
        if value is None or not math.isfinite(value):
            raise DecodeError(
                f"scorer returned a missing or non-finite score for step "
                f"{step!r} at prefix {list(prefix)}", prefix=prefix
            )
    return scores


def _select(pool: dict[str, float], target: int, query_id: str,
            clamped: bool) -> CandidateSet:
    ordered = sorted(pool.items(), key=lambda kv: (-kv[1], kv[0]))
    items = [ScoredEntity(entity_id, score) for entity_id, score in ordered[:target]]
    return CandidateSet(query_id=query_id, items=items, clamped=clamped)


def decode(query: Query, trie: PrefixTrie, scorer: TokenScorer,
           width: int, num_candidates: int, *,
           include_seeds: bool = False) -> CandidateSet:
    """Run prefix-constrained beam search and return the top candidates.

    Seeds are excluded from the result by default (they are the set being
    expanded); `include_seeds` re-admits them for ablations. A
    `num_candidates` larger than the eligible vocabulary is clamped with
    a warning.
    """
    if width < 1:
        raise DecodeError("beam width must be >= 1")
    if num_candidates < 1:
        raise DecodeError("num_candidates must be >= 1")

    excluded = set() if include_seeds else set(query.seeds)
    if excluded:
        trie_ids = {entity_id for entity_id, _ in trie.iter_entities()}
        eligible = trie.entity_count - len(excluded & trie_ids)
    else:
        eligible = trie.entity_count
    clamped = num_candidates > eligible
    if clamped:
        logger.warning(
            "query %s: num_candidates %d exceeds the %d eligible entities; clamping",
            query.query_id, num_candidates, eligible,
        )
    target = min(num_candidates, eligible)

    completed: dict[str, float] = {}
    beam: list[tuple[tuple[str, ...], float]] = [((), 0.0)]
    while beam:
        extensions: list[tuple[tuple[str, ...], float]] = []
        for prefix, cumulative in beam:
            cont = trie.continuations(prefix)
            steps: list[str | None] = sorted(cont.tokens)
            if cont.can_end:
                steps.append(None)
            if not steps:
                continue
            scores = _checked_scores(scorer, query, prefix, steps)
            for token in cont.tokens:
                extensions.append((prefix + (token,), cumulative + scores[token]))
            if cont.can_end:
                completed[cont.entity_id] = cumulative + scores[None]
        extensions.sort(key=lambda item: (-item[1], item[0]))
        beam = extensions[:width]

    for seed_id in excluded:
        completed.pop(seed_id, None)
    if len(completed) < target:
        logger.warning(
            "query %s: beam width %d only completed %d of %d requested "
            "candidates; widen the beam for fuller coverage",
            query.query_id, width, len(completed), target,
        )
    return _select(completed, target, query.query_id, clamped)


def exhaustive_decode(query: Query, trie: PrefixTrie, scorer: TokenScorer, *,
                      include_seeds: bool = False,
                      cap: int = DEFAULT_ORACLE_CAP) -> CandidateSet:
    """Score every vocabulary entity by full path evaluation.

    Test oracle for `decode`: identical scorer calls (same prefixes, same
    allowed-step sets), identical tie-breaking, no pruning. Refuses
    vocabularies whose total path steps exceed `cap`.
    """
    paths = list(trie.iter_entities())
    total_steps = sum(len(path) + 1 for _, path in paths)
    if total_steps > cap:
        raise OracleRefusedError(
            f"exhaustive scoring refused: {total_steps} path steps exceed "
            f"the cap of {cap}"
        )
    excluded = set() if include_seeds else set(query.seeds)
    pool: dict[str, float] = {}
    for entity_id, path in paths:
        if entity_id in excluded:
            continue
        cumulative = 0.0
        for depth in range(len(path) + 1):
            prefix = path[:depth]
            cont = trie.continuations(prefix)
            steps: list[str | None] = sorted(cont.tokens)
            if cont.can_end:
                steps.append(None)
            scores = _checked_scores(scorer, query, prefix, steps)
            cumulative += scores[path[depth] if depth < len(path) else None]
        pool[entity_id] = cumulative
    return _select(pool, len(pool), query.query_id, clamped=False)
