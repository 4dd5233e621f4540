"""Entity vocabulary and query dataset: loading, validation, tokenization.

File formats are JSON Lines, UTF-8. Vocabulary records carry `id`,
`surface` and an optional `images` array of attachment references
(paths or URIs, never decoded here). Query records carry `query_id`,
`seeds`, optional `class_name` and optional `ground_truth`.

Tokenization is owned by this module so the rest of the pipeline never
depends on an external model tokenizer.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .errors import DataError, DuplicateEntityError, InvalidEntityError

logger = logging.getLogger(__name__)

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


def tokenize(surface: str) -> tuple[str, ...]:
    """Lowercase and split a surface form on whitespace and punctuation.

    Deterministic, and idempotent on its own output joined by single
    spaces. Raises InvalidEntityError when nothing survives.
    """
    if not surface or not surface.strip():
        raise InvalidEntityError("entity surface is empty after trimming")
    tokens = tuple(_TOKEN_RE.findall(surface.lower()))
    if not tokens:
        raise InvalidEntityError(
            f"entity surface {surface!r} contains no tokens after segmentation"
        )
    return tokens


@dataclass(frozen=True)
class Entity:
    """One vocabulary member: stable id, display surface, token sequence,
    and opaque image attachment references."""

    entity_id: str
    surface: str
    tokens: tuple[str, ...]
    images: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.entity_id:
            raise InvalidEntityError("entity id must be non-empty")
        if not self.tokens or any(not t for t in self.tokens):
            raise InvalidEntityError(
                f"entity {self.entity_id!r} has an empty token sequence"
            )

    @classmethod
    def from_surface(cls, entity_id: str, surface: str,
                     images: Iterable[str] = ()) -> "Entity":
        return cls(entity_id, surface, tokenize(surface), tuple(images))


class Vocabulary:
    """Immutable collection of entities with unique ids and unique token
    sequences. `token_alphabet` is the union of all entity tokens."""

    def __init__(self, entities: Iterable[Entity]):
        self.entities: tuple[Entity, ...] = tuple(entities)
        self._by_id: dict[str, Entity] = {}
        by_tokens: dict[tuple[str, ...], Entity] = {}
        alphabet: set[str] = set()
        for entity in self.entities:
            if entity.entity_id in self._by_id:
                raise DuplicateEntityError(
                    f"duplicate entity id {entity.entity_id!r}"
                )
            clash = by_tokens.get(entity.tokens)
            if clash is not None:
                raise DuplicateEntityError(
                    f"entities {clash.entity_id!r} and {entity.entity_id!r} "
                    f"tokenize identically to {list(entity.tokens)}"
                )
            self._by_id[entity.entity_id] = entity
            by_tokens[entity.tokens] = entity
            alphabet.update(entity.tokens)
        self.token_alphabet: frozenset[str] = frozenset(alphabet)

    def __len__(self) -> int:
        return len(self.entities)

    def __contains__(self, entity_id: str) -> bool:
        return entity_id in self._by_id

    def __getitem__(self, entity_id: str) -> Entity:
        try:
            return self._by_id[entity_id]
        except KeyError:
            raise DataError(f"unknown entity id {entity_id!r}") from None

    def get(self, entity_id: str) -> Entity | None:
        return self._by_id.get(entity_id)

    def ids(self) -> list[str]:
        return [e.entity_id for e in self.entities]


@dataclass(frozen=True)
class Query:
    """A seed entity set plus, for evaluation, its ground-truth class list.

    `ground_truth` is optional so the pipeline also serves pure inference;
    metrics fail fast when it is missing.
    """

    query_id: str
    seeds: tuple[str, ...]
    class_name: str | None = None
    ground_truth: tuple[str, ...] | None = None

    def validate(self, vocab: Vocabulary) -> None:
        if len(self.seeds) not in (3, 5):
            raise DataError(
                f"query {self.query_id!r} has {len(self.seeds)} seeds; "
                "seed sets must have exactly 3 or 5 members"
            )
        for seed in self.seeds:
            if seed not in vocab:
                raise DataError(
                    f"query {self.query_id!r} seed {seed!r} does not resolve "
                    "in the vocabulary"
                )
        if self.ground_truth is not None:
            truth = set(self.ground_truth)
            for seed in self.seeds:
                if seed not in truth:
                    raise DataError(
                        f"query {self.query_id!r} seed {seed!r} is missing "
                        "from its ground truth"
                    )
            for entity_id in self.ground_truth:
                if entity_id not in vocab:
                    raise DataError(
                        f"query {self.query_id!r} ground-truth id "
                        f"{entity_id!r} does not resolve in the vocabulary"
                    )


def _read_jsonl(path: Path) -> Iterable[tuple[int, dict]]:
    with path.open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}, line {lineno}: invalid JSON ({exc})") from exc
            if not isinstance(record, dict):
                raise DataError(f"{path}, line {lineno}: record is not an object")
            yield lineno, record


def load_vocabulary(path: str | Path) -> Vocabulary:
    """Load a JSONL vocabulary file, rejecting duplicates.

    Parse errors cite the line number; duplicate token sequences name
    both offending ids.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"vocabulary file not found: {path}")
    entities: list[Entity] = []
    for lineno, record in _read_jsonl(path):
        try:
            entity_id = record["id"]
            surface = record["surface"]
        except KeyError as exc:
            raise DataError(
                f"{path}, line {lineno}: record missing field {exc.args[0]!r}"
            ) from exc
        images = record.get("images", [])
        if not isinstance(images, list) or any(not isinstance(i, str) for i in images):
            raise DataError(
                f"{path}, line {lineno}: `images` must be an array of strings"
            )
        try:
            entities.append(Entity.from_surface(str(entity_id), str(surface), images))
        except InvalidEntityError as exc:
            raise InvalidEntityError(f"{path}, line {lineno}: {exc}") from exc
    vocab = Vocabulary(entities)
    logger.info("loaded vocabulary: %d entities, %d tokens from %s",
                len(vocab), len(vocab.token_alphabet), path)
    return vocab


def save_vocabulary(vocab: Vocabulary, path: str | Path) -> None:
    """Write a vocabulary back to JSONL. Round-trips (id, tokens, images)."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as handle:
        for entity in vocab.entities:
            record = {"id": entity.entity_id, "surface": entity.surface}
            if entity.images:
                record["images"] = list(entity.images)
            handle.write(json.dumps(record, ensure_ascii=False, sort_keys=True))
            handle.write("\n")


def load_queries(path: str | Path, vocab: Vocabulary) -> list[Query]:
    """Load and validate evaluation/inference queries against a vocabulary."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"query file not found: {path}")
    queries: list[Query] = []
    seen: set[str] = set()
    for lineno, record in _read_jsonl(path):
        try:
            query_id = str(record["query_id"])
            seeds = record["seeds"]
        except KeyError as exc:
            raise DataError(
                f"{path}, line {lineno}: record missing field {exc.args[0]!r}"
            ) from exc
        if not isinstance(seeds, list):
            raise DataError(f"{path}, line {lineno}: `seeds` must be an array")
        if query_id in seen:
            raise DataError(f"{path}, line {lineno}: duplicate query_id {query_id!r}")
        seen.add(query_id)
        truth = record.get("ground_truth")
        query = Query(
            query_id=query_id,
            seeds=tuple(str(s) for s in seeds),
            class_name=record.get("class_name"),
            ground_truth=tuple(str(g) for g in truth) if truth is not None else None,
        )
        try:
            query.validate(vocab)
        except DataError as exc:
            raise DataError(f"{path}, line {lineno}: {exc}") from exc
        queries.append(query)
    logger.info("loaded %d queries from %s", len(queries), path)
    return queries


def split_by_seed_count(queries: Iterable[Query]) -> dict[int, list[Query]]:
    """Partition queries by seed-set size (3 vs 5)."""
    parts: dict[int, list[Query]] = {}
    for query in queries:
        parts.setdefault(len(query.seeds), []).append(query)
    return parts
