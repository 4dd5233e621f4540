"""Turn sample lists into ranked lists.

Three ranker kinds share one contract: produce a response text for a
sample list, which is then parsed into an exact permutation of the list
members. The perfect oracle sorts by ground-truth membership and rank,
the noisy oracle perturbs that order with random adjacent swaps, and the
remote ranker prompts a chat-completion endpoint with the seed and
candidate entities (text plus image attachments).

Whatever happens, the outcome is a permutation: unrecognized names are
dropped, missing members are appended in presentation order, and a
response with zero recognizable members (or an exhausted transport)
degrades the list to its presentation order. Every outcome is recorded
in a JSONL transcript store so a finished run can be replayed offline.
"""

from __future__ import annotations

import base64
import json
import logging
import mimetypes
import os
import random
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import httpx

from .corpus import Entity
from .errors import (
    ConfigError,
    DataError,
    ResponseParseError,
    TransportFailure,
)
from .sampler import SampleList

logger = logging.getLogger(__name__)

RANKER_KINDS = ("perfect-oracle", "noisy-oracle", "remote-chat")

BACKOFF_BASE_SECONDS = 1.0
BACKOFF_FACTOR = 2.0


@dataclass(frozen=True)
class RankedList:
    """A permutation of a sample list's members, best first."""

    list_id: str
    positions: tuple[str, ...]


@dataclass
class RankerConfig:
    kind: str = "perfect-oracle"
    # noisy oracle: expected adjacent-swap rate in [0, 1] and its rng seed
    swap_rate: float = 0.0
    seed: int | str = 0
    # remote chat endpoint
    base_url: str = "https://api.openai.com/v1"
    model: str = ""
    timeout: float = 60.0
    max_attempts: int = 5
    temperature: float = 0.0
    api_key_env: str = "LISTEXPAND_API_KEY"

    def validate(self) -> None:
        if self.kind not in RANKER_KINDS:
            raise ConfigError(
                f"unknown ranker kind {self.kind!r}; expected one of {RANKER_KINDS}"
            )
        if not 0.0 <= self.swap_rate <= 1.0:
            raise ConfigError(f"swap_rate must lie in [0, 1], got {self.swap_rate}")
        if self.timeout <= 0:
            raise ConfigError(f"timeout must be positive, got {self.timeout}")
        if self.max_attempts < 1:
            raise ConfigError(f"max_attempts must be >= 1, got {self.max_attempts}")
        if self.kind == "remote-chat" and not self.model:
            raise ConfigError("remote-chat ranker requires a model name")


@dataclass
class RankOutcome:
    ranked: RankedList
    degraded: bool
    repairs: int
    request: dict | None
    response: str | None
    latency_ms: float


@dataclass(frozen=True)
class ParsedRanking:
    order: tuple[str, ...]  # expected surfaces, best first
    repairs: int


def _normalize(text: str) -> str:
    return " ".join(text.lower().split())


def parse_response(text: str, expected: Sequence[str]) -> ParsedRanking:
    """Recover a ranking over `expected` surfaces from free-form text.

    Matching is case-insensitive and whitespace-insensitive, anchored on
    word boundaries, with longer surfaces claiming their spans first so
    that a surface contained in another (e.g. "york" in "new york") is
    not double-counted. Surfaces are ordered by first occurrence, which
    subsumes "A > B", newline lists and numbered lists alike. Unmatched
    expected surfaces are appended in presentation order; anything else
    in the text is ignored. Raises ResponseParseError when not a single
    expected surface is recognized.
    """
    if not expected:
        raise DataError("parse_response needs at least one expected surface")
    haystack = _normalize(text)
    claimed: list[tuple[int, int]] = []
    first_position: dict[str, int] = {}
    by_length = sorted(set(expected), key=lambda s: (-len(_normalize(s)), s))
    for surface in by_length:
        needle = _normalize(surface)
        if not needle:
            continue
        pattern = re.compile(r"(?<!\w)" + re.escape(needle) + r"(?!\w)")
        for match in pattern.finditer(haystack):
            span = match.span()
            if any(span[0] < c_end and c_start < span[1] for c_start, c_end in claimed):
                continue
            claimed.append(span)
            if surface not in first_position or span[0] < first_position[surface]:
                first_position[surface] = span[0]
    if not first_position:
        raise ResponseParseError(
            f"no expected entity recognized in response {text[:120]!r}"
        )
    matched = sorted(first_position, key=first_position.get)
    missing = [s for s in expected if s not in first_position]
    return ParsedRanking(tuple(matched) + tuple(missing), repairs=len(missing))


def resolve_ranking(response: str | None, sample: SampleList,
                    surface_of: Mapping[str, str]) -> tuple[RankedList, int, bool]:
    """Map a raw response text onto a permutation of the sample members.

    Returns (ranked list, repair count, degraded). A missing response, a
    zero-match parse, or ambiguous surfaces all fall back to the
    presentation order with the degraded flag set; permutation closure
    holds on every path.
    """
    fallback = RankedList(sample.list_id, sample.members)
    if response is None:
        return fallback, 0, True
    surfaces = [surface_of[member] for member in sample.members]
    id_by_surface = {s: m for s, m in zip(surfaces, sample.members)}
    if len(id_by_surface) < len(sample.members):
        logger.warning("list %s: members share a surface form; keeping "
                       "presentation order", sample.list_id)
        return fallback, 0, True
    try:
        parsed = parse_response(response, surfaces)
    except ResponseParseError:
        return fallback, 0, True
    positions = tuple(id_by_surface[s] for s in parsed.order)
    return RankedList(sample.list_id, positions), parsed.repairs, False


# ---------------------------------------------------------------------------
# Prompt rendering
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PromptSegment:
    kind: str  # "text" | "image"
    value: str


_INSTRUCTION = (
    "The seed entities below all belong to one implicit semantic class, "
    "defined by the attributes their members share. Rank every candidate "
    "entity by how likely it is to belong to that same class, judging from "
    "the names and any attached images, regardless of the order the "
    "candidates are listed in."
)


def render_prompt(seed_entities: Sequence[Entity],
                  candidates: Sequence[Entity]) -> list[PromptSegment]:
    """Interleave instruction text, seed entities and candidate entities
    with their image attachment references. Entities without images emit
    their text line only."""
    if not candidates:
        raise DataError("cannot render a ranking prompt without candidates")
    segments = [PromptSegment("text", _INSTRUCTION)]
    segments.append(PromptSegment("text", "Seed entities:"))
    for entity in seed_entities:
        segments.append(PromptSegment("text", f"- {entity.surface}"))
        for ref in entity.images:
            segments.append(PromptSegment("image", ref))
    segments.append(PromptSegment("text", "Candidate entities:"))
    for entity in candidates:
        segments.append(PromptSegment("text", f"- {entity.surface}"))
        for ref in entity.images:
            segments.append(PromptSegment("image", ref))
    segments.append(PromptSegment(
        "text",
        f"Answer with the {len(candidates)} candidate names only, from most "
        "to least likely, separated by \" > \".",
    ))
    return segments


def _image_part(ref: str) -> dict | None:
    if ref.startswith(("http://", "https://", "data:")):
        return {"type": "image_url", "image_url": {"url": ref}}
    try:
        payload = Path(ref).read_bytes()
    except OSError as exc:
        # A missing attachment must not sink every list containing the
        # entity; the text line still identifies it.
        logger.warning("skipping unreadable image %s: %s", ref, exc)
        return None
    mime = mimetypes.guess_type(ref)[0] or "image/png"
    encoded = base64.b64encode(payload).decode("ascii")
    return {"type": "image_url", "image_url": {"url": f"data:{mime};base64,{encoded}"}}


def segments_to_message_content(segments: Sequence[PromptSegment]) -> list[dict]:
    parts: list[dict] = []
    for segment in segments:
        if segment.kind == "text":
            parts.append({"type": "text", "text": segment.value})
        else:
            part = _image_part(segment.value)
            if part is not None:
                parts.append(part)
    return parts


# ---------------------------------------------------------------------------
# Remote chat-completion client
# ---------------------------------------------------------------------------

class ChatCompletionClient:
    """Minimal chat-completion HTTP client with exponential backoff.

    Retries transport errors and HTTP 429/5xx up to `max_attempts` total
    attempts (sleeps of 1s, 2s, 4s, ... between them); any other status
    fails immediately. The API key is read from the environment variable
    named in the config; when unset the request goes out unauthenticated,
    which suits local endpoints.
    """

    def __init__(self, config: RankerConfig, *,
                 client: httpx.Client | None = None,
                 sleep=time.sleep):
        self._config = config
        self._sleep = sleep
        self._client = client or httpx.Client(timeout=config.timeout)
        self._headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(config.api_key_env, "")
        if api_key:
            self._headers["Authorization"] = f"Bearer {api_key}"
        else:
            logger.warning("environment variable %s is unset; sending "
                           "unauthenticated requests", config.api_key_env)

    def complete(self, body: dict) -> str:
        url = self._config.base_url.rstrip("/") + "/chat/completions"
        delay = BACKOFF_BASE_SECONDS
        last_error = "no attempt made"
        for attempt in range(1, self._config.max_attempts + 1):
            try:
                response = self._client.post(url, json=body, headers=self._headers)
            except httpx.HTTPError as exc:
                last_error = f"transport error: {exc}"
            else:
                if response.status_code == 200:
                    return self._extract(response)
                if response.status_code == 429 or response.status_code >= 500:
                    last_error = f"HTTP {response.status_code}"
                else:
                    raise TransportFailure(
                        f"HTTP {response.status_code}: {response.text[:200]}"
                    )
            if attempt < self._config.max_attempts:
                logger.debug("attempt %d/%d failed (%s); retrying in %.0fs",
                             attempt, self._config.max_attempts, last_error, delay)
                self._sleep(delay)
                delay *= BACKOFF_FACTOR
        raise TransportFailure(
            f"chat endpoint failed after {self._config.max_attempts} attempts: "
            f"{last_error}"
        )

    @staticmethod
    def _extract(response: httpx.Response) -> str:
        try:
            content = response.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportFailure(f"malformed completion response: {exc}") from exc
        if isinstance(content, list):
            # Some providers return content as a list of typed parts.
            content = "".join(
                part.get("text", "") for part in content if isinstance(part, dict)
            )
        if not isinstance(content, str):
            raise TransportFailure("completion content is not text")
        return content


# ---------------------------------------------------------------------------
# Ranker implementations
# ---------------------------------------------------------------------------

class EntityRanker:
    """Shared rank flow: obtain a response text, resolve it into a
    permutation, never raise past a degraded fallback."""

    kind = "abstract"

    def __init__(self, surface_of: Mapping[str, str]):
        self._surface_of = surface_of

    def respond(self, sample: SampleList) -> tuple[dict | None, str]:
        raise NotImplementedError

    def rank(self, sample: SampleList) -> RankOutcome:
        started = time.perf_counter()
        request: dict | None = None
        response: str | None = None
        transport_failed = False
        try:
            request, response = self.respond(sample)
        except TransportFailure as exc:
            logger.warning("list %s degraded: %s", sample.list_id, exc)
            transport_failed = True
        latency_ms = (time.perf_counter() - started) * 1000.0
        ranked, repairs, degraded = resolve_ranking(
            response, sample, self._surface_of
        )
        return RankOutcome(
            ranked=ranked,
            degraded=degraded or transport_failed,
            repairs=repairs,
            request=request,
            response=response,
            latency_ms=latency_ms,
        )


class PerfectOracleRanker(EntityRanker):
    """Ranks ground-truth members first, ordered by their ground-truth
    rank, then the rest by id."""

    kind = "perfect-oracle"

    def __init__(self, truth_order: Sequence[str], surface_of: Mapping[str, str]):
        super().__init__(surface_of)
        self._truth_rank = {eid: i for i, eid in enumerate(truth_order)}

    def oracle_order(self, sample: SampleList) -> list[str]:
        huge = len(self._truth_rank)
        return sorted(
            sample.members,
            key=lambda eid: (
                0 if eid in self._truth_rank else 1,
                self._truth_rank.get(eid, huge),
                eid,
            ),
        )

    def respond(self, sample: SampleList) -> tuple[dict | None, str]:
        order = self.oracle_order(sample)
        return None, " > ".join(self._surface_of[eid] for eid in order)


class NoisyOracleRanker(PerfectOracleRanker):
    """Perfect oracle order perturbed by one left-to-right sweep of
    adjacent transpositions, each applied with probability `swap_rate`.

    Starting from the oracle order, each executed swap adds exactly one
    inversion, so the expected Kendall distance is swap_rate * (n - 1):
    strictly increasing in the noise level.
    """

    kind = "noisy-oracle"

    def __init__(self, truth_order: Sequence[str], surface_of: Mapping[str, str],
                 swap_rate: float, seed: int | str = 0):
        super().__init__(truth_order, surface_of)
        self.swap_rate = swap_rate
        self._seed = seed

    def respond(self, sample: SampleList) -> tuple[dict | None, str]:
        order = self.oracle_order(sample)
        rng = random.Random(f"{self._seed}:{sample.list_id}")
        for i in range(len(order) - 1):
            if rng.random() < self.swap_rate:
                order[i], order[i + 1] = order[i + 1], order[i]
        return None, " > ".join(self._surface_of[eid] for eid in order)


class RemoteChatRanker(EntityRanker):
    """Prompts a chat-completion endpoint with the listwise template."""

    kind = "remote-chat"

    def __init__(self, config: RankerConfig, seed_entities: Sequence[Entity],
                 entity_of: Mapping[str, Entity] | None = None, *,
                 vocab=None, client: httpx.Client | None = None,
                 sleep=time.sleep):
        if entity_of is None:
            if vocab is None:
                raise ConfigError("RemoteChatRanker needs an entity lookup")
            entity_of = {e.entity_id: e for e in vocab.entities}
        super().__init__({eid: e.surface for eid, e in entity_of.items()})
        self._config = config
        self._seed_entities = list(seed_entities)
        self._entity_of = entity_of
        self._client = ChatCompletionClient(config, client=client, sleep=sleep)

    def respond(self, sample: SampleList) -> tuple[dict | None, str]:
        candidates = [self._entity_of[eid] for eid in sample.members]
        segments = render_prompt(self._seed_entities, candidates)
        body = {
            "model": self._config.model,
            "temperature": self._config.temperature,
            "messages": [
                {"role": "user", "content": segments_to_message_content(segments)}
            ],
        }
        return body, self._client.complete(body)


def make_ranker(config: RankerConfig, *, query, vocab,
                client: httpx.Client | None = None,
                sleep=time.sleep) -> EntityRanker:
    """Build the ranker a query needs, validating the config first."""
    config.validate()
    surface_of = {e.entity_id: e.surface for e in vocab.entities}
    if config.kind in ("perfect-oracle", "noisy-oracle"):
        if query.ground_truth is None:
            raise ConfigError(
                f"{config.kind} ranker requires ground truth on query "
                f"{query.query_id!r}"
            )
        if config.kind == "perfect-oracle":
            return PerfectOracleRanker(query.ground_truth, surface_of)
        return NoisyOracleRanker(
            query.ground_truth, surface_of, config.swap_rate, config.seed
        )
    seed_entities = [vocab[s] for s in query.seeds]
    return RemoteChatRanker(
        config, seed_entities, vocab=vocab, client=client, sleep=sleep
    )


def rank(seed_entities: Sequence[Entity], sample: SampleList,
         config: RankerConfig, *, surface_of: Mapping[str, str],
         truth_order: Sequence[str] | None = None,
         entity_of: Mapping[str, Entity] | None = None,
         client: httpx.Client | None = None,
         sleep=time.sleep) -> RankOutcome:
    """One-shot ranking of a single sample list. Prefer `make_ranker` when
    ranking many lists for the same query."""
    config.validate()
    if config.kind == "perfect-oracle":
        if truth_order is None:
            raise ConfigError("perfect-oracle rank needs a truth order")
        ranker: EntityRanker = PerfectOracleRanker(truth_order, surface_of)
    elif config.kind == "noisy-oracle":
        if truth_order is None:
            raise ConfigError("noisy-oracle rank needs a truth order")
        ranker = NoisyOracleRanker(truth_order, surface_of,
                                   config.swap_rate, config.seed)
    else:
        ranker = RemoteChatRanker(config, seed_entities, entity_of,
                                  client=client, sleep=sleep)
    return ranker.rank(sample)


# ---------------------------------------------------------------------------
# Transcript store
# ---------------------------------------------------------------------------

class TranscriptStore:
    """Append-only JSONL record of every ranking outcome.

    One record per list: {list_id, request, response, degraded, repairs,
    latency_ms}. Appends are serialized under a lock and written as a
    single line, so concurrent ranking workers interleave cleanly. On
    load, the first record per list wins, which makes interrupted runs
    safe to resume.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def append(self, list_id: str, outcome: RankOutcome) -> None:
        record = {
            "list_id": list_id,
            "request": outcome.request,
            "response": outcome.response,
            "degraded": outcome.degraded,
            "repairs": outcome.repairs,
            "latency_ms": round(outcome.latency_ms, 3),
        }
        line = json.dumps(record, ensure_ascii=False, sort_keys=True)
        with self._lock:
            with self.path.open("a", encoding="utf-8") as handle:
                handle.write(line + "\n")
                handle.flush()

    def load(self) -> dict[str, dict]:
        records: dict[str, dict] = {}
        if not self.path.exists():
            return records
        with self.path.open("r", encoding="utf-8") as handle:
            for lineno, line in enumerate(handle, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DataError(
                        f"{self.path}, line {lineno}: corrupt transcript ({exc})"
                    ) from exc
                list_id = record.get("list_id")
                if list_id is None:
                    raise DataError(
                        f"{self.path}, line {lineno}: transcript without list_id"
                    )
                records.setdefault(str(list_id), record)
        return records
