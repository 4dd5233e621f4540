"""Prefix tree over entity token sequences.

Constrained decoding asks two questions at every step: which tokens may
extend the current prefix, and may the prefix terminate as a complete
entity. Terminal nodes carry the entity id; an entity that is a strict
prefix of another yields a node that is both terminal and branching, so
termination is reported as a flag next to the continuations rather than
as a reserved child token.

The trie is immutable after build and safe for concurrent reads.
"""

from __future__ import annotations

from typing import Iterator, NamedTuple, Sequence

from .corpus import Vocabulary
from .errors import DataError


class Continuations(NamedTuple):
    tokens: frozenset[str]
    entity_id: str | None

    @property
    def can_end(self) -> bool:
        return self.entity_id is not None


_EMPTY = Continuations(frozenset(), None)


class _Node:
    __slots__ = ("children", "entity_id")

    def __init__(self) -> None:
        self.children: dict[str, _Node] = {}
        self.entity_id: str | None = None


class PrefixTrie:
    """Prefix tree built from a vocabulary; use `build` rather than
    constructing nodes by hand."""

    def __init__(self, root: _Node, entity_count: int):
        self._root = root
        self.entity_count = entity_count

    @classmethod
    def build(cls, vocab: Vocabulary) -> "PrefixTrie":
        if len(vocab) == 0:
            raise DataError("cannot build a prefix trie from an empty vocabulary")
        root = _Node()
        for entity in vocab.entities:
            node = root
            for token in entity.tokens:
                node = node.children.setdefault(token, _Node())
            # Duplicate token sequences were rejected by the Vocabulary.
            node.entity_id = entity.entity_id
        return cls(root, len(vocab))

    def _walk(self, prefix: Sequence[str]) -> _Node | None:
        node = self._root
        for token in prefix:
            node = node.children.get(token)
            if node is None:
                return None
        return node

    def continuations(self, prefix: Sequence[str]) -> Continuations:
        """Tokens that extend `prefix`, plus the entity id if the prefix is
        itself a complete entity. A prefix outside the trie yields an empty
        set and no terminal: decoding can never leave the vocabulary."""
        node = self._walk(prefix)
        if node is None:
            return _EMPTY
        return Continuations(frozenset(node.children), node.entity_id)

    def entity_at(self, prefix: Sequence[str]) -> str | None:
        node = self._walk(prefix)
        return node.entity_id if node is not None else None

    def iter_entities(self) -> Iterator[tuple[str, tuple[str, ...]]]:
        """Yield (entity_id, token path) for every terminal, in depth-first
        token order. Deterministic given the build input."""
        stack: list[tuple[_Node, tuple[str, ...]]] = [(self._root, ())]
        while stack:
            node, path = stack.pop()
            if node.entity_id is not None:
                yield node.entity_id, path
            for token in sorted(node.children, reverse=True):
                stack.append((node.children[token], path + (token,)))
