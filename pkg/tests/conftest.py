import json
import zlib

import pytest

from listexpand.corpus import Entity, Query, Vocabulary


def write_jsonl(path, records):
    path.write_text("\n".join(json.dumps(r) for r in records) + "\n",
                    encoding="utf-8")


def make_vocab(*surfaces_by_id):
    """make_vocab(("ny", "New York"), ("bos", "Boston"), ...)"""
    return Vocabulary([Entity.from_surface(eid, surface)
                       for eid, surface in surfaces_by_id])


class HashScorer:
    """Deterministic pseudo-random scorer: the score of a step depends
    only on (salt, prefix, step), via crc32. Finite, fast, and identical
    across beam and exhaustive evaluation."""

    def __init__(self, salt):
        self.salt = str(salt)

    def score_steps(self, query, prefix, steps):
        scores = {}
        for step in steps:
            key = f"{self.salt}|{'/'.join(prefix)}|{step}".encode()
            scores[step] = -3.0 * (zlib.crc32(key) % 10_000) / 10_000
        return scores


@pytest.fixture
def city_vocab():
    return make_vocab(
        ("ny", "New York"),
        ("nyc", "NYC"),
        ("bos", "Boston"),
        ("chi", "Chicago"),
        ("la", "Los Angeles"),
        ("nyk", "New York City"),
    )


def toy_dataset(tmp_path, class_size=10, other_size=10):
    """A two-class vocabulary plus one 3-seed and one 5-seed query whose
    ground truth is the first class, written as JSONL files."""
    vocab_records = [
        {"id": f"blue{i}", "surface": f"Blue Stone {i}"} for i in range(class_size)
    ] + [
        {"id": f"red{i}", "surface": f"Red Brick {i}"} for i in range(other_size)
    ]
    truth = [f"blue{i}" for i in range(class_size)]
    query_records = [
        {"query_id": "q3", "seeds": truth[:3], "ground_truth": truth,
         "class_name": "blue"},
        {"query_id": "q5", "seeds": truth[:5], "ground_truth": truth,
         "class_name": "blue"},
    ]
    vocab_path = tmp_path / "vocab.jsonl"
    queries_path = tmp_path / "queries.jsonl"
    write_jsonl(vocab_path, vocab_records)
    write_jsonl(queries_path, query_records)
    return vocab_path, queries_path, truth


def query_over(vocab, seeds, truth=None, query_id="q"):
    query = Query(query_id=query_id, seeds=tuple(seeds),
                  ground_truth=tuple(truth) if truth is not None else None)
    query.validate(vocab)
    return query
