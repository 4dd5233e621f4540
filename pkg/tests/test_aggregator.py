import json
import random

import pytest

from listexpand.aggregator import (
    Provenance,
    ScoreTable,
    accumulate,
    finalize,
    result_to_dict,
)
from listexpand.decoder import CandidateSet, ScoredEntity
from listexpand.errors import IntegrityError
from listexpand.ranker import RankedList


def cands(ids, query_id="q"):
    return CandidateSet(query_id, [
        ScoredEntity(eid, float(len(ids) - i)) for i, eid in enumerate(ids)
    ])


def test_positions_sum_directly():
    table = ScoreTable(["x", "f1", "f2", "f3", "f4"])
    # x sits at positions 1, 2 and 4 across three lists
    table.accumulate(RankedList("l1", ("x", "f1", "f2", "f3", "f4")))
    table.accumulate(RankedList("l2", ("f1", "x", "f2", "f3", "f4")))
    table.accumulate(RankedList("l3", ("f1", "f2", "f3", "x", "f4")))
    total, count, _ = table.cell("x")
    assert total == 7 and count == 3


def test_always_first_scores_occurrence_count():
    table = ScoreTable(["x", "y"])
    for i in range(10):
        table.accumulate(RankedList(f"l{i}", ("x", "y")))
    assert table.cell("x")[0] == 10


def test_always_last_scores_o_times_n():
    ids = ["a", "b", "c", "d", "x"]
    table = ScoreTable(ids)
    for i in range(10):
        table.accumulate(RankedList(f"l{i}", ("a", "b", "c", "d", "x")))
    assert table.cell("x")[0] == 50


def test_unknown_entity_is_an_integrity_error():
    table = ScoreTable(["a"])
    with pytest.raises(IntegrityError):
        accumulate(table, RankedList("l", ("a", "intruder")))


def test_finalize_sorts_by_mean_position():
    # a: 7 over 3 occurrences (mean 2.33), b: 20 over 10 (mean 2.0)
    ids = ["a", "b", "f1", "f2", "f3", "f4"]
    table = ScoreTable(ids)
    table.accumulate(RankedList("l1", ("a", "b", "f1", "f2", "f3")))   # a+1 b+2
    table.accumulate(RankedList("l2", ("b", "a", "f1", "f2", "f3")))   # a+2 b+1
    table.accumulate(RankedList("l3", ("b", "f1", "f2", "a", "f3")))   # a+4 b+1
    for i in range(5):
        table.accumulate(RankedList(f"x{i}", ("f1", "b", "f2", "f3", "f4")))
    for i in range(5, 7):
        table.accumulate(RankedList(f"x{i}", ("f1", "f2", "b", "f3", "f4")))
    assert table.cell("a") == (7, 3, 0)
    assert table.cell("b") == (20, 10, 0)
    result = finalize(table, cands(ids))
    assert result.ordered_ids().index("b") < result.ordered_ids().index("a")
    by_id = {s.entity_id: s for s in result.ranking}
    assert by_id["a"].mean_position == pytest.approx(7 / 3)
    assert by_id["b"].mean_position == pytest.approx(2.0)


def test_all_tied_falls_back_to_decoder_score():
    ids = ["low", "high", "mid"]
    candidates = CandidateSet("q", [
        ScoredEntity("high", 3.0), ScoredEntity("mid", 2.0),
        ScoredEntity("low", 1.0),
    ])
    table = ScoreTable(ids)
    # symmetric: everything ends with the same mean position
    table.accumulate(RankedList("l1", ("low", "high", "mid")))
    table.accumulate(RankedList("l2", ("high", "mid", "low")))
    table.accumulate(RankedList("l3", ("mid", "low", "high")))
    result = finalize(table, candidates)
    assert result.ordered_ids() == ["high", "mid", "low"]


def test_single_entity_result():
    table = ScoreTable(["only"])
    table.accumulate(RankedList("l", ("only",)))
    result = finalize(table, cands(["only"]))
    assert result.ordered_ids() == ["only"]


def test_unscored_entity_is_flagged_and_last():
    table = ScoreTable(["a", "b"])
    table.accumulate(RankedList("l", ("b",)))
    result = finalize(table, cands(["a", "b"]))
    assert result.ordered_ids() == ["b", "a"]
    flagged = {s.entity_id: s.flagged for s in result.ranking}
    assert flagged == {"b": False, "a": True}
    assert result.ranking[-1].mean_position is None


def test_mean_positions_stay_within_list_bounds():
    rng = random.Random(5)
    ids = [f"e{i}" for i in range(8)]
    table = ScoreTable(ids)
    for i in range(40):
        order = rng.sample(ids, 5)
        table.accumulate(RankedList(f"l{i}", tuple(order)))
    assert table.total_scored_occurrences() == 40 * 5
    result = finalize(table, cands(ids))
    for score in result.ranking:
        if score.mean_position is not None:
            assert 1.0 <= score.mean_position <= 5.0


def test_order_independence_of_accumulation():
    rng = random.Random(11)
    ids = [f"e{i}" for i in range(10)]
    ranked_lists = [
        RankedList(f"l{i}", tuple(rng.sample(ids, 5))) for i in range(60)
    ]
    provenance = Provenance(plan_seed=1, ranker_kind="perfect-oracle",
                            degraded_lists=0)

    def run(order):
        table = ScoreTable(ids)
        for ranked in order:
            table.accumulate(ranked)
        return json.dumps(result_to_dict(finalize(table, cands(ids), provenance)),
                          sort_keys=True)

    reference = run(ranked_lists)
    for trial in range(10):
        shuffled = ranked_lists[:]
        random.Random(trial).shuffle(shuffled)
        assert run(shuffled) == reference


def test_merge_partial_tables_matches_single_table():
    ids = [f"e{i}" for i in range(6)]
    rng = random.Random(3)
    ranked_lists = [
        RankedList(f"l{i}", tuple(rng.sample(ids, 4))) for i in range(20)
    ]
    whole = ScoreTable(ids)
    for ranked in ranked_lists:
        whole.accumulate(ranked)
    left, right = ScoreTable(ids), ScoreTable(ids)
    for i, ranked in enumerate(ranked_lists):
        (left if i % 2 else right).accumulate(ranked)
    left.merge(right)
    for eid in ids:
        assert left.cell(eid) == whole.cell(eid)


def test_exact_recovery_single_list():
    # one list covering all candidates with a perfect ranking recovers it
    ids = ["w", "x", "y", "z"]
    table = ScoreTable(ids)
    table.accumulate(RankedList("l", ("y", "w", "z", "x")))
    result = finalize(table, cands(ids))
    assert result.ordered_ids() == ["y", "w", "z", "x"]
