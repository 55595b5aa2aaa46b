import numpy as np
import pytest

from tkgwalk.errors import ContractViolation
from tkgwalk.evaluator import (AbsentRule, MetricReport, build_filter, evaluate, filtered_rank,
                               random_ranking_mrr, store_filter, test_queries)
from tkgwalk.kg import Query, TemporalKGBuilder


def oracle_rank(order, truth, genuine, entity_count, rule):
    rank = 1
    for e in order:
        if e == truth:
            return rank
        if e not in genuine:
            rank += 1
    if rule == "optimistic-absent":
        return rank
    return entity_count - len(genuine)


def oracle_metrics(ranks):
    ranks = list(ranks)
    return {"mrr": sum(1 / r for r in ranks) / len(ranks),
            **{f"hits@{n}": sum(r <= n for r in ranks) / len(ranks) for n in (1, 3, 10)}}


def test_filter_single_fact():
    f = build_filter([(0, 1, 2, 5)], base_relation_count=3)
    assert len(f) == 2
    assert f.objects(0, 1, 5) == {2} and f.objects(2, 4, 5) == {0}
    assert f.objects(0, 1, 4) == frozenset()


def test_filter_toy_map():
    facts = [(0, 0, 1, 0), (0, 0, 2, 0), (3, 1, 1, 0), (0, 0, 1, 1)]
    f = build_filter(facts, 2)
    want = {(0, 0, 0): {1, 2}, (1, 2, 0): {0}, (2, 2, 0): {0}, (3, 1, 0): {1}, (1, 3, 0): {3},
            (0, 0, 1): {1}, (1, 2, 1): {0}}
    assert {k: set(f.objects(*k)) for k in f.keys()} == want


def test_hand_cases():
    filt = build_filter([(0, 0, 7, 3), (0, 0, 5, 3)], 1)
    q = Query(0, 0, 3, 5)
    assert filtered_rank(q, [5, 1, 2], filt) == 1
    # truth fourth, behind one filtered genuine answer (7) and two others
    assert filtered_rank(q, [7, 1, 2, 5], filt) == 3
    # absent truth: optimistic places it after the surviving ranked entities
    assert filtered_rank(q, [7, 1, 2], filt, AbsentRule.OPTIMISTIC) == 3
    assert filtered_rank(q, [7, 1, 2], filt, AbsentRule.PESSIMISTIC, entity_count=10) == 9
    with pytest.raises(ContractViolation):
        filtered_rank(q.hidden(), [5], filt)
    with pytest.raises(ContractViolation):
        filtered_rank(q, [1], filt, AbsentRule.PESSIMISTIC)


def test_report_arithmetic():
    r = MetricReport(np.array([1, 4]), np.array([0, 1]), np.array([True, False]))
    assert r.mrr == 0.625 and r.hits(3) == 0.5 and r.hits(10) == 1.0
    sec = r.sections()
    assert sec["object"]["mrr"] == 1.0 and sec["subject"]["mrr"] == 0.25
    assert sec["seen"]["count"] == 1 and sec["unseen"]["hits@1"] == 0.0
    text = r.to_text()
    parsed = MetricReport.parse_text(text)
    assert parsed["combined.mrr"] == "0.625" and parsed["absent_rule"] == "optimistic-absent"


@pytest.mark.parametrize("rule", ["optimistic-absent", "pessimistic-absent"])
def test_random_cases_match_oracle(rule):
    rng = np.random.default_rng(0 if rule.startswith("o") else 1)
    for _ in range(200):
        n = int(rng.integers(2, 30))
        truth = int(rng.integers(0, n))
        order = rng.permutation(n)[: int(rng.integers(0, n + 1))].tolist()
        genuine = set(rng.choice(n, size=int(rng.integers(0, n)), replace=False).tolist()) | {truth}
        facts = [(0, 0, o, 4) for o in genuine]
        filt = build_filter(facts, 1)
        q = Query(0, 0, 4, truth)
        got = filtered_rank(q, order, filt, rule, n)
        want = oracle_rank(order, truth, genuine - {truth}, n, rule)
        assert got == want
        raw = order.index(truth) + 1 if truth in order else len(order) + 1
        if truth in order:
            assert got <= raw


def test_random_metrics_match_oracle():
    rng = np.random.default_rng(5)
    for _ in range(200):
        ranks = rng.integers(1, 40, size=int(rng.integers(1, 30)))
        r = MetricReport(ranks, np.zeros(len(ranks), int), np.ones(len(ranks), bool))
        want = oracle_metrics(ranks.tolist())
        assert abs(r.mrr - want["mrr"]) <= 1e-12
        for n in (1, 3, 10):
            assert abs(r.hits(n) - want[f"hits@{n}"]) <= 1e-12
        assert r.hits(1) <= r.hits(3) <= r.hits(10) and 0 < r.mrr <= 1
        assert (r.mrr == 1) == bool(np.all(ranks == 1))


@pytest.fixture
def tiny_store():
    train = [(0, 0, 1, 0), (1, 0, 2, 0), (2, 1, 0, 1)]
    test = [(0, 0, 1, 2), (2, 0, 3, 2)]
    return TemporalKGBuilder(entity_count=4, relation_count=2).add_facts(train).add_facts(test, "test").build()


def test_evaluate_both_directions(tiny_store):
    queries = test_queries(tiny_store.splits["test"].tolist(), tiny_store)
    assert len(queries) == 4 and queries[1] == Query(1, 2, 2, 0)

    def perfect(q):
        return [next(x.truth for x in queries if x.subject == q.subject and x.relation == q.relation)]

    report = evaluate(perfect, queries, tiny_store, store_filter(tiny_store))
    assert report.mrr == 1.0 and all(report.hits(n) == 1.0 for n in (1, 3, 10))
    assert report.directions.tolist() == [0, 1, 0, 1]
    assert report.seen_subject.tolist() == [True, True, True, False]
    seen = []
    absent = evaluate(lambda q: seen.append(q) or [], queries, tiny_store, store_filter(tiny_store),
                      "pessimistic-absent")
    assert all(q.truth is None for q in seen)
    assert absent.rule is AbsentRule.PESSIMISTIC and absent.ranks.tolist() == [4, 4, 4, 4]


def test_direction_symmetry(tiny_store):
    filt = store_filter(tiny_store)
    fixed = {0: [2, 1, 3], 1: [0, 3], 2: [3, 0, 1], 3: [1, 2]}

    def ranker(q):
        return fixed[q.subject]

    fact = [(2, 0, 3, 2)]
    twin = [(3, 2, 2, 2)]  # the same fact, written from the object side
    a = evaluate(ranker, test_queries(fact, tiny_store), tiny_store, filt)
    b = evaluate(ranker, test_queries(twin, tiny_store), tiny_store, filt)
    assert a.sections()["combined"] == b.sections()["combined"]


def test_filter_covers_all_splits(tiny_store):
    f = store_filter(tiny_store)
    assert f.objects(0, 0, 2) == {1} and f.objects(3, 2, 2) == {2}


def test_random_baseline():
    filt = build_filter([(0, 0, 1, 0)], 1)
    q = Query(0, 0, 0, 1)
    harmonic = sum(1 / k for k in range(1, 5)) / 4
    assert random_ranking_mrr([q], filt, 4) == pytest.approx(harmonic)
