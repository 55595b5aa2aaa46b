"""Time-aware filtered ranking metrics (MRR, Hits@1/3/10)."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractViolation
from .kg import Query, TemporalKG

HITS_AT = (1, 3, 10)


class AbsentRule(str, enum.Enum):
    OPTIMISTIC = "optimistic-absent"
    PESSIMISTIC = "pessimistic-absent"


class FilterIndex:
    """``(subject, relation, time) -> true objects`` over every split, inverses included."""

    def __init__(self, table: Mapping[tuple[int, int, int], frozenset[int]]):
        self._table = dict(table)

    def __len__(self) -> int:
        return len(self._table)

    def __contains__(self, key) -> bool:
        return tuple(key) in self._table

    def objects(self, subject: int, relation: int, time: int) -> frozenset[int]:
        return self._table.get((subject, relation, time), frozenset())

    def keys(self):
        return self._table.keys()


def build_filter(facts: Iterable[Sequence[int]], base_relation_count: int) -> FilterIndex:
    table: dict[tuple[int, int, int], set[int]] = {}
    for s, r, o, t in facts:
        table.setdefault((s, r, t), set()).add(o)
        table.setdefault((o, r + base_relation_count, t), set()).add(s)
    return FilterIndex({k: frozenset(v) for k, v in table.items()})


def store_filter(store: TemporalKG) -> FilterIndex:
    rows = np.concatenate(list(store.splits.values())).tolist()
    return build_filter(rows, store.base_relation_count)


def filtered_rank(query: Query, ranked, filt: FilterIndex, rule: AbsentRule = AbsentRule.OPTIMISTIC,
                  entity_count: int | None = None) -> int:
    """1-based rank of the truth after dropping other genuine answers at the query time.

    ``ranked`` is a :class:`~tkgwalk.ranker.RankedAnswers` or any sequence of
    entity ids already in rank order.
    """
    if query.truth is None:
        raise ContractViolation("filtered_rank needs the query's true object")
    order = getattr(ranked, "entities", ranked)
    order = np.asarray(order, dtype=np.int64)
    others = filt.objects(query.subject, query.relation, query.time) - {query.truth}
    keep = ~np.isin(order, np.fromiter(others, dtype=np.int64, count=len(others)))
    hit = np.flatnonzero(order == query.truth)
    if len(hit):
        return 1 + int(keep[: hit[0]].sum())
    rule = AbsentRule(rule)
    if rule is AbsentRule.OPTIMISTIC:
        return 1 + int(keep.sum())
    if entity_count is None:
        raise ContractViolation("pessimistic absent rule needs entity_count")
    return entity_count - len(others)


def _summary(ranks: np.ndarray) -> dict[str, float]:
    if len(ranks) == 0:
        return {"mrr": 0.0, **{f"hits@{n}": 0.0 for n in HITS_AT}, "count": 0}
    ranks = np.asarray(ranks, dtype=np.float64)
    out = {"mrr": float(np.mean(1.0 / ranks))}
    for n in HITS_AT:
        out[f"hits@{n}"] = float(np.mean(ranks <= n))
    out["count"] = int(len(ranks))
    return out


@dataclass
class MetricReport:
    ranks: np.ndarray
    directions: np.ndarray  # 0 = object query, 1 = subject query (inverted)
    seen_subject: np.ndarray
    rule: AbsentRule = AbsentRule.OPTIMISTIC
    extra: dict[str, str] = field(default_factory=dict)

    @property
    def mrr(self) -> float:
        return _summary(self.ranks)["mrr"]

    def hits(self, n: int) -> float:
        return float(np.mean(np.asarray(self.ranks) <= n)) if len(self.ranks) else 0.0

    def sections(self) -> dict[str, dict[str, float]]:
        r, d, s = np.asarray(self.ranks), np.asarray(self.directions), np.asarray(self.seen_subject, dtype=bool)
        return {
            "combined": _summary(r),
            "object": _summary(r[d == 0]),
            "subject": _summary(r[d == 1]),
            "seen": _summary(r[s]),
            "unseen": _summary(r[~s]),
        }

    def to_text(self) -> str:
        lines = [f"absent_rule={self.rule.value}"]
        lines += [f"{k}={v}" for k, v in sorted(self.extra.items())]
        for name, stats in self.sections().items():
            for key, value in stats.items():
                lines.append(f"{name}.{key}={value!r}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def parse_text(text: str) -> dict[str, str]:
        out = {}
        for line in text.splitlines():
            if line.strip():
                k, _, v = line.partition("=")
                out[k] = v
        return out


def evaluate(ranker: Callable[[Query], object], queries: Sequence[Query], store: TemporalKG,
             filt: FilterIndex, rule: AbsentRule = AbsentRule.OPTIMISTIC) -> MetricReport:
    """Rank every query with ``ranker`` and collect filtered ranks.

    ``queries`` should hold both directions of each test fact (see
    :func:`test_queries`), which makes the combined MRR the
    ``1 / (2 |test|)`` normalised sum over both directions.
    """
    rule = AbsentRule(rule)
    ranks, dirs, seen = [], [], []
    for q in queries:
        ranked = ranker(q.hidden())
        ranks.append(filtered_rank(q, ranked, filt, rule, store.entity_count))
        dirs.append(int(q.relation >= store.base_relation_count))
        seen.append(store.is_seen(q.subject))
    return MetricReport(np.array(ranks, dtype=np.int64), np.array(dirs, dtype=np.int64),
                        np.array(seen, dtype=bool), rule)


def test_queries(facts: Iterable[Sequence[int]], store: TemporalKG) -> list[Query]:
    """Object query and inverted subject query for every fact."""
    out = []
    for s, r, o, t in facts:
        out.append(Query(s, r, t, o))
        out.append(Query(o, store.inverse(r), t, s))
    return out


test_queries.__test__ = False  # not a pytest test


def random_ranking_mrr(queries: Sequence[Query], filt: FilterIndex, entity_count: int) -> float:
    """Expected MRR of a uniformly random ranking over each query's filtered candidates."""
    total = 0.0
    for q in queries:
        n = entity_count - len(filt.objects(q.subject, q.relation, q.time) - {q.truth})
        total += sum(1.0 / k for k in range(1, n + 1)) / n
    return total / len(queries) if queries else 0.0
