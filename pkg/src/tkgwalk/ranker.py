"""Beam-search inference and answer ranking."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffnet as dn
from .diffnet import Tensor
from .env import AgentState, Environment, initial_state
from .kg import Action, Query
from .policy import PathHistories, PolicyNetwork, QueryBatch, entity_rows, pad_candidates, time_deltas


@dataclass
class Beam:
    state: AgentState
    log_prob: float
    trace: tuple[Action, ...] = ()
    semantic: tuple[bool, ...] = ()
    history: PathHistories | None = field(default=None, repr=False)

    @property
    def prob(self) -> float:
        return float(np.exp(self.log_prob))


@dataclass(frozen=True)
class RankedAnswers:
    query: Query
    entities: np.ndarray
    scores: np.ndarray
    tie_rule: str = "score-desc/entity-asc"

    def __len__(self) -> int:
        return len(self.entities)

    def position(self, entity: int) -> int | None:
        hit = np.flatnonzero(self.entities == entity)
        return int(hit[0]) if len(hit) else None

    def as_pairs(self) -> list[tuple[int, float]]:
        return list(zip(self.entities.tolist(), self.scores.tolist()))


def query_batch(env: Environment, policy: PolicyNetwork, queries: Sequence[Query],
                dropped: np.ndarray | None = None) -> QueryBatch:
    subj = np.array([q.subject for q in queries], dtype=np.int64)
    rows = entity_rows(subj, env.store.seen_mask, policy.params.oov_row)
    if dropped is not None:
        rows = np.where(dropped, policy.params.oov_row, rows)
    return QueryBatch(rows,
                      np.array([q.relation for q in queries], dtype=np.int64),
                      np.array([q.time for q in queries], dtype=np.int64))


def candidate_batch(env: Environment, policy: PolicyNetwork, queries: Sequence[Query], cands,
                    dropped: np.ndarray | None = None):
    seen, oov = env.store.seen_mask, policy.params.oov_row
    ent_rows, dts = [], []
    for i, (q, c) in enumerate(zip(queries, cands)):
        rows = entity_rows(c.entities, seen, oov)
        if dropped is not None and dropped[i]:
            rows = np.where(c.entities == q.subject, oov, rows)
        ent_rows.append(rows)
        dts.append(time_deltas(q.time, c.times, policy.config.max_dt))
    return pad_candidates([c.relations for c in cands], ent_rows, dts, policy.params.dtype)


def _take_rows(hist: PathHistories, rows: np.ndarray) -> PathHistories:
    return PathHistories(*(Tensor(t.value[rows]) for t in hist[:4]), hist.step)


def beam_search(query: Query, env: Environment, policy: PolicyNetwork, horizon: int | None = None,
                beam_width: int = 100) -> list[Beam]:
    """Width-limited expansion for exactly ``horizon`` hops.

    Each hop expands every live beam over all of its candidates and keeps the
    ``beam_width`` best by cumulative log-probability; equal scores are
    ordered by the action trace, compared lexicographically.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    horizon = env.horizon if horizon is None else horizon
    q = query.hidden()
    with dn.no_grad():
        policy.bind(False)
        qb1 = query_batch(env, policy, [q])
        hist = policy.start(qb1)
        states = [initial_state(q)]
        logp = np.zeros(1)
        traces: list[tuple[Action, ...]] = [()]
        kinds: list[tuple[bool, ...]] = [()]
        for _ in range(horizon):
            w = len(states)
            cands = [env.available_actions(s) for s in states]
            qb = QueryBatch(*(np.repeat(a, w) for a in qb1))
            cb = candidate_batch(env, policy, [q] * w, cands)
            lp = policy.log_probs(hist, qb, cb).value.astype(np.float64)
            beam_idx, cand_idx = np.nonzero(cb.mask)
            total = logp[beam_idx] + lp[beam_idx, cand_idx]
            parent_rank = np.empty(w, dtype=np.int64)
            parent_rank[sorted(range(w), key=traces.__getitem__)] = np.arange(w)
            rel = cb.relations[beam_idx, cand_idx]
            ent = np.concatenate([c.entities for c in cands])
            tim = np.concatenate([c.times for c in cands])
            sem = np.concatenate([c.semantic for c in cands])
            order = np.lexsort((tim, ent, rel, parent_rank[beam_idx], -total))[:beam_width]
            new_states, new_traces, new_kinds = [], [], []
            for j in order:
                b = beam_idx[j]
                a = Action(int(rel[j]), int(ent[j]), int(tim[j]))
                new_states.append(AgentState(a.entity, a.time, q, states[b].step + 1))
                new_traces.append(traces[b] + (a,))
                new_kinds.append(kinds[b] + (bool(sem[j]),))
            parents = beam_idx[order]
            hist = policy.advance(_take_rows(hist, parents), rel[order],
                                  cb.entity_rows[beam_idx[order], cand_idx[order]],
                                  cb.dt[beam_idx[order], cand_idx[order]])
            states, traces, kinds, logp = new_states, new_traces, new_kinds, total[order]
        return [Beam(s, float(lp_), t, k, _take_rows(hist, np.array([i])))
                for i, (s, lp_, t, k) in enumerate(zip(states, logp, traces, kinds))]


def score_entities(beams: Sequence[Beam], query: Query | None = None, agg: str = "sum") -> RankedAnswers:
    """Aggregate terminal beams into a ranked answer list."""
    if agg not in ("sum", "max"):
        raise ValueError(f"unknown aggregation {agg!r}")
    scores: dict[int, float] = {}
    for b in beams:
        e, p = b.state.entity, b.prob
        if agg == "sum":
            scores[e] = scores.get(e, 0.0) + p
        else:
            scores[e] = max(scores.get(e, 0.0), p)
    ents = np.array(sorted(scores), dtype=np.int64)
    vals = np.array([scores[e] for e in ents.tolist()], dtype=np.float64)
    order = np.lexsort((ents, -vals))
    if query is None and beams:
        query = beams[0].state.query
    return RankedAnswers(query, ents[order], vals[order])


def rank(query: Query, env: Environment, policy: PolicyNetwork, beam_width: int = 100,
         agg: str = "sum") -> RankedAnswers:
    return score_entities(beam_search(query, env, policy, beam_width=beam_width), query, agg)


# ------------------------------------------------------------------ traces


@dataclass(frozen=True)
class Hop:
    source: str
    relation: str
    target: str
    time: str
    semantic: bool = False


@dataclass(frozen=True)
class PathTrace:
    query: tuple[str, str, str]  # subject, relation, time
    score: float
    hops: tuple[Hop, ...]
    answer: str

    def format(self) -> str:
        s, r, t = self.query
        lines = [f"# query={_fields([s, r, '?', t])} answer={_fields([self.answer])} score={self.score!r}"]
        for h in self.hops:
            tag = " [semantic]" if h.semantic else ""
            lines.append(f"({_fields([h.source, h.relation, h.target, h.time])}){tag}")
        return "\n".join(lines)

    @classmethod
    def parse(cls, text: str) -> "PathTrace":
        # only "\n" separates lines; labels may hold other separator characters
        lines = [ln for ln in text.strip("\n").split("\n") if ln]
        head = lines[0]
        if not head.startswith("# query="):
            raise ValueError(f"not a trace header: {head!r}")
        q_part, rest = head[len("# query="):].split(" answer=", 1)
        a_part, score = rest.rsplit(" score=", 1)
        s, r, _, t = _unfields(q_part)
        (answer,) = _unfields(a_part)
        hops = []
        for ln in lines[1:]:
            semantic = ln.endswith(" [semantic]")
            if semantic:
                ln = ln[: -len(" [semantic]")]
            hops.append(Hop(*_unfields(ln[1:-1]), semantic=semantic))
        return cls((s, r, t), float(score), tuple(hops), answer)


def _quote(value: str) -> str:
    if (any(c in value for c in ',"()[]=') or value != value.strip(" ")
            or any(not c.isprintable() for c in value)):
        return '"' + value.replace('"', '""') + '"'
    return value


def _fields(values) -> str:
    return ", ".join(_quote(str(v)) for v in values)


def _unfields(text: str) -> list[str]:
    return next(csv.reader([text], skipinitialspace=True))


def beam_trace(beam: Beam, env: Environment) -> PathTrace:
    store = env.store
    q = beam.state.query
    hops, here = [], q.subject
    for a, sem in zip(beam.trace, beam.semantic):
        hops.append(Hop(store.entity_label(here), store.relation_label(a.relation), store.entity_label(a.entity), str(a.time), sem))
        here = a.entity
    return PathTrace((store.entity_label(q.subject), store.relation_label(q.relation), str(q.time)),
                     beam.prob, tuple(hops), store.entity_label(beam.state.entity))


def explain(query: Query, env: Environment, policy: PolicyNetwork, horizon: int | None = None,
            beam_width: int = 100, top_k: int = 5) -> list[PathTrace]:
    beams = beam_search(query, env, policy, horizon, beam_width)
    return [beam_trace(b, env) for b in beams[:top_k]]


def parse_traces(text: str) -> list[PathTrace]:
    """Read back a file of blank-line separated traces."""
    blocks = [b for b in text.split("\n\n") if b.strip()]
    return [PathTrace.parse(b) for b in blocks]
