"""Deterministic walk environment over a :class:`~tkgwalk.kg.TemporalKG`.

States carry the current entity and time plus the query context; the
answer travels inside the query but is dropped from every observation.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ContractViolation
from .kg import Action, Edges, Query, TemporalKG


class SemanticMode(str, enum.Enum):
    UNSEEN_ONLY = "unseen-only"
    ALWAYS = "always"
    OFF = "off"


class AgentState(NamedTuple):
    entity: int
    time: int
    query: Query
    step: int = 0


class Observation(NamedTuple):
    entity: int
    time: int
    subject: int
    relation: int
    query_time: int

    def serialize(self) -> str:
        return "\t".join(str(v) for v in self)

    @classmethod
    def parse(cls, text: str) -> "Observation":
        return cls(*(int(v) for v in text.strip().split("\t")))


class Candidates:
    """Action list for one state, self-loop first, with per-edge kind tags."""

    __slots__ = ("relations", "entities", "times", "semantic")

    def __init__(self, relations, entities, times, semantic):
        self.relations = relations
        self.entities = entities
        self.times = times
        self.semantic = semantic

    def __len__(self) -> int:
        return len(self.times)

    def __getitem__(self, i) -> Action:
        return Action(int(self.relations[i]), int(self.entities[i]), int(self.times[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def tolist(self) -> list[Action]:
        return list(self)

    def index(self, action: Action) -> int:
        r, e, t = action
        hits = np.flatnonzero((self.relations == r) & (self.entities == e) & (self.times == t))
        if len(hits) == 0:
            raise ContractViolation(f"action {tuple(action)} is not available in this state")
        return int(hits[0])


def initial_state(query: Query) -> AgentState:
    return AgentState(query.subject, query.time, query, 0)


def observe(state: AgentState) -> Observation:
    q = state.query
    return Observation(state.entity, state.time, q.subject, q.relation, q.time)


def terminal_reward(state: AgentState, query: Query | None = None) -> int:
    query = query if query is not None else state.query
    if query.truth is None:
        raise ContractViolation("reward is undefined without a ground-truth object")
    return int(state.entity == query.truth)


@dataclass(frozen=True)
class Environment:
    store: TemporalKG
    max_actions: int = 100
    semantic_mode: SemanticMode = SemanticMode.UNSEEN_ONLY
    horizon: int = 3

    def __post_init__(self):
        object.__setattr__(self, "semantic_mode", SemanticMode(self.semantic_mode))
        if self.max_actions < 1:
            raise ValueError("max_actions must be >= 1")

    initial_state = staticmethod(initial_state)
    observe = staticmethod(observe)
    terminal_reward = staticmethod(terminal_reward)

    def available_actions(self, state: AgentState) -> Candidates:
        if state.step >= self.horizon:
            raise ContractViolation(f"no actions after the final step {self.horizon}")
        n = self.max_actions
        temporal = self.store.temporal_actions(state.entity, state.time, n)
        parts = [temporal]
        n_semantic = 0
        if state.step == 0 and self.semantic_mode is not SemanticMode.OFF:
            room = n - len(temporal)
            wants = self.semantic_mode is SemanticMode.ALWAYS or len(temporal) == 0
            if wants and room > 0:
                semantic = self.store.semantic_actions(state.query.relation, state.query.time, room)
                if len(temporal) and len(semantic):
                    # an edge already present as a temporal edge is not repeated
                    dup = np.isin(semantic.times * self.store.entity_count + semantic.entities,
                                  temporal.times[temporal.relations == state.query.relation]
                                  * self.store.entity_count
                                  + temporal.entities[temporal.relations == state.query.relation])
                    semantic = Edges(semantic.relations[~dup], semantic.entities[~dup], semantic.times[~dup])
                parts.append(semantic)
                n_semantic = len(semantic)
        rel = np.concatenate([[self.store.self_loop], *(p.relations for p in parts)]).astype(np.int64)
        ent = np.concatenate([[state.entity], *(p.entities for p in parts)]).astype(np.int64)
        tim = np.concatenate([[state.time], *(p.times for p in parts)]).astype(np.int64)
        kind = np.zeros(len(rel), dtype=bool)
        if n_semantic:
            kind[len(rel) - n_semantic:] = True
        return Candidates(rel, ent, tim, kind)

    def transition(self, state: AgentState, action: Action, check: bool = True) -> AgentState:
        if check:
            self.available_actions(state).index(action)
        return AgentState(action.entity, action.time, state.query, state.step + 1)

    def reset(self, query: Query) -> AgentState:
        return initial_state(query)
