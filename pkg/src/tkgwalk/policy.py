"""Two-branch gated policy over candidate edges.

The static branch encodes the walk as (relation, entity) pairs and scores
candidates by their relation and entity embeddings. The temporal branch
encodes the walk as time-conditioned relation vectors and never touches an
entity embedding, which is what keeps it usable for subjects that have no
trained embedding. A sigmoid gate blends the two score vectors per
candidate before the softmax.

All forward methods are batched: a batch of ``B`` walks with candidate
lists padded to a common width ``N`` and a boolean mask.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import diffnet as dn
from .diffnet import RecurrentCellParams, Tensor
from .errors import ContractViolation


class Variant(str, enum.Enum):
    FULL = "full"
    POLICY1 = "policy1"
    POLICY2 = "policy2"
    NO_TRE = "no-tre"
    NO_GM = "no-gm"
    NO_SEMANTIC_EDGES = "no-semantic-edges"


class GateMode(str, enum.Enum):
    PER_CANDIDATE = "per-candidate"
    PER_STATE = "per-state"


@dataclass(frozen=True)
class PolicyConfig:
    dim: int = 100
    hidden: int = 100
    variant: Variant = Variant.FULL
    gate: GateMode = GateMode.PER_CANDIDATE
    max_dt: int = 400

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "gate", GateMode(self.gate))
        if self.dim < 1 or self.hidden < 1 or self.max_dt < 0:
            raise ValueError("dim and hidden must be >= 1, max_dt >= 0")


# Fixed tensor order; checkpoints and optimizer state follow it.
PARAM_NAMES = (
    "entity_embeddings",
    "relation_embeddings",
    "lstm_static.w_ih",
    "lstm_static.w_hh",
    "lstm_static.bias",
    "lstm_temporal.w_ih",
    "lstm_temporal.w_hh",
    "lstm_temporal.bias",
    "w1_static",
    "w2_static",
    "w1_temporal",
    "w2_temporal",
    "tre_w",
    "tre_b",
    "w_gate",
)


class PolicyParams:
    """All trainable arrays, keyed by :data:`PARAM_NAMES`.

    The entity table has one extra trailing row used for entities without a
    trained embedding.
    """

    def __init__(self, arrays: dict[str, np.ndarray], entity_count: int, relation_count: int):
        missing = set(PARAM_NAMES) - set(arrays)
        if missing:
            raise ContractViolation(f"missing parameter tensors: {sorted(missing)}")
        self.arrays = {k: arrays[k] for k in PARAM_NAMES}
        self.entity_count = entity_count
        self.relation_count = relation_count
        self.dim = arrays["relation_embeddings"].shape[1]
        self.hidden = arrays["w1_static"].shape[0]

    @classmethod
    def init(cls, entity_count: int, relation_count: int, dim: int = 100, hidden: int = 100,
             seed: int | np.random.Generator = 0, dtype=np.float32) -> "PolicyParams":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        d, m = dim, hidden
        u = dn.uniform_init
        a = {
            "entity_embeddings": u(rng, (entity_count + 1, d), d, dtype),
            "relation_embeddings": u(rng, (relation_count, d), d, dtype),
        }
        a["lstm_static.w_ih"], a["lstm_static.w_hh"], a["lstm_static.bias"] = dn.init_cell(rng, 2 * d, d, dtype)
        a["lstm_temporal.w_ih"], a["lstm_temporal.w_hh"], a["lstm_temporal.bias"] = dn.init_cell(rng, d, d, dtype)
        a["w1_static"] = u(rng, (m, 3 * d), 3 * d, dtype)
        a["w2_static"] = u(rng, (2 * d, m), m, dtype)
        a["w1_temporal"] = u(rng, (m, 2 * d), 2 * d, dtype)
        a["w2_temporal"] = u(rng, (d, m), m, dtype)
        a["tre_w"] = u(rng, (d,), 1, dtype)
        # ones, so the encoder starts close to the identity on relations
        a["tre_b"] = np.ones(d, dtype=dtype)
        a["w_gate"] = u(rng, (1, 3 * d), 3 * d, dtype)
        return cls(a, entity_count, relation_count)

    @property
    def oov_row(self) -> int:
        return self.entity_count

    @property
    def dtype(self):
        return self.arrays["w_gate"].dtype

    def astype(self, dtype) -> "PolicyParams":
        return PolicyParams({k: v.astype(dtype) for k, v in self.arrays.items()},
                            self.entity_count, self.relation_count)

    def copy(self) -> "PolicyParams":
        return PolicyParams({k: v.copy() for k, v in self.arrays.items()}, self.entity_count, self.relation_count)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def items(self):
        return self.arrays.items()

    def equal(self, other: "PolicyParams") -> bool:
        return all(np.array_equal(self.arrays[k], other.arrays[k]) and
                   self.arrays[k].dtype == other.arrays[k].dtype for k in PARAM_NAMES)


class QueryBatch(NamedTuple):
    subject_rows: np.ndarray  # (B,) entity-table rows, OOV already substituted
    relations: np.ndarray     # (B,)
    times: np.ndarray         # (B,)


class CandidateBatch(NamedTuple):
    relations: np.ndarray    # (B, N)
    entity_rows: np.ndarray  # (B, N)
    dt: np.ndarray           # (B, N) query time minus edge time, clamped
    mask: np.ndarray         # (B, N) bool


class PathHistories(NamedTuple):
    h_static: Tensor
    c_static: Tensor
    h_temporal: Tensor
    c_temporal: Tensor
    step: int = 0


def entity_rows(entities, seen_mask: np.ndarray, oov_row: int) -> np.ndarray:
    """Map entity ids to embedding rows, sending unseen ids to the OOV row."""
    e = np.asarray(entities, dtype=np.int64)
    return np.where(seen_mask[e], e, oov_row)


def time_deltas(query_times, edge_times, max_dt: int) -> np.ndarray:
    dt = np.asarray(query_times, dtype=np.int64) - np.asarray(edge_times, dtype=np.int64)
    if np.any(dt < 0):
        raise ContractViolation("negative time difference: edge lies after the query time")
    return np.minimum(dt, max_dt)


def pad_candidates(rel_rows: Sequence[np.ndarray], ent_rows: Sequence[np.ndarray],
                   dt_rows: Sequence[np.ndarray], dtype=np.float32) -> CandidateBatch:
    b = len(rel_rows)
    width = max(len(r) for r in rel_rows)
    rel = np.zeros((b, width), dtype=np.int64)
    ent = np.zeros((b, width), dtype=np.int64)
    dt = np.zeros((b, width), dtype=dtype)
    mask = np.zeros((b, width), dtype=bool)
    for i, (r, e, t) in enumerate(zip(rel_rows, ent_rows, dt_rows)):
        n = len(r)
        rel[i, :n], ent[i, :n], dt[i, :n], mask[i, :n] = r, e, t, True
    return CandidateBatch(rel, ent, dt, mask)


class _Bound(NamedTuple):
    ent: Tensor
    rel: Tensor
    lstm_s: RecurrentCellParams
    lstm_t: RecurrentCellParams
    w1_s: Tensor
    w2_s: Tensor
    w1_t: Tensor
    w2_t: Tensor
    tre_w: Tensor
    tre_b: Tensor
    w_g: Tensor


class PolicyNetwork:
    """Stateless scorer over a :class:`PolicyParams` snapshot.

    Call :meth:`bind` once per forward pass; with ``requires_grad`` the
    bound leaves collect gradients that :meth:`gradients` reads back.
    """

    def __init__(self, params: PolicyParams, config: PolicyConfig, self_loop: int):
        if params.dim != config.dim or params.hidden != config.hidden:
            raise ContractViolation("parameter shapes disagree with the policy config")
        self.params = params
        self.config = config
        self.self_loop = self_loop
        self._leaves: dict[str, Tensor] | None = None
        self.bound = self.bind(False)

    def bind(self, requires_grad: bool = True) -> _Bound:
        leaves = {k: Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}
        if requires_grad:
            self._leaves = leaves
        self.bound = _Bound(
            leaves["entity_embeddings"], leaves["relation_embeddings"],
            RecurrentCellParams(leaves["lstm_static.w_ih"], leaves["lstm_static.w_hh"], leaves["lstm_static.bias"]),
            RecurrentCellParams(leaves["lstm_temporal.w_ih"], leaves["lstm_temporal.w_hh"],
                                leaves["lstm_temporal.bias"]),
            leaves["w1_static"], leaves["w2_static"], leaves["w1_temporal"], leaves["w2_temporal"],
            leaves["tre_w"], leaves["tre_b"], leaves["w_gate"],
        )
        return self.bound

    def gradients(self) -> dict[str, np.ndarray]:
        if self._leaves is None:
            raise ContractViolation("bind(requires_grad=True) was not called")
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.value)) for k, t in self._leaves.items()}

    # ---------------------------------------------------------- encoders

    def _zeros(self, b: int) -> Tensor:
        return Tensor(np.zeros((b, self.config.dim), dtype=self.params.dtype))

    def relation_time(self, relations, dt) -> Tensor:
        """Time-conditioned relation vectors, shape ``relations.shape + (d,)``."""
        p = self.bound
        r = dn.take(p.rel, relations)
        if self.config.variant is Variant.NO_TRE:
            return r
        dt = np.asarray(dt, dtype=self.params.dtype)
        if np.any(dt < 0):
            raise ContractViolation("negative time difference")
        scaled = dn.mul(p.tre_w, Tensor(dt[..., None]))
        return dn.mul(dn.add(dn.tanh(scaled), p.tre_b), r)

    def temporal_relation(self, relation: int, dt: float) -> np.ndarray:
        if dt < 0:
            raise ContractViolation("negative time difference")
        with dn.no_grad():
            return self.relation_time(np.array([relation]), np.array([dt])).value[0]

    def start(self, queries: QueryBatch) -> PathHistories:
        """Histories after the implicit initial self-loop on the subject."""
        b = len(queries.relations)
        loops = np.full(b, self.self_loop, dtype=np.int64)
        zero = self._zeros(b)
        hist = PathHistories(zero, zero, zero, zero, -1)
        return self.advance(hist, loops, queries.subject_rows, np.zeros(b))

    def advance_static(self, hist: PathHistories, relations, ent_rows) -> PathHistories:
        p = self.bound
        x = dn.concat([dn.take(p.rel, relations), dn.take(p.ent, ent_rows)])
        h, c = dn.recurrent_step(p.lstm_s, hist.h_static, hist.c_static, x)
        return hist._replace(h_static=h, c_static=c)

    def advance_temporal(self, hist: PathHistories, relations, dt) -> PathHistories:
        x = self.relation_time(relations, dt)
        h, c = dn.recurrent_step(self.bound.lstm_t, hist.h_temporal, hist.c_temporal, x)
        return hist._replace(h_temporal=h, c_temporal=c)

    def advance(self, hist: PathHistories, relations, ent_rows, dt) -> PathHistories:
        hist = self.advance_static(hist, relations, ent_rows)
        hist = self.advance_temporal(hist, relations, dt)
        return hist._replace(step=hist.step + 1)

    # ---------------------------------------------------------- scoring

    def score_static(self, hist: PathHistories, queries: QueryBatch, cands: CandidateBatch) -> Tensor:
        p = self.bound
        feats = dn.concat([dn.take(p.rel, cands.relations), dn.take(p.ent, cands.entity_rows)])
        ctx = dn.concat([hist.h_static, dn.take(p.ent, queries.subject_rows), dn.take(p.rel, queries.relations)])
        return dn.rowdot(feats, dn.mlp2(ctx, p.w1_s, p.w2_s))

    def score_temporal(self, hist: PathHistories, queries: QueryBatch, cands: CandidateBatch,
                       rel_time: Tensor | None = None) -> Tensor:
        p = self.bound
        if rel_time is None:
            rel_time = self.relation_time(cands.relations, cands.dt)
        ctx = dn.concat([hist.h_temporal, dn.take(p.rel, queries.relations)])
        return dn.rowdot(rel_time, dn.mlp2(ctx, p.w1_t, p.w2_t))

    def gate_values(self, hist: PathHistories, queries: QueryBatch, cands: CandidateBatch,
                    rel_time: Tensor | None = None) -> Tensor:
        """Per-candidate blend weights in (0, 1), shape (B, N)."""
        p = self.bound
        d = self.config.dim
        if rel_time is None:
            rel_time = self.relation_time(cands.relations, cands.dt)
        w_hist, w_cand, w_query = p.w_g[:, :d], p.w_g[:, d:2 * d], p.w_g[:, 2 * d:]
        state_part = dn.add(dn.linear(hist.h_temporal, w_hist),
                            dn.linear(dn.take(p.rel, queries.relations), w_query))  # (B, 1)
        if self.config.gate is GateMode.PER_CANDIDATE:
            cand_part = dn.linear(rel_time, w_cand)[..., 0]  # (B, N)
        else:
            weights = cands.mask / cands.mask.sum(axis=1, keepdims=True)
            mean_rt = dn.sum_axis(dn.mul(rel_time, Tensor(weights[..., None].astype(self.params.dtype))), 1)
            cand_part = dn.linear(mean_rt, w_cand)  # (B, 1)
        width = cands.relations.shape[1]
        zeros = Tensor(np.zeros((1, width), dtype=self.params.dtype))
        return dn.sigmoid(dn.add(dn.add(state_part, cand_part), zeros))

    def logits(self, hist: PathHistories, queries: QueryBatch, cands: CandidateBatch) -> Tensor:
        v = self.config.variant
        if v is Variant.POLICY1:
            return self.score_static(hist, queries, cands)
        rel_time = self.relation_time(cands.relations, cands.dt)
        phi_t = self.score_temporal(hist, queries, cands, rel_time)
        if v is Variant.POLICY2:
            return phi_t
        phi_s = self.score_static(hist, queries, cands)
        if v is Variant.NO_GM:
            return dn.mul(dn.add(phi_s, phi_t), 0.5)
        g = self.gate_values(hist, queries, cands, rel_time)
        return dn.add(dn.mul(dn.add(dn.neg(g), 1.0), phi_s), dn.mul(g, phi_t))

    def log_probs(self, hist: PathHistories, queries: QueryBatch, cands: CandidateBatch) -> Tensor:
        if not cands.mask.any(axis=1).all():
            raise ContractViolation("empty candidate set")
        return dn.log_softmax(self.logits(hist, queries, cands), cands.mask)

    def action_distribution(self, hist: PathHistories, queries: QueryBatch, cands: CandidateBatch) -> np.ndarray:
        with dn.no_grad():
            lp = self.log_probs(hist, queries, cands).value
        return np.exp(lp) * cands.mask
