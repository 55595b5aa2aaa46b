"""REINFORCE training of the walk policy."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import diffnet as dn
from .diffnet import AdamState
from .env import AgentState, Candidates, Environment, initial_state, terminal_reward
from .errors import ContractViolation, NonFiniteError
from .evaluator import AbsentRule, FilterIndex, MetricReport, evaluate, store_filter, test_queries
from .kg import Action, Query, TemporalKG
from .policy import PolicyNetwork
from .ranker import candidate_batch, query_batch, rank

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    horizon: int = 3
    max_actions: int = 100
    batch_size: int = 512
    lr: float = 0.001
    gamma: float = 0.95
    epochs: int = 50
    rollouts: int = 1
    baseline: bool = True
    baseline_decay: float = 0.9
    entropy_coef: float = 0.0
    grad_clip: float = 5.0
    entity_dropout: float = 0.05
    patience: int = 5
    beam_width: int = 100
    seed: int = 0

    def __post_init__(self):
        for name in ("horizon", "max_actions", "batch_size", "epochs", "rollouts", "beam_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.lr > 0 or not 0 <= self.gamma <= 1:
            raise ValueError("lr must be > 0 and gamma in [0, 1]")

    def discounts(self) -> np.ndarray:
        """Per-step weights on the terminal reward, steps 1..K."""
        k = np.arange(1, self.horizon + 1)
        return self.gamma ** (self.horizon - k)


@dataclass
class Step:
    action: Action
    index: int
    log_prob: float
    candidates: Candidates

    @property
    def candidate_count(self) -> int:
        return len(self.candidates)


@dataclass
class Trajectory:
    query: Query
    steps: list[Step]
    reward: int
    dropped: bool = False

    @property
    def final_entity(self) -> int:
        return self.steps[-1].action.entity if self.steps else self.query.subject

    @property
    def log_prob(self) -> float:
        return float(sum(s.log_prob for s in self.steps))


def _sample(probs: np.ndarray, counts: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cum = np.cumsum(probs, axis=1)
    u = rng.random(len(probs)) * cum[:, -1]
    idx = (cum <= u[:, None]).sum(axis=1)
    # rounding can push u past the last real candidate
    return np.minimum(idx, counts - 1)


def _greedy(lp: np.ndarray, cands: Sequence[Candidates]) -> np.ndarray:
    """Argmax per row; exact ties go to the lexicographically smallest action."""
    out = np.empty(len(lp), dtype=np.int64)
    for b, c in enumerate(cands):
        row = lp[b, : len(c)]
        best = np.flatnonzero(row == row.max())
        out[b] = min(best, key=lambda j: c[j])
    return out


def rollout_batch(queries: Sequence[Query], env: Environment, policy: PolicyNetwork,
                  rng: np.random.Generator | None = None, entity_dropout: float = 0.0,
                  greedy: bool = False) -> list[Trajectory]:
    """Walk ``len(queries)`` agents for ``env.horizon`` steps with no gradient tape."""
    b = len(queries)
    if rng is None and not greedy:
        raise ContractViolation("sampling rollouts need an rng")
    dropped = np.zeros(b, dtype=bool)
    if entity_dropout > 0:
        dropped = rng.random(b) < entity_dropout
    hidden = [q.hidden() for q in queries]
    steps: list[list[Step]] = [[] for _ in range(b)]
    with dn.no_grad():
        policy.bind(False)
        qb = query_batch(env, policy, hidden, dropped)
        hist = policy.start(qb)
        states = [initial_state(q) for q in hidden]
        for _ in range(env.horizon):
            cands = [env.available_actions(s) for s in states]
            cb = candidate_batch(env, policy, hidden, cands, dropped)
            lp = policy.log_probs(hist, qb, cb).value
            idx = _greedy(lp, cands) if greedy else _sample(np.exp(lp) * cb.mask, cb.mask.sum(axis=1), rng)
            rows = np.arange(b)
            for i in range(b):
                a = cands[i][int(idx[i])]
                steps[i].append(Step(a, int(idx[i]), float(lp[i, idx[i]]), cands[i]))
                states[i] = AgentState(a.entity, a.time, hidden[i], states[i].step + 1)
            hist = policy.advance(hist, cb.relations[rows, idx], cb.entity_rows[rows, idx], cb.dt[rows, idx])
    out = []
    for q, st, s, dr in zip(queries, steps, states, dropped):
        reward = terminal_reward(s, q) if q.truth is not None else 0
        out.append(Trajectory(q, st, reward, bool(dr)))
    return out


def rollout(query: Query, env: Environment, policy: PolicyNetwork, rng: np.random.Generator,
            entity_dropout: float = 0.0) -> Trajectory:
    return rollout_batch([query], env, policy, rng, entity_dropout)[0]


def replay_log_probs(trajectories: Sequence[Trajectory], env: Environment, policy: PolicyNetwork):
    """Recompute per-step log-probabilities of the recorded actions on a gradient tape.

    Returns ``(log_probs, entropies)``, both tensors of shape (B, K).
    """
    horizon = len(trajectories[0].steps)
    if any(len(t.steps) != horizon for t in trajectories):
        raise ContractViolation("all trajectories in a batch need the same length")
    queries = [t.query.hidden() for t in trajectories]
    dropped = np.array([t.dropped for t in trajectories])
    policy.bind(True)
    qb = query_batch(env, policy, queries, dropped)
    hist = policy.start(qb)
    rows = np.arange(len(trajectories))
    chosen, entropies = [], []
    for k in range(horizon):
        cands = [t.steps[k].candidates for t in trajectories]
        idx = np.array([t.steps[k].index for t in trajectories], dtype=np.int64)
        cb = candidate_batch(env, policy, queries, cands, dropped)
        lp = policy.log_probs(hist, qb, cb)
        chosen.append(dn.pick(lp, idx))
        p = dn.exp(lp)
        entropies.append(dn.neg(dn.sum_axis(dn.mul(p, dn.masked_fill(lp, cb.mask, 0.0)), 1)))
        hist = policy.advance(hist, cb.relations[rows, idx], cb.entity_rows[rows, idx], cb.dt[rows, idx])
    return dn.concat([_col(t) for t in chosen], axis=1), dn.concat([_col(t) for t in entropies], axis=1)


def _col(t: dn.Tensor) -> dn.Tensor:
    return dn.getitem(t, (slice(None), None))


@dataclass
class UpdateStats:
    loss: float
    mean_reward: float
    baseline: float
    grad_norm: float
    applied: bool


def reinforce_loss(trajectories: Sequence[Trajectory], env: Environment, policy: PolicyNetwork,
                   config: TrainConfig, baseline: float = 0.0):
    """Surrogate loss whose gradient is the negated REINFORCE estimate."""
    rewards = np.array([t.reward for t in trajectories], dtype=np.float64)
    weights = config.discounts()[None, :] * (rewards - baseline)[:, None]
    logp, ent = replay_log_probs(trajectories, env, policy)
    dtype = policy.params.dtype
    b = len(trajectories)
    obj = dn.total(dn.mul(logp, dn.Tensor(weights.astype(dtype))))
    loss = dn.mul(obj, -1.0 / b)
    if config.entropy_coef > 0:
        loss = dn.add(loss, dn.mul(dn.total(ent), -config.entropy_coef / b))
    return loss


def reinforce_update(trajectories: Sequence[Trajectory], env: Environment, policy: PolicyNetwork,
                     adam: AdamState, config: TrainConfig, baseline: float = 0.0) -> UpdateStats:
    if not trajectories:
        raise ContractViolation("empty trajectory batch")
    loss = reinforce_loss(trajectories, env, policy, config, baseline)
    loss.backward()
    grads = policy.gradients()
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteError(f"non-finite gradient in {bad}; loss={float(loss.value)!r}")
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if config.grad_clip and norm > config.grad_clip:
        scale = policy.params.dtype.type(config.grad_clip / norm)
        grads = {k: g * scale for k, g in grads.items()}
    applied = norm > 0
    if applied:
        dn.adam_step(policy.params.arrays, grads, adam, config.lr)
    mean_r = float(np.mean([t.reward for t in trajectories]))
    return UpdateStats(float(loss.value), mean_r, baseline, norm, applied)


@dataclass
class EpochStats:
    epoch: int
    mean_reward: float
    mean_loss: float
    seconds: float
    metrics: dict[str, float] = field(default_factory=dict)


class Trainer:
    """Owns the mutable training state: parameters, optimizer, rng, baseline."""

    def __init__(self, store: TemporalKG, policy: PolicyNetwork, env: Environment, config: TrainConfig,
                 rng: np.random.Generator | None = None):
        self.store = store
        self.policy = policy
        self.env = env
        self.config = config
        self.adam = AdamState()
        self.rng = rng if rng is not None else np.random.default_rng(np.random.SeedSequence(config.seed).spawn(2)[1])
        self.baseline = 0.0
        self.epoch = 0
        self.best_metric = -np.inf
        self.bad_epochs = 0
        self.history: list[EpochStats] = []
        self._filter: FilterIndex | None = None
        self.train_queries = store.queries("train")

    @property
    def filter(self) -> FilterIndex:
        if self._filter is None:
            self._filter = store_filter(self.store)
        return self._filter

    def step(self, queries: Sequence[Query]) -> UpdateStats:
        c = self.config
        batch = [q for q in queries for _ in range(c.rollouts)]
        trajs = rollout_batch(batch, self.env, self.policy, self.rng, c.entity_dropout)
        b_hat = self.baseline if c.baseline else 0.0
        stats = reinforce_update(trajs, self.env, self.policy, self.adam, c, b_hat)
        if c.baseline:
            self.baseline = c.baseline_decay * self.baseline + (1 - c.baseline_decay) * stats.mean_reward
        return stats

    def run_epoch(self) -> EpochStats:
        start = time.perf_counter()
        order = self.rng.permutation(len(self.train_queries))
        bs = self.config.batch_size
        rewards, losses, sizes = [], [], []
        for i in range(0, len(order), bs):
            batch = [self.train_queries[j] for j in order[i:i + bs]]
            st = self.step(batch)
            rewards.append(st.mean_reward)
            losses.append(st.loss)
            sizes.append(len(batch))
        self.epoch += 1
        w = np.array(sizes, dtype=np.float64)
        return EpochStats(self.epoch, float(np.average(rewards, weights=w)),
                          float(np.average(losses, weights=w)), time.perf_counter() - start)

    def evaluate(self, split: str = "valid", queries: Sequence[Query] | None = None,
                 rule: AbsentRule = AbsentRule.OPTIMISTIC) -> MetricReport:
        if queries is None:
            queries = test_queries(self.store.splits.get(split, np.zeros((0, 4), np.int64)).tolist(), self.store)
        bw = self.config.beam_width
        return evaluate(lambda q: rank(q, self.env, self.policy, bw), queries, self.store, self.filter, rule)

    def train(self, callbacks: Sequence[Callable] = (), log_path: str | Path | None = None,
              validate: bool = True) -> list[EpochStats]:
        """Run up to ``config.epochs`` epochs.

        After each epoch the validation split (if any) is evaluated and every
        callback is called as ``cb(trainer, stats)``; a truthy return stops
        training. Training also stops after ``patience`` epochs without a
        validation MRR improvement.
        """
        has_valid = validate and len(self.store.splits.get("valid", ())) > 0
        while self.epoch < self.config.epochs:
            stats = self.run_epoch()
            if has_valid:
                report = self.evaluate("valid")
                stats.metrics = {"mrr": report.mrr, **{f"hits@{n}": report.hits(n) for n in (1, 3, 10)}}
            self.history.append(stats)
            log.info("epoch %d reward=%.4f loss=%.4f %s", stats.epoch, stats.mean_reward, stats.mean_loss,
                     stats.metrics)
            if log_path is not None:
                with open(log_path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(asdict(stats), sort_keys=True) + "\n")
            stop = False
            if has_valid:
                if stats.metrics["mrr"] > self.best_metric:
                    self.best_metric, self.bad_epochs = stats.metrics["mrr"], 0
                else:
                    self.bad_epochs += 1
                    stop = self.bad_epochs >= self.config.patience
            # callbacks see the state a checkpoint should capture
            if any([bool(cb(self, stats)) for cb in callbacks]) or stop:
                break
        return self.history


def train(store: TemporalKG, policy: PolicyNetwork, config: TrainConfig, callbacks: Sequence[Callable] = (),
          semantic_mode: str = "unseen-only", **kwargs) -> Trainer:
    env = Environment(store, config.max_actions, semantic_mode, config.horizon)
    trainer = Trainer(store, policy, env, config)
    trainer.train(callbacks, **kwargs)
    return trainer
