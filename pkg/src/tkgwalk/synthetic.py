"""Small generated temporal graphs with known answers."""

from __future__ import annotations

import numpy as np

from .kg import TemporalKG, TemporalKGBuilder


def cyclic_facts(n_entities: int = 20, n_times: int = 50, relation: int = 0, offset: int = 0) -> np.ndarray:
    """``(e_i, r, e_{(i+1) mod n}, t)`` for every entity and every ``t < n_times``."""
    i = np.arange(n_entities)
    rows = [np.stack([i + offset, np.full_like(i, relation), (i + 1) % n_entities + offset,
                      np.full_like(i, t)], axis=1) for t in range(n_times)]
    return np.concatenate(rows)


def cyclic_kg(n_entities: int = 20, n_times: int = 50) -> TemporalKG:
    """Cycle facts at ``t < n_times`` for training, the same pattern at ``n_times`` as test."""
    test = cyclic_facts(n_entities, n_times + 1)[n_entities * n_times:]
    return (TemporalKGBuilder(entity_count=n_entities, relation_count=1)
            .add_facts(cyclic_facts(n_entities, n_times), "train")
            .add_facts(test, "test")
            .build())


def unseen_kg(n_cycle: int = 24, n_unseen: int = 8, n_times: int = 50) -> TemporalKG:
    """A cycle plus a hub that fresh entities attach to.

    Relation 0 runs the cycle over entities ``0..n_cycle-1``. Relation 1
    links one newcomer per time step to the hub entity ``n_cycle``; a
    newcomer has no history at the moment it appears, so the only way to
    its answer is through edges that share the query relation. The test
    split at ``t = n_times`` holds the next cycle step plus ``n_unseen``
    facts whose subjects never occur in training.
    """
    hub = n_cycle
    newcomers = hub + 1 + np.arange(n_times)
    unseen = hub + 1 + n_times + np.arange(n_unseen)
    joins = np.stack([newcomers, np.ones(n_times, np.int64), np.full(n_times, hub), np.arange(n_times)], axis=1)
    train = np.concatenate([cyclic_facts(n_cycle, n_times), joins])
    test = np.concatenate([
        cyclic_facts(n_cycle, n_times + 1)[n_cycle * n_times:],
        np.stack([unseen, np.ones(n_unseen, np.int64), np.full(n_unseen, hub), np.full(n_unseen, n_times)], axis=1),
    ])
    return (TemporalKGBuilder(entity_count=int(unseen[-1]) + 1, relation_count=2)
            .add_facts(train, "train")
            .add_facts(test, "test")
            .build())


def random_kg(n_entities: int, n_relations: int, n_facts: int, n_times: int, seed: int = 0,
              test_fraction: float = 0.2) -> TemporalKG:
    """Uniformly random facts, split by time into train then test."""
    rng = np.random.default_rng(seed)
    facts = np.stack([
        rng.integers(0, n_entities, n_facts),
        rng.integers(0, n_relations, n_facts),
        rng.integers(0, n_entities, n_facts),
        rng.integers(0, n_times, n_facts),
    ], axis=1)
    cut = int(np.quantile(facts[:, 3], 1 - test_fraction))
    train, test = facts[facts[:, 3] < max(cut, 1)], facts[facts[:, 3] >= max(cut, 1)]
    return (TemporalKGBuilder(entity_count=n_entities, relation_count=n_relations, rebase=False)
            .add_facts(train, "train").add_facts(test, "test").build())
