import numpy as np
import pytest

from tkgwalk.kg import TemporalKGBuilder


def brute_temporal(train, base, entity, time_upper, n):
    """Sort-then-truncate oracle over the raw facts plus their inverses."""
    edges = set()
    for s, r, o, t in train:
        if s == entity and t < time_upper:
            edges.add((r, o, t))
        if o == entity and t < time_upper:
            edges.add((r + base, s, t))
    return sorted(edges, key=lambda e: (-e[2], e[0], e[1]))[:n]


def brute_semantic(train, base, relation, time_upper, n):
    pairs = set()
    for s, r, o, t in train:
        if r == relation and t < time_upper:
            pairs.add((o, t))
        if r + base == relation and t < time_upper:
            pairs.add((s, t))
    return [(relation, o, t) for o, t in sorted(pairs, key=lambda p: (-p[1], p[0]))[:n]]


@pytest.fixture
def toy_facts():
    # hand-checkable: two relations, five entities, entity 4 only in test
    train = [(0, 0, 1, 0), (1, 1, 2, 1), (2, 0, 0, 2), (0, 1, 2, 2), (3, 0, 1, 3), (0, 0, 3, 3)]
    test = [(4, 0, 1, 5), (0, 1, 3, 5)]
    return train, test


@pytest.fixture
def toy_store(toy_facts):
    train, test = toy_facts
    return (TemporalKGBuilder(entity_count=5, relation_count=2)
            .add_facts(train, "train").add_facts(test, "test").build())


def random_train(seed, n_ent=12, n_rel=3, n_facts=60, n_times=15):
    rng = np.random.default_rng(seed)
    return np.stack([rng.integers(0, n_ent, n_facts), rng.integers(0, n_rel, n_facts),
                     rng.integers(0, n_ent, n_facts), rng.integers(0, n_times, n_facts)], axis=1)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import summary_lines

    lines = summary_lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
