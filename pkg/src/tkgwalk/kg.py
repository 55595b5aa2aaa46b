"""Quadruple ingestion and the immutable temporal graph store.

The store keeps two CSR-style indices over the training window only:

* per entity, its outgoing edges ``(relation, object, time)`` sorted by time
  descending, then relation id, then entity id;
* per relation, the ``(object, time)`` pairs it was observed with, sorted by
  time descending then object id, deduplicated.

Validation and test facts are kept per split (for filtering and query
generation) but never enter the action indices.
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np

from .errors import BoundsError, EmptySplitError, ParseError

SPLITS = ("train", "valid", "test")


class Quadruple(NamedTuple):
    subject: int
    relation: int
    object: int
    time: int


class Action(NamedTuple):
    relation: int
    entity: int
    time: int


class Query(NamedTuple):
    subject: int
    relation: int
    time: int
    truth: int | None = None

    def hidden(self) -> "Query":
        return self._replace(truth=None)


@dataclass(frozen=True)
class DatasetStats:
    entities: int
    relations: int
    timestamps: int
    granularity: int
    train: int
    valid: int
    test: int
    unseen_entities: int | None = None
    unseen_entity_quads: int | None = None
    unseen_object_quads: int | None = None
    unseen_subject_quads: int | None = None
    unseen_both_quads: int | None = None
    max_actions: int = 100


# Published statistics of the standard benchmarks, used to validate ingests.
KNOWN_DATASETS = {
    "ICEWS14": DatasetStats(7128, 230, 365, 24, 63685, 13823, 13222, 496, 862, 438, 497, 73),
    "ICEWS18": DatasetStats(23033, 256, 304, 24, 373018, 45995, 49545, 1140, 1948, 975, 1050, 77),
    "WIKI": DatasetStats(12554, 24, 232, 1, 539286, 67538, 63110, 2968, 27079, 11086, 22967, 6974,
                         max_actions=90),
    "YAGO": DatasetStats(10623, 10, 189, 1, 161540, 19523, 20026, 540, 1609, 1102, 873, 366),
}


class Edges:
    """A read-only run of candidate edges, stored column-wise."""

    __slots__ = ("relations", "entities", "times")

    def __init__(self, relations: np.ndarray, entities: np.ndarray, times: np.ndarray):
        self.relations = relations
        self.entities = entities
        self.times = times

    @classmethod
    def empty(cls) -> "Edges":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z)

    def __len__(self) -> int:
        return len(self.times)

    def __iter__(self) -> Iterator[Action]:
        for r, e, t in zip(self.relations.tolist(), self.entities.tolist(), self.times.tolist()):
            yield Action(r, e, t)

    def __getitem__(self, i) -> Action:
        return Action(int(self.relations[i]), int(self.entities[i]), int(self.times[i]))

    def tolist(self) -> list[Action]:
        return list(self)

    def __eq__(self, other) -> bool:
        if isinstance(other, Edges):
            return self.tolist() == other.tolist()
        return self.tolist() == list(other)

    def __repr__(self) -> str:
        return f"Edges({self.tolist()!r})"


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.int64)
    a.setflags(write=False)
    return a


class TemporalKG:
    """Immutable indexed store. Build it with :class:`TemporalKGBuilder`."""

    def __init__(
        self,
        splits: dict[str, np.ndarray],
        entity_count: int,
        base_relation_count: int,
        entity_names: Sequence[str] | None = None,
        relation_names: Sequence[str] | None = None,
        split_sizes: dict[str, int] | None = None,
        time_offset: int = 0,
        granularity: int = 1,
    ):
        train = splits.get("train")
        if train is None or len(train) == 0:
            raise EmptySplitError("empty train split")
        self.entity_count = int(entity_count)
        self.base_relation_count = int(base_relation_count)
        self.relation_count = 2 * self.base_relation_count + 1
        self.self_loop = 2 * self.base_relation_count
        self.entity_names = list(entity_names) if entity_names is not None else None
        self.relation_names = list(relation_names) if relation_names is not None else None
        self.time_offset = time_offset
        self.granularity = granularity
        self.splits = {k: _frozen(v.reshape(-1, 4)) for k, v in splits.items()}
        self.split_sizes = dict(split_sizes) if split_sizes else {k: len(v) for k, v in self.splits.items()}

        aug = self._with_inverses(train)
        aug = np.unique(aug, axis=0)
        order = np.lexsort((aug[:, 2], aug[:, 1], aug[:, 0], aug[:, 3]))
        self.fact_array = _frozen(aug[order])
        self.max_train_time = int(train[:, 3].max())
        self.train_entities = frozenset(np.unique(train[:, [0, 2]]).tolist())

        s, r, o, t = aug.T
        # subject asc, time desc, relation asc, object asc
        order = np.lexsort((o, r, -t, s))
        self._out_rel = _frozen(r[order])
        self._out_ent = _frozen(o[order])
        self._out_time = _frozen(t[order])
        self._out_negtime = _frozen(-t[order])
        self._out_ptr = _frozen(np.searchsorted(s[order], np.arange(self.entity_count + 1)))

        pairs = np.unique(np.stack([r, o, t], axis=1), axis=0)
        pr, po, pt = pairs.T
        order = np.lexsort((po, -pt, pr))
        self._rel_ent = _frozen(po[order])
        self._rel_time = _frozen(pt[order])
        self._rel_negtime = _frozen(-pt[order])
        self._rel_ptr = _frozen(np.searchsorted(pr[order], np.arange(self.relation_count + 1)))

        seen = np.zeros(self.entity_count, dtype=bool)
        seen[list(self.train_entities)] = True
        seen.setflags(write=False)
        self.seen_mask = seen

    def _with_inverses(self, facts: np.ndarray) -> np.ndarray:
        inv = facts[:, [2, 1, 0, 3]].copy()
        inv[:, 1] += self.base_relation_count
        return np.concatenate([facts, inv], axis=0)

    # ------------------------------------------------------------------ queries

    @property
    def facts(self) -> list[Quadruple]:
        return [Quadruple(*row) for row in self.fact_array.tolist()]

    def inverse(self, relation: int) -> int:
        if relation == self.self_loop:
            return relation
        if relation < self.base_relation_count:
            return relation + self.base_relation_count
        return relation - self.base_relation_count

    def is_seen(self, entity: int) -> bool:
        return 0 <= entity < self.entity_count and bool(self.seen_mask[entity])

    def temporal_actions(self, entity: int, time_upper: int, n: int) -> Edges:
        """Latest ``n`` outgoing edges of ``entity`` strictly before ``time_upper``."""
        if n < 1:
            raise ValueError("n must be >= 1")
        if not 0 <= entity < self.entity_count:
            return Edges.empty()
        lo, hi = self._out_ptr[entity], self._out_ptr[entity + 1]
        if lo == hi:
            return Edges.empty()
        start = lo + int(np.searchsorted(self._out_negtime[lo:hi], -time_upper, side="right"))
        stop = min(hi, start + n)
        return Edges(self._out_rel[start:stop], self._out_ent[start:stop], self._out_time[start:stop])

    def semantic_actions(self, relation: int, time_upper: int, n: int) -> Edges:
        """Latest ``n`` distinct ``(object, time)`` pairs seen with ``relation``."""
        if n < 1:
            raise ValueError("n must be >= 1")
        if not 0 <= relation < self.relation_count:
            return Edges.empty()
        lo, hi = self._rel_ptr[relation], self._rel_ptr[relation + 1]
        if lo == hi:
            return Edges.empty()
        start = lo + int(np.searchsorted(self._rel_negtime[lo:hi], -time_upper, side="right"))
        stop = min(hi, start + n)
        rel = np.full(stop - start, relation, dtype=np.int64)
        return Edges(rel, self._rel_ent[start:stop], self._rel_time[start:stop])

    def queries(self, split: str) -> list[Query]:
        """Both query directions for every fact of ``split``, in file order."""
        out = []
        for s, r, o, t in self.splits.get(split, np.zeros((0, 4), dtype=np.int64)).tolist():
            out.append(Query(s, r, t, o))
            out.append(Query(o, r + self.base_relation_count, t, s))
        return out

    def entity_label(self, e: int) -> str:
        if self.entity_names is not None and 0 <= e < len(self.entity_names):
            return self.entity_names[e]
        return str(e)

    def relation_label(self, r: int) -> str:
        if r == self.self_loop:
            return "self-loop"
        base = r % self.base_relation_count if r < self.self_loop else r
        name = str(base)
        if self.relation_names is not None and base < len(self.relation_names):
            name = self.relation_names[base]
        return name + "^-1" if self.base_relation_count <= r < self.self_loop else name

    def unseen_statistics(self, split: str = "test") -> dict[str, int]:
        facts = self.splits.get(split, np.zeros((0, 4), dtype=np.int64))
        s_unseen = ~self.seen_mask[facts[:, 0]]
        o_unseen = ~self.seen_mask[facts[:, 2]]
        ents = np.unique(facts[:, [0, 2]])
        return {
            "unseen_entities": int((~self.seen_mask[ents]).sum()),
            "unseen_entity_quads": int((s_unseen | o_unseen).sum()),
            "unseen_object_quads": int(o_unseen.sum()),
            "unseen_subject_quads": int(s_unseen.sum()),
            "unseen_both_quads": int((s_unseen & o_unseen).sum()),
        }

    def timestamp_count(self) -> int:
        times = np.concatenate([v[:, 3] for v in self.splits.values()])
        return int(len(np.unique(times)))

    def check_stats(self, stats: DatasetStats) -> list[str]:
        """Return human-readable mismatches against published statistics."""
        problems = []
        expected = {
            "entities": (stats.entities, self.entity_count),
            "relations": (stats.relations, self.base_relation_count),
            "timestamps": (stats.timestamps, self.timestamp_count()),
        }
        for tag in SPLITS:
            expected[tag] = (getattr(stats, tag), self.split_sizes.get(tag, 0))
        for key, (want, got) in expected.items():
            if want != got:
                problems.append(f"{key}: expected {want}, got {got}")
        return problems


def _parse_lines(lines: Iterable[str], source: str) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (4, 5):
            raise ParseError(f"expected 4 or 5 integer columns, got {len(parts)}", lineno, source)
        try:
            s, r, o, t = (int(p) for p in parts[:4])
        except ValueError:
            raise ParseError(f"non-integer field in {line!r}", lineno, source) from None
        if min(s, r, o, t) < 0:
            raise ParseError(f"negative field in {line!r}", lineno, source)
        rows.append((s, r, o, t))
    return np.array(rows, dtype=np.int64).reshape(-1, 4)


def _read_source(source) -> tuple[Iterable[str], str]:
    if isinstance(source, (str, os.PathLike)):
        path = Path(source)
        return path.read_text(encoding="utf-8").splitlines(), str(path)
    if isinstance(source, io.IOBase):
        return source, getattr(source, "name", "<stream>")
    return source, "<lines>"


def read_id_map(path) -> list[str]:
    """Read a ``name<TAB>id`` file into an id-indexed name list."""
    names: dict[int, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        name, _, ident = line.rstrip("\n").rpartition("\t")
        try:
            names[int(ident)] = name
        except ValueError:
            raise ParseError(f"bad id map row {line!r}", lineno, str(path)) from None
    size = max(names) + 1 if names else 0
    return [names.get(i, str(i)) for i in range(size)]


def read_manifest(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ParseError(f"expected key=value, got {line!r}", lineno, str(path))
        out[key.strip()] = value.strip()
    return out


@dataclass
class TemporalKGBuilder:
    """Single-writer accumulator; :meth:`build` freezes it into a store."""

    granularity: int = 1
    entity_count: int | None = None
    relation_count: int | None = None
    entity_names: list[str] | None = None
    relation_names: list[str] | None = None
    rebase: bool = True
    _splits: dict[str, list[np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        if self.granularity < 1:
            raise ValueError("granularity divisor must be >= 1")

    def add(self, source, split: str = "train") -> "TemporalKGBuilder":
        lines, name = _read_source(source)
        facts = _parse_lines(lines, name)
        self._splits.setdefault(split, []).append(facts)
        return self

    def add_facts(self, facts, split: str = "train") -> "TemporalKGBuilder":
        arr = np.asarray(facts, dtype=np.int64).reshape(-1, 4)
        self._splits.setdefault(split, []).append(arr)
        return self

    def build(self) -> TemporalKG:
        splits = {k: np.concatenate(v) for k, v in self._splits.items()}
        if len(splits.get("train", ())) == 0:
            raise EmptySplitError("empty train split")
        everything = np.concatenate(list(splits.values()))
        n_ent = self.entity_count
        if n_ent is None:
            n_ent = len(self.entity_names) if self.entity_names else int(everything[:, [0, 2]].max()) + 1
        n_rel = self.relation_count
        if n_rel is None:
            n_rel = len(self.relation_names) if self.relation_names else int(everything[:, 1].max()) + 1
        bad = everything[(everything[:, 0] >= n_ent) | (everything[:, 2] >= n_ent)]
        if len(bad):
            raise BoundsError(f"entity id out of range (< {n_ent} required): {bad[0].tolist()}")
        bad = everything[everything[:, 1] >= n_rel]
        if len(bad):
            raise BoundsError(f"relation id out of range (< {n_rel} required): {bad[0].tolist()}")

        offset = 0
        if self.rebase:
            offset = int(everything[:, 3].min()) // self.granularity
        normalized = {}
        for tag, facts in splits.items():
            facts = facts.copy()
            facts[:, 3] = facts[:, 3] // self.granularity - offset
            order = np.argsort(facts[:, 3], kind="stable")
            normalized[tag] = facts[order]
        return TemporalKG(
            normalized, n_ent, n_rel,
            entity_names=self.entity_names, relation_names=self.relation_names,
            split_sizes={k: len(v) for k, v in splits.items()},
            time_offset=offset, granularity=self.granularity,
        )


def ingest(source, granularity_divisor: int = 1, split_tag: str = "train",
           builder: TemporalKGBuilder | None = None, **kwargs) -> TemporalKG | TemporalKGBuilder:
    """Parse one split.

    Without ``builder`` a store is built immediately from this single split.
    With one, the split is merged into it and the builder is returned so
    further splits can be added before :meth:`TemporalKGBuilder.build`.
    """
    if builder is None:
        return TemporalKGBuilder(granularity=granularity_divisor, **kwargs).add(source, split_tag).build()
    return builder.add(source, split_tag)


def load_dataset(directory, granularity: int | None = None, manifest: dict | None = None) -> TemporalKG:
    """Load ``train/valid/test.txt`` plus optional id maps, ``stat.txt`` and manifest.

    Recognised manifest keys: ``entities``, ``relations``, ``granularity``
    and ``dataset`` (a key of :data:`KNOWN_DATASETS`).
    """
    directory = Path(directory)
    train_path = directory / "train.txt"
    if not train_path.exists():
        raise FileNotFoundError(str(train_path))
    if manifest is None and (directory / "manifest.txt").exists():
        manifest = read_manifest(directory / "manifest.txt")
    manifest = dict(manifest or {})
    known = KNOWN_DATASETS.get(manifest.get("dataset", "").upper())

    entity_names = relation_names = None
    if (directory / "entity2id.txt").exists():
        entity_names = read_id_map(directory / "entity2id.txt")
    if (directory / "relation2id.txt").exists():
        relation_names = read_id_map(directory / "relation2id.txt")

    n_ent = n_rel = None
    if (directory / "stat.txt").exists():
        parts = (directory / "stat.txt").read_text().split()
        n_ent, n_rel = int(parts[0]), int(parts[1])
    if "entities" in manifest:
        n_ent = int(manifest["entities"])
    if "relations" in manifest:
        n_rel = int(manifest["relations"])

    if granularity is None:
        granularity = int(manifest.get("granularity", known.granularity if known else 1))
    builder = TemporalKGBuilder(granularity=granularity, entity_count=n_ent, relation_count=n_rel,
                                entity_names=entity_names, relation_names=relation_names)
    for tag in SPLITS:
        path = directory / f"{tag}.txt"
        if path.exists():
            builder.add(path, tag)
    return builder.build()
