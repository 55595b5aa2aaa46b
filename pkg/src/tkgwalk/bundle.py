"""Normalised on-disk store: the output of ``ingest``, the input of every later command.

A bundle directory holds ``train.txt``/``valid.txt``/``test.txt`` with
rebased, granularity-divided times, optional ``entity2id.txt`` and
``relation2id.txt``, and ``meta.txt`` with counts. Writing the same store
twice yields the same bytes.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .kg import SPLITS, TemporalKG, TemporalKGBuilder, read_id_map, read_manifest

META_FILE = "meta.txt"


def write_bundle(store: TemporalKG, directory, dataset: str = "") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for tag in SPLITS:
        facts = store.splits.get(tag, np.zeros((0, 4), dtype=np.int64))
        text = "".join(f"{s}\t{r}\t{o}\t{t}\n" for s, r, o, t in facts.tolist())
        (directory / f"{tag}.txt").write_text(text, encoding="utf-8")
    for fname, names in (("entity2id.txt", store.entity_names), ("relation2id.txt", store.relation_names)):
        if names is not None:
            (directory / fname).write_text("".join(f"{n}\t{i}\n" for i, n in enumerate(names)), encoding="utf-8")
    meta = {
        "dataset": dataset,
        "entities": store.entity_count,
        "relations": store.base_relation_count,
        "granularity": store.granularity,
        "time_offset": store.time_offset,
        "timestamps": store.timestamp_count(),
    }
    for tag in SPLITS:
        meta[f"{tag}_facts"] = len(store.splits.get(tag, ()))
    if len(store.splits.get("test", ())):
        for key, value in store.unseen_statistics("test").items():
            meta[f"test_{key}"] = value
    (directory / META_FILE).write_text("".join(f"{k}={v}\n" for k, v in meta.items()), encoding="utf-8")
    return directory


def read_meta(directory) -> dict[str, str]:
    path = Path(directory) / META_FILE
    if not path.exists():
        raise FileNotFoundError(str(path))
    return read_manifest(path)


def read_bundle(directory) -> TemporalKG:
    directory = Path(directory)
    meta = read_meta(directory)
    names = {}
    for fname in ("entity2id.txt", "relation2id.txt"):
        if (directory / fname).exists():
            names[fname] = read_id_map(directory / fname)
    builder = TemporalKGBuilder(granularity=1, entity_count=int(meta["entities"]),
                                relation_count=int(meta["relations"]),
                                entity_names=names.get("entity2id.txt"),
                                relation_names=names.get("relation2id.txt"), rebase=False)
    for tag in SPLITS:
        path = directory / f"{tag}.txt"
        if path.exists():
            builder.add(path, tag)
    store = builder.build()
    store.granularity = int(meta.get("granularity", 1))
    store.time_offset = int(meta.get("time_offset", 0))
    return store
