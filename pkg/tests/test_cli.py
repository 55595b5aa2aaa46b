import os

import numpy as np
import pytest

from tkgwalk import checkpoint as ck
from tkgwalk.bundle import read_bundle
from tkgwalk.cli import REPORT_COLUMNS, main, validate_ingest
from tkgwalk.evaluator import MetricReport
from tkgwalk.kg import TemporalKGBuilder
from tkgwalk.ranker import parse_traces

FAST = ["--dim", "8", "--hidden", "8", "--batch-size", "64", "--beam-width", "10"]


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for k in list(os.environ):
        if k.startswith("TKGW_"):
            monkeypatch.delenv(k)


def write_raw(d, train, test, manifest=None):
    d.mkdir(parents=True, exist_ok=True)
    (d / "train.txt").write_text("".join("\t".join(map(str, f)) + "\n" for f in train))
    (d / "test.txt").write_text("".join("\t".join(map(str, f)) + "\n" for f in test))
    if manifest:
        (d / "manifest.txt").write_text("".join(f"{k}={v}\n" for k, v in manifest.items()))


def toy_raw(d):
    train = [(i, 0, (i + 1) % 5, 24 * t) for t in range(2) for i in range(5)]
    test = [(0, 0, 1, 48), (5, 0, 1, 48)]
    write_raw(d, train, test, {"entities": 6, "granularity": 24})
    return d


@pytest.fixture(scope="module")
def unseen_bundle(tmp_path_factory):
    out = tmp_path_factory.mktemp("b") / "unseen"
    assert main(["ingest", "--synthetic", "unseen", "--out", str(out)]) == 0
    return out


def test_ingest_idempotent(tmp_path):
    raw = toy_raw(tmp_path / "raw")
    assert main(["ingest", "--data", str(raw), "--out", str(tmp_path / "a")]) == 0
    assert main(["ingest", "--data", str(raw), "--out", str(tmp_path / "b")]) == 0
    for name in ("train.txt", "valid.txt", "test.txt", "meta.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    store = read_bundle(tmp_path / "a")
    assert store.split_sizes == {"train": 10, "valid": 0, "test": 2}
    assert store.splits["test"][:, 3].tolist() == [2, 2] and not store.is_seen(5)


def test_ingest_manifest_mismatch(tmp_path, capsys):
    raw = tmp_path / "raw"
    write_raw(raw, [(0, 0, 1, 0)], [(1, 0, 0, 1)], {"entities": 7128})
    assert main(["ingest", "--data", str(raw), "--out", str(tmp_path / "o")]) == 1
    assert "entities" in capsys.readouterr().err


def test_ingest_missing_file_exit_2(tmp_path):
    assert main(["ingest", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o")]) == 2


def test_ingest_unknown_dataset(tmp_path):
    raw = toy_raw(tmp_path / "raw")
    assert main(["ingest", "--data", str(raw), "--out", str(tmp_path / "o"), "--dataset", "NOPE"]) == 2


def test_icews14_entity_count_check():
    store = (TemporalKGBuilder(entity_count=7128, relation_count=230)
             .add_facts([(0, 0, 7127, 0)]).build())
    assert validate_ingest(store, {"entities": "7128", "relations": "230"}) == []
    assert validate_ingest(store, {"entities": "7000"}) != []
    problems = validate_ingest(store, {}, "ICEWS14")
    assert not any(p.startswith("ICEWS14 entities") for p in problems)
    assert any("train" in p for p in problems)


def test_train_one_epoch_writes_one_checkpoint(tmp_path):
    raw = toy_raw(tmp_path / "raw")
    main(["ingest", "--data", str(raw), "--out", str(tmp_path / "b")])
    rc = main(["train", "--data", str(tmp_path / "b"), "--out", str(tmp_path / "r"), "--epochs", "1", *FAST])
    assert rc == 0
    assert sorted(p.name for p in (tmp_path / "r" / "checkpoints").iterdir()) == ["epoch-0001.ckpt"]
    assert len((tmp_path / "r" / "train.log.jsonl").read_text().splitlines()) == 1
    assert ck.load(tmp_path / "r" / "last.ckpt").epoch == 1


def test_resume_is_bitwise(tmp_path, unseen_bundle):
    args = ["--data", str(unseen_bundle), *FAST]
    assert main(["train", "--out", str(tmp_path / "straight"), "--epochs", "3", *args]) == 0
    assert main(["train", "--out", str(tmp_path / "split"), "--epochs", "2", *args]) == 0
    assert main(["train", "--out", str(tmp_path / "split"), "--epochs", "3", "--resume"]) == 0
    assert (tmp_path / "straight" / "last.ckpt").read_bytes() == (tmp_path / "split" / "last.ckpt").read_bytes()
    assert len((tmp_path / "split" / "train.log.jsonl").read_text().splitlines()) == 3
    # a different shape cannot resume from it
    assert main(["train", "--out", str(tmp_path / "split"), "--epochs", "4", "--dim", "4", "--resume"]) == 2


def test_eval_breakdown_matches_partition(tmp_path, unseen_bundle):
    run = tmp_path / "r"
    assert main(["train", "--data", str(unseen_bundle), "--out", str(run), "--epochs", "1", *FAST]) == 0
    assert main(["eval", "--data", str(unseen_bundle), "--run", str(run)]) == 0
    m = MetricReport.parse_text((run / "metrics.txt").read_text())
    store = read_bundle(unseen_bundle)
    test = store.splits["test"]
    train_ents = set(store.splits["train"][:, [0, 2]].ravel().tolist())
    unseen_queries = sum(s not in train_ents for s in test[:, 0]) + sum(o not in train_ents for o in test[:, 2])
    assert int(m["unseen.count"]) == unseen_queries
    assert int(m["seen.count"]) + int(m["unseen.count"]) == int(m["combined.count"]) == 2 * len(test)
    assert int(m["object.count"]) == int(m["subject.count"]) == len(test)
    assert int(m["partition.unseen_subject_quads"]) == 8
    assert m["variant"] == "full" and m["absent_rule"] == "optimistic-absent"


def test_eval_overfit_is_near_perfect(tmp_path):
    train = [(i, 0, (i + 1) % 4, t) for t in range(4) for i in range(4)]
    raw = tmp_path / "raw"
    write_raw(raw, train, [(i, 0, (i + 1) % 4, 3) for i in range(4)])
    main(["ingest", "--data", str(raw), "--out", str(tmp_path / "b")])
    run = tmp_path / "r"
    assert main(["train", "--data", str(tmp_path / "b"), "--out", str(run), "--epochs", "60", "--dim", "16",
                 "--hidden", "16", "--batch-size", "32", "--lr", "0.01"]) == 0
    # the test split repeats training facts at t=3; after overfitting it is answered exactly
    assert main(["eval", "--data", str(tmp_path / "b"), "--run", str(run), "--split", "test"]) == 0
    m = MetricReport.parse_text((run / "metrics.txt").read_text())
    assert float(m["combined.hits@1"]) >= 0.9


def test_explain_traces(tmp_path, unseen_bundle):
    run = tmp_path / "r"
    main(["train", "--data", str(unseen_bundle), "--out", str(run), "--epochs", "1", *FAST])
    out = tmp_path / "unseen.txt"
    assert main(["explain", "--data", str(unseen_bundle), "--run", str(run), "--unseen", "--limit", "3",
                 "--top-k", "1", "--out", str(out)]) == 0
    traces = parse_traces(out.read_text())
    assert len(traces) == 3
    assert all(t.hops[0].semantic or t.hops[0].relation == "self-loop" for t in traces)
    seen_out = tmp_path / "seen.txt"
    assert main(["explain", "--data", str(unseen_bundle), "--run", str(run), "--query", "0 0 50",
                 "--top-k", "2", "--out", str(seen_out)]) == 0
    for t in parse_traces(seen_out.read_text()):
        assert not t.hops[0].semantic


def test_report_merges_variants(tmp_path, unseen_bundle):
    variants = ["full", "policy1", "policy2", "no-tre", "no-gm", "no-semantic-edges"]
    runs = []
    for v in variants:
        run = tmp_path / v
        assert main(["train", "--data", str(unseen_bundle), "--out", str(run), "--epochs", "1", "--variant", v,
                     *FAST]) == 0
        assert main(["eval", "--data", str(unseen_bundle), "--run", str(run)]) == 0
        runs.append(str(run))
    assert main(["report", *runs, "--out", str(tmp_path / "rep")]) == 0
    lines = (tmp_path / "rep.csv").read_text().splitlines()
    assert lines[0] == ",".join(REPORT_COLUMNS)
    assert len(lines) == 7 and [ln.split(",")[2] for ln in lines[1:]] == variants
    assert "semantic_mode" in lines[0] and lines[6].split(",")[3] == "off"
    first = (tmp_path / "rep.csv").read_bytes()
    main(["report", *runs, "--out", str(tmp_path / "rep")])
    assert (tmp_path / "rep.csv").read_bytes() == first
    assert main(["report", *runs, str(tmp_path / "missing"), "--out", str(tmp_path / "rep2")]) == 1
    assert "absent=missing" in (tmp_path / "rep2.txt").read_text()


def test_usage_errors(tmp_path, unseen_bundle):
    assert main([]) == 2
    assert main(["train", "--data", str(unseen_bundle), "--out", str(tmp_path), "--set", "nope=1"]) == 2
    assert main(["train", "--data", str(unseen_bundle), "--out", str(tmp_path), "--batch-size", "x"]) == 2
    assert main(["eval", "--data", str(unseen_bundle), "--checkpoint", str(tmp_path / "none.ckpt")]) == 2
    assert main(["--help"]) == 0


def test_env_override_reaches_training(tmp_path, unseen_bundle, monkeypatch):
    monkeypatch.setenv("TKGW_EPOCHS", "1")
    run = tmp_path / "r"
    assert main(["train", "--data", str(unseen_bundle), "--out", str(run), *FAST]) == 0
    assert ck.load(run / "last.ckpt").epoch == 1
    assert "epochs=1" in (run / "config.txt").read_text().splitlines()
