"""Batch command line: ``ingest``, ``train``, ``eval``, ``explain``, ``report``.

Exit codes: 0 success, 1 runtime failure (bad data, non-finite values,
missing runs in a report), 2 usage or configuration error (bad flags or
config keys, missing input files, incompatible checkpoint).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint as ckpt_io
from . import synthetic
from .bundle import read_bundle, read_meta, write_bundle
from .config import RunConfig, build_config
from .env import Environment, SemanticMode
from .errors import CheckpointError, ConfigError, TKGError
from .evaluator import AbsentRule, MetricReport, evaluate, random_ranking_mrr, store_filter, test_queries
from .kg import KNOWN_DATASETS, SPLITS, Query, TemporalKG, load_dataset, read_manifest
from .policy import PolicyNetwork, PolicyParams
from .ranker import explain, rank
from .trainer import Trainer

log = logging.getLogger("tkgwalk")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

CHECKPOINT_DIR = "checkpoints"
LAST_CHECKPOINT = "last.ckpt"
CONFIG_FILE = "config.txt"
LOG_FILE = "train.log.jsonl"
METRICS_FILE = "metrics.txt"
TRACE_FILE = "traces.txt"

REPORT_COLUMNS = ("run", "status", "variant", "semantic_mode", "epoch", "mrr", "hits@1", "hits@3", "hits@10",
                  "object.mrr", "subject.mrr", "seen.mrr", "seen.count", "unseen.mrr", "unseen.hits@1",
                  "unseen.count", "count")


class UsageError(TKGError):
    pass


# ------------------------------------------------------------------ helpers


def _seeds(seed: int) -> tuple[np.random.SeedSequence, np.random.SeedSequence]:
    init, train = np.random.SeedSequence(seed).spawn(2)
    return init, train


def build_policy(store: TemporalKG, cfg: RunConfig) -> PolicyNetwork:
    rng = np.random.default_rng(_seeds(cfg.seed)[0])
    params = PolicyParams.init(store.entity_count, store.relation_count, cfg.dim, cfg.hidden, rng)
    return PolicyNetwork(params, cfg.policy_config(), store.self_loop)


def build_trainer(store: TemporalKG, cfg: RunConfig, dataset: str = "") -> Trainer:
    policy = build_policy(store, cfg)
    tc = cfg.train_config(dataset)
    env = Environment(store, tc.max_actions, cfg.resolved_semantic_mode, tc.horizon)
    return Trainer(store, policy, env, tc, np.random.default_rng(_seeds(cfg.seed)[1]))


def _load_store(path) -> tuple[TemporalKG, dict[str, str]]:
    path = Path(path)
    if not (path / "meta.txt").exists():
        raise FileNotFoundError(f"no store bundle at {path} (run ingest first)")
    return read_bundle(path), read_meta(path)


def _policy_from_checkpoint(store: TemporalKG, ck: ckpt_io.Checkpoint) -> tuple[PolicyNetwork, RunConfig]:
    cfg = build_config(ck.meta.get("config", {}))
    if ck.params.entity_count != store.entity_count or ck.params.relation_count != store.relation_count:
        raise CheckpointError("checkpoint vocabulary does not match the store")
    return PolicyNetwork(ck.params, cfg.policy_config(), store.self_loop), cfg


def _resolve_checkpoint(args) -> Path:
    if getattr(args, "checkpoint", None):
        return Path(args.checkpoint)
    if getattr(args, "run", None):
        return Path(args.run) / LAST_CHECKPOINT
    raise UsageError("give --checkpoint or --run")


def validate_ingest(store: TemporalKG, manifest: dict[str, str], dataset: str = "") -> list[str]:
    """Compare a freshly loaded store against manifest counts and published statistics."""
    problems = []
    observed = {
        "entities": store.entity_count,
        "relations": store.base_relation_count,
        "timestamps": store.timestamp_count(),
        **{tag: store.split_sizes.get(tag, 0) for tag in SPLITS},
    }
    for key, got in observed.items():
        if key in manifest and int(manifest[key]) != got:
            problems.append(f"manifest {key}: expected {manifest[key]}, got {got}")
    if dataset:
        known = KNOWN_DATASETS.get(dataset.upper())
        if known is None:
            raise UsageError(f"unknown dataset {dataset!r}; known: {sorted(KNOWN_DATASETS)}")
        problems += [f"{dataset.upper()} {p}" for p in store.check_stats(known)]
    return problems


# ------------------------------------------------------------------ commands


def cmd_ingest(args) -> int:
    out = Path(args.out)
    if args.synthetic:
        makers = {"cyclic": synthetic.cyclic_kg, "unseen": synthetic.unseen_kg}
        store = makers[args.synthetic]()
        write_bundle(store, out, args.dataset or "")
        print(f"wrote synthetic {args.synthetic} store to {out}")
        return EXIT_OK
    if not args.data:
        raise UsageError("ingest needs --data or --synthetic")
    src = Path(args.data)
    if not (src / "train.txt").exists():
        raise FileNotFoundError(str(src / "train.txt"))
    manifest = {}
    if args.manifest:
        manifest = read_manifest(args.manifest)
    elif (src / "manifest.txt").exists():
        manifest = read_manifest(src / "manifest.txt")
    dataset = args.dataset or manifest.get("dataset", "")
    known = KNOWN_DATASETS.get(dataset.upper())
    granularity = args.granularity or int(manifest.get("granularity", known.granularity if known else 1))
    # counts come from the data itself so the manifest can be checked against them
    store = load_dataset(src, granularity, manifest={})
    problems = validate_ingest(store, manifest, dataset)
    if problems:
        for p in problems:
            print(f"mismatch: {p}", file=sys.stderr)
        return EXIT_FAILURE
    write_bundle(store, out, dataset)
    print(f"ingested {store.split_sizes} from {src} into {out}")
    return EXIT_OK


def _config_for(args, base_file=None) -> RunConfig:
    cli = {}
    for f in fields(RunConfig):
        value = getattr(args, f"opt_{f.name}", None)
        if value is not None:
            cli[f.name] = value
    for pair in args.set or ():
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        cli[key.strip()] = value
    path = args.config or base_file
    return build_config(cli, os.environ, path)


def cmd_train(args) -> int:
    out_hint = args.opt_out or ""
    resume = args.resume
    base_file = None
    if resume is not None and out_hint and (Path(out_hint) / CONFIG_FILE).exists():
        base_file = Path(out_hint) / CONFIG_FILE
    cfg = _config_for(args, base_file)
    if not cfg.data:
        raise UsageError("train needs a store bundle (--data)")
    if not cfg.out:
        raise UsageError("train needs an output directory (--out)")
    store, meta = _load_store(cfg.data)
    dataset = meta.get("dataset", "")
    out = Path(cfg.out)
    (out / CHECKPOINT_DIR).mkdir(parents=True, exist_ok=True)
    trainer = build_trainer(store, cfg, dataset)
    if resume is not None:
        path = Path(resume) if resume else out / LAST_CHECKPOINT
        ckpt_io.restore(trainer, ckpt_io.load(path))
        print(f"resumed from {path} at epoch {trainer.epoch}")
    (out / CONFIG_FILE).write_text(cfg.to_text(), encoding="utf-8")
    # the output directory does not affect training, so identical runs give identical bytes
    stored = {k: v for k, v in dataclasses.asdict(cfg).items() if k != "out"}
    run_meta = {"config": stored,
                "dataset": dataset, "semantic_mode": cfg.resolved_semantic_mode,
                "max_actions": trainer.config.max_actions}

    def save(tr: Trainer, stats):
        snap = ckpt_io.capture(tr, run_meta)
        ckpt_io.save(out / CHECKPOINT_DIR / f"epoch-{tr.epoch:04d}.ckpt", snap)
        ckpt_io.save(out / LAST_CHECKPOINT, snap)
        print(f"epoch {stats.epoch}: reward={stats.mean_reward:.4f} loss={stats.mean_loss:.4f} "
              + " ".join(f"{k}={v:.4f}" for k, v in stats.metrics.items()))
        return False

    trainer.train([save], log_path=out / LOG_FILE)
    if trainer.epoch == 0 or not (out / LAST_CHECKPOINT).exists():
        ckpt_io.save(out / LAST_CHECKPOINT, ckpt_io.capture(trainer, run_meta))
    return EXIT_OK


def cmd_eval(args) -> int:
    store, _ = _load_store(args.data)
    path = _resolve_checkpoint(args)
    ck = ckpt_io.load(path)
    policy, cfg = _policy_from_checkpoint(store, ck)
    overrides = {k: v for k, v in (("beam_width", args.beam_width), ("aggregate", args.aggregate),
                                   ("absent_rule", args.absent_rule), ("semantic_mode", args.semantic_mode))
                 if v is not None}
    cfg = cfg.replace(**overrides)
    tc = cfg.train_config(ck.meta.get("dataset", ""))
    env = Environment(store, tc.max_actions, cfg.resolved_semantic_mode, tc.horizon)
    facts = store.splits.get(args.split)
    if facts is None or len(facts) == 0:
        raise UsageError(f"split {args.split!r} is empty or missing")
    queries = test_queries(facts.tolist(), store)
    filt = store_filter(store)
    report = evaluate(lambda q: rank(q, env, policy, cfg.beam_width, cfg.aggregate), queries, store, filt,
                      AbsentRule(cfg.absent_rule))
    report.extra.update({
        "split": args.split, "variant": cfg.variant, "semantic_mode": cfg.resolved_semantic_mode,
        "epoch": str(ck.epoch), "beam_width": str(cfg.beam_width), "aggregate": cfg.aggregate,
        "random_mrr": repr(random_ranking_mrr(queries, filt, store.entity_count)),
    })
    for key, value in store.unseen_statistics(args.split).items():
        report.extra[f"partition.{key}"] = str(value)
    out = Path(args.out) if args.out else (Path(args.run) if args.run else path.parent) / METRICS_FILE
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_text(), encoding="utf-8")
    sec = report.sections()
    print(f"{args.split}: mrr={sec['combined']['mrr']:.4f} hits@1={sec['combined']['hits@1']:.4f} "
          f"seen={sec['seen']['mrr']:.4f} unseen={sec['unseen']['mrr']:.4f} -> {out}")
    return EXIT_OK


def _parse_query(text: str, store: TemporalKG) -> Query:
    parts = [p.strip() for p in text.replace(",", " ").split()]
    if len(parts) != 3:
        raise UsageError(f"--query expects 'subject relation time', got {text!r}")

    def lookup(token, names, kind):
        if token.lstrip("-").isdigit():
            return int(token)
        if names and token in names:
            return names.index(token)
        raise UsageError(f"unknown {kind} {token!r}")

    return Query(lookup(parts[0], store.entity_names, "entity"),
                 lookup(parts[1], store.relation_names, "relation"), int(parts[2]))


def cmd_explain(args) -> int:
    store, _ = _load_store(args.data)
    path = _resolve_checkpoint(args)
    ck = ckpt_io.load(path)
    policy, cfg = _policy_from_checkpoint(store, ck)
    if args.semantic_mode:
        cfg = cfg.replace(semantic_mode=args.semantic_mode)
    tc = cfg.train_config(ck.meta.get("dataset", ""))
    env = Environment(store, tc.max_actions, cfg.resolved_semantic_mode, tc.horizon)
    if args.query:
        queries = [_parse_query(q, store) for q in args.query]
    else:
        queries = test_queries(store.splits.get(args.split, np.zeros((0, 4), np.int64)).tolist(), store)
        if args.unseen:
            queries = [q for q in queries if not store.is_seen(q.subject)]
        queries = queries[: args.limit]
    blocks = []
    for q in queries:
        traces = explain(q, env, policy, beam_width=args.beam_width or cfg.beam_width, top_k=args.top_k)
        blocks.extend(t.format() for t in traces)
    out = Path(args.out) if args.out else (Path(args.run) if args.run else path.parent) / TRACE_FILE
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n\n".join(blocks) + ("\n" if blocks else ""), encoding="utf-8")
    print(f"wrote {len(blocks)} traces for {len(queries)} queries to {out}")
    return EXIT_OK


def collect_row(run: Path) -> dict[str, str]:
    row = {c: "" for c in REPORT_COLUMNS}
    row["run"] = run.name or str(run)
    metrics = run / METRICS_FILE
    if not metrics.exists():
        row["status"] = "absent"
        return row
    m = MetricReport.parse_text(metrics.read_text(encoding="utf-8"))
    row["status"] = "ok"
    for col in REPORT_COLUMNS[2:]:
        key = col if col in m else f"combined.{col}"
        row[col] = m.get(key, "")
    return row


def render_report(rows: Sequence[dict[str, str]]) -> tuple[str, str]:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for row in rows:
        w.writerow([row[c] for c in REPORT_COLUMNS])
    lines = [f"columns={','.join(REPORT_COLUMNS)}", f"rows={len(rows)}"]
    absent = [r["run"] for r in rows if r["status"] == "absent"]
    lines.append(f"absent={','.join(absent)}")
    for i, row in enumerate(rows):
        lines += [f"row{i}.{c}={row[c]}" for c in REPORT_COLUMNS]
    return buf.getvalue(), "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    rows = [collect_row(Path(r)) for r in args.runs]
    csv_text, kv_text = render_report(rows)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.with_suffix(".csv").write_text(csv_text, encoding="utf-8")
    out.with_suffix(".txt").write_text(kv_text, encoding="utf-8")
    sys.stdout.write(csv_text)
    absent = [r["run"] for r in rows if r["status"] == "absent"]
    if absent:
        print(f"absent runs: {', '.join(absent)}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


# ------------------------------------------------------------------ parser


def _add_run_options(p: argparse.ArgumentParser):
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        p.add_argument(flag, dest=f"opt_{f.name}", default=None, metavar=f.name.upper(),
                       help=f"default: {f.default!r}")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tkgw", description="Temporal knowledge graph path-walk agent")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse and validate a dataset into a store bundle")
    p.add_argument("--data", help="directory with train/valid/test.txt")
    p.add_argument("--synthetic", choices=("cyclic", "unseen"), help="generate a toy store instead")
    p.add_argument("--out", required=True)
    p.add_argument("--dataset", help="published statistics to validate against, e.g. ICEWS14")
    p.add_argument("--manifest")
    p.add_argument("--granularity", type=int, default=None)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train a policy; writes checkpoints and a log")
    _add_run_options(p)
    p.add_argument("--resume", nargs="?", const="", default=None, metavar="CHECKPOINT",
                   help="continue from CHECKPOINT (default: <out>/last.ckpt)")
    p.set_defaults(func=cmd_train)

    for name, func, help_ in (("eval", cmd_eval, "filtered MRR/Hits with seen/unseen breakdown"),
                              ("explain", cmd_explain, "write reasoning path traces")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--data", required=True, help="store bundle")
        p.add_argument("--run", help="run directory (uses its last checkpoint)")
        p.add_argument("--checkpoint")
        p.add_argument("--split", default="test")
        p.add_argument("--out")
        p.add_argument("--beam-width", type=int, default=None)
        p.add_argument("--semantic-mode", choices=[m.value for m in SemanticMode], default=None)
        if name == "eval":
            p.add_argument("--aggregate", choices=("sum", "max"), default=None)
            p.add_argument("--absent-rule", choices=[r.value for r in AbsentRule], default=None)
        else:
            p.add_argument("--query", action="append", help="'subject relation time', ids or labels")
            p.add_argument("--unseen", action="store_true", help="only queries with unseen subjects")
            p.add_argument("--limit", type=int, default=10)
            p.add_argument("--top-k", type=int, default=3)
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="merge run metrics into comparison tables")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", required=True, help="output path prefix; writes .csv and .txt")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TKGError, FloatingPointError, ValueError, OSError) as exc:
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
