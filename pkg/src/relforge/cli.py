"""Command line entry point: ``relforge <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any

import numpy as np

from .docforge import DocParams, DocumentBuilder, document_record, shrink_on_oversize
from .evalharness import (
    GridSpec,
    build_with_fallback,
    oracle_scorer,
    run_grid,
    sample_test,
    shared_in_context,
    task_metric,
)
from .inference import build_grid, classification_score, median_predict
from .metrics import auroc, mae
from .mlphead import HeadDataset, TrainConfig, init_head, predict, save_head, train
from .relstore import DataError, IndexedStore, SchemaError, load_store
from .scorer import ContextLengthExceeded, MockScorer, Scorer, ScorerConfig, ScorerError, make_scorer
from .taskdef import TaskSpec, TaskSplit, load_task_file, uniform_sample

logger = logging.getLogger("relforge")

STORE_SUMMARY = "store.json"


def default_seed() -> int:
    return int(os.environ.get("RELFORGE_SEED", "0"))


def _read_jsonl(path: str | Path) -> list[dict[str, Any]]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _write_jsonl(path: str | Path, records) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
            n += 1
    return n


def _schema_path(args, task_path: Path | None) -> Path:
    if getattr(args, "schema", None):
        return Path(args.schema)
    if getattr(args, "store", None):
        summary = json.loads((Path(args.store) / STORE_SUMMARY).read_text(encoding="utf-8"))
        return Path(summary["schema"])
    if task_path is not None:
        doc = json.loads(task_path.read_text(encoding="utf-8"))
        if "database" in doc:
            p = Path(doc["database"])
            return p if p.is_absolute() else task_path.parent / p
    raise SystemExit("no database given: use --schema, --store or a 'database' entry in the task manifest")


def _load(args) -> tuple[IndexedStore, TaskSpec, TaskSplit]:
    task_path = Path(args.task)
    store = load_store(_schema_path(args, task_path))
    spec, split = load_task_file(task_path, store)
    return store, spec, split


def _scorer(args, spec: TaskSpec | None = None, split: TaskSplit | None = None) -> Scorer:
    kind = args.scorer
    limit = getattr(args, "context_limit", None)
    if kind.startswith("http://") or kind.startswith("https://"):
        return make_scorer(ScorerConfig("http", endpoint=kind, context_limit=limit))
    if kind == "http":
        return make_scorer(ScorerConfig("http", context_limit=limit))
    cfg = ScorerConfig("mock", max_in_flight=1, context_limit=limit, seed=default_seed())
    if kind in ("mock:oracle", "mock:inverted"):
        if spec is None or split is None:
            raise SystemExit(f"--scorer {kind} needs --task")
        return oracle_scorer(spec, split, inverted=kind == "mock:inverted", config=cfg)
    if kind == "mock":
        return MockScorer(cfg)
    raise SystemExit(f"unknown scorer {kind!r}")


def cmd_ingest(args) -> int:
    schema_path = Path(args.schema).resolve()
    store = load_store(schema_path)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {
        "schema": str(schema_path),
        "tables": {name: {"rows": len(t.rows), "fact": t.spec.is_fact} for name, t in store.tables.items()},
        "links": [vars(l) for l in store.links],
        "dangling": {f"{l.fkey_table}.{l.fkey_column}": len(v) for l, v in store.dangling.items()},
    }
    (out / STORE_SUMMARY).write_text(json.dumps(summary, indent=2), encoding="utf-8")
    print(json.dumps(summary["tables"]))
    return 0


def cmd_build_docs(args) -> int:
    store, spec, split = _load(args)
    params = DocParams.parse(args.params, seed=args.seed)
    rows = split.get(args.split)
    if args.split == "test":
        rows = sample_test(rows, args.cap, args.seed)
    builder = DocumentBuilder(spec, split, store)
    shared = shared_in_context(spec, split, params.n_inc, args.seed)
    echo = args.split in ("train", "validation")
    n = _write_jsonl(args.out, (
        document_record(builder.build(r, params, shared), r.target if echo else None) for r in rows
    ))
    print(f"wrote {n} documents to {args.out}")
    return 0


def cmd_infer(args) -> int:
    spec = split = store = None
    if args.task:
        store, spec, split = _load(args)
    scorer = _scorer(args, spec, split)
    records = _read_jsonl(args.docs)
    classification = spec is None or spec.is_classification
    if classification:
        decide = lambda text: classification_score(scorer.next_token_distribution(text))
    else:
        grid = build_grid([r.target for r in split.train], args.max_candidates)
        decide = lambda text: median_predict(text, grid, scorer)
    builder = DocumentBuilder(spec, split, store) if spec is not None else None
    shared_cache: dict[tuple[int, int], list] = {}

    out, failures = [], 0
    for rec in records:
        shrinks: list = []
        try:
            pred = decide(rec["text"])
        except ContextLengthExceeded:
            if builder is None:
                logger.error("row %s: context overflow and no --task to rebuild from", rec["row_id"])
                failures += 1
                continue
            p = DocParams(**rec["params"])
            key = (p.n_inc, p.seed)
            if key not in shared_cache:
                shared_cache[key] = shared_in_context(spec, split, p.n_inc, p.seed)
            row = split.get(rec.get("split", "test"))[rec["row_id"]]
            # the stored text already failed at p, so resume from the first halving
            smaller = shrink_on_oversize(p)
            if smaller.key == p.key:
                failures += 1
                continue
            try:
                _, pred, shrinks = build_with_fallback(builder, row, smaller, shared_cache[key], lambda d: decide(d.text))
            except ContextLengthExceeded:
                failures += 1
                continue
            shrinks.insert(0, (row.row_id, (p.n_inc, p.n_rel), (smaller.n_inc, smaller.n_rel)))
            logger.info("row %s shrunk: %s", rec["row_id"], shrinks)
        entry = {"row_id": rec["row_id"], "split": rec.get("split", "test"), "pred": pred}
        if shrinks:
            entry["shrinks"] = [{"from": list(a), "to": list(b)} for _, a, b in shrinks]
        out.append(entry)
    _write_jsonl(args.out, out)
    print(f"wrote {len(out)} predictions to {args.out} ({failures} failures)")
    return 0 if failures == 0 else 1


def cmd_evaluate(args) -> int:
    preds = [p for p in _read_jsonl(args.preds) if p.get("split", args.split) == args.split]
    if args.task:
        _, spec, split = _load(args)
        truth = {r.row_id: r.target for r in split.get(args.split)}
        targets = [truth[p["row_id"]] for p in preds]
        metric_spec = spec
    else:
        targets = [p["target"] for p in preds]
        metric_spec = None
    values = [p["pred"] for p in preds]
    if metric_spec is None:
        metric = args.metric
        value = auroc(values, targets) if metric == "auroc" else mae(values, targets)
    else:
        metric = metric_spec.metric
        value = task_metric(metric_spec, values, targets)
    print(json.dumps({"split": args.split, "metric": metric, "value": value, "n": len(values)}))
    return 0


def cmd_train_head(args) -> int:
    store, spec, split = _load(args)
    scorer = _scorer(args, spec, split)
    params = DocParams.parse(args.params, seed=args.seed)
    cfg = TrainConfig(lr0=args.lr, seed=args.seed, epochs=args.epochs, batch_size=args.batch_size)
    builder = DocumentBuilder(spec, split, store)
    shared = shared_in_context(spec, split, params.n_inc, args.seed)
    embed = lambda d: scorer.embed_last_token(d.text).values

    def embed_rows(rows):
        xs, ys, ids = [], [], []
        for r in rows:
            _, x, _ = build_with_fallback(builder, r, params, shared, embed)
            xs.append(x), ys.append(r.target), ids.append(r.row_id)
        return xs, ys, ids

    train_rows = uniform_sample(split.train, min(args.n_train, cfg.max_train), float("inf"), args.seed)
    X, y, _ = embed_rows(train_rows)
    vX, vy, _ = embed_rows(sample_test(split.validation, cfg.max_val, args.seed))
    mode = "logit" if spec.is_classification else "linear"
    data = HeadDataset(X, y)
    head = init_head(data.inputs.shape[1], 10, mode, args.seed)
    head, hist = train(head, data, cfg, HeadDataset(vX, vy) if vX else None)
    save_head(head, args.out)
    print(f"best epoch {hist.best_epoch}, validation metric "
          f"{hist.val_metric[hist.best_epoch] if hist.val_metric else None}; saved {args.out}")
    if args.preds:
        tX, _, tids = embed_rows(sample_test(split.test, args.cap, args.seed))
        scores = predict(head, np.stack(tX)).tolist() if tX else []
        _write_jsonl(args.preds, ({"row_id": i, "split": "test", "pred": s} for i, s in zip(tids, scores)))
    return 0


def cmd_grid(args) -> int:
    store, spec, split = _load(args)
    scorer = _scorer(args, spec, split)
    grid = GridSpec.parse(args.grid)
    mode = args.mode.replace("-", "_")

    def show(res):
        logger.info("%s val=%s test=%s", res.params.label(), res.validation_metric, res.test_metric)

    report = run_grid(spec, split, store, grid, scorer, mode, seeds=[args.seed], test_cap=args.cap,
                      n_train=args.n_train, progress=show)
    Path(args.report).write_text(report.dumps(), encoding="utf-8")
    sel = report.selected.label() if report.selected else None
    print(json.dumps({"selected": sel, "selected_test_metric": report.selected_test_metric}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="relforge", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def task_opts(p, required=True):
        p.add_argument("--task", required=required, help="task manifest (JSON)")
        p.add_argument("--schema", help="schema manifest; defaults to the task's 'database' entry")
        p.add_argument("--store", help="directory written by 'relforge ingest'")
        p.add_argument("--seed", type=int, default=default_seed())

    def scorer_opts(p):
        p.add_argument("--scorer", default=os.environ.get("RELFORGE_SCORER_URL", "mock"),
                       help="URL of a scoring server, 'http' (use $RELFORGE_SCORER_URL), 'mock', "
                            "'mock:oracle' or 'mock:inverted'")
        p.add_argument("--context-limit", type=int, default=None)

    p = sub.add_parser("ingest", help="validate and index a database")
    p.add_argument("--schema", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("build-docs", help="write one document per task row as JSONL")
    task_opts(p)
    p.add_argument("--params", default="")
    p.add_argument("--split", default="test", choices=("train", "validation", "test"))
    p.add_argument("--cap", type=int, default=10_000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_docs)

    p = sub.add_parser("infer", help="metric-aware predictions for a JSONL of documents")
    task_opts(p, required=False)
    scorer_opts(p)
    p.add_argument("--docs", required=True)
    p.add_argument("--mode", default="metric-aware", choices=("metric-aware",))
    p.add_argument("--max-candidates", type=int, default=128)
    p.add_argument("--out", default="preds.jsonl")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("train-head", help="train an MLP head on document embeddings")
    task_opts(p)
    scorer_opts(p)
    p.add_argument("--params", default="")
    p.add_argument("--n-train", type=int, default=10_000)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-4, help="initial learning rate, decayed linearly to 0")
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--cap", type=int, default=10_000)
    p.add_argument("--out", default="head.json")
    p.add_argument("--preds", help="also write test predictions here")
    p.set_defaults(func=cmd_train_head)

    p = sub.add_parser("evaluate", help="score predictions against targets")
    task_opts(p, required=False)
    p.add_argument("--preds", required=True)
    p.add_argument("--split", default="test", choices=("validation", "test"))
    p.add_argument("--metric", default="auroc", choices=("auroc", "mae"),
                   help="used only without --task, with targets inside the predictions file")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("grid", help="sweep document parameters and select by validation")
    task_opts(p)
    scorer_opts(p)
    p.add_argument("--grid", default="default")
    p.add_argument("--mode", default="metric-aware", choices=("metric-aware", "mlp-head"))
    p.add_argument("--cap", type=int, default=10_000)
    p.add_argument("--n-train", type=int, default=10_000)
    p.add_argument("--report", default="report.json")
    p.set_defaults(func=cmd_grid)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (SchemaError, DataError, ScorerError, OSError) as exc:
        print(f"relforge {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
