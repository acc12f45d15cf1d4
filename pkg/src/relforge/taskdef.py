"""Prediction tasks over a relational store and sampling over train rows."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .relstore import (
    DataError,
    ForeignKeyError,
    IndexedStore,
    Link,
    SchemaError,
    Timestamp,
    parse_cell,
    parse_timestamp,
)

logger = logging.getLogger(__name__)

TASK_TYPES = {"binary_classification": "auroc", "regression": "mae"}


@dataclass(frozen=True)
class TaskSpec:
    name: str
    db_description: str
    task_description: str
    task_type: str
    entity_fkeys: tuple[tuple[str, Link], ...]
    seed_time_column: str
    target_column: str
    metric: str

    def __post_init__(self):
        if self.task_type not in TASK_TYPES:
            raise SchemaError(f"unknown task_type {self.task_type!r}")
        if TASK_TYPES[self.task_type] != self.metric:
            raise SchemaError(f"task_type {self.task_type} requires metric {TASK_TYPES[self.task_type]}")
        if not self.entity_fkeys:
            raise SchemaError("a task needs at least one entity foreign key")

    @property
    def is_classification(self) -> bool:
        return self.task_type == "binary_classification"

    @property
    def fkey_columns(self) -> tuple[str, ...]:
        return tuple(c for c, _ in self.entity_fkeys)


@dataclass(frozen=True)
class TaskRow:
    row_id: int
    fkey_values: Mapping[str, Any]
    seed_time: Timestamp
    target: Any = None
    split: str = "train"

    @property
    def entity_key(self) -> tuple:
        return tuple(self.fkey_values.values())


@dataclass(frozen=True)
class TaskSplit:
    train: tuple[TaskRow, ...] = ()
    validation: tuple[TaskRow, ...] = ()
    test: tuple[TaskRow, ...] = ()
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def get(self, name: str) -> tuple[TaskRow, ...]:
        if name not in ("train", "validation", "test"):
            raise KeyError(name)
        return getattr(self, name)


def parse_target(cell: str, task_type: str) -> Any:
    if cell == "":
        return None
    value = float(cell)
    if task_type == "binary_classification":
        if value not in (0.0, 1.0):
            raise DataError(f"classification target must be 0 or 1, got {cell!r}")
        return int(value)
    return value


def parse_task_csv(spec: TaskSpec, split: str, csv_text: str, fk_dtypes: Mapping[str, str]) -> tuple[TaskRow, ...]:
    reader = csv.DictReader(io.StringIO(csv_text, newline=""))
    need = [*spec.fkey_columns, spec.seed_time_column]
    missing = [c for c in need if c not in (reader.fieldnames or [])]
    if missing:
        raise DataError(f"{spec.name}/{split}: missing columns {missing}")
    has_target = spec.target_column in (reader.fieldnames or [])
    rows = []
    for line_no, rec in enumerate(reader, start=2):
        try:
            fk = {c: parse_cell(rec[c], fk_dtypes[c]) for c in spec.fkey_columns}
            seed = parse_timestamp(rec[spec.seed_time_column])
            target = parse_target(rec[spec.target_column], spec.task_type) if has_target else None
        except ValueError as exc:
            raise DataError(f"{spec.name}/{split}: line {line_no}: {exc}") from exc
        if target is None and split != "test":
            raise DataError(f"{spec.name}/{split}: line {line_no} has no target")
        rows.append(TaskRow(len(rows), fk, seed, target, split))
    return tuple(rows)


def check_split_order(split: TaskSplit) -> list[str]:
    """Report violations of train <= validation <= test seed-time ordering."""
    out = []
    if not split.validation:
        out.append("validation split is empty")
    tr = max((r.seed_time for r in split.train), default=None)
    va = min((r.seed_time for r in split.validation), default=None)
    te = min((r.seed_time for r in split.test), default=None)
    if tr is not None and va is not None and tr > va:
        out.append(f"train seed times extend past validation start ({tr} > {va})")
    if va is not None and te is not None and va > te:
        out.append(f"validation starts after test ({va} > {te})")
    if va is None and tr is not None and te is not None and tr > te:
        out.append(f"train seed times extend past test start ({tr} > {te})")
    return out


def task_spec_from_manifest(doc: Mapping[str, Any], store: IndexedStore) -> TaskSpec:
    fkeys = []
    for ent in doc["entity_fkeys"]:
        table, pk_col = ent["table"], ent["pk_column"]
        if table not in store.tables:
            raise ForeignKeyError(f"task entity table {table!r} not in store")
        if store.spec(table).primary_key != pk_col:
            raise ForeignKeyError(f"{table}.{pk_col} is not a primary key")
        fkeys.append((ent["column"], Link(doc["name"], ent["column"], table, pk_col)))
    return TaskSpec(
        name=doc["name"],
        db_description=doc.get("db_description", ""),
        task_description=doc.get("task_description", ""),
        task_type=doc["task_type"],
        entity_fkeys=tuple(fkeys),
        seed_time_column=doc["seed_time_column"],
        target_column=doc["target_column"],
        metric=doc["metric"],
    )


def load_task(
    manifest_text: str,
    store: IndexedStore,
    base_dir: str | Path | None = None,
    csv_texts: Mapping[str, str] | None = None,
) -> tuple[TaskSpec, TaskSplit]:
    """Load a task manifest and its three split CSVs.

    ``csv_texts`` maps split name to CSV content and bypasses the paths in
    the manifest; it exists mostly for tests.
    """
    try:
        doc = json.loads(manifest_text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"task manifest is not valid JSON: {exc}") from exc
    try:
        spec = task_spec_from_manifest(doc, store)
    except KeyError as exc:
        raise SchemaError(f"task manifest missing field {exc}") from exc

    fk_dtypes = {c: store.spec(l.pkey_table).column(l.pkey_column).dtype for c, l in spec.entity_fkeys}
    base = Path(base_dir) if base_dir is not None else Path(".")
    parts = {}
    for name in ("train", "validation", "test"):
        if csv_texts is not None and name in csv_texts:
            text = csv_texts[name]
        else:
            path = Path(doc["splits"][name])
            text = (path if path.is_absolute() else base / path).read_text(encoding="utf-8")
        parts[name] = parse_task_csv(spec, name, text, fk_dtypes)

    split = TaskSplit(**parts)
    problems = check_split_order(split)
    for msg in problems:
        logger.warning("%s: %s", spec.name, msg)
    return spec, TaskSplit(**parts, warnings=tuple(problems))


def load_task_file(path: str | Path, store: IndexedStore) -> tuple[TaskSpec, TaskSplit]:
    path = Path(path)
    return load_task(path.read_text(encoding="utf-8"), store, base_dir=path.parent)


def rng_for(seed: int) -> np.random.Generator:
    return np.random.default_rng(int(seed) & 0xFFFF_FFFF_FFFF_FFFF)


def stratified_sample(train: Sequence[TaskRow], n: int, before: int, seed: int) -> list[TaskRow]:
    """Class-balanced sample of rows with ``seed_time < before``.

    Positives get the extra slot when ``n`` is odd; a short class is topped
    up from the other one.  Output alternates positive, negative.
    """
    eligible = [r for r in train if r.seed_time < before]
    n = min(max(n, 0), len(eligible))
    if n == 0:
        return []
    pos = [r for r in eligible if r.target == 1]
    neg = [r for r in eligible if r.target != 1]
    n_pos = min((n + 1) // 2, len(pos))
    n_neg = min(n - n_pos, len(neg))
    n_pos = n - n_neg

    rng = rng_for(seed)
    pos_pick = [pos[i] for i in rng.permutation(len(pos))[:n_pos]]
    neg_pick = [neg[i] for i in rng.permutation(len(neg))[:n_neg]]
    out = []
    for i in range(max(n_pos, n_neg)):
        if i < n_pos:
            out.append(pos_pick[i])
        if i < n_neg:
            out.append(neg_pick[i])
    return out


def uniform_sample(rows: Sequence[TaskRow], n: int, before: int, seed: int) -> list[TaskRow]:
    """Uniform sample without replacement among rows with ``seed_time < before``."""
    eligible = [r for r in rows if r.seed_time < before]
    n = min(max(n, 0), len(eligible))
    if n == 0:
        return []
    idx = rng_for(seed).choice(len(eligible), size=n, replace=False)
    return [eligible[i] for i in idx]


def sample_in_context(spec: TaskSpec, train: Sequence[TaskRow], n: int, before: int, seed: int) -> list[TaskRow]:
    if spec.is_classification:
        return stratified_sample(train, n, before, seed)
    return uniform_sample(train, n, before, seed)
