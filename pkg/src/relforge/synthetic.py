"""Synthetic five-table shop database with user-level tasks.

Tables: ``regions`` and ``products`` (dimension), ``users`` (dimension,
links to regions), ``orders`` (fact, links to users) and ``order_items``
(fact, links to orders and products).  Task rows are (user, seed time)
pairs on a fixed cadence, split by seed time into train/validation/test.

Targets:

``"recent"``  1 if the user placed at least ``min_recent`` orders in the
              ``window_days`` before the seed time (visible only through
              nested orders).
``"churn"``   1 if the user places no order in the following window.
``"count"``   number of orders in the following window (regression).
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .relstore import IndexedStore, Timestamp, load_schema, store_from_schema
from .taskdef import TaskSpec, TaskSplit, load_task

DAY = 86_400
EPOCH0 = 1_420_070_400  # 2015-01-01T00:00:00Z

CATEGORIES = ("books", "garden", "games", "kitchen", "music", "sports", "toys")
REGION_NAMES = ("north", "south", "east", "west", "central", "coast", "hills", "valley")

SCHEMA = {
    "tables": [
        {"name": "regions", "file": "regions.csv", "columns": [
            {"name": "region_id", "dtype": "int", "primary_key": True},
            {"name": "name", "dtype": "text"},
        ]},
        {"name": "users", "file": "users.csv", "columns": [
            {"name": "user_id", "dtype": "int", "primary_key": True},
            {"name": "region_id", "dtype": "int", "foreign_key": {"table": "regions", "column": "region_id"}},
            {"name": "age", "dtype": "int"},
            {"name": "premium", "dtype": "bool"},
        ]},
        {"name": "products", "file": "products.csv", "columns": [
            {"name": "product_id", "dtype": "int", "primary_key": True},
            {"name": "category", "dtype": "text"},
            {"name": "price", "dtype": "float"},
        ]},
        {"name": "orders", "file": "orders.csv", "timestamp_column": "ordered_at", "columns": [
            {"name": "order_id", "dtype": "int", "primary_key": True},
            {"name": "user_id", "dtype": "int", "foreign_key": {"table": "users", "column": "user_id"}},
            {"name": "ordered_at", "dtype": "timestamp"},
            {"name": "total", "dtype": "float"},
        ]},
        {"name": "order_items", "file": "order_items.csv", "timestamp_column": "shipped_at", "columns": [
            {"name": "item_id", "dtype": "int", "primary_key": True},
            {"name": "order_id", "dtype": "int", "foreign_key": {"table": "orders", "column": "order_id"}},
            {"name": "product_id", "dtype": "int", "foreign_key": {"table": "products", "column": "product_id"}},
            {"name": "shipped_at", "dtype": "timestamp"},
            {"name": "quantity", "dtype": "int"},
        ]},
    ]
}


@dataclass
class SyntheticDataset:
    schema_manifest: dict[str, Any]
    tables: dict[str, str]
    task_manifest: dict[str, Any]
    splits: dict[str, str]

    def load(self) -> tuple[IndexedStore, TaskSpec, TaskSplit]:
        schema = load_schema(json.dumps(self.schema_manifest))
        store = store_from_schema(schema, self.tables)
        spec, split = load_task(json.dumps(self.task_manifest), store, csv_texts=self.splits)
        return store, spec, split

    def write(self, directory: str | Path) -> tuple[Path, Path]:
        """Write CSVs and manifests; returns (schema path, task path)."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for t in self.schema_manifest["tables"]:
            (d / t["file"]).write_text(self.tables[t["name"]], encoding="utf-8")
        schema_path = d / "schema.json"
        schema_path.write_text(json.dumps(self.schema_manifest, indent=2), encoding="utf-8")
        task = dict(self.task_manifest)
        task["database"] = "schema.json"
        task["splits"] = {}
        for name, text in self.splits.items():
            fname = f"{self.task_manifest['name']}_{name}.csv"
            (d / fname).write_text(text, encoding="utf-8")
            task["splits"][name] = fname
        task_path = d / f"{self.task_manifest['name']}.json"
        task_path.write_text(json.dumps(task, indent=2), encoding="utf-8")
        return schema_path, task_path


def _csv(header: list[str], rows: list[list[Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(["" if v is None else v for v in r])
    return buf.getvalue()


def _iso(ts: int) -> str:
    return Timestamp(ts).isoformat()


def make_dataset(
    seed: int = 0,
    n_users: int = 300,
    n_products: int = 150,
    n_orders: int = 3500,
    days: int = 730,
    target: str = "churn",
    window_days: int = 30,
    min_recent: int = 2,
    cadence_days: int = 14,
    users_per_seed: int = 60,
    val_days: int = 60,
    test_days: int = 60,
    dangling_rate: float = 0.0,
    null_rate: float = 0.0,
) -> SyntheticDataset:
    """Generate the database CSVs and one task over it."""
    rng = np.random.default_rng(seed)
    start, end = EPOCH0, EPOCH0 + days * DAY

    regions = [[i, REGION_NAMES[i % len(REGION_NAMES)]] for i in range(len(REGION_NAMES))]
    users = []
    for uid in range(n_users):
        region = int(rng.integers(len(regions)))
        if rng.random() < dangling_rate:
            region = 10_000 + uid
        users.append([uid, None if rng.random() < null_rate else region,
                      int(rng.integers(18, 80)), bool(rng.random() < 0.3)])
    products = [[pid, CATEGORIES[int(rng.integers(len(CATEGORIES)))], round(float(rng.gamma(2.0, 15.0)), 2)]
                for pid in range(n_products)]

    # heavy-tailed activity so some users order often and some rarely
    activity = rng.gamma(0.7, 1.0, size=n_users)
    owner = rng.choice(n_users, size=n_orders, p=activity / activity.sum())
    times = np.sort(rng.integers(start, end, size=n_orders))
    orders, items = [], []
    item_id = 0
    for oid in range(n_orders):
        uid = int(owner[oid])
        if rng.random() < dangling_rate:
            uid = 50_000 + oid
        n_items = int(rng.integers(1, 4))
        total = 0.0
        for _ in range(n_items):
            pid = int(rng.integers(n_products))
            qty = int(rng.integers(1, 5))
            total += qty * products[pid][2]
            shipped = int(times[oid]) + int(rng.integers(0, 5 * DAY))
            items.append([item_id, oid, pid, _iso(shipped), qty])
            item_id += 1
        orders.append([oid, uid, _iso(int(times[oid])), round(total, 2)])

    tables = {
        "regions": _csv(["region_id", "name"], regions),
        "users": _csv(["user_id", "region_id", "age", "premium"], [[u[0], u[1], u[2], str(u[3]).lower()] for u in users]),
        "products": _csv(["product_id", "category", "price"], products),
        "orders": _csv(["order_id", "user_id", "ordered_at", "total"], orders),
        "order_items": _csv(["item_id", "order_id", "product_id", "shipped_at", "quantity"], items),
    }

    per_user: dict[int, list[int]] = {}
    for oid in range(n_orders):
        per_user.setdefault(int(owner[oid]), []).append(int(times[oid]))
    for v in per_user.values():
        v.sort()

    def count(uid: int, lo: int, hi: int) -> int:
        ts = per_user.get(uid, [])
        return int(np.searchsorted(ts, hi, side="left") - np.searchsorted(ts, lo, side="left"))

    window = window_days * DAY
    first_seed = start + 90 * DAY
    val_start = end - window - (val_days + test_days) * DAY
    test_start = val_start + val_days * DAY
    split_rows: dict[str, list[list[Any]]] = {"train": [], "validation": [], "test": []}
    t = first_seed
    while t + window <= end:
        name = "train" if t < val_start else "validation" if t < test_start else "test"
        chosen = np.sort(rng.choice(n_users, size=min(users_per_seed, n_users), replace=False))
        for uid in chosen.tolist():
            if target == "recent":
                y: Any = int(count(uid, t - window, t) >= min_recent)
            elif target == "churn":
                y = int(count(uid, t, t + window) == 0)
            elif target == "count":
                y = count(uid, t, t + window)
            else:
                raise ValueError(f"unknown target {target!r}")
            split_rows[name].append([uid, _iso(t), y])
        t += cadence_days * DAY

    classification = target != "count"
    task_name = {"recent": "user-recent", "churn": "user-churn", "count": "user-orders"}[target]
    task_manifest = {
        "name": task_name,
        "db_description": "A synthetic online shop with users, regions, products, orders and order items.",
        "task_description": {
            "recent": f"Predict whether the user placed at least {min_recent} orders in the {window_days} days before the seed time.",
            "churn": f"Predict whether the user places no order in the next {window_days} days.",
            "count": f"Predict how many orders the user places in the next {window_days} days.",
        }[target],
        "task_type": "binary_classification" if classification else "regression",
        "metric": "auroc" if classification else "mae",
        "seed_time_column": "timestamp",
        "target_column": "target",
        "entity_fkeys": [{"column": "user_id", "table": "users", "pk_column": "user_id"}],
        "splits": {"train": "train.csv", "validation": "validation.csv", "test": "test.csv"},
    }
    splits = {k: _csv(["user_id", "timestamp", "target"], v) for k, v in split_rows.items()}
    return SyntheticDataset(json.loads(json.dumps(SCHEMA)), tables, task_manifest, splits)


def random_dataset(rng: np.random.Generator, target: str | None = None) -> SyntheticDataset:
    """Small randomized dataset for fuzzing: random sizes, nulls and dangling keys."""
    return make_dataset(
        seed=int(rng.integers(2**31)),
        n_users=int(rng.integers(5, 60)),
        n_products=int(rng.integers(3, 40)),
        n_orders=int(rng.integers(20, 400)),
        days=int(rng.integers(200, 500)),
        target=target or str(rng.choice(["recent", "churn", "count"])),
        cadence_days=int(rng.integers(5, 30)),
        users_per_seed=int(rng.integers(2, 20)),
        dangling_rate=float(rng.choice([0.0, 0.05])),
        null_rate=float(rng.choice([0.0, 0.05])),
    )
