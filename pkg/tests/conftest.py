import json

import pytest

from relforge.relstore import load_schema, store_from_schema
from relforge.synthetic import make_dataset

DAY = 86_400

TINY_SCHEMA = {
    "tables": [
        {"name": "users", "columns": [
            {"name": "user_id", "dtype": "int", "primary_key": True},
            {"name": "name", "dtype": "text"},
        ]},
        {"name": "orders", "timestamp_column": "ts", "columns": [
            {"name": "order_id", "dtype": "int", "primary_key": True},
            {"name": "user_id", "dtype": "int", "foreign_key": {"table": "users", "column": "user_id"}},
            {"name": "ts", "dtype": "timestamp"},
            {"name": "amount", "dtype": "float"},
        ]},
        {"name": "items", "timestamp_column": "ts", "columns": [
            {"name": "item_id", "dtype": "int", "primary_key": True},
            {"name": "order_id", "dtype": "int", "foreign_key": {"table": "orders", "column": "order_id"}},
            {"name": "ts", "dtype": "timestamp"},
            {"name": "sku", "dtype": "text"},
        ]},
    ]
}


def tiny_csvs():
    """User 1 has seven orders at days 1..7, each with two items; user 2 has one order."""
    orders = ["order_id,user_id,ts,amount"]
    items = ["item_id,order_id,ts,sku"]
    iid = 0
    for k in range(7):
        oid = 100 + k
        orders.append(f"{oid},1,{(k + 1) * DAY},{10.5 + k}")
        for j in range(2):
            items.append(f"{iid},{oid},{(k + 1) * DAY + j},sku-{iid}")
            iid += 1
    orders.append(f"200,2,{3 * DAY},99.0")
    return {
        "users": "user_id,name\n1,ann\n2,bob\n3,cy\n",
        "orders": "\n".join(orders) + "\n",
        "items": "\n".join(items) + "\n",
    }


@pytest.fixture
def tiny_store():
    schema = load_schema(json.dumps(TINY_SCHEMA))
    return store_from_schema(schema, tiny_csvs())


@pytest.fixture(scope="session")
def shop():
    """The default synthetic shop database with the churn task."""
    return make_dataset(seed=0).load()


@pytest.fixture(scope="session")
def shop_regression():
    return make_dataset(seed=1, target="count").load()


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
