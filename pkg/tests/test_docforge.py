import json
from collections import OrderedDict

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relforge.docforge import (
    DocParams,
    DocumentBuilder,
    DocumentTooLarge,
    EntityHistory,
    NestedEntity,
    add_related_entities,
    block_entity_key,
    build_document,
    document_record,
    estimate_tokens,
    expand_task_row,
    related_examples,
    serialize_entity,
    shrink_on_oversize,
)
from relforge.relstore import Timestamp, lookup_pk
from relforge.taskdef import TaskRow, load_task, sample_in_context

from .conftest import DAY
from .test_taskdef import HEADER, MANIFEST

CUTOFF = 5 * DAY + DAY // 2  # after orders on days 1..5, before days 6 and 7


def iso(t):
    return Timestamp(t).isoformat()


@pytest.fixture
def tiny_task(tiny_store):
    csvs = {
        "train": HEADER + f"1,{2 * DAY},1\n2,{4 * DAY},0\n1,{4 * DAY},0\n1,{5 * DAY},1\n",
        "validation": HEADER + f"2,{CUTOFF},1\n",
        "test": HEADER + f"1,{CUTOFF},\n",
    }
    spec, split = load_task(json.dumps(MANIFEST), tiny_store, csv_texts=csvs)
    return tiny_store, spec, split


def test_d0_joins_parents_only(tiny_task):
    store, spec, split = tiny_task
    ent = expand_task_row(split.test[0], spec, store, n_nest=8, d=0)
    assert ent.children == OrderedDict()
    assert list(ent.fields) == ["users.user_id", "users.name", "timestamp"]
    assert ent.fields["users.name"] == "ann"


def test_n_nest_zero_has_no_children(tiny_task):
    store, spec, split = tiny_task
    assert expand_task_row(split.test[0], spec, store, n_nest=0, d=3).children == OrderedDict()


def test_three_table_expansion_matches_hand_oracle(tiny_task):
    store, spec, split = tiny_task
    ent = expand_task_row(split.test[0], spec, store, n_nest=2, d=2)

    def item(iid, oid, ts):
        return {"item_id": iid, "order_id": oid, "ts": iso(ts), "sku": f"sku-{iid}"}

    # 7 orders exist, 5 precede the cutoff, the two latest are kept
    expected = {
        "users.user_id": 1,
        "users.name": "ann",
        "timestamp": iso(CUTOFF),
        "orders": [
            {"order_id": 104, "user_id": 1, "ts": iso(5 * DAY), "amount": 14.5,
             "items": [item(9, 104, 5 * DAY + 1), item(8, 104, 5 * DAY)]},
            {"order_id": 103, "user_id": 1, "ts": iso(4 * DAY), "amount": 13.5,
             "items": [item(7, 103, 4 * DAY + 1), item(6, 103, 4 * DAY)]},
        ],
    }
    text = serialize_entity(ent)
    assert json.loads(text) == expected
    assert list(json.loads(text)) == list(expected)


def test_depth_one_stops_at_orders(tiny_task):
    store, spec, split = tiny_task
    ent = expand_task_row(split.test[0], spec, store, n_nest=3, d=1)
    orders = ent.children["orders"]
    assert [o.fields["order_id"] for o in orders] == [104, 103, 102]
    assert all(not o.children for o in orders)


def test_fact_parent_at_cutoff_not_joined(tiny_store):
    # an item anchored before its order's timestamp must not see the order
    item = tiny_store.tables["items"].rows[0]
    ent = add_related_entities(item, tiny_store, 2, 0, 1, set(), cutoff=DAY)
    assert "order_id" in ent.fields and "orders.amount" not in ent.fields
    ent = add_related_entities(item, tiny_store, 2, 0, 1, set(), cutoff=DAY + 1)
    assert ent.fields["orders.amount"] == 10.5
    assert ent.fields["orders.order_id"] == 100


def test_leakage_free_on_tiny(tiny_task):
    store, spec, split = tiny_task
    for n_nest in range(4):
        for d in range(4):
            ent = expand_task_row(split.test[0], spec, store, n_nest, d)
            for table, ordinal in ent.store_rows()[1:]:
                ts = store.tables[table].rows[ordinal].timestamp
                assert ts is None or ts < CUTOFF


def test_serialization_example():
    ent = NestedEntity(("t", 0), OrderedDict([("a", 1), ("b", None)]))
    assert serialize_entity(ent, 1) == '{"a": 1, "b": null, "target": 1}'
    assert serialize_entity(ent) == '{"a": 1, "b": null}'


def test_serialization_non_finite_and_unicode():
    ent = NestedEntity(("t", 0), OrderedDict([("x", float("nan")), ("name", "Zoë")]))
    assert serialize_entity(ent) == '{"x": null, "name": "Zoë"}'


def test_zero_params_is_zero_shot(tiny_task):
    store, spec, split = tiny_task
    doc = build_document(split.test[0], spec, split, store, DocParams(), [])
    assert doc.text == "tiny shop\nwill the user buy\n" + '{"users.user_id": 1, "users.name": "ann", "timestamp": "%s"}' % iso(CUTOFF)
    assert (doc.n_inc_used, doc.n_rel_used) == (0, 0)
    assert len(doc.blocks) == 1


def test_related_examples_newest_first(tiny_task):
    store, spec, split = tiny_task
    doc = build_document(split.test[0], spec, split, store, DocParams(n_rel=8), [])
    assert doc.n_rel_used == 3
    times = [json.loads(b)["timestamp"] for b in doc.blocks[:-1]]
    assert times == [iso(5 * DAY), iso(4 * DAY), iso(2 * DAY)]
    assert [json.loads(b)["target"] for b in doc.blocks[:-1]] == [1, 0, 1]
    assert "target" not in json.loads(doc.blocks[-1])


def test_in_context_filtered_by_seed_time(tiny_task):
    store, spec, split = tiny_task
    shared = list(split.train)
    b = DocumentBuilder(spec, split, store)
    inc, _ = b.select(split.train[2], DocParams(n_inc=8), shared)
    assert [r.row_id for r in inc] == [0]
    inc, rel = b.select(split.test[0], DocParams(n_inc=2, n_rel=8), shared)
    assert [r.row_id for r in inc] == [0, 1]
    assert [r.row_id for r in rel] == [3, 2]  # row 0 already used in-context


def test_n_inc_eight_is_balanced(shop):
    store, spec, split = shop
    before = min(r.seed_time for r in (*split.validation, *split.test))
    shared = sample_in_context(spec, split.train, 8, before, seed=0)
    doc = build_document(split.test[0], spec, split, store, DocParams(n_inc=8), shared)
    assert doc.n_inc_used == 8 and len(doc.blocks) == 9
    labels = [json.loads(b)["target"] for b in doc.blocks[:8]]
    assert labels.count(1) == 4 and labels.count(0) == 4


def test_target_is_last_key_and_round_trips(shop):
    store, spec, split = shop
    before = min(r.seed_time for r in split.test)
    shared = sample_in_context(spec, split.train, 4, before, seed=1)
    doc = build_document(split.test[5], spec, split, store, DocParams(4, 4, 2, 2), shared)
    for block in doc.blocks[:-1]:
        obj = json.loads(block, object_pairs_hook=OrderedDict)
        assert list(obj)[-1] == "target"
        assert json.dumps(obj, ensure_ascii=False) == block
    assert doc.text.startswith(spec.db_description)


def test_block_entity_key(shop):
    store, spec, split = shop
    row = split.test[0]
    block = DocumentBuilder(spec, split, store).test_block(row, DocParams())
    assert block_entity_key(block, spec) == (row.entity_key, int(row.seed_time))


def test_estimate_tokens_examples():
    assert estimate_tokens("") == 0
    assert estimate_tokens('{"a": 1}') == 6
    assert estimate_tokens("hello world") == 2


@settings(max_examples=200)
@given(a=st.text(max_size=60), b=st.text(max_size=60))
def test_estimate_tokens_monotone_under_concatenation(a, b):
    assert estimate_tokens(a + "\n" + b) >= max(estimate_tokens(a), estimate_tokens(b))


@pytest.mark.parametrize("before, after", [((16, 16), (8, 8)), ((1, 0), (0, 0)), ((0, 0), (0, 0)), ((5, 3), (2, 1))])
def test_shrink(before, after):
    p = shrink_on_oversize(DocParams(*before, n_nest=4, d=2))
    assert (p.n_inc, p.n_rel, p.n_nest, p.d) == (*after, 4, 2)


def test_max_tokens_raises_with_hint(tiny_task):
    store, spec, split = tiny_task
    b = DocumentBuilder(spec, split, store, max_tokens=10)
    with pytest.raises(DocumentTooLarge) as info:
        b.build(split.test[0], DocParams(16, 16), [])
    assert info.value.hint.key == (8, 8, 0, 0)


def test_doc_params_parse_and_label():
    p = DocParams.parse("n_inc=8, n_rel=4,d=1", seed=3)
    assert p == DocParams(8, 4, 0, 1, 3)
    assert DocParams.parse(p.label(), seed=3) == p
    with pytest.raises(ValueError):
        DocParams.parse("k=1")
    with pytest.raises(ValueError):
        DocParams(n_inc=-1)


def test_document_record(tiny_task):
    store, spec, split = tiny_task
    doc = build_document(split.test[0], spec, split, store, DocParams(), [])
    rec = document_record(doc, target=1)
    assert rec["row_id"] == 0 and rec["target"] == 1 and rec["text"] == doc.text


def test_builder_is_deterministic(shop):
    store, spec, split = shop
    before = min(r.seed_time for r in split.validation)
    shared = sample_in_context(spec, split.train, 8, before, seed=2)
    p = DocParams(8, 8, 4, 2)
    a = [DocumentBuilder(spec, split, store).build(r, p, shared).text for r in split.test[:20]]
    b = [DocumentBuilder(spec, split, store).build(r, p, shared).text for r in split.test[:20]]
    assert a == b


def _rows(keys_times):
    return [TaskRow(i, {"u": k}, Timestamp(t), i % 2) for i, (k, t) in enumerate(keys_times)]


@settings(max_examples=200, deadline=None)
@given(pairs=st.lists(st.tuples(st.integers(0, 4), st.integers(0, 30)), max_size=60),
       key=st.integers(0, 4), t=st.integers(0, 31), n_rel=st.integers(0, 10),
       exclude=st.sets(st.integers(0, 60), max_size=10))
def test_related_examples_match_bruteforce(pairs, key, t, n_rel, exclude):
    train = _rows(pairs)
    probe = TaskRow(999, {"u": key}, Timestamp(t))
    oracle = sorted(
        (r for r in train if r.fkey_values["u"] == key and r.seed_time < t and r.row_id not in exclude),
        key=lambda r: (-r.seed_time, r.row_id),
    )[:n_rel]
    assert related_examples(probe, train, n_rel, exclude) == oracle
    assert EntityHistory(train).related(probe, n_rel, exclude) == oracle


def _assert_leak_free(store, spec, doc_params, row, builder, shared):
    """Every fact row reachable from the test block predates the seed time."""
    ent = builder.expand(row, doc_params)
    for table, ordinal in ent.store_rows()[1:]:  # the first entry is the task row itself
        ts = store.tables[table].rows[ordinal].timestamp
        assert ts is None or ts < row.seed_time, (table, ordinal)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n_nest=st.integers(0, 5), d=st.integers(0, 3))
def test_no_future_rows_on_random_databases(seed, n_nest, d):
    from relforge.synthetic import random_dataset

    store, spec, split = random_dataset(np.random.default_rng(seed)).load()
    b = DocumentBuilder(spec, split, store)
    p = DocParams(0, 0, n_nest, d)
    rows = [*split.train[:5], *split.test[:5]]
    for r in rows:
        _assert_leak_free(store, spec, p, r, b, [])


def test_back_edge_is_not_rejoined(shop):
    store, spec, split = shop
    ent = expand_task_row(split.test[0], spec, store, n_nest=4, d=2)
    for order in ent.children.get("orders", []):
        assert "user_id" in order.fields and not any(k.startswith("users.") for k in order.fields)
        for item in order.children.get("order_items", []):
            assert "order_id" in item.fields and "products.category" in item.fields
            assert lookup_pk(store, "products", item.fields["products.product_id"]) is not None
