"""Turn task rows into self-contained JSON documents for a language model.

A document is the database/task description, followed by in-context
examples, then the latest related examples of the same entity, then the
entity to predict.  Every example is denormalized first: foreign keys are
joined to their parent rows, and rows that reference the entity (primary
key to foreign key direction) are nested breadth-first up to a depth,
never using information from at or after the anchor's seed time.
"""

from __future__ import annotations

import bisect
import json
import math
import re
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable, Sequence

from .relstore import IndexedStore, Link, Row, Timestamp, lookup_fk_before, lookup_pk, parse_timestamp
from .taskdef import TaskRow, TaskSpec, TaskSplit

Tokenizer = Callable[[str], int]

_TOKEN_RE = re.compile(r"[^\w\s]?\w+|[^\w\s]")


@dataclass(frozen=True, order=True)
class DocParams:
    n_inc: int = 0
    n_rel: int = 0
    n_nest: int = 0
    d: int = 0
    seed: int = 0

    def __post_init__(self):
        for name in ("n_inc", "n_rel", "n_nest", "d"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def key(self) -> tuple[int, int, int, int]:
        return (self.n_inc, self.n_rel, self.n_nest, self.d)

    def label(self) -> str:
        return f"n_inc={self.n_inc},n_rel={self.n_rel},n_nest={self.n_nest},d={self.d}"

    def as_dict(self) -> dict[str, int]:
        return {"n_inc": self.n_inc, "n_rel": self.n_rel, "n_nest": self.n_nest, "d": self.d, "seed": self.seed}

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "DocParams":
        """Parse ``"n_inc=8,n_rel=8,n_nest=4,d=1"``; missing knobs default to 0."""
        kw: dict[str, int] = {"seed": seed}
        for part in filter(None, (p.strip() for p in text.split(","))):
            k, _, v = part.partition("=")
            if k.strip() not in ("n_inc", "n_rel", "n_nest", "d", "seed"):
                raise ValueError(f"unknown document parameter {k!r}")
            kw[k.strip()] = int(v)
        return cls(**kw)


@dataclass
class NestedEntity:
    """A denormalized row: its own fields, joined parents, nested children."""

    source: tuple[str, int]
    fields: "OrderedDict[str, Any]"
    children: "OrderedDict[str, list[NestedEntity]]" = field(default_factory=OrderedDict)
    joined: list[tuple[str, int]] = field(default_factory=list)
    depth: int = 0

    def walk(self) -> Iterable["NestedEntity"]:
        yield self
        for kids in self.children.values():
            for k in kids:
                yield from k.walk()

    def store_rows(self) -> list[tuple[str, int]]:
        """Every store row serialized into this entity, parents included."""
        out = []
        for node in self.walk():
            out.append(node.source)
            out.extend(node.joined)
        return out


@dataclass(frozen=True)
class Document:
    task_row_id: int
    text: str
    context_chars: int
    n_inc_used: int
    n_rel_used: int
    token_estimate: int
    params: DocParams = DocParams()
    split: str = "test"

    @property
    def parts(self) -> tuple[int, int, int]:
        return (self.context_chars, self.n_inc_used, self.n_rel_used)

    @property
    def blocks(self) -> list[str]:
        return self.text[self.context_chars + 1:].split("\n")


class DocumentTooLarge(RuntimeError):
    """Raised when a document exceeds the builder's token budget."""

    def __init__(self, row_id: int, params: DocParams, tokens: int):
        super().__init__(f"document for row {row_id} has {tokens} tokens at {params.label()}")
        self.row_id = row_id
        self.params = params
        self.hint = shrink_on_oversize(params)


def estimate_tokens(text: str) -> int:
    """Approximate token count.

    A token is a run of word characters, optionally with one leading
    punctuation character, or a single punctuation character; whitespace
    only separates.  ``{"a": 1}`` gives ``{ "a " : 1 }``, six tokens.
    """
    return sum(1 for _ in _TOKEN_RE.finditer(text))


def shrink_on_oversize(params: DocParams) -> DocParams:
    return replace(params, n_inc=params.n_inc // 2, n_rel=params.n_rel // 2)


def child_table(label: str, store: IndexedStore) -> str:
    return label if label in store.tables else label.rsplit(".", 1)[0]


def _join_parents(
    row: Row,
    store: IndexedStore,
    fk_links: Sequence[Link],
    cutoff: int | None,
    skip: Link | None,
) -> tuple[OrderedDict, list[Row]]:
    """Inline FK parents into the row's fields; returns fields and parent rows."""
    by_column = {l.fkey_column: l for l in fk_links}
    parent_counts: dict[str, int] = {}
    for l in fk_links:
        parent_counts[l.pkey_table] = parent_counts.get(l.pkey_table, 0) + 1

    fields: OrderedDict = OrderedDict()
    parents: list[Row] = []
    for col, value in row.values.items():
        link = by_column.get(col)
        parent = None
        if link is not None and not _is_back_edge(link, skip):
            parent = lookup_pk(store, link.pkey_table, value)
            if parent is not None and parent.timestamp is not None and cutoff is not None and parent.timestamp >= cutoff:
                parent = None
        if parent is None:
            fields[col] = value
            continue
        prefix = link.pkey_table if parent_counts[link.pkey_table] == 1 else col
        for pcol, pval in parent.values.items():
            fields[f"{prefix}.{pcol}"] = pval
        parents.append(parent)
    return fields, parents


def _is_back_edge(link: Link, skip: Link | None) -> bool:
    return skip is not None and link == skip


def _child_label(link: Link, sibling_links: Sequence[Link]) -> str:
    same = sum(1 for l in sibling_links if l.fkey_table == link.fkey_table)
    return link.fkey_table if same == 1 else f"{link.fkey_table}.{link.fkey_column}"


def add_related_entities(
    row: Row,
    store: IndexedStore,
    n_nest: int,
    depth: int,
    d_max: int,
    visited: set[str],
    cutoff: int | None,
    fk_links: Sequence[Link] | None = None,
) -> NestedEntity:
    """Denormalize ``row`` and nest referencing rows breadth-first.

    ``visited`` is updated in place.  ``fk_links`` overrides the row's
    outgoing links (task rows are not store rows and bring their own).
    Rows reached through a link do not re-join the parent they hang off.
    """
    if fk_links is None:
        fk_links = store.links_from(row.table)
    visited.add(row.table)
    fields, parents = _join_parents(row, store, fk_links, cutoff, None)
    root = NestedEntity((row.table, row.ordinal), fields, OrderedDict(), [(p.table, p.ordinal) for p in parents], depth)
    visited.update(p.table for p in parents)

    frontier: list[tuple[NestedEntity, list[Row]]] = [(root, [row, *parents])]
    level = depth
    while level < d_max and frontier and n_nest > 0:
        expanded: set[str] = set()
        joined: set[str] = set()
        nxt: list[tuple[NestedEntity, list[Row]]] = []
        for node, contributing in frontier:
            candidates = [l for r in contributing for l in store.links_into(r.table)]
            for crow in contributing:
                for link in store.links_into(crow.table):
                    if link.fkey_table in visited:
                        continue
                    expanded.add(link.fkey_table)
                    kids = lookup_fk_before(store, link, crow.values[link.pkey_column], cutoff, n_nest)
                    if not kids:
                        continue
                    label = _child_label(link, candidates)
                    bucket = node.children.setdefault(label, [])
                    for kid in kids:
                        kfields, kparents = _join_parents(kid, store, store.links_from(kid.table), cutoff, link)
                        knode = NestedEntity(
                            (kid.table, kid.ordinal), kfields, OrderedDict(),
                            [(p.table, p.ordinal) for p in kparents], level + 1,
                        )
                        joined.update(p.table for p in kparents)
                        bucket.append(knode)
                        nxt.append((knode, [kid, *kparents]))
        visited.update(expanded)
        visited.update(joined)
        frontier = nxt
        level += 1
    return root


def _jsonable(value: Any) -> Any:
    if isinstance(value, Timestamp):
        return value.isoformat()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def entity_to_obj(entity: NestedEntity, target: Any = None, target_key: str | None = None) -> OrderedDict:
    obj: OrderedDict = OrderedDict((k, _jsonable(v)) for k, v in entity.fields.items())
    for label, kids in entity.children.items():
        obj[label] = [entity_to_obj(k) for k in kids]
    if target_key is not None and target is not None:
        obj[target_key] = _jsonable(target)
    return obj


def serialize_entity(entity: NestedEntity, target: Any = None, target_key: str = "target") -> str:
    """Canonical one-line JSON; the target, when given, is the last key."""
    return json.dumps(entity_to_obj(entity, target, target_key), ensure_ascii=False, allow_nan=False)


def task_row_as_row(trow: TaskRow, spec: TaskSpec) -> Row:
    values = dict(trow.fkey_values)
    values[spec.seed_time_column] = trow.seed_time
    return Row(spec.name, trow.row_id, values, trow.seed_time)


def expand_task_row(trow: TaskRow, spec: TaskSpec, store: IndexedStore, n_nest: int, d: int) -> NestedEntity:
    links = [l for _, l in spec.entity_fkeys]
    return add_related_entities(
        task_row_as_row(trow, spec), store, n_nest, 0, d, set(), trow.seed_time, fk_links=links
    )


def related_examples(
    test_row: TaskRow,
    train: Sequence[TaskRow],
    n_rel: int,
    exclude: Iterable[int] = (),
) -> list[TaskRow]:
    """Latest earlier train rows of the same entity, newest first (linear scan)."""
    skip = set(exclude)
    key = test_row.entity_key
    hits = [
        r for r in train
        if r.entity_key == key and r.seed_time < test_row.seed_time and r.row_id not in skip
    ]
    hits.sort(key=lambda r: (-r.seed_time, r.row_id))
    return hits[:max(n_rel, 0)]


class EntityHistory:
    """Train rows grouped by entity, for fast related-example lookup."""

    def __init__(self, train: Sequence[TaskRow]):
        groups: dict[tuple, list[TaskRow]] = {}
        for r in train:
            groups.setdefault(r.entity_key, []).append(r)
        self._rows = {}
        self._neg_ts = {}
        for key, rows in groups.items():
            rows.sort(key=lambda r: (-r.seed_time, r.row_id))
            self._rows[key] = rows
            self._neg_ts[key] = [-r.seed_time for r in rows]

    def related(self, test_row: TaskRow, n_rel: int, exclude: Iterable[int] = ()) -> list[TaskRow]:
        key = test_row.entity_key
        rows = self._rows.get(key)
        if not rows or n_rel <= 0:
            return []
        skip = set(exclude)
        start = bisect.bisect_right(self._neg_ts[key], -int(test_row.seed_time))
        out = []
        for r in rows[start:]:
            if r.row_id in skip:
                continue
            out.append(r)
            if len(out) == n_rel:
                break
        return out


class DocumentBuilder:
    """Builds documents for one task; caches expanded train examples.

    Train examples are anchored at their own seed time, so their
    serialization does not depend on the document they appear in.
    """

    def __init__(
        self,
        spec: TaskSpec,
        split: TaskSplit,
        store: IndexedStore,
        tokenizer: Tokenizer = estimate_tokens,
        max_tokens: int | None = None,
        cache_size: int = 65536,
    ):
        self.spec = spec
        self.split = split
        self.store = store
        self.tokenizer = tokenizer
        self.max_tokens = max_tokens
        self.history = EntityHistory(split.train)
        self.context = f"{spec.db_description.strip()}\n{spec.task_description.strip()}"
        self.cache_size = cache_size
        self._blocks: dict[tuple, str] = {}

    def expand(self, trow: TaskRow, params: DocParams) -> NestedEntity:
        return expand_task_row(trow, self.spec, self.store, params.n_nest, params.d)

    def example_block(self, trow: TaskRow, params: DocParams) -> str:
        key = (trow.split, trow.row_id, params.n_nest, params.d)
        text = self._blocks.get(key)
        if text is None:
            if len(self._blocks) >= self.cache_size:
                self._blocks.clear()
            ent = self.expand(trow, params)
            text = self._blocks[key] = serialize_entity(ent, trow.target, self.spec.target_column)
        return text

    def test_block(self, trow: TaskRow, params: DocParams) -> str:
        return serialize_entity(self.expand(trow, params), None)

    def select(self, test_row: TaskRow, params: DocParams, shared_inc: Sequence[TaskRow]) -> tuple[list[TaskRow], list[TaskRow]]:
        """In-context and related rows that go into ``test_row``'s document."""
        inc = [
            r for r in shared_inc
            if r.seed_time < test_row.seed_time and not (r.split == test_row.split and r.row_id == test_row.row_id)
        ][:params.n_inc]
        taken = [r.row_id for r in inc if r.split == "train"]
        if test_row.split == "train":
            taken.append(test_row.row_id)
        rel = self.history.related(test_row, params.n_rel, exclude=taken)
        return inc, rel

    def build(self, test_row: TaskRow, params: DocParams, shared_inc: Sequence[TaskRow]) -> Document:
        inc, rel = self.select(test_row, params, shared_inc)
        blocks = [self.example_block(r, params) for r in inc]
        blocks += [self.example_block(r, params) for r in rel]
        blocks.append(self.test_block(test_row, params))
        text = self.context + "\n" + "\n".join(blocks)
        tokens = self.tokenizer(text)
        if self.max_tokens is not None and tokens > self.max_tokens:
            raise DocumentTooLarge(test_row.row_id, params, tokens)
        return Document(test_row.row_id, text, len(self.context), len(inc), len(rel), tokens, params, test_row.split)


def build_document(
    test_row: TaskRow,
    spec: TaskSpec,
    split: TaskSplit,
    store: IndexedStore,
    params: DocParams,
    shared_inc: Sequence[TaskRow],
    tokenizer: Tokenizer = estimate_tokens,
) -> Document:
    """One-off document build; use :class:`DocumentBuilder` for batches."""
    return DocumentBuilder(spec, split, store, tokenizer).build(test_row, params, shared_inc)


def document_record(doc: Document, target: Any = None) -> dict[str, Any]:
    rec: dict[str, Any] = {
        "row_id": doc.task_row_id,
        "split": doc.split,
        "params": doc.params.as_dict(),
        "text": doc.text,
        "token_estimate": doc.token_estimate,
    }
    if target is not None:
        rec["target"] = _jsonable(target)
    return rec


def block_entity_key(block: str, spec: TaskSpec) -> tuple[tuple, int]:
    """Recover (entity key, seed time) from a serialized task-row block."""
    obj = json.loads(block)
    key = []
    for col, link in spec.entity_fkeys:
        joined = f"{link.pkey_table}.{link.pkey_column}"
        alt = f"{col}.{link.pkey_column}"
        for k in (joined, alt, col):
            if k in obj:
                key.append(obj[k])
                break
        else:
            raise KeyError(f"block has no value for entity column {col!r}")
    return tuple(key), int(parse_timestamp(obj[spec.seed_time_column]))
