"""Relational store: typed CSV ingest, schema validation and key indexes.

A database is described by a JSON manifest listing tables, their typed
columns, an optional timestamp column (fact tables) and single-column
primary/foreign keys.  After ingest, :func:`build_indexes` produces an
immutable :class:`IndexedStore` with hash indexes on every primary key and
every foreign key, which is all document construction needs.
"""

from __future__ import annotations

import bisect
import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

logger = logging.getLogger(__name__)

DTYPES = ("bool", "int", "float", "text", "timestamp")

_TRUE = {"true", "t", "1", "yes"}
_FALSE = {"false", "f", "0", "no"}


class SchemaError(ValueError):
    """Malformed manifest or a manifest that violates a schema rule."""


class ForeignKeyError(SchemaError):
    """A foreign key names a table or column that does not exist."""


class DataError(ValueError):
    """CSV content that does not match the declared schema."""


class DuplicateKeyError(DataError):
    pass


class Timestamp(int):
    """UTC epoch seconds, tagged so it serializes as RFC-3339 text."""

    __slots__ = ()

    def isoformat(self) -> str:
        return datetime.fromtimestamp(int(self), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")

    def __repr__(self) -> str:
        return f"Timestamp({int(self)})"


def value_tag(value: Any) -> str | None:
    """Return the dtype tag of a scalar value (``None`` for null)."""
    if value is None:
        return None
    if isinstance(value, bool):
        return "bool"
    if isinstance(value, Timestamp):
        return "timestamp"
    if isinstance(value, int):
        return "int"
    if isinstance(value, float):
        return "float"
    if isinstance(value, str):
        return "text"
    raise TypeError(f"unsupported value type {type(value).__name__}")


def parse_timestamp(text: str) -> Timestamp:
    text = text.strip()
    try:
        return Timestamp(int(text))
    except ValueError:
        pass
    iso = text[:-1] + "+00:00" if text.endswith(("Z", "z")) else text
    dt = datetime.fromisoformat(iso)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return Timestamp(int(math.floor(dt.timestamp())))


def parse_cell(text: str, dtype: str) -> Any:
    """Parse one CSV cell under ``dtype``; the empty string is null."""
    if text == "":
        return None
    if dtype == "text":
        return text
    if dtype == "int":
        return int(text)
    if dtype == "float":
        return float(text)
    if dtype == "bool":
        low = text.strip().lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if dtype == "timestamp":
        return parse_timestamp(text)
    raise ValueError(f"unknown dtype {dtype!r}")


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    dtype: str
    is_primary_key: bool = False
    foreign_key_target: tuple[str, str] | None = None


@dataclass(frozen=True)
class Link:
    fkey_table: str
    fkey_column: str
    pkey_table: str
    pkey_column: str


@dataclass(frozen=True)
class TableSpec:
    name: str
    columns: tuple[ColumnSpec, ...]
    timestamp_column: str | None = None
    file: str | None = None

    @property
    def column_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.columns)

    @property
    def primary_key(self) -> str | None:
        for c in self.columns:
            if c.is_primary_key:
                return c.name
        return None

    @property
    def is_fact(self) -> bool:
        return self.timestamp_column is not None

    def column(self, name: str) -> ColumnSpec:
        for c in self.columns:
            if c.name == name:
                return c
        raise KeyError(f"{self.name}.{name}")


@dataclass(frozen=True)
class Schema:
    tables: tuple[TableSpec, ...]
    base_dir: Path | None = None

    def table(self, name: str) -> TableSpec:
        for t in self.tables:
            if t.name == name:
                return t
        raise KeyError(f"unknown table {name!r}")

    @property
    def links(self) -> tuple[Link, ...]:
        out = []
        for t in self.tables:
            for c in t.columns:
                if c.foreign_key_target is not None:
                    out.append(Link(t.name, c.name, *c.foreign_key_target))
        return tuple(out)


@dataclass(frozen=True)
class Row:
    table: str
    ordinal: int
    values: Mapping[str, Any]
    timestamp: Timestamp | None = None


@dataclass(frozen=True)
class Table:
    spec: TableSpec
    rows: tuple[Row, ...]

    @property
    def name(self) -> str:
        return self.spec.name


def load_schema(manifest_text: str, base_dir: str | Path | None = None) -> Schema:
    """Parse and validate a schema manifest (JSON)."""
    try:
        doc = json.loads(manifest_text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("tables"), list):
        raise SchemaError("manifest must be an object with a 'tables' list")

    tables: list[TableSpec] = []
    seen_tables: set[str] = set()
    for tdoc in doc["tables"]:
        try:
            name = tdoc["name"]
            cdocs = tdoc["columns"]
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"table entry missing field: {exc}") from exc
        if name in seen_tables:
            raise SchemaError(f"duplicate table {name!r}")
        seen_tables.add(name)

        columns = []
        seen_cols: set[str] = set()
        for cdoc in cdocs:
            cname = cdoc.get("name")
            dtype = cdoc.get("dtype")
            if not isinstance(cname, str):
                raise SchemaError(f"{name}: column without a name")
            if cname in seen_cols:
                raise SchemaError(f"duplicate column {name}.{cname}")
            seen_cols.add(cname)
            if dtype not in DTYPES:
                raise SchemaError(f"{name}.{cname}: illegal dtype {dtype!r}")
            fk = cdoc.get("foreign_key")
            target = None
            if fk is not None:
                try:
                    target = (fk["table"], fk["column"])
                except (KeyError, TypeError) as exc:
                    raise SchemaError(f"{name}.{cname}: malformed foreign_key") from exc
            columns.append(ColumnSpec(cname, dtype, bool(cdoc.get("primary_key", False)), target))

        if sum(c.is_primary_key for c in columns) > 1:
            raise SchemaError(f"{name}: composite primary keys are not supported")
        ts_col = tdoc.get("timestamp_column")
        if ts_col is not None:
            if ts_col not in seen_cols:
                raise SchemaError(f"{name}: timestamp_column {ts_col!r} is not a column")
            if next(c for c in columns if c.name == ts_col).dtype != "timestamp":
                raise SchemaError(f"{name}: timestamp_column must have dtype timestamp")
        tables.append(TableSpec(name, tuple(columns), ts_col, tdoc.get("file")))

    by_name = {t.name: t for t in tables}
    for t in tables:
        for c in t.columns:
            if c.foreign_key_target is None:
                continue
            ptable, pcol = c.foreign_key_target
            if ptable not in by_name:
                raise ForeignKeyError(f"{t.name}.{c.name} references missing table {ptable!r}")
            if by_name[ptable].primary_key != pcol:
                raise ForeignKeyError(
                    f"{t.name}.{c.name} references {ptable}.{pcol}, which is not its primary key"
                )
            if by_name[ptable].column(pcol).dtype != c.dtype:
                raise SchemaError(f"{t.name}.{c.name}: dtype differs from {ptable}.{pcol}")

    return Schema(tuple(tables), Path(base_dir) if base_dir is not None else None)


def load_table(schema: Schema, table_name: str, csv_text: str) -> Table:
    """Parse CSV text for one table of ``schema`` into typed rows."""
    spec = schema.table(table_name)
    reader = csv.reader(io.StringIO(csv_text, newline=""))
    try:
        header = next(reader)
    except StopIteration:
        raise DataError(f"{table_name}: empty CSV, header row required") from None
    if tuple(header) != spec.column_names:
        raise DataError(f"{table_name}: header {header} does not match columns {list(spec.column_names)}")

    dtypes = [c.dtype for c in spec.columns]
    pk = spec.primary_key
    pk_seen: set[Any] = set()
    rows = []
    for line_no, cells in enumerate(reader, start=2):
        if not cells:
            continue
        if len(cells) != len(dtypes):
            raise DataError(f"{table_name}: line {line_no} has {len(cells)} cells, expected {len(dtypes)}")
        values = {}
        for col, dtype, cell in zip(spec.column_names, dtypes, cells):
            try:
                values[col] = parse_cell(cell, dtype)
            except ValueError as exc:
                raise DataError(f"{table_name}: line {line_no}, column {col!r}: {exc}") from exc
        ts = None
        if spec.timestamp_column is not None:
            ts = values[spec.timestamp_column]
            if ts is None:
                raise DataError(f"{table_name}: line {line_no} has a null timestamp")
        if pk is not None:
            key = values[pk]
            if key is None:
                raise DataError(f"{table_name}: line {line_no} has a null primary key")
            if key in pk_seen:
                raise DuplicateKeyError(f"{table_name}: duplicate primary key {key!r} at line {line_no}")
            pk_seen.add(key)
        rows.append(Row(table_name, len(rows), values, ts))
    return Table(spec, tuple(rows))


class _FkPostings:
    """Row ordinals for one foreign-key value, newest first."""

    __slots__ = ("ordinals", "neg_ts")

    def __init__(self, ordinals: list[int], neg_ts: list[int] | None):
        self.ordinals = ordinals
        # ascending negated timestamps, for bisecting the cutoff
        self.neg_ts = neg_ts


@dataclass(frozen=True)
class IndexedStore:
    """Immutable, indexed view of a loaded database."""

    schema: Schema
    tables: Mapping[str, Table]
    pk_index: Mapping[str, Mapping[Any, int]]
    fk_index: Mapping[Link, Mapping[Any, _FkPostings]]
    dangling: Mapping[Link, tuple[Any, ...]] = field(default_factory=dict)

    def __post_init__(self):
        out: dict[str, list[Link]] = {}
        into: dict[str, list[Link]] = {}
        for l in self.fk_index:
            out.setdefault(l.fkey_table, []).append(l)
            into.setdefault(l.pkey_table, []).append(l)
        object.__setattr__(self, "_from", {k: tuple(v) for k, v in out.items()})
        object.__setattr__(self, "_into", {k: tuple(v) for k, v in into.items()})

    @property
    def links(self) -> tuple[Link, ...]:
        return tuple(self.fk_index)

    def links_from(self, table: str) -> tuple[Link, ...]:
        return self._from.get(table, ())

    def links_into(self, table: str) -> tuple[Link, ...]:
        return self._into.get(table, ())

    def row(self, table: str, ordinal: int) -> Row:
        return self.tables[table].rows[ordinal]

    def spec(self, table: str) -> TableSpec:
        return self.tables[table].spec


def _check_key_tag(spec: TableSpec, column: str, key: Any) -> None:
    tag = value_tag(key)
    want = spec.column(column).dtype
    if tag is not None and tag != want:
        # int literals are accepted for timestamp keys
        if not (want == "timestamp" and tag == "int"):
            raise TypeError(f"{spec.name}.{column} holds {want} values, got {tag}")


def build_indexes(tables: Mapping[str, Table], links: Sequence[Link]) -> IndexedStore:
    """Build primary-key and foreign-key hash indexes over loaded tables."""
    for link in links:
        if link.fkey_table not in tables or link.pkey_table not in tables:
            raise ForeignKeyError(f"link endpoint missing: {link}")

    pk_index: dict[str, dict[Any, int]] = {}
    for name, table in tables.items():
        pk = table.spec.primary_key
        if pk is None:
            continue
        pk_index[name] = {row.values[pk]: row.ordinal for row in table.rows}

    fk_index: dict[Link, dict[Any, _FkPostings]] = {}
    dangling: dict[Link, tuple[Any, ...]] = {}
    for link in links:
        table = tables[link.fkey_table]
        buckets: dict[Any, list[Row]] = {}
        for row in table.rows:
            v = row.values[link.fkey_column]
            if v is not None:
                buckets.setdefault(v, []).append(row)
        postings = {}
        fact = table.spec.is_fact
        for v, rows in buckets.items():
            if fact:
                rows.sort(key=lambda r: (-r.timestamp, r.ordinal))
                postings[v] = _FkPostings([r.ordinal for r in rows], [-r.timestamp for r in rows])
            else:
                postings[v] = _FkPostings([r.ordinal for r in rows], None)
        fk_index[link] = postings

        targets = pk_index.get(link.pkey_table, {})
        missing = tuple(v for v in buckets if v not in targets)
        if missing:
            dangling[link] = missing
            logger.warning(
                "%s.%s: %d dangling reference(s) to %s.%s (e.g. %r)",
                link.fkey_table, link.fkey_column, len(missing),
                link.pkey_table, link.pkey_column, missing[0],
            )

    schema = Schema(tuple(t.spec for t in tables.values()))
    return IndexedStore(schema, dict(tables), pk_index, fk_index, dangling)


def lookup_pk(store: IndexedStore, table: str, key: Any) -> Row | None:
    """Return the row of ``table`` whose primary key equals ``key``, if any."""
    if table not in store.tables:
        raise KeyError(f"unknown table {table!r}")
    spec = store.spec(table)
    if spec.primary_key is None:
        raise ValueError(f"table {table!r} has no primary key")
    if key is None:
        return None
    _check_key_tag(spec, spec.primary_key, key)
    ordinal = store.pk_index[table].get(key)
    return None if ordinal is None else store.tables[table].rows[ordinal]


def lookup_fk_before(
    store: IndexedStore,
    link: Link,
    key: Any,
    cutoff: int | None,
    limit: int,
) -> list[Row]:
    """Rows referencing ``key`` through ``link``, newest first.

    Fact-table rows must have ``timestamp < cutoff`` when a cutoff is given;
    dimension-table rows are never filtered.
    """
    try:
        postings = store.fk_index[link]
    except KeyError:
        raise KeyError(f"unknown link {link}") from None
    if limit <= 0 or key is None:
        return []
    entry = postings.get(key)
    if entry is None:
        return []
    start = 0
    if cutoff is not None and entry.neg_ts is not None:
        # ts < cutoff  <=>  -ts > -cutoff
        start = bisect.bisect_right(entry.neg_ts, -int(cutoff))
    rows = store.tables[link.fkey_table].rows
    return [rows[o] for o in entry.ordinals[start:start + limit]]


def load_store(manifest_path: str | Path) -> IndexedStore:
    """Load a manifest and all of its CSV files, then build indexes."""
    manifest_path = Path(manifest_path)
    schema = load_schema(manifest_path.read_text(encoding="utf-8"), base_dir=manifest_path.parent)
    return store_from_schema(schema)


def store_from_schema(schema: Schema, csv_texts: Mapping[str, str] | None = None) -> IndexedStore:
    tables = {}
    for spec in schema.tables:
        if csv_texts is not None and spec.name in csv_texts:
            text = csv_texts[spec.name]
        else:
            if spec.file is None:
                raise SchemaError(f"table {spec.name!r} has no 'file'")
            path = Path(spec.file)
            if not path.is_absolute() and schema.base_dir is not None:
                path = schema.base_dir / path
            text = path.read_text(encoding="utf-8")
        tables[spec.name] = load_table(schema, spec.name, text)
    return build_indexes(tables, schema.links)


def iter_rows(store: IndexedStore, table: str) -> Iterable[Row]:
    return iter(store.tables[table].rows)
