"""Relational databases as documents for language-model prediction."""

from .docforge import (
    DocParams,
    Document,
    DocumentBuilder,
    NestedEntity,
    add_related_entities,
    build_document,
    estimate_tokens,
    related_examples,
    serialize_entity,
    shrink_on_oversize,
)
from .evalharness import GridSpec, RunReport, run_grid, sample_test, shared_in_context, token_stats
from .inference import build_grid, classification_score, median_predict
from .metrics import auroc, mae
from .relstore import (
    IndexedStore,
    Link,
    Row,
    build_indexes,
    load_schema,
    load_store,
    load_table,
    lookup_fk_before,
    lookup_pk,
)
from .scorer import HttpScorer, MockScorer, ScorerConfig, TokenDistribution
from .taskdef import TaskRow, TaskSpec, TaskSplit, load_task, stratified_sample, uniform_sample

__version__ = "0.1.0"

__all__ = [
    "DocParams",
    "Document",
    "DocumentBuilder",
    "NestedEntity",
    "add_related_entities",
    "build_document",
    "estimate_tokens",
    "related_examples",
    "serialize_entity",
    "shrink_on_oversize",
    "GridSpec",
    "RunReport",
    "run_grid",
    "sample_test",
    "shared_in_context",
    "token_stats",
    "build_grid",
    "classification_score",
    "median_predict",
    "auroc",
    "mae",
    "IndexedStore",
    "Link",
    "Row",
    "build_indexes",
    "load_schema",
    "load_store",
    "load_table",
    "lookup_fk_before",
    "lookup_pk",
    "HttpScorer",
    "MockScorer",
    "ScorerConfig",
    "TokenDistribution",
    "TaskRow",
    "TaskSpec",
    "TaskSplit",
    "load_task",
    "stratified_sample",
    "uniform_sample",
]
