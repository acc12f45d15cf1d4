"""Metrics, test subsampling, parameter-grid sweeps and reports."""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from .docforge import DocParams, Document, DocumentBuilder, DocumentTooLarge, block_entity_key, shrink_on_oversize
from .inference import build_grid, classification_score, median_predict
from .metrics import auroc, mae
from .mlphead import HeadDataset, TrainConfig, init_head, predict, train
from .relstore import IndexedStore
from .scorer import ContextLengthExceeded, MockScorer, Scorer, ScorerConfig, map_bounded
from .taskdef import TaskRow, TaskSpec, TaskSplit, rng_for, sample_in_context, uniform_sample

logger = logging.getLogger(__name__)

__all__ = [
    "auroc", "mae", "sample_test", "token_stats", "GridSpec", "ConfigResult", "RunReport",
    "run_grid", "oracle_scorer", "score_documents", "shared_in_context",
]

MAX_FAILURE_RATE = 0.01


def sample_test(test: Sequence[TaskRow], cap: int = 10_000, seed: int = 0) -> list[TaskRow]:
    """Uniform sample without replacement of at most ``cap`` rows, in input order."""
    if len(test) <= cap:
        return list(test)
    idx = np.sort(rng_for(seed).choice(len(test), size=cap, replace=False))
    return [test[i] for i in idx]


def shared_in_context(
    spec: TaskSpec, split: TaskSplit, n: int, seed: int, anchors: Sequence[TaskRow] | None = None
) -> list[TaskRow]:
    """The in-context pool for one seed, drawn before the earliest anchor row.

    Anchors default to validation plus test.  Documents take a prefix of
    this pool, so configurations with fewer examples see a subset of the
    same rows.
    """
    rows = list(anchors) if anchors is not None else [*split.validation, *split.test]
    if rows:
        before = min(r.seed_time for r in rows)
    else:
        before = max((r.seed_time for r in split.train), default=0) + 1
    return sample_in_context(spec, split.train, n, before, seed)


def token_stats(documents: Sequence[Document]) -> tuple[float, float]:
    """Mean and population standard deviation of token estimates."""
    if not documents:
        raise ValueError("no documents")
    counts = np.asarray([d.token_estimate for d in documents], dtype=np.float64)
    return float(counts.mean()), float(counts.std())


def format_stats(mean: float, std: float) -> str:
    return f"{mean:.0f} ± {std:.0f}"


@dataclass(frozen=True)
class GridSpec:
    n_inc_choices: tuple[int, ...] = (0, 8, 16)
    n_rel_choices: tuple[int, ...] = (0, 8, 16)
    n_nest_choices: tuple[int, ...] = (0, 4, 8)
    d_choices: tuple[int, ...] = (0, 1)

    def points(self, seed: int = 0) -> list[DocParams]:
        return [
            DocParams(a, b, c, d, seed)
            for a, b, c, d in itertools.product(
                sorted(self.n_inc_choices), sorted(self.n_rel_choices),
                sorted(self.n_nest_choices), sorted(self.d_choices),
            )
        ]

    @classmethod
    def parse(cls, text: str) -> "GridSpec":
        """``"default"`` or ``"n_inc=0|8,n_rel=0,n_nest=4,d=0|1"``."""
        if text.strip() in ("", "default"):
            return cls()
        kw = {}
        names = {"n_inc": "n_inc_choices", "n_rel": "n_rel_choices", "n_nest": "n_nest_choices", "d": "d_choices"}
        for part in text.split(","):
            k, _, v = part.partition("=")
            if k.strip() not in names:
                raise ValueError(f"unknown grid knob {k!r}")
            kw[names[k.strip()]] = tuple(int(x) for x in v.split("|"))
        return cls(**kw)


@dataclass
class SplitScores:
    row_ids: list[int] = field(default_factory=list)
    preds: list[float] = field(default_factory=list)
    targets: list[Any] = field(default_factory=list)
    docs: list[Document] = field(default_factory=list)
    failures: list[tuple[int, str]] = field(default_factory=list)
    shrinks: list[tuple[int, tuple[int, int], tuple[int, int]]] = field(default_factory=list)

    @property
    def failure_rate(self) -> float:
        total = len(self.row_ids) + len(self.failures)
        return len(self.failures) / total if total else 0.0


@dataclass
class ConfigResult:
    params: DocParams
    validation_metric: float | None
    test_metric: float | None
    token_mean: float | None
    token_std: float | None
    failures: int = 0
    shrinks: list = field(default_factory=list)
    valid: bool = True
    note: str = ""

    def to_json(self) -> dict[str, Any]:
        return {
            "params": self.params.as_dict(),
            "label": self.params.label(),
            "validation_metric": self.validation_metric,
            "test_metric": self.test_metric,
            "tokens": {
                "mean": self.token_mean,
                "std": self.token_std,
                "formatted": format_stats(self.token_mean, self.token_std) if self.token_mean is not None else None,
            },
            "failures": self.failures,
            "shrinks": [{"row_id": r, "from": list(a), "to": list(b)} for r, a, b in self.shrinks],
            "valid": self.valid,
            "note": self.note,
        }


@dataclass
class RunReport:
    task: str
    metric: str
    mode: str
    configs: dict[DocParams, ConfigResult]
    selected: DocParams | None
    selected_test_metric: float | None

    def to_json(self) -> dict[str, Any]:
        return {
            "task": self.task,
            "metric": self.metric,
            "mode": self.mode,
            "configs": [r.to_json() for r in self.configs.values()],
            "selected": self.selected.as_dict() if self.selected is not None else None,
            "selected_test_metric": self.selected_test_metric,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, ensure_ascii=False)


def select_best(results: Iterable[ConfigResult], metric: str) -> ConfigResult | None:
    """Best validation metric; ties go to the lexicographically smaller config."""
    ok = [r for r in results if r.valid and r.validation_metric is not None]
    if not ok:
        return None
    sign = -1.0 if metric == "auroc" else 1.0
    return min(ok, key=lambda r: (sign * r.validation_metric, r.params.key, r.params.seed))


def task_metric(spec: TaskSpec, preds: Sequence[float], targets: Sequence[Any]) -> float | None:
    if not preds:
        return None
    if spec.metric == "auroc":
        labels = [int(t) for t in targets]
        if len(set(labels)) < 2:
            return None
        return auroc(preds, labels)
    return mae(preds, targets)


def build_with_fallback(
    builder: DocumentBuilder,
    row: TaskRow,
    params: DocParams,
    shared_inc: Sequence[TaskRow],
    use: Callable[[Document], Any],
) -> tuple[Document, Any, list[tuple[int, tuple[int, int], tuple[int, int]]]]:
    """Build and consume one document, halving n_inc/n_rel on context overflow.

    Raises the last overflow error once halving reaches its fixed point.
    """
    shrinks = []
    p = params
    while True:
        try:
            doc = builder.build(row, p, shared_inc)
            return doc, use(doc), shrinks
        except (ContextLengthExceeded, DocumentTooLarge):
            smaller = shrink_on_oversize(p)
            if (smaller.n_inc, smaller.n_rel) == (p.n_inc, p.n_rel):
                raise
            shrinks.append((row.row_id, (p.n_inc, p.n_rel), (smaller.n_inc, smaller.n_rel)))
            logger.info("row %d: context overflow at %s, retrying at %s", row.row_id, p.label(), smaller.label())
            p = smaller


def score_documents(
    builder: DocumentBuilder,
    rows: Sequence[TaskRow],
    params: DocParams,
    shared_inc: Sequence[TaskRow],
    use: Callable[[Document], Any],
    max_in_flight: int,
) -> SplitScores:
    outcomes = map_bounded(lambda r: build_with_fallback(builder, r, params, shared_inc, use), list(rows), max_in_flight)
    out = SplitScores()
    for row, o in zip(rows, outcomes):
        if o.error is not None:
            out.failures.append((row.row_id, f"{type(o.error).__name__}: {o.error}"))
            continue
        doc, value, shrinks = o.value
        out.row_ids.append(row.row_id)
        out.preds.append(value)
        out.targets.append(row.target)
        out.docs.append(doc)
        out.shrinks.extend(shrinks)
    return out


def _decision(spec: TaskSpec, split: TaskSplit, scorer: Scorer, max_candidates: int) -> Callable[[Document], float]:
    if spec.is_classification:
        return lambda doc: classification_score(scorer.next_token_distribution(doc.text))
    grid = build_grid([r.target for r in split.train], max_candidates)
    # candidates are fanned out per document already; keep the inner call serial
    return lambda doc: median_predict(doc.text, grid, scorer, max_in_flight=1)


def run_grid(
    spec: TaskSpec,
    split: TaskSplit,
    store: IndexedStore,
    grid: GridSpec,
    scorer: Scorer,
    mode: str = "metric_aware",
    seeds: Sequence[int] = (0,),
    *,
    test_cap: int = 10_000,
    val_cap: int = 10_000,
    max_candidates: int = 128,
    n_train: int = 10_000,
    train_config: TrainConfig | None = None,
    builder: DocumentBuilder | None = None,
    progress: Callable[[ConfigResult], None] | None = None,
) -> RunReport:
    """Evaluate every grid point on validation and test, select by validation."""
    if mode not in ("metric_aware", "mlp_head"):
        raise ValueError(f"unknown mode {mode!r}")
    builder = builder or DocumentBuilder(spec, split, store)
    workers = max(1, scorer.config.max_in_flight)
    results: dict[DocParams, ConfigResult] = {}

    for seed in seeds:
        val_rows = sample_test(split.validation, val_cap, seed)
        test_rows = sample_test(split.test, test_cap, seed)
        if not val_rows and not test_rows:
            raise ValueError("no validation or test rows to evaluate")
        n_max = max(grid.n_inc_choices, default=0)
        shared = shared_in_context(spec, split, n_max, seed, [*val_rows, *test_rows])

        if mode == "metric_aware":
            decide = _decision(spec, split, scorer, max_candidates)
        for params in grid.points(seed):
            if mode == "metric_aware":
                val = score_documents(builder, val_rows, params, shared, decide, workers)
                test = score_documents(builder, test_rows, params, shared, decide, workers)
            else:
                val, test = _run_head(spec, split, builder, scorer, params, shared, val_rows, test_rows,
                                      n_train, train_config or TrainConfig(seed=seed), workers)
            res = _summarize(spec, params, val, test)
            results[params] = res
            if progress is not None:
                progress(res)

    best = select_best(results.values(), spec.metric)
    return RunReport(
        spec.name, spec.metric, mode, results,
        best.params if best else None, best.test_metric if best else None,
    )


def _summarize(spec: TaskSpec, params: DocParams, val: SplitScores, test: SplitScores) -> ConfigResult:
    vm = task_metric(spec, val.preds, val.targets)
    tm = task_metric(spec, test.preds, test.targets)
    mean = std = None
    if test.docs:
        mean, std = token_stats(test.docs)
    failures = len(val.failures) + len(test.failures)
    valid = val.failure_rate <= MAX_FAILURE_RATE and test.failure_rate <= MAX_FAILURE_RATE and vm is not None
    note = ""
    if val.failure_rate > MAX_FAILURE_RATE or test.failure_rate > MAX_FAILURE_RATE:
        note = f"{failures} hard failures"
        logger.warning("%s: %s, excluded from selection", params.label(), note)
    elif vm is None:
        note = "validation metric undefined"
    return ConfigResult(params, vm, tm, mean, std, failures, val.shrinks + test.shrinks, valid, note)


def _run_head(spec, split, builder, scorer, params, shared, val_rows, test_rows, n_train, cfg, workers):
    embed = lambda doc: scorer.embed_last_token(doc.text).values
    train_rows = uniform_sample(split.train, min(n_train, cfg.max_train), math.inf, params.seed)
    tr = score_documents(builder, train_rows, params, shared, embed, workers)
    val = score_documents(builder, val_rows, params, shared, embed, workers)
    test = score_documents(builder, test_rows, params, shared, embed, workers)
    if not tr.preds:
        raise RuntimeError("no training documents could be embedded")
    mode = "logit" if spec.is_classification else "linear"
    data = HeadDataset(np.stack(tr.preds), np.asarray(tr.targets, dtype=np.float64))
    vdata = HeadDataset(np.stack(val.preds), np.asarray(val.targets, dtype=np.float64)) if val.preds else None
    head = init_head(data.inputs.shape[1], 10, mode, cfg.seed)
    head, _ = train(head, data, cfg, vdata)
    for part in (val, test):
        if part.preds:
            part.preds = predict(head, np.stack(part.preds)).tolist()
    return val, test


def oracle_scorer(
    spec: TaskSpec,
    split: TaskSplit,
    inverted: bool = False,
    config: ScorerConfig | None = None,
) -> MockScorer:
    """Mock that reads the true target of the document's final block.

    Classification: p("1") = 0.9 for positives and 0.1 otherwise (swapped
    when ``inverted``).  Regression: candidate log-probability falls off
    with distance from the truth.  Embeddings separate the two classes.
    """
    truth: dict[tuple, Any] = {}
    for r in (*split.train, *split.validation, *split.test):
        truth[(r.entity_key, int(r.seed_time))] = r.target

    def lookup(text: str) -> Any:
        return truth[block_entity_key(text.rsplit("\n", 1)[-1], spec)]

    def next_token(text: str) -> Mapping[str, float]:
        y = lookup(text)
        positive = (y == 1) != inverted
        return {"1": 0.9, "0": 0.1} if positive else {"1": 0.1, "0": 0.9}

    def logprob(text: str, continuation: str) -> float:
        y = float(lookup(text))
        return -4.0 * abs(float(continuation) - y)

    def embed(text: str) -> np.ndarray:
        y = float(lookup(text))
        rng = np.random.default_rng(int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little"))
        sign = -1.0 if inverted else 1.0
        return rng.standard_normal(16) * 0.5 + sign * (2.0 * y - 1.0)

    cfg = config or ScorerConfig(max_in_flight=1)
    return MockScorer(cfg, next_token_fn=next_token, logprob_fn=logprob, embed_fn=embed)
