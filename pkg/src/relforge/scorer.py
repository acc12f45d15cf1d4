"""Language-model access behind three narrow calls.

``next_token_distribution`` reads the top-k next tokens after a document,
``continuation_logprob`` scores a fixed continuation, and
``embed_last_token`` returns the last-token hidden state.  Two backends
exist: an HTTP client for a model server and a deterministic,
table-driven mock for tests and dry runs.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import math
import os
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Mapping, Protocol, Sequence, TypeVar

import numpy as np

from .docforge import estimate_tokens

logger = logging.getLogger(__name__)

ENV_URL = "RELFORGE_SCORER_URL"

T = TypeVar("T")
R = TypeVar("R")


class ScorerError(RuntimeError):
    pass


class TransportError(ScorerError):
    pass


class ContextLengthExceeded(ScorerError):
    """The document does not fit the model context; shrink and retry."""


class MalformedResponse(ScorerError):
    pass


@dataclass(frozen=True)
class TokenDistribution:
    entries: Mapping[str, float]

    def __post_init__(self):
        for tok, p in self.entries.items():
            if not (0.0 <= p <= 1.0) or math.isnan(p):
                raise ValueError(f"probability of {tok!r} out of range: {p}")
        if self.coverage > 1.0 + 1e-9:
            raise ValueError(f"probabilities sum to {self.coverage} > 1")

    @property
    def coverage(self) -> float:
        return math.fsum(self.entries.values())

    @classmethod
    def from_logprobs(cls, pairs: Sequence[tuple[str, float]]) -> "TokenDistribution":
        entries: dict[str, float] = {}
        for tok, lp in pairs:
            # duplicate tokens keep the first (highest-ranked) entry
            entries.setdefault(tok, math.exp(lp))
        return cls(entries)

    def get(self, token: str) -> float:
        return self.entries.get(token, 0.0)


@dataclass(frozen=True)
class Embedding:
    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(arr)):
            raise ValueError("embedding has non-finite entries")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True)
class ScorerConfig:
    backend: str = "mock"
    endpoint: str | None = None
    top_k: int = 20
    max_in_flight: int = 4
    timeout: float = 60.0
    context_limit: int | None = None
    seed: int = 0
    embed_dim: int = 16

    def __post_init__(self):
        if self.backend not in ("http", "mock"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.backend == "http" and not (self.endpoint or os.environ.get(ENV_URL)):
            raise ValueError(f"http backend needs an endpoint (or ${ENV_URL})")


class Scorer(Protocol):
    config: ScorerConfig

    def next_token_distribution(self, document: str) -> TokenDistribution: ...

    def continuation_logprob(self, document: str, continuation: str) -> float: ...

    def embed_last_token(self, document: str) -> Embedding: ...


def _require_text(document: str, what: str = "document") -> None:
    if not document:
        raise ValueError(f"{what} must be non-empty")


StepTable = float | Mapping[str, float]


class MockScorer:
    """Deterministic stand-in for a model.

    Every call is a pure function of the configuration and the request.
    ``distribution`` (or ``next_token_fn``) drives next-token reads.
    Continuations are scored character by character from ``step_tables``:
    entry ``i`` is either one probability for any character at step ``i``
    or a mapping character -> probability; characters not covered get
    ``default_step_prob``.  ``logprob_fn`` and ``embed_fn`` override the
    table-driven behaviour; embeddings otherwise come from a seeded hash of
    the text.
    """

    def __init__(
        self,
        config: ScorerConfig | None = None,
        *,
        distribution: Mapping[str, float] | None = None,
        next_token_fn: Callable[[str], Mapping[str, float]] | None = None,
        step_tables: Sequence[StepTable] = (),
        default_step_prob: float = 1e-3,
        logprob_fn: Callable[[str, str], float] | None = None,
        embed_fn: Callable[[str], Sequence[float]] | None = None,
        tokenizer: Callable[[str], int] = estimate_tokens,
    ):
        self.config = config or ScorerConfig()
        self.distribution = dict(distribution) if distribution is not None else {"1": 0.5, "0": 0.5}
        self.next_token_fn = next_token_fn
        self.step_tables = list(step_tables)
        self.default_step_prob = default_step_prob
        self.logprob_fn = logprob_fn
        self.embed_fn = embed_fn
        self.tokenizer = tokenizer

    def _check_length(self, document: str) -> None:
        limit = self.config.context_limit
        if limit is not None and self.tokenizer(document) > limit:
            raise ContextLengthExceeded(f"document exceeds {limit} tokens")

    def next_token_distribution(self, document: str) -> TokenDistribution:
        _require_text(document)
        self._check_length(document)
        table = self.next_token_fn(document) if self.next_token_fn else self.distribution
        top = sorted(table.items(), key=lambda kv: (-kv[1], kv[0]))[: self.config.top_k]
        return TokenDistribution(dict(top))

    def continuation_logprob(self, document: str, continuation: str) -> float:
        _require_text(continuation, "continuation")
        self._check_length(document)
        if self.logprob_fn is not None:
            return float(self.logprob_fn(document, continuation))
        total = 0.0
        for i, ch in enumerate(continuation):
            step = self.step_tables[i] if i < len(self.step_tables) else {}
            p = step if isinstance(step, (int, float)) else step.get(ch, self.default_step_prob)
            total += math.log(p) if p > 0 else -math.inf
        return total

    def embed_last_token(self, document: str) -> Embedding:
        _require_text(document)
        self._check_length(document)
        if self.embed_fn is not None:
            return Embedding(np.asarray(self.embed_fn(document), dtype=np.float64))
        digest = hashlib.sha256(f"{self.config.seed}\x00{document}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:16], "little"))
        return Embedding(rng.standard_normal(self.config.embed_dim))


class HttpScorer:
    """JSON-over-HTTP client.

    ``POST /v1/next_token``, ``/v1/logprob`` and ``/v1/embed``; status 413
    means the document is too long for the model context.
    """

    def __init__(self, config: ScorerConfig, record: list | None = None):
        self.config = config
        self.endpoint = (os.environ.get(ENV_URL) or config.endpoint or "").rstrip("/")
        if not self.endpoint:
            raise ValueError("no scorer endpoint configured")
        self.record = record
        self._ids = itertools.count()

    def _post(self, path: str, payload: dict[str, Any]) -> dict[str, Any]:
        rid = next(self._ids)
        body = json.dumps({**payload, "id": rid}).encode("utf-8")
        req = urllib.request.Request(
            self.endpoint + path, data=body, method="POST",
            headers={"Content-Type": "application/json; charset=utf-8", "X-Request-Id": str(rid)},
        )
        try:
            with urllib.request.urlopen(req, timeout=self.config.timeout) as resp:
                raw = resp.read()
        except urllib.error.HTTPError as exc:
            if exc.code == 413:
                raise ContextLengthExceeded(f"{path}: HTTP 413") from exc
            raise TransportError(f"{path}: HTTP {exc.code}") from exc
        except (urllib.error.URLError, OSError) as exc:
            raise TransportError(f"{path}: {exc}") from exc
        try:
            out = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise MalformedResponse(f"{path}: response is not JSON") from exc
        if not isinstance(out, dict):
            raise MalformedResponse(f"{path}: response is not an object")
        if "id" in out and out["id"] != rid:
            raise MalformedResponse(f"{path}: response id {out['id']} does not match request {rid}")
        if self.record is not None:
            self.record.append({"path": path, "request": payload, "response": out})
        logger.debug("%s #%d ok", path, rid)
        return out

    def next_token_distribution(self, document: str) -> TokenDistribution:
        _require_text(document)
        out = self._post("/v1/next_token", {"text": document, "top_k": self.config.top_k})
        try:
            pairs = [(str(t["token"]), float(t["logprob"])) for t in out["tokens"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedResponse("next_token: bad 'tokens' field") from exc
        try:
            return TokenDistribution.from_logprobs(pairs)
        except ValueError as exc:
            raise MalformedResponse(f"next_token: {exc}") from exc

    def continuation_logprob(self, document: str, continuation: str) -> float:
        _require_text(continuation, "continuation")
        out = self._post("/v1/logprob", {"text": document, "continuation": continuation})
        try:
            return float(out["logprob"])
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedResponse("logprob: bad 'logprob' field") from exc

    def embed_last_token(self, document: str) -> Embedding:
        _require_text(document)
        out = self._post("/v1/embed", {"text": document})
        try:
            values = np.asarray(out["embedding"], dtype=np.float64)
            if "dim" in out and int(out["dim"]) != values.shape[0]:
                raise ValueError("dim mismatch")
            return Embedding(values)
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedResponse(f"embed: {exc}") from exc


def make_scorer(config: ScorerConfig, **mock_options: Any) -> Scorer:
    if config.backend == "http":
        return HttpScorer(config)
    return MockScorer(config, **mock_options)


@dataclass
class Outcome:
    value: Any = None
    error: BaseException | None = None


def map_bounded(fn: Callable[[T], R], items: Sequence[T], max_in_flight: int) -> list[Outcome]:
    """Apply ``fn`` to every item with bounded concurrency, keeping input order.

    Exceptions are captured per item rather than raised.
    """

    def run(item: T) -> Outcome:
        try:
            return Outcome(fn(item))
        except Exception as exc:  # noqa: BLE001 - reported per item
            return Outcome(error=exc)

    if max_in_flight <= 1 or len(items) <= 1:
        return [run(x) for x in items]
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        return list(pool.map(run, items))
