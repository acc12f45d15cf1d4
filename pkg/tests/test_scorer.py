import math
import threading
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relforge.scorer import (
    ENV_URL,
    ContextLengthExceeded,
    Embedding,
    HttpScorer,
    MalformedResponse,
    MockScorer,
    ScorerConfig,
    TokenDistribution,
    TransportError,
    make_scorer,
    map_bounded,
)

from .stub_server import serve


def test_mock_distribution_top_k():
    m = MockScorer(ScorerConfig(top_k=2), distribution={"1": 0.6, "0": 0.3, "x": 0.05})
    d = m.next_token_distribution("doc")
    assert d.entries == {"1": 0.6, "0": 0.3}
    assert d.get("x") == 0.0 and math.isclose(d.coverage, 0.9)


def test_token_distribution_validation():
    with pytest.raises(ValueError):
        TokenDistribution({"a": 0.7, "b": 0.6})
    with pytest.raises(ValueError):
        TokenDistribution({"a": -0.1})
    d = TokenDistribution.from_logprobs([("a", math.log(0.5)), ("a", math.log(0.4)), ("b", -math.inf)])
    assert d.entries == {"a": 0.5, "b": 0.0}


def test_mock_context_limit():
    m = MockScorer(ScorerConfig(context_limit=3))
    assert m.next_token_distribution("a b c").get("1") == 0.5
    for call in (lambda: m.next_token_distribution("a b c d"),
                 lambda: m.continuation_logprob("a b c d", "1"),
                 lambda: m.embed_last_token("a b c d")):
        with pytest.raises(ContextLengthExceeded):
            call()


def test_continuation_two_steps_of_one_half():
    m = MockScorer(step_tables=[0.5, 0.5])
    assert m.continuation_logprob("doc", "42") == pytest.approx(math.log(0.25), abs=1e-12)


def test_continuation_per_character_tables():
    m = MockScorer(step_tables=[{"1": 0.8, "2": 0.1}, {"0": 0.5}], default_step_prob=0.01)
    assert m.continuation_logprob("d", "10") == pytest.approx(math.log(0.8) + math.log(0.5))
    assert m.continuation_logprob("d", "2") == pytest.approx(math.log(0.1))
    assert m.continuation_logprob("d", "3") == pytest.approx(math.log(0.01))
    assert MockScorer(step_tables=[0.0]).continuation_logprob("d", "1") == -math.inf


@settings(max_examples=100)
@given(probs=st.lists(st.floats(0.01, 1.0), min_size=1, max_size=6), k=st.integers(1, 6))
def test_logprob_never_increases_when_extending(probs, k):
    m = MockScorer(step_tables=probs, default_step_prob=0.5)
    text = "7" * (k + 1)
    assert m.continuation_logprob("d", text) <= m.continuation_logprob("d", text[:-1])


def test_empty_inputs_rejected():
    m = MockScorer()
    with pytest.raises(ValueError):
        m.next_token_distribution("")
    with pytest.raises(ValueError):
        m.continuation_logprob("doc", "")


def test_embedding_deterministic_and_distinct():
    m = MockScorer(ScorerConfig(embed_dim=32))
    a, b = m.embed_last_token("alpha"), m.embed_last_token("alpha")
    assert a.dim == 32 and np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, m.embed_last_token("beta").values)
    other = MockScorer(ScorerConfig(embed_dim=32, seed=1)).embed_last_token("alpha")
    assert not np.array_equal(a.values, other.values)
    with pytest.raises(ValueError):
        a.values[0] = 1.0


def test_embedding_rejects_non_finite():
    with pytest.raises(ValueError):
        Embedding(np.array([1.0, np.nan]))


def test_config_validation(monkeypatch):
    monkeypatch.delenv(ENV_URL, raising=False)
    with pytest.raises(ValueError):
        ScorerConfig(backend="grpc")
    with pytest.raises(ValueError):
        ScorerConfig(backend="http")
    monkeypatch.setenv(ENV_URL, "http://localhost:1")
    assert isinstance(make_scorer(ScorerConfig(backend="http")), HttpScorer)
    assert isinstance(make_scorer(ScorerConfig()), MockScorer)


def test_http_round_trip_matches_mock(monkeypatch):
    monkeypatch.delenv(ENV_URL, raising=False)
    mock = MockScorer(ScorerConfig(embed_dim=8), distribution={"1": 0.7, "0": 0.2}, step_tables=[0.5, 0.5])
    with serve(mock) as srv:
        record = []
        http = HttpScorer(ScorerConfig(backend="http", endpoint=srv.url, top_k=5), record=record)
        d = http.next_token_distribution("some doc")
        assert d.get("1") == pytest.approx(0.7) and d.get("0") == pytest.approx(0.2)
        assert http.continuation_logprob("some doc", "12") == pytest.approx(math.log(0.25))
        e = http.embed_last_token("some doc")
        assert np.allclose(e.values, mock.embed_last_token("some doc").values)
        assert [p for p, _ in srv.requests] == ["/v1/next_token", "/v1/logprob", "/v1/embed"]
        assert srv.requests[0][1]["top_k"] == 5
        assert len(record) == 3


def test_http_413_is_context_length(monkeypatch):
    monkeypatch.delenv(ENV_URL, raising=False)
    with serve(MockScorer(), reject=lambda path, req: "huge" in req["text"]) as srv:
        http = HttpScorer(ScorerConfig(backend="http", endpoint=srv.url))
        with pytest.raises(ContextLengthExceeded):
            http.next_token_distribution("huge doc")
        assert http.next_token_distribution("small doc").get("1") == 0.5


def test_http_errors_are_transport(monkeypatch):
    monkeypatch.delenv(ENV_URL, raising=False)
    with serve(MockScorer(), fail_status=500) as srv:
        http = HttpScorer(ScorerConfig(backend="http", endpoint=srv.url))
        with pytest.raises(TransportError):
            http.embed_last_token("x")
    http = HttpScorer(ScorerConfig(backend="http", endpoint="http://127.0.0.1:9", timeout=2))
    with pytest.raises(TransportError):
        http.next_token_distribution("x")


def test_http_mismatched_id(monkeypatch):
    monkeypatch.delenv(ENV_URL, raising=False)
    with serve(MockScorer(), echo_id=False) as srv:
        http = HttpScorer(ScorerConfig(backend="http", endpoint=srv.url))
        with pytest.raises(MalformedResponse):
            http.next_token_distribution("x")


def test_env_overrides_endpoint(monkeypatch):
    with serve(MockScorer()) as srv:
        monkeypatch.setenv(ENV_URL, srv.url)
        http = HttpScorer(ScorerConfig(backend="http", endpoint="http://127.0.0.1:9"))
        assert http.next_token_distribution("x").get("1") == 0.5


def test_map_bounded_order_errors_and_concurrency():
    live, peak = [0], [0]
    lock = threading.Lock()

    def fn(i):
        with lock:
            live[0] += 1
            peak[0] = max(peak[0], live[0])
        time.sleep(0.01)
        with lock:
            live[0] -= 1
        if i == 3:
            raise RuntimeError("bad item")
        return i * i

    out = map_bounded(fn, list(range(12)), max_in_flight=3)
    assert [o.value for o in out] == [i * i if i != 3 else None for i in range(12)]
    assert isinstance(out[3].error, RuntimeError)
    assert 1 < peak[0] <= 3
    assert [o.value for o in map_bounded(lambda x: -x, [1, 2], 1)] == [-1, -2]


def test_one_character_changes_the_embedding():
    rng = np.random.default_rng(0)
    m = MockScorer()
    alphabet = list("abcdefghij{}\":, 0123456789")
    for _ in range(1000):
        text = "".join(rng.choice(alphabet, size=int(rng.integers(1, 40))))
        i = int(rng.integers(len(text)))
        other = text[:i] + ("X" if text[i] != "X" else "Y") + text[i + 1:]
        assert not np.array_equal(m.embed_last_token(text).values, m.embed_last_token(other).values)
