from __future__ import annotations

import json

import pytest
import requests
from hypothesis import given
from hypothesis import strategies as st

from cigar.domain import RepairConfig
from cigar.errors import (
    BudgetExceeded,
    ProviderError,
    ReplayMiss,
    ScriptExhausted,
    TransportError,
)
from cigar.llm import (
    CachedSampler,
    HttpProvider,
    SampleRequest,
    ScriptedProvider,
    ScriptedReply,
    Usage,
    extract_patch,
    messages_from_prompt,
    request_fingerprint,
    sum_usage,
    write_script,
)
from cigar.prompts import build_initiation
from cigar.store import CacheStore, StoreMode

from test_prompts import make_bundle


def make_request(n=1, sequence=(1,), temperature=1.0, limit=1_000_000):
    config = RepairConfig(prompt_token_limit=limit)
    prompt = build_initiation(make_bundle(), config)
    return SampleRequest(
        prompt=prompt, n=n, temperature=temperature, model_id="test-model", sequence=sequence
    )


class TestScriptedProvider:
    def test_single_primed_reply_echoes(self):
        provider = ScriptedProvider([ScriptedReply(("the reply",), Usage(10, 5))])
        response = provider.sample(make_request(n=1))
        assert response.choices == ("the reply",)
        assert response.usage == Usage(10, 5)
        assert response.sub_calls == 1

    def test_cap_stitching_five_subcalls(self):
        replies = [
            ScriptedReply(tuple(f"reply-{i}-{j}" for j in range(10)), Usage(100, 10 + i))
            for i in range(5)
        ]
        provider = ScriptedProvider(replies, max_per_call=10)
        response = provider.sample(make_request(n=50))
        assert len(response.choices) == 50
        assert provider.calls_made == 5
        assert response.sub_calls == 5
        assert response.usage == sum_usage(r.usage for r in replies)
        assert response.usage == Usage(500, 60)

    def test_exhaustion_fails_loudly(self):
        provider = ScriptedProvider([ScriptedReply(("only",), Usage(1, 1))])
        provider.sample(make_request())
        with pytest.raises(ScriptExhausted):
            provider.sample(make_request(sequence=(2,)))

    def test_fingerprint_assertion(self):
        request = make_request()
        good = ScriptedProvider(
            [ScriptedReply(("ok",), Usage(1, 1), fingerprint=request_fingerprint(request))]
        )
        assert good.sample(request).choices == ("ok",)
        bad = ScriptedProvider([ScriptedReply(("ok",), Usage(1, 1), fingerprint="f" * 32)])
        with pytest.raises(ProviderError, match="fingerprint"):
            bad.sample(request)

    def test_script_file_roundtrip(self, tmp_path):
        path = write_script(
            [
                {"choices": ["a", "b"], "usage": {"input_tokens": 7, "output_tokens": 3}},
                {"choices": ["c"], "usage": {"input_tokens": 1, "output_tokens": 1}},
            ],
            tmp_path / "replies.jsonl",
        )
        provider = ScriptedProvider.from_file(path)
        first = provider.sample(make_request(n=2))
        assert first.choices == ("a", "b")
        assert first.usage == Usage(7, 3)


class TestFingerprint:
    def test_stable(self):
        assert request_fingerprint(make_request()) == request_fingerprint(make_request())
        assert len(request_fingerprint(make_request())) == 32

    def test_sensitive_to_fields(self):
        base = request_fingerprint(make_request())
        assert request_fingerprint(make_request(n=2)) != base
        assert request_fingerprint(make_request(sequence=(2,))) != base
        assert request_fingerprint(make_request(temperature=0.5)) != base


class FakeResponse:
    def __init__(self, status_code=200, payload=None, text=None):
        self.status_code = status_code
        self.text = text if text is not None else json.dumps(payload or {})


def ok_payload(choices, usage=None):
    payload = {"choices": [{"message": {"content": c}} for c in choices]}
    if usage is not None:
        payload["usage"] = usage
    return payload


class FakeSession:
    """Yields queued outcomes; an exception instance is raised, a
    FakeResponse is returned."""

    def __init__(self, outcomes):
        self.outcomes = list(outcomes)
        self.calls = 0
        self.bodies = []

    def post(self, url, json=None, headers=None, timeout=None):
        self.calls += 1
        self.bodies.append(json)
        outcome = self.outcomes.pop(0)
        if isinstance(outcome, Exception):
            raise outcome
        return outcome


def http_provider(session, **kwargs):
    config = RepairConfig(max_retries=3, endpoint_url="http://fake.test/v1")
    return HttpProvider(config, session=session, api_key="k", backoff_base=0.0, **kwargs)


class TestHttpProvider:
    def test_two_transport_failures_then_success(self):
        session = FakeSession(
            [
                requests.ConnectionError("down"),
                requests.ConnectionError("still down"),
                FakeResponse(payload=ok_payload(["fix"], {"prompt_tokens": 9, "completion_tokens": 4})),
            ]
        )
        response = http_provider(session).sample(make_request())
        assert response.choices == ("fix",)
        assert session.calls == 3
        assert response.usage == Usage(9, 4)

    def test_transport_error_after_retries(self):
        session = FakeSession([requests.ConnectionError("down")] * 10)
        with pytest.raises(TransportError):
            http_provider(session).sample(make_request())
        assert session.calls == 4  # 1 attempt + 3 retries

    def test_non_retryable_status_raises_immediately(self):
        session = FakeSession([FakeResponse(status_code=401, text="no auth")])
        with pytest.raises(ProviderError) as excinfo:
            http_provider(session).sample(make_request())
        assert excinfo.value.status == 401
        assert session.calls == 1

    def test_retryable_status_then_success(self):
        session = FakeSession(
            [
                FakeResponse(status_code=429, text="slow down"),
                FakeResponse(payload=ok_payload(["fix"], {"prompt_tokens": 1, "completion_tokens": 1})),
            ]
        )
        assert http_provider(session).sample(make_request()).choices == ("fix",)
        assert session.calls == 2

    def test_context_length_maps_to_budget_exceeded(self):
        session = FakeSession(
            [FakeResponse(status_code=400, text="This model's maximum context length is 4096")]
        )
        with pytest.raises(BudgetExceeded):
            http_provider(session).sample(make_request())

    def test_local_usage_estimate_when_provider_reports_none(self):
        session = FakeSession([FakeResponse(payload=ok_payload(["return x;"]))])
        request = make_request()
        response = http_provider(session).sample(request)
        assert response.usage == Usage(request.prompt.token_count, 3)

    def test_request_body_shape(self):
        session = FakeSession(
            [FakeResponse(payload=ok_payload(["x"], {"prompt_tokens": 1, "completion_tokens": 1}))]
        )
        request = make_request(n=5, temperature=0.7)
        http_provider(session).sample(request)
        body = session.bodies[0]
        assert body["model"] == "test-model"
        assert body["n"] == 5
        assert body["temperature"] == 0.7
        assert body["messages"] == messages_from_prompt(request.prompt)
        assert body["messages"][0]["role"] == "system"
        assert all(m["role"] == "user" for m in body["messages"][1:])


class TestCachedSampler:
    def test_record_then_hit_bypasses_network(self, tmp_path):
        store = CacheStore(tmp_path / "cache", StoreMode.RECORD)
        provider = ScriptedProvider([ScriptedReply(("fix",), Usage(5, 2))])
        sampler = CachedSampler(provider, store, "demo")
        request = make_request()
        first = sampler.sample(request)
        second = sampler.sample(request)  # identical fingerprint -> cache hit
        assert first == second
        assert provider.calls_made == 1

    def test_replay_cold_cache_misses(self, tmp_path):
        store = CacheStore(tmp_path / "cache", StoreMode.REPLAY)
        sampler = CachedSampler(None, store, "demo")
        with pytest.raises(ReplayMiss):
            sampler.sample(make_request())

    def test_replay_warm_cache_serves_identical_response(self, tmp_path):
        recorder = CacheStore(tmp_path / "cache", StoreMode.RECORD)
        provider = ScriptedProvider([ScriptedReply(("fix",), Usage(5, 2))])
        recorded = CachedSampler(provider, recorder, "demo").sample(make_request())

        replayer = CacheStore(tmp_path / "cache", StoreMode.REPLAY)
        sentinel = ScriptedProvider([])  # any call would raise ScriptExhausted
        replayed = CachedSampler(sentinel, replayer, "demo").sample(make_request())
        assert replayed == recorded
        assert sentinel.calls_made == 0

    def test_passthrough_leaves_store_untouched(self, tmp_path):
        store = CacheStore(tmp_path / "cache", StoreMode.PASSTHROUGH)
        provider = ScriptedProvider([ScriptedReply(("fix",), Usage(5, 2))] * 2)
        sampler = CachedSampler(provider, store, "demo")
        sampler.sample(make_request())
        sampler.sample(make_request())
        assert provider.calls_made == 2
        assert not (tmp_path / "cache").exists()


class TestExtractPatch:
    def test_single_fence(self):
        assert extract_patch("Here is the fix:\n```\nreturn a+b;\n```") == "return a+b;"

    def test_language_tag_stripped(self):
        assert extract_patch("```java\nint x = 1;\n```") == "int x = 1;"

    def test_first_of_two_fences_wins(self):
        text = "```\nfirst();\n```\nor maybe\n```\nsecond();\n```"
        assert extract_patch(text) == "first();"

    def test_pure_prose_fails(self):
        assert extract_patch("I cannot help with that request. Sorry about it.") is None
        assert extract_patch("") is None

    def test_fenceless_code_run_extracted(self):
        text = "The fix is simple:\nresult = a + b\nreturn result\nHope that helps!"
        assert extract_patch(text) == "result = a + b\nreturn result"

    def test_longest_run_wins(self):
        text = "x = 1\nSome prose explains things here.\ny = 2\nz = 3"
        assert extract_patch(text) == "y = 2\nz = 3"

    def test_blank_lines_inside_fence_preserved(self):
        assert extract_patch("```\na = 1\n\nb = 2\n```") == "a = 1\n\nb = 2"

    def test_surrounding_blank_lines_trimmed(self):
        assert extract_patch("```\n\n\nreturn 1;\n\n```") == "return 1;"

    code_line = st.from_regex(r"[a-z_][a-z0-9_]{0,10} = [0-9]{1,3}", fullmatch=True)

    @given(st.lists(code_line, min_size=1, max_size=6))
    def test_idempotent_on_code_output(self, lines):
        text = "\n".join(lines)
        once = extract_patch(text)
        assert once is not None
        assert extract_patch(once) == once

    @given(st.lists(code_line, min_size=1, max_size=6))
    def test_idempotent_after_fence_extraction(self, lines):
        fenced = "Sure thing!\n```python\n" + "\n".join(lines) + "\n```\nEnjoy."
        once = extract_patch(fenced)
        assert once == "\n".join(lines)
        assert extract_patch(once) == once


class TestStitchingResilience:
    def test_partial_collection_kept_when_subcall_fails(self):
        class FailingThird(ScriptedProvider):
            def _call(self, req, n):
                if self.calls_made == 2:
                    raise TransportError("mid-stitch outage")
                return super()._call(req, n)

        replies = [
            ScriptedReply(tuple(f"r{i}-{j}" for j in range(10)), Usage(10, 1)) for i in range(5)
        ]
        provider = FailingThird(replies, max_per_call=10)
        response = provider.sample(make_request(n=50))
        assert len(response.choices) == 20
        assert response.sub_calls == 2
        assert response.usage == Usage(20, 2)

    def test_failure_on_first_subcall_propagates(self):
        class AlwaysDown(ScriptedProvider):
            def _call(self, req, n):
                raise TransportError("down")

        with pytest.raises(TransportError):
            AlwaysDown([], max_per_call=10).sample(make_request(n=50))


class TestRateLimiter:
    def test_tokens_deplete_without_blocking_under_capacity(self):
        from cigar.llm import RateLimiter

        limiter = RateLimiter(requests_per_minute=600_000)
        import time as _time

        started = _time.monotonic()
        for _ in range(50):
            limiter.acquire()
        assert _time.monotonic() - started < 0.5

    def test_wired_from_config(self):
        config = RepairConfig(requests_per_minute=60_000)
        provider = HttpProvider(config, session=FakeSession([]), api_key="k")
        assert provider._limiter is not None
        provider = HttpProvider(RepairConfig(), session=FakeSession([]), api_key="k")
        assert provider._limiter is None


def test_api_key_read_from_environment(monkeypatch):
    monkeypatch.setenv("CIGAR_API_KEY", "secret-token")
    session = FakeSession(
        [FakeResponse(payload=ok_payload(["x"], {"prompt_tokens": 1, "completion_tokens": 1}))]
    )

    class HeaderCapture(FakeSession):
        def post(self, url, json=None, headers=None, timeout=None):
            self.headers = headers
            return super().post(url, json=json, headers=headers, timeout=timeout)

    capture = HeaderCapture(session.outcomes)
    provider = HttpProvider(RepairConfig(), session=capture)
    provider.sample(make_request())
    assert capture.headers["Authorization"] == "Bearer secret-token"
