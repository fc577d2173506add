"""Completion providers and response handling.

HttpProvider talks to an OpenAI-compatible /chat/completions endpoint with
retries, exponential backoff, and an optional requests-per-minute bucket.
ScriptedProvider replays an ordered script of canned replies for offline,
deterministic runs. CachedSampler routes either provider through the cache
store according to its mode (record / replay / passthrough).
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Protocol

import requests

from .domain import RepairConfig
from .errors import BudgetExceeded, ProviderError, ReplayMiss, ScriptExhausted, TransportError
from .prompts import PartLabel, Prompt
from .store import CacheRecord, CacheStore, RecordKind, StoreMode
from .tokenizer import count_tokens

logger = logging.getLogger(__name__)

API_KEY_ENV = "CIGAR_API_KEY"
DEFAULT_BACKOFF_BASE = 2.0
RETRYABLE_STATUSES = {429, 500, 502, 503, 504}
CONTEXT_LENGTH_HINTS = ("context length", "maximum context", "too many tokens")


@dataclass(frozen=True)
class Usage:
    input_tokens: int
    output_tokens: int

    @property
    def total(self) -> int:
        return self.input_tokens + self.output_tokens


def sum_usage(usages: Iterable[Usage]) -> Usage:
    input_total = output_total = 0
    for usage in usages:
        input_total += usage.input_tokens
        output_total += usage.output_tokens
    return Usage(input_total, output_total)


@dataclass(frozen=True)
class SampleRequest:
    """One logical sampling request. sequence is the request's position in
    the run (overall invocation index), so that repeated sends of an
    identical prompt stay distinguishable in the cache."""

    prompt: Prompt
    n: int
    temperature: float
    model_id: str
    sequence: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError("n must be >= 1")


@dataclass(frozen=True)
class SampleResponse:
    choices: tuple[str, ...]
    usage: Usage | None
    sub_usages: tuple[Usage, ...]
    request_fingerprint: str

    @property
    def sub_calls(self) -> int:
        return len(self.sub_usages)


def request_fingerprint(req: SampleRequest) -> str:
    """Stable 128-bit fingerprint of a sampling request."""
    payload = json.dumps(
        {
            "model": req.model_id,
            "prompt": [list(part) for part in req.prompt.serialized_parts()],
            "n": req.n,
            "temperature": req.temperature,
            "template_version": req.prompt.template_version,
            "sequence": list(req.sequence),
        },
        sort_keys=True,
        ensure_ascii=False,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:32]


def messages_from_prompt(prompt: Prompt) -> list[dict[str, str]]:
    """Chat messages: the system part becomes the system message, every
    other part becomes its own user message."""
    messages = []
    for part in prompt.parts:
        role = "system" if part.label is PartLabel.SYSTEM_MESSAGE else "user"
        messages.append({"role": role, "content": part.text})
    return messages


class Sampler(Protocol):
    def sample(self, req: SampleRequest) -> SampleResponse: ...


class _BaseProvider:
    """Shared sampling loop: when the provider caps n per call, keep calling
    until the requested number of choices is collected, aggregating usage."""

    max_per_call: int | None = None

    def _call(self, req: SampleRequest, n: int) -> tuple[list[str], Usage]:
        raise NotImplementedError

    def sample(self, req: SampleRequest) -> SampleResponse:
        fingerprint = request_fingerprint(req)
        choices: list[str] = []
        sub_usages: list[Usage] = []
        while len(choices) < req.n:
            ask = req.n - len(choices)
            if self.max_per_call is not None:
                ask = min(ask, self.max_per_call)
            try:
                got, usage = self._call(req, ask)
            except (TransportError, ProviderError) as exc:
                if not choices:
                    raise
                # Retries exhausted mid-collection: keep what we already have.
                logger.warning(
                    "keeping %d/%d choices after sub-call failure: %s", len(choices), req.n, exc
                )
                break
            if not got:
                raise ProviderError("provider returned no choices")
            choices.extend(got[:ask])
            sub_usages.append(usage)
            if self.max_per_call is None:
                break
        return SampleResponse(
            choices=tuple(choices),
            usage=sum_usage(sub_usages),
            sub_usages=tuple(sub_usages),
            request_fingerprint=fingerprint,
        )


class RateLimiter:
    """Token bucket limited to a number of requests per minute."""

    def __init__(self, requests_per_minute: int):
        self._capacity = float(requests_per_minute)
        self._tokens = float(requests_per_minute)
        self._rate = requests_per_minute / 60.0
        self._updated = time.monotonic()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = time.monotonic()
                self._tokens = min(self._capacity, self._tokens + (now - self._updated) * self._rate)
                self._updated = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self._rate
            time.sleep(wait)


class HttpProvider(_BaseProvider):
    """Client for an OpenAI-compatible chat completions endpoint.

    Transport failures and retryable statuses are retried with exponential
    backoff up to config.max_retries extra attempts; other non-2xx replies
    raise ProviderError immediately. A 400 mentioning the context length
    raises BudgetExceeded.
    """

    def __init__(
        self,
        config: RepairConfig,
        *,
        session: Any | None = None,
        api_key: str | None = None,
        max_per_call: int | None = None,
        backoff_base: float = DEFAULT_BACKOFF_BASE,
        rate_limiter: RateLimiter | None = None,
    ):
        self._config = config
        self._session = session or requests.Session()
        self._api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        self.max_per_call = max_per_call
        self._backoff_base = backoff_base
        if rate_limiter is None and config.requests_per_minute:
            rate_limiter = RateLimiter(config.requests_per_minute)
        self._limiter = rate_limiter

    def _sleep(self, attempt: int) -> None:
        time.sleep(self._backoff_base * (2**attempt))

    def _call(self, req: SampleRequest, n: int) -> tuple[list[str], Usage]:
        url = self._config.endpoint_url.rstrip("/") + "/chat/completions"
        body = {
            "model": req.model_id,
            "messages": messages_from_prompt(req.prompt),
            "n": n,
            "temperature": req.temperature,
        }
        headers = {"Content-Type": "application/json"}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"

        attempts = self._config.max_retries + 1
        last_error: Exception | None = None
        for attempt in range(attempts):
            if self._limiter is not None:
                self._limiter.acquire()
            try:
                response = self._session.post(
                    url, json=body, headers=headers, timeout=self._config.request_timeout
                )
            except requests.RequestException as exc:
                last_error = exc
                logger.warning("attempt %d/%d failed: %s", attempt + 1, attempts, exc)
                if attempt + 1 < attempts:
                    self._sleep(attempt)
                continue

            if response.status_code == 200:
                return self._parse(req, response.text)
            body_text = response.text
            if response.status_code == 400 and any(
                hint in body_text.lower() for hint in CONTEXT_LENGTH_HINTS
            ):
                raise BudgetExceeded(f"provider rejected prompt as over context length: {body_text}")
            if response.status_code in RETRYABLE_STATUSES and attempt + 1 < attempts:
                logger.warning(
                    "attempt %d/%d got HTTP %d, retrying", attempt + 1, attempts, response.status_code
                )
                self._sleep(attempt)
                continue
            raise ProviderError(
                f"HTTP {response.status_code} from provider",
                status=response.status_code,
                body=body_text,
            )
        raise TransportError(f"request failed after {attempts} attempts: {last_error}")

    def _parse(self, req: SampleRequest, text: str) -> tuple[list[str], Usage]:
        try:
            data = json.loads(text)
            choices = [choice["message"]["content"] for choice in data["choices"]]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ProviderError(f"malformed provider response: {exc}", body=text[:2000]) from exc
        usage_data = data.get("usage")
        if usage_data and "prompt_tokens" in usage_data:
            usage = Usage(usage_data["prompt_tokens"], usage_data.get("completion_tokens", 0))
        else:
            # No provider-reported usage: fall back to the local estimate.
            scheme = self._config.tokenizer_scheme
            usage = Usage(
                req.prompt.token_count,
                sum(count_tokens(choice, scheme) for choice in choices),
            )
        return choices, usage


@dataclass(frozen=True)
class ScriptedReply:
    choices: tuple[str, ...]
    usage: Usage
    fingerprint: str | None = None

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ScriptedReply":
        usage = data.get("usage", {})
        return cls(
            choices=tuple(data["choices"]),
            usage=Usage(usage.get("input_tokens", 0), usage.get("output_tokens", 0)),
            fingerprint=data.get("fingerprint"),
        )


class ScriptedProvider(_BaseProvider):
    """Deterministic provider fed by an ordered script of replies.

    Each underlying call consumes the next reply in order; a reply carrying
    a fingerprint additionally asserts it matches the incoming request.
    Running out of script raises ScriptExhausted so tests fail loudly.
    """

    def __init__(self, replies: Iterable[ScriptedReply | dict], max_per_call: int | None = None):
        self._replies = [
            reply if isinstance(reply, ScriptedReply) else ScriptedReply.from_dict(reply)
            for reply in replies
        ]
        self.max_per_call = max_per_call
        self._cursor = 0
        self._calls = 0
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path, max_per_call: int | None = None) -> "ScriptedProvider":
        replies = []
        with open(path, encoding="utf-8") as handle:
            for line in handle:
                line = line.strip()
                if line:
                    replies.append(ScriptedReply.from_dict(json.loads(line)))
        return cls(replies, max_per_call=max_per_call)

    @property
    def calls_made(self) -> int:
        return self._calls

    def _call(self, req: SampleRequest, n: int) -> tuple[list[str], Usage]:
        with self._lock:
            if self._cursor >= len(self._replies):
                raise ScriptExhausted(
                    f"script exhausted after {self._cursor} replies "
                    f"(request n={n}, sequence={req.sequence})"
                )
            reply = self._replies[self._cursor]
            self._cursor += 1
            self._calls += 1
        if reply.fingerprint is not None:
            actual = request_fingerprint(req)
            if reply.fingerprint != actual:
                raise ProviderError(
                    f"scripted reply expected fingerprint {reply.fingerprint}, got {actual}"
                )
        return list(reply.choices[:n]), reply.usage


def write_script(replies: Iterable[dict[str, Any]], path: str | Path) -> Path:
    """Write a JSON-lines provider script (one reply per line)."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as handle:
        for reply in replies:
            handle.write(json.dumps(reply, ensure_ascii=False, sort_keys=True) + "\n")
    return path


class CachedSampler:
    """Routes sampling through the cache store according to its mode.

    Record: hits are served from the store (bypassing the network), misses
    go to the provider and are stored. Replay: misses raise ReplayMiss.
    Passthrough: the store is never touched.
    """

    def __init__(self, provider: Sampler | None, store: CacheStore | None, bug_id: str):
        self._provider = provider
        self._store = store
        self._bug_id = bug_id

    def sample(self, req: SampleRequest) -> SampleResponse:
        fingerprint = request_fingerprint(req)
        store = self._store
        if store is not None and store.mode() is not StoreMode.PASSTHROUGH:
            record = store.get(fingerprint)
            if record is not None:
                return _response_from_payload(record.payload, fingerprint)
            if store.mode() is StoreMode.REPLAY:
                raise ReplayMiss(f"no cached exchange for fingerprint {fingerprint}")
        if self._provider is None:
            raise ProviderError("no provider configured and the cache did not answer")
        response = self._provider.sample(req)
        if store is not None and store.mode() is StoreMode.RECORD:
            store.put(
                CacheRecord.fresh(
                    fingerprint=fingerprint,
                    kind=RecordKind.LLM_EXCHANGE,
                    bug_id=self._bug_id,
                    payload=_exchange_payload(req, response),
                    template_version=req.prompt.template_version,
                )
            )
        return response


def _exchange_payload(req: SampleRequest, response: SampleResponse) -> dict[str, Any]:
    return {
        "request": {
            "model": req.model_id,
            "n": req.n,
            "temperature": req.temperature,
            "sequence": list(req.sequence),
            "prompt_parts": [list(part) for part in req.prompt.serialized_parts()],
            "prompt_tokens_local": req.prompt.token_count,
        },
        "response": {
            "choices": list(response.choices),
            "usage": (
                [response.usage.input_tokens, response.usage.output_tokens]
                if response.usage
                else None
            ),
            "sub_usages": [[u.input_tokens, u.output_tokens] for u in response.sub_usages],
        },
    }


def _response_from_payload(payload: dict[str, Any], fingerprint: str) -> SampleResponse:
    response = payload["response"]
    usage = response.get("usage")
    return SampleResponse(
        choices=tuple(response["choices"]),
        usage=Usage(usage[0], usage[1]) if usage else None,
        sub_usages=tuple(Usage(i, o) for i, o in response.get("sub_usages", [])),
        request_fingerprint=fingerprint,
    )


_FENCE = re.compile(r"```[ \t]*[\w+-]*[ \t]*\r?\n(.*?)```", re.DOTALL)
_CODE_CHARS = ("{", "(", "=", ";")
_KEYWORD_LIKE = re.compile(r"[a-z_]\w*$")


def _looks_like_code(line: str) -> bool:
    stripped = line.strip()
    if not stripped:
        return False
    if any(ch in stripped for ch in _CODE_CHARS):
        return True
    first_word = stripped.split()[0]
    return bool(_KEYWORD_LIKE.match(first_word))


def extract_patch(response_text: str) -> str | None:
    """Pull the patch out of a model reply.

    The contents of the first fenced code block win (language tag stripped);
    otherwise the longest contiguous run of code-looking lines. None means
    extraction failed and the candidate must not be tested.
    """
    match = _FENCE.search(response_text)
    if match:
        return _strip_blank_edges(match.group(1))

    lines = response_text.split("\n")
    runs: list[list[str]] = []
    current: list[str] = []
    for line in lines:
        if _looks_like_code(line) or (current and not line.strip()):
            current.append(line)
        else:
            if current:
                runs.append(current)
            current = []
    if current:
        runs.append(current)

    best: str | None = None
    best_len = 0
    for run in runs:
        trimmed = _strip_blank_edges("\n".join(run))
        if not trimmed:
            continue
        size = len(trimmed.split("\n"))
        if size > best_len:
            best = trimmed
            best_len = size
    return best


def _strip_blank_edges(text: str) -> str:
    lines = text.split("\n")
    start = 0
    end = len(lines)
    while start < end and not lines[start].strip():
        start += 1
    while end > start and not lines[end - 1].strip():
        end -= 1
    return "\n".join(lines[start:end])
