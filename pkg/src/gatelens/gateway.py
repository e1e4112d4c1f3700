"""Gateway core: route, proxy, measure, sample.

The gateway sits in front of pluggable providers. Every handled request
produces exactly one operational metrics record, success or failure;
a deterministic hash of the request id decides which requests become
sessions for the judge. Failover walks providers in priority order, one
attempt each; admission is token-bucket rate limited per (user, provider).
"""

from __future__ import annotations

import hashlib
import itertools
import logging
import threading
import time
import uuid
from dataclasses import dataclass, field
from typing import Callable, Iterator

import httpx

from .store import GatewayMetricsRecord, Store, utcnow_iso
from .tokens import Tokenizer, approx_token_count, conversation_tokens

logger = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant", "tool")


class GatewayError(Exception):
    def __init__(self, message: str, error_type: str = "gateway_error", status: int = 502):
        super().__init__(message)
        self.error_type = error_type
        self.status = status


class AllProvidersFailed(GatewayError):
    def __init__(self, message: str, timed_out: bool = False):
        super().__init__(message, error_type="all_providers_failed", status=502)
        self.timed_out = timed_out


class RateLimited(GatewayError):
    def __init__(self, retry_after: float):
        super().__init__(
            f"rate limited; retry after {retry_after:.3f}s",
            error_type="rate_limited",
            status=429,
        )
        self.retry_after = retry_after


class ProviderError(Exception):
    """A single provider attempt failed."""

    def __init__(self, message: str, timed_out: bool = False):
        super().__init__(message)
        self.timed_out = timed_out


@dataclass
class ChatRequest:
    model: str
    messages: list[dict]
    user_id: str = "anonymous"
    request_id: str = field(default_factory=lambda: uuid.uuid4().hex)
    stream: bool = False

    def validate(self) -> None:
        if not self.messages:
            raise ValueError("request needs at least one message")
        for msg in self.messages:
            if msg.get("role") not in ROLES:
                raise ValueError(f"unknown role {msg.get('role')!r}")


@dataclass
class SamplingConfig:
    fraction: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError("sampling fraction must lie in [0, 1]")


def sample_decision(request_id: str, cfg: SamplingConfig) -> bool:
    """Deterministic sampling: hash (seed, request id) into [0, 1).

    The same id and seed always land on the same side of the fraction, so
    replays and tests reproduce exactly. No RNG state is involved.
    """
    if cfg.fraction <= 0.0:
        return False
    if cfg.fraction >= 1.0:
        return True
    digest = hashlib.blake2b(
        request_id.encode("utf-8"),
        digest_size=8,
        salt=cfg.seed.to_bytes(8, "little", signed=True),
    ).digest()
    value = int.from_bytes(digest, "big") / 2.0**64
    return value < cfg.fraction


@dataclass
class DerivedMetrics:
    latency: float
    ttft: float | None
    throughput: float | None
    generation_speed: float | None


def compute_metrics(
    start: float,
    end: float,
    total_tokens: int,
    completion_tokens: int,
    first_token_time: float | None = None,
) -> DerivedMetrics:
    """Latency, TTFT, end-to-end throughput, and generation speed.

    Throughput is total tokens over latency; generation speed is completion
    tokens over the decode window after the first token. Both degrade to
    None when their denominator is absent or zero.
    """
    if end < start:
        raise ValueError("end time precedes start time")
    if first_token_time is not None and not (start <= first_token_time <= end):
        raise ValueError("first token time outside [start, end]")
    latency = end - start
    ttft = None if first_token_time is None else first_token_time - start
    throughput = total_tokens / latency if latency > 0 else None
    generation_speed = None
    if first_token_time is not None:
        decode_window = end - first_token_time
        if decode_window > 0:
            generation_speed = completion_tokens / decode_window
    return DerivedMetrics(latency, ttft, throughput, generation_speed)


# ---------------------------------------------------------------------------
# Rate limiting
# ---------------------------------------------------------------------------


class TokenBucket:
    """Classic token bucket: capacity burst, steady refill."""

    def __init__(self, rate_per_second: float, capacity: float, clock: Callable[[], float]):
        if rate_per_second <= 0 or capacity <= 0:
            raise ValueError("rate and capacity must be positive")
        self.rate = rate_per_second
        self.capacity = capacity
        self.clock = clock
        self.tokens = capacity
        self.updated = clock()
        self._lock = threading.Lock()

    def _refill(self) -> None:
        now = self.clock()
        self.tokens = min(self.capacity, self.tokens + (now - self.updated) * self.rate)
        self.updated = now

    def try_acquire(self, amount: float = 1.0) -> tuple[bool, float]:
        """Returns (admitted, retry_after_seconds)."""
        with self._lock:
            self._refill()
            if self.tokens >= amount:
                self.tokens -= amount
                return True, 0.0
            deficit = amount - self.tokens
            return False, deficit / self.rate

    def debit(self, amount: float) -> None:
        """Post-hoc consumption (used for token-per-minute accounting)."""
        with self._lock:
            self._refill()
            self.tokens -= amount

    def balance(self) -> float:
        with self._lock:
            self._refill()
            return self.tokens

    def depletion_wait(self) -> float:
        """Seconds until the balance climbs back above zero."""
        with self._lock:
            self._refill()
            return max(0.0, -self.tokens / self.rate)


@dataclass
class ProviderConfig:
    provider_id: str
    kind: str  # "mock" | "http"
    priority: int = 1
    region_id: str | None = None
    rate_limit_rps: float = 1000.0
    tokens_per_minute: float = 10_000_000.0
    # mock knobs
    completion_text: str | None = None
    completion_tokens: int | None = None
    first_token_delay: float = 0.0
    chunk_delay: float = 0.0
    fail_requests: int = 0
    fail_always: bool = False
    fail_with_timeout: bool = False
    report_usage: bool = True
    # http knobs
    url: str | None = None
    timeout: float = 30.0

    def __post_init__(self) -> None:
        if self.rate_limit_rps <= 0 or self.tokens_per_minute <= 0:
            raise ValueError("rate limits must be positive")


@dataclass
class ProviderResult:
    content: str
    usage: dict | None
    first_token_time: float | None


class MockProvider:
    """Scripted provider for tests and desk-scale experiments.

    Streams the completion in two chunks so TTFT is observable; optional
    delays and scripted failures exercise the failover and timeout paths.
    """

    def __init__(self, config: ProviderConfig, clock: Callable[[], float] = time.monotonic):
        self.config = config
        self.clock = clock
        self._calls = itertools.count(1)

    def _completion_for(self, request: ChatRequest) -> str:
        if self.config.completion_text is not None:
            return self.config.completion_text
        n_tokens = self.config.completion_tokens or 16
        # 4 chars per token keeps the approximate tokenizer exact.
        return ("tok " * n_tokens)[: n_tokens * 4]

    def complete(self, request: ChatRequest) -> Iterator[str]:
        call_index = next(self._calls)
        if self.config.fail_always or call_index <= self.config.fail_requests:
            if self.config.fail_with_timeout:
                raise ProviderError(f"{self.config.provider_id}: simulated timeout", timed_out=True)
            raise ProviderError(f"{self.config.provider_id}: simulated failure")
        content = self._completion_for(request)
        if self.config.first_token_delay > 0:
            time.sleep(self.config.first_token_delay)
        split = max(1, len(content) // 2)
        yield content[:split]
        if self.config.chunk_delay > 0:
            time.sleep(self.config.chunk_delay)
        yield content[split:]

    def usage_for(self, request: ChatRequest, content: str) -> dict | None:
        if not self.config.report_usage:
            return None
        return {
            "prompt_tokens": conversation_tokens(request.messages),
            "completion_tokens": self.config.completion_tokens
            if self.config.completion_tokens is not None
            else approx_token_count(content),
            "reasoning_tokens": 0,
        }


class HTTPProvider:
    """Generic OpenAI-style chat-completions provider over HTTP."""

    def __init__(self, config: ProviderConfig, client: httpx.Client | None = None):
        if not config.url:
            raise ValueError(f"provider '{config.provider_id}' needs a url")
        self.config = config
        self.client = client or httpx.Client(timeout=config.timeout)
        self._local = threading.local()  # handlers run concurrently

    def complete(self, request: ChatRequest) -> Iterator[str]:
        body = {"model": request.model, "messages": request.messages}
        try:
            response = self.client.post(self.config.url, json=body)
            response.raise_for_status()
        except httpx.TimeoutException as exc:
            raise ProviderError(f"{self.config.provider_id}: timeout: {exc}", timed_out=True) from exc
        except httpx.HTTPError as exc:
            raise ProviderError(f"{self.config.provider_id}: {exc}") from exc
        payload = response.json()
        try:
            content = payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderError(f"{self.config.provider_id}: malformed response") from exc
        self._local.usage = payload.get("usage")
        yield content

    def usage_for(self, request: ChatRequest, content: str) -> dict | None:
        return getattr(self._local, "usage", None)


def build_provider(config: ProviderConfig, clock: Callable[[], float] = time.monotonic):
    if config.kind == "mock":
        return MockProvider(config, clock)
    if config.kind == "http":
        return HTTPProvider(config)
    raise ValueError(f"unknown provider kind '{config.kind}'")


# ---------------------------------------------------------------------------
# The gateway
# ---------------------------------------------------------------------------


@dataclass
class Session:
    """One sampled request: full conversation plus the serving response."""

    session_id: str
    messages: list[dict]
    model_id: str
    provider_id: str
    gateway_metrics_id: int | None = None

    def validate(self) -> None:
        if not self.messages:
            raise ValueError("session has no messages")
        if self.messages[-1].get("role") != "assistant":
            raise ValueError("session must end with the assistant response")


@dataclass
class GatewayResult:
    response: dict
    metrics: GatewayMetricsRecord
    session: Session | None
    status: int = 200


class Gateway:
    """Serves chat requests through prioritized providers.

    ``router`` is an optional callable(request) -> str returning the target
    model (real-time policy routing); exceptions inside it degrade to the
    request's own model rather than failing the request.
    """

    def __init__(
        self,
        providers: dict[str, list[ProviderConfig]],
        store: Store | None = None,
        sampling: SamplingConfig | None = None,
        tokenizer: Tokenizer = approx_token_count,
        router: Callable[[ChatRequest], str] | None = None,
        clock: Callable[[], float] = time.monotonic,
        on_session: Callable[[Session], None] | None = None,
    ):
        self.providers: dict[str, list[tuple[ProviderConfig, object]]] = {}
        for model, configs in providers.items():
            priorities = [c.priority for c in configs]
            if len(set(priorities)) != len(priorities):
                raise ValueError(f"model '{model}': provider priorities must be unique")
            ordered = sorted(configs, key=lambda c: c.priority)
            self.providers[model] = [(c, build_provider(c, clock)) for c in ordered]
        self.store = store
        self.sampling = sampling or SamplingConfig()
        self.tokenizer = tokenizer
        self.router = router
        self.clock = clock
        self.on_session = on_session
        self._seen_ids: set[str] = set()
        self._seen_lock = threading.Lock()
        self._buckets: dict[tuple[str, str, str], TokenBucket] = {}
        self._bucket_lock = threading.Lock()

    # -- rate limiting ------------------------------------------------------

    def _bucket(self, kind: str, user_id: str, cfg: ProviderConfig) -> TokenBucket:
        key = (kind, user_id, cfg.provider_id)
        with self._bucket_lock:
            bucket = self._buckets.get(key)
            if bucket is None:
                if kind == "rps":
                    bucket = TokenBucket(cfg.rate_limit_rps, cfg.rate_limit_rps, self.clock)
                else:
                    bucket = TokenBucket(cfg.tokens_per_minute / 60.0, cfg.tokens_per_minute, self.clock)
                self._buckets[key] = bucket
            return bucket

    def _admit(self, user_id: str, cfg: ProviderConfig) -> tuple[bool, float]:
        ok, retry = self._bucket("rps", user_id, cfg).try_acquire(1.0)
        if not ok:
            return False, retry
        tpm = self._bucket("tpm", user_id, cfg)
        if tpm.balance() <= 0:
            return False, tpm.depletion_wait()
        return True, 0.0

    # -- request handling -----------------------------------------------------

    def resolve_model(self, request: ChatRequest) -> str:
        if self.router is None:
            return request.model
        try:
            routed = self.router(request)
        except Exception:
            logger.warning("router failed for %s; using requested model", request.request_id)
            return request.model
        if routed not in self.providers:
            logger.warning(
                "router chose '%s' which has no configured providers; using requested model",
                routed,
            )
            return request.model
        return routed

    def handle_request(self, request: ChatRequest) -> GatewayResult:
        request.validate()
        with self._seen_lock:
            if request.request_id in self._seen_ids:
                raise GatewayError(
                    f"duplicate request id '{request.request_id}'",
                    error_type="duplicate_request_id",
                    status=400,
                )
            self._seen_ids.add(request.request_id)

        model = self.resolve_model(request)
        candidates = self.providers.get(model)
        if not candidates:
            raise GatewayError(f"no provider configured for model '{model}'",
                               error_type="unknown_model", status=404)

        start = self.clock()
        content: str | None = None
        usage: dict | None = None
        first_token_time: float | None = None
        served_by: ProviderConfig | None = None
        last_error: ProviderError | None = None
        retry_after: float | None = None

        for cfg, provider in candidates:
            admitted, wait = self._admit(request.user_id, cfg)
            if not admitted:
                retry_after = wait if retry_after is None else min(retry_after, wait)
                continue
            try:
                chunks = provider.complete(request)
                parts: list[str] = []
                for i, chunk in enumerate(chunks):
                    if i == 0:
                        first_token_time = self.clock()
                    parts.append(chunk)
                content = "".join(parts)
                usage = provider.usage_for(request, content)
                served_by = cfg
                break
            except ProviderError as exc:
                logger.info("provider %s failed: %s", cfg.provider_id, exc)
                last_error = exc
                first_token_time = None
                continue

        end = self.clock()

        if served_by is None and last_error is None and retry_after is not None:
            # Every provider refused admission: surface retry-after, but still
            # account the request in the metrics table.
            record = self._failure_record(request, model, candidates[0][0], start, end,
                                          "rate_limited", "all providers rate limited",
                                          timed_out=False)
            self._persist(record)
            raise RateLimited(retry_after)

        if served_by is None:
            message = str(last_error) if last_error else "no provider attempt succeeded"
            timed_out = bool(last_error and last_error.timed_out)
            record = self._failure_record(request, model, candidates[-1][0], start, end,
                                          "all_providers_failed", message, timed_out)
            self._persist(record)
            raise AllProvidersFailed(message, timed_out=timed_out)

        usage = usage or {}
        prompt_tokens = int(usage.get("prompt_tokens") or conversation_tokens(request.messages, self.tokenizer))
        completion_tokens = int(usage.get("completion_tokens") or self.tokenizer(content))
        reasoning_tokens = int(usage.get("reasoning_tokens") or 0)
        total_tokens = prompt_tokens + completion_tokens + reasoning_tokens

        ftt = first_token_time if request.stream else None
        derived = compute_metrics(start, end, total_tokens, completion_tokens, ftt)
        record = GatewayMetricsRecord(
            request_id=request.request_id,
            user_id=request.user_id,
            model_id=model,
            provider_id=served_by.provider_id,
            region_id=served_by.region_id,
            latency=derived.latency,
            ttft=derived.ttft,
            throughput=derived.throughput,
            generation_speed=derived.generation_speed,
            is_failed=False,
            is_timeout=False,
            error_type=None,
            error_message=None,
            prompt_tokens=prompt_tokens,
            completion_tokens=completion_tokens,
            reasoning_tokens=reasoning_tokens,
            total_tokens=total_tokens,
            cached_prompt_tokens=int(usage.get("cached_prompt_tokens") or 0),
            cache_read_input_tokens=int(usage.get("cache_read_input_tokens") or 0),
            cache_creation_input_tokens=int(usage.get("cache_creation_input_tokens") or 0),
        )
        metrics_id = self._persist(record)
        # Debit actual token spend against the per-minute budget.
        self._bucket("tpm", request.user_id, served_by).debit(total_tokens)

        session = None
        if sample_decision(request.request_id, self.sampling):
            session = Session(
                session_id=request.request_id,
                messages=list(request.messages) + [{"role": "assistant", "content": content}],
                model_id=model,
                provider_id=served_by.provider_id,
                gateway_metrics_id=metrics_id,
            )
            if self.store is not None:
                self.store.insert_session(
                    session.session_id,
                    model,
                    served_by.provider_id,
                    {"messages": session.messages},
                    gateway_metrics_id=metrics_id,
                )
            if self.on_session is not None:
                self.on_session(session)

        response = {
            "id": f"chatcmpl-{request.request_id}",
            "object": "chat.completion",
            "created": utcnow_iso(),
            "model": model,
            "provider": served_by.provider_id,
            "choices": [
                {
                    "index": 0,
                    "message": {"role": "assistant", "content": content},
                    "finish_reason": "stop",
                }
            ],
            "usage": {
                "prompt_tokens": prompt_tokens,
                "completion_tokens": completion_tokens,
                "reasoning_tokens": reasoning_tokens,
                "total_tokens": total_tokens,
            },
        }
        return GatewayResult(response=response, metrics=record, session=session)

    def _failure_record(
        self,
        request: ChatRequest,
        model: str,
        cfg: ProviderConfig,
        start: float,
        end: float,
        error_type: str,
        message: str,
        timed_out: bool,
    ) -> GatewayMetricsRecord:
        return GatewayMetricsRecord(
            request_id=request.request_id,
            user_id=request.user_id,
            model_id=model,
            provider_id=cfg.provider_id,
            region_id=cfg.region_id,
            latency=end - start,
            ttft=None,
            throughput=None,
            generation_speed=None,
            is_failed=True,
            is_timeout=timed_out,
            error_type=error_type,
            error_message=message,
            prompt_tokens=0,
            completion_tokens=0,
            reasoning_tokens=0,
            total_tokens=0,
        )

    def _persist(self, record: GatewayMetricsRecord) -> int | None:
        if self.store is None:
            return None
        return self.store.insert_gateway_metrics(record)
