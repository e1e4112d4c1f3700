"""HTTP surface and runtime assembly.

Exposes the chat-completions proxy and a health probe over FastAPI, builds
the gateway/store/judge runtime from a YAML config file, and runs judge
workers off the serving path. Port and database path yield to the
GATELENS_PORT / GATELENS_DB environment variables.
"""

from __future__ import annotations

import json
import logging
import os
import queue
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import yaml
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, StreamingResponse

from .gateway import (
    AllProvidersFailed,
    ChatRequest,
    Gateway,
    GatewayError,
    ProviderConfig,
    RateLimited,
    SamplingConfig,
    Session,
)
from .judge import (
    HTTPJudgeBackend,
    JudgePipeline,
    SchemaFillBackend,
    ScriptedJudgeBackend,
    StagePlan,
)
from .registry import SchemaManifest, default_manifest, load_manifest
from .routing import RoutingPolicy, make_policy_router
from .store import Store

logger = logging.getLogger(__name__)


class ConfigError(Exception):
    """Startup configuration problem; the message names the offending key."""


def parse_backend_spec(spec: str):
    """'fill' | 'mock:<fixture file>' | 'http:<url>' -> judge backend."""
    if spec == "fill":
        return SchemaFillBackend()
    if spec.startswith("mock:"):
        return ScriptedJudgeBackend.from_file(spec.split(":", 1)[1])
    if spec.startswith("http:") or spec.startswith("https:"):
        return HTTPJudgeBackend(spec)
    raise ConfigError(f"unknown judge backend spec '{spec}'")


@dataclass
class JudgeSettings:
    enabled: bool = False
    backend: str = "fill"
    mode: str = "multi"
    reasoning: str = "in_schema"
    workers: int = 2


@dataclass
class GatewayConfig:
    database: str
    models: dict[str, list[ProviderConfig]]
    port: int = 8080
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    routing_mode: str = "static"
    policy_file: str | None = None
    classifier: str | None = None
    judge: JudgeSettings = field(default_factory=JudgeSettings)
    manifest_path: str | None = None

    def manifest(self) -> SchemaManifest:
        if self.manifest_path:
            return load_manifest(self.manifest_path)
        return default_manifest()


_PROVIDER_FIELDS = {f for f in ProviderConfig.__dataclass_fields__}


def load_config(path: str | Path) -> GatewayConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    if "database" not in raw:
        raise ConfigError("missing 'database' key")
    if "models" not in raw or not raw["models"]:
        raise ConfigError("missing 'models' section")

    models: dict[str, list[ProviderConfig]] = {}
    for entry in raw["models"]:
        model_id = entry.get("model_id")
        if not model_id:
            raise ConfigError("models entry missing 'model_id'")
        providers = entry.get("providers")
        if not providers:
            raise ConfigError(f"model '{model_id}' missing 'providers' section")
        configs = []
        for p in providers:
            unknown = set(p) - _PROVIDER_FIELDS
            if unknown:
                raise ConfigError(f"model '{model_id}': unknown provider keys {sorted(unknown)}")
            if "provider_id" not in p or "kind" not in p:
                raise ConfigError(f"model '{model_id}': provider needs 'provider_id' and 'kind'")
            configs.append(ProviderConfig(**p))
        models[model_id] = configs

    sampling_raw = raw.get("sampling") or {}
    sampling = SamplingConfig(
        fraction=float(sampling_raw.get("fraction", 0.0)),
        seed=int(sampling_raw.get("seed", 0)),
    )

    routing_raw = raw.get("routing") or {}
    routing_mode = routing_raw.get("mode", "static")
    if routing_mode not in ("static", "policy"):
        raise ConfigError(f"routing.mode must be 'static' or 'policy', got '{routing_mode}'")
    policy_file = routing_raw.get("policy_file")
    if routing_mode == "policy" and not policy_file:
        raise ConfigError("routing.policy_file is required when routing.mode is 'policy'")

    judge_raw = raw.get("judge") or {}
    judge = JudgeSettings(
        enabled=bool(judge_raw.get("enabled", False)),
        backend=judge_raw.get("backend", "fill"),
        mode=judge_raw.get("mode", "multi"),
        reasoning=judge_raw.get("reasoning", "in_schema"),
        workers=int(judge_raw.get("workers", 2)),
    )

    config = GatewayConfig(
        database=os.environ.get("GATELENS_DB") or raw["database"],
        models=models,
        port=int(os.environ.get("GATELENS_PORT") or raw.get("port", 8080)),
        sampling=sampling,
        routing_mode=routing_mode,
        policy_file=policy_file,
        classifier=routing_raw.get("classifier"),
        judge=judge,
        manifest_path=raw.get("manifest"),
    )
    return config


class JudgeWorkerPool:
    """Consumes sampled sessions on background threads, off the serving path."""

    def __init__(self, pipeline_factory, workers: int = 2):
        self.pipeline_factory = pipeline_factory
        self.queue: queue.Queue = queue.Queue()
        self.threads = [
            threading.Thread(target=self._work, name=f"judge-{i}", daemon=True)
            for i in range(workers)
        ]
        self._stop = threading.Event()
        for t in self.threads:
            t.start()

    def submit(self, session: Session) -> None:
        self.queue.put(session)

    def _work(self) -> None:
        pipeline = self.pipeline_factory()
        while not self._stop.is_set():
            try:
                session = self.queue.get(timeout=0.2)
            except queue.Empty:
                continue
            try:
                pipeline.run_pipeline(session)
            except Exception as exc:
                logger.warning("judging session %s failed: %s", session.session_id, exc)
            finally:
                self.queue.task_done()

    def drain(self) -> None:
        self.queue.join()

    def stop(self) -> None:
        self._stop.set()


@dataclass
class Runtime:
    config: GatewayConfig
    store: Store
    gateway: Gateway
    judge_pool: JudgeWorkerPool | None = None


def build_runtime(config: GatewayConfig) -> Runtime:
    manifest = config.manifest()
    store = Store(config.database, manifest)
    store.migrate()

    router = None
    if config.routing_mode == "policy":
        policy_doc = json.loads(Path(config.policy_file).read_text())
        policy = RoutingPolicy.from_json(policy_doc)
        classifier = parse_backend_spec(config.classifier) if config.classifier else None
        router = make_policy_router(policy, classifier, manifest)

    judge_pool = None
    on_session = None
    if config.judge.enabled:
        plan = StagePlan(mode=config.judge.mode, reasoning_mode=config.judge.reasoning)

        def pipeline_factory():
            return JudgePipeline(manifest, parse_backend_spec(config.judge.backend), store, plan)

        judge_pool = JudgeWorkerPool(pipeline_factory, workers=config.judge.workers)
        on_session = judge_pool.submit

    gateway = Gateway(
        providers=config.models,
        store=store,
        sampling=config.sampling,
        router=router,
        on_session=on_session,
    )
    return Runtime(config=config, store=store, gateway=gateway, judge_pool=judge_pool)


def create_app(runtime: Runtime) -> FastAPI:
    app = FastAPI(title="gatelens", docs_url=None, redoc_url=None)
    gateway = runtime.gateway

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    @app.post("/v1/chat/completions")
    async def chat_completions(request: Request):
        try:
            body = await request.json()
        except Exception:
            return JSONResponse({"error": {"type": "bad_json", "message": "body must be JSON"}}, 400)
        try:
            chat = ChatRequest(
                model=body["model"],
                messages=body["messages"],
                user_id=body.get("user", "anonymous"),
                request_id=request.headers.get("x-request-id", uuid.uuid4().hex),
                stream=bool(body.get("stream", False)),
            )
        except KeyError as exc:
            return JSONResponse(
                {"error": {"type": "bad_request", "message": f"missing field {exc}"}}, 400
            )
        try:
            result = gateway.handle_request(chat)
        except RateLimited as exc:
            return JSONResponse(
                {"error": {"type": exc.error_type, "message": str(exc)}},
                status_code=exc.status,
                headers={"Retry-After": f"{exc.retry_after:.3f}"},
            )
        except AllProvidersFailed as exc:
            status = 504 if exc.timed_out else exc.status
            return JSONResponse({"error": {"type": exc.error_type, "message": str(exc)}}, status)
        except GatewayError as exc:
            return JSONResponse({"error": {"type": exc.error_type, "message": str(exc)}}, exc.status)
        except ValueError as exc:
            return JSONResponse({"error": {"type": "bad_request", "message": str(exc)}}, 422)

        if chat.stream:
            return StreamingResponse(_sse_chunks(result.response), media_type="text/event-stream")
        return JSONResponse(result.response)

    return app


def _sse_chunks(response: dict):
    content = response["choices"][0]["message"]["content"]
    base = {"id": response["id"], "object": "chat.completion.chunk", "model": response["model"]}
    split = max(1, len(content) // 2)
    for piece in (content[:split], content[split:]):
        chunk = {**base, "choices": [{"index": 0, "delta": {"content": piece}}]}
        yield f"data: {json.dumps(chunk)}\n\n"
    final = {**base, "choices": [{"index": 0, "delta": {}, "finish_reason": "stop"}],
             "usage": response["usage"]}
    yield f"data: {json.dumps(final)}\n\n"
    yield "data: [DONE]\n\n"


def serve(config: GatewayConfig) -> None:
    import uvicorn

    runtime = build_runtime(config)
    app = create_app(runtime)
    logger.info("serving on port %d (db=%s)", config.port, config.database)
    uvicorn.run(app, host="0.0.0.0", port=config.port, log_level="info")
