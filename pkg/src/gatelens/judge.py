"""Schema-constrained judging of sampled sessions.

A session flows through four stages in dependency order (context, response,
attribution, evaluation), each one structured-output call against that
table's JSON schema, carrying the conversation plus all upstream stage
outputs. Three reasoning modes: a leading in-schema reasoning field (one
call per stage), a separate free-text trace call followed by the schema
call (two calls per stage), or no reasoning at all. A single-stage mode
emits the union schema in one call for ablation experiments.

Reasoning text is captured to an audit table and stripped before storage;
no persisted record ever carries it.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import httpx
import jsonschema

from .gateway import Session
from .registry import CORE_TABLES, REASONING_FIELD, SchemaManifest, build_judge_schema
from .store import EvaluationBundle, Store
from .tokens import Tokenizer, approx_token_count

logger = logging.getLogger(__name__)

SYSTEM_PROMPT = """You are an evaluation assistant. Given the raw
session input and upstream structured outputs (if provided), produce one
JSON object that exactly matches the target table schema.

Follow these rules:
1. Focus on the target table for each stage and use upstream structured
   outputs as supporting evidence.
2. Follow each field description as the self-contained instruction
   including definition, scope, value conditions, and edge cases.
3. Set values only based on evidence in the raw input, tool results, or
   upstream structured outputs. If evidence is insufficient, use the
   conservative value defined by the schema (e.g., none or
   not_applicable).
4. If a reasoning field is present, use it to identify the task, derive
   fields step by step, and self-check consistency.
5. Raw input is provided as <input>...</input>."""

TRACE_REQUEST_SUFFIX = (
    "\n\nBefore any structured output is requested, reason step by step in plain text"
    " about every signal the target table will need. Respond with the reasoning only."
)

MODALITY_FLAGS = {
    "image": "has_image_attachment",
    "audio": "has_audio_attachment",
    "video": "has_video_attachment",
    "file": "has_file_attachment",
}


class JudgeBackendError(Exception):
    """Transport-level backend failure."""


class StageFailedError(Exception):
    def __init__(self, stage: str, reason: str):
        super().__init__(f"stage '{stage}' failed: {reason}")
        self.stage = stage
        self.reason = reason


# ---------------------------------------------------------------------------
# Static session features (no backend involved)
# ---------------------------------------------------------------------------


def extract_static_features(session: Session, tokenizer: Tokenizer = approx_token_count) -> dict:
    """The 20 statically-derived context columns, computed from raw messages."""
    session.validate()
    messages = session.messages
    role_counts = {"system": 0, "user": 0, "assistant": 0, "tool": 0}
    role_tokens = {"system": 0, "user": 0, "assistant": 0, "tool": 0}
    modality: dict[str, bool] = {flag: False for flag in MODALITY_FLAGS.values()}
    attachment_count = 0
    for msg in messages:
        role = msg["role"]
        role_counts[role] += 1
        role_tokens[role] += tokenizer(msg.get("content") or "")
        for att in msg.get("attachments") or []:
            attachment_count += 1
            flag = MODALITY_FLAGS.get(att.get("modality"))
            if flag:
                modality[flag] = True
    response_tokens = tokenizer(messages[-1].get("content") or "")
    total_tokens = sum(role_tokens.values())
    user_count = role_counts["user"]
    mean_user = round(role_tokens["user"] / user_count) if user_count else 0
    return {
        **modality,
        "has_system_message": role_counts["system"] > 0,
        "total_message_count": len(messages),
        "system_message_count": role_counts["system"],
        "user_message_count": user_count,
        "assistant_message_count": role_counts["assistant"],
        "tool_message_count": role_counts["tool"],
        "turn_count": user_count,
        "attachment_count": attachment_count,
        "system_token_count": role_tokens["system"],
        "user_token_count": role_tokens["user"],
        "assistant_token_count": role_tokens["assistant"],
        "tool_token_count": role_tokens["tool"],
        "prompt_token_count": total_tokens - response_tokens,
        "response_token_count": response_tokens,
        "total_token_count": total_tokens,
        "mean_user_message_token_count": mean_user,
    }


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------


class ScriptedJudgeBackend:
    """Canned outputs keyed by (session id, stage).

    Values are either a string (returned on every call) or a list consumed
    one element per call, which scripts retry sequences. The pipeline
    announces the active stage through ``begin_stage``.
    """

    def __init__(self, fixtures: dict):
        self.fixtures = {}
        for key, value in fixtures.items():
            if isinstance(key, str):  # "session/stage" form used by fixture files
                session_id, _, stage = key.partition("/")
                key = (session_id, stage)
            self.fixtures[key] = list(value) if isinstance(value, list) else value
        self._current: tuple[str, str] | None = None

    @classmethod
    def from_file(cls, path: str) -> "ScriptedJudgeBackend":
        with open(path) as fh:
            return cls(json.load(fh))

    def begin_stage(self, session_id: str, stage: str) -> None:
        self._current = (session_id, stage)

    def call(self, system_prompt: str, input_payload: str, schema: dict | None) -> str:
        if self._current is None or self._current not in self.fixtures:
            raise JudgeBackendError(f"no fixture for {self._current}")
        value = self.fixtures[self._current]
        if isinstance(value, list):
            if not value:
                raise JudgeBackendError(f"fixture sequence for {self._current} exhausted")
            return value.pop(0)
        return value


class SchemaFillBackend:
    """Derives a conservative, schema-exact record from the schema itself.

    Booleans come out false, enums pick not_applicable/none when available
    (first level otherwise), text fields are empty. ``overrides`` pins
    specific properties; ``invalid_first`` scripts that many malformed
    responses before behaving, to exercise the retry path.
    """

    def __init__(self, overrides: dict | None = None, invalid_first: int = 0,
                 reasoning_text: str = "Task identified; signals derived; consistency verified."):
        self.overrides = overrides or {}
        self.invalid_remaining = invalid_first
        self.reasoning_text = reasoning_text

    def call(self, system_prompt: str, input_payload: str, schema: dict | None) -> str:
        if schema is None:
            return "Free-text reasoning trace: " + self.reasoning_text
        if self.invalid_remaining > 0:
            self.invalid_remaining -= 1
            return '{"this is": "not valid against the schema"'
        record = {}
        for name, prop in schema["properties"].items():
            if name in self.overrides:
                record[name] = self.overrides[name]
            elif name == REASONING_FIELD:
                record[name] = self.reasoning_text
            elif prop.get("type") == "boolean":
                record[name] = False
            elif "enum" in prop:
                levels = prop["enum"]
                for preferred in ("not_applicable", "none"):
                    if preferred in levels:
                        record[name] = preferred
                        break
                else:
                    record[name] = levels[0]
            else:
                record[name] = ""
        return json.dumps(record)


class HTTPJudgeBackend:
    """Remote judge speaking JSON-over-HTTP.

    Request body: {"system_prompt": str, "input": str, "json_schema": obj|null};
    response body: {"output": str} where output is the model's raw text.
    """

    def __init__(self, url: str, client: httpx.Client | None = None, timeout: float = 60.0):
        self.url = url
        self.client = client or httpx.Client(timeout=timeout)

    def call(self, system_prompt: str, input_payload: str, schema: dict | None) -> str:
        body = {"system_prompt": system_prompt, "input": input_payload, "json_schema": schema}
        try:
            response = self.client.post(self.url, json=body)
            response.raise_for_status()
            return response.json()["output"]
        except (httpx.HTTPError, KeyError, ValueError) as exc:
            raise JudgeBackendError(f"judge backend call failed: {exc}") from exc


# ---------------------------------------------------------------------------
# Stage planning and the pipeline
# ---------------------------------------------------------------------------


@dataclass
class StagePlan:
    mode: str = "multi"  # "multi" | "single"
    reasoning_mode: str = "in_schema"  # "in_schema" | "two_call" | "none"
    retry_budget: int = 2
    stage4_sees_stage3: bool = True

    def __post_init__(self) -> None:
        if self.mode not in ("multi", "single"):
            raise ValueError(f"unknown mode '{self.mode}'")
        if self.reasoning_mode not in ("in_schema", "two_call", "none"):
            raise ValueError(f"unknown reasoning mode '{self.reasoning_mode}'")

    def stages(self) -> tuple[str, ...]:
        return CORE_TABLES if self.mode == "multi" else ("single",)

    def upstream_for(self, stage: str) -> tuple[str, ...]:
        order = list(CORE_TABLES)
        deps = tuple(order[: order.index(stage)])
        if stage == "evaluation" and not self.stage4_sees_stage3:
            deps = tuple(d for d in deps if d != "issue_attribution")
        return deps


@dataclass
class StageOutput:
    record: dict
    reasoning: str | None
    calls: int


def render_payload(session: Session, upstream: dict[str, dict]) -> str:
    """Conversation inside <input> tags, then one labeled JSON block per
    upstream table. Formatting is stable so prompts can be golden-tested."""
    conversation = json.dumps({"messages": session.messages}, indent=2, ensure_ascii=False)
    parts = [f"<input>\n{conversation}\n</input>"]
    for table, record in upstream.items():
        parts.append(f"## {table}\n{json.dumps(record, indent=2, ensure_ascii=False)}")
    return "\n\n".join(parts)


def build_union_schema(manifest: SchemaManifest, reasoning_mode: str) -> dict:
    """Single-stage ablation schema: every judge column of the four tables in
    one object. Requires globally unique judge column names."""
    properties: dict[str, dict] = {}
    if reasoning_mode == "in_schema":
        base = build_judge_schema(manifest, CORE_TABLES[0], "in_schema")
        properties[REASONING_FIELD] = base["properties"][REASONING_FIELD]
    for table in CORE_TABLES:
        table_schema = build_judge_schema(manifest, table, "none")
        for name, prop in table_schema["properties"].items():
            if name in properties:
                raise ValueError(f"judge column '{name}' appears in two tables; single mode needs unique names")
            properties[name] = prop
    return {
        "type": "object",
        "description": "All evaluation signals for the session in one record.",
        "properties": properties,
        "required": list(properties),
        "additionalProperties": False,
    }


class JudgePipeline:
    """Drives a session through the staged judging plan and commits the bundle."""

    def __init__(
        self,
        manifest: SchemaManifest,
        backend,
        store: Store | None = None,
        plan: StagePlan | None = None,
        tokenizer: Tokenizer = approx_token_count,
    ):
        self.manifest = manifest
        self.backend = backend
        self.store = store
        self.plan = plan or StagePlan()
        self.tokenizer = tokenizer
        self.calls = 0  # every backend invocation, retries included
        self.last_reasonings: dict[str, str] = {}

    # -- single stage ---------------------------------------------------------

    def _invoke(self, session: Session, stage: str, payload: str, schema: dict) -> tuple[dict, str | None, int]:
        calls = 0
        trace: str | None = None
        if hasattr(self.backend, "begin_stage"):
            self.backend.begin_stage(session.session_id, stage)
        if self.plan.reasoning_mode == "two_call":
            trace = self.backend.call(SYSTEM_PROMPT, payload + TRACE_REQUEST_SUFFIX, None)
            calls += 1
            self.calls += 1
            payload = f"{payload}\n\n## reasoning_trace\n{trace}"
        last_error = "no attempt made"
        for _attempt in range(self.plan.retry_budget + 1):
            text = self.backend.call(SYSTEM_PROMPT, payload, schema)
            calls += 1
            self.calls += 1
            try:
                record = json.loads(text)
                jsonschema.validate(record, schema)
            except (json.JSONDecodeError, jsonschema.ValidationError) as exc:
                last_error = f"schema validation failed: {exc}"
                logger.debug("session %s stage %s invalid output: %s", session.session_id, stage, exc)
                continue
            reasoning = record.pop(REASONING_FIELD, None)
            if trace is not None:
                reasoning = trace
            return record, reasoning, calls
        raise StageFailedError(stage, last_error)

    def run_stage(self, session: Session, stage: str, upstream: dict[str, dict]) -> StageOutput:
        expected = self.plan.upstream_for(stage)
        if tuple(upstream) != expected:
            raise ValueError(f"stage '{stage}' expects upstream {expected}, got {tuple(upstream)}")
        schema = build_judge_schema(self.manifest, stage, self.plan.reasoning_mode)
        payload = render_payload(session, upstream)
        record, reasoning, calls = self._invoke(session, stage, payload, schema)
        if reasoning is not None:
            self.last_reasonings[stage] = reasoning
            if self.store is not None:
                self.store.insert_reasoning_audit(session.session_id, stage, reasoning)
        return StageOutput(record=record, reasoning=reasoning, calls=calls)

    # -- whole pipeline -------------------------------------------------------

    def run_pipeline(self, session: Session, commit: bool = True, replace: bool = False) -> EvaluationBundle:
        session.validate()
        self.last_reasonings = {}
        try:
            if self.plan.mode == "multi":
                bundle = self._run_multi(session)
            else:
                bundle = self._run_single(session)
        except StageFailedError as exc:
            if self.store is not None:
                self.store.mark_session(session.session_id, "failed", failed_stage=exc.stage)
            raise
        if commit and self.store is not None:
            self.store.insert_bundle(bundle, replace=replace)
            self.store.mark_session(session.session_id, "judged")
        return bundle

    def _run_multi(self, session: Session) -> EvaluationBundle:
        static = extract_static_features(session, self.tokenizer)
        outputs: dict[str, dict] = {}
        for stage in CORE_TABLES:
            upstream = {name: outputs[name] for name in self.plan.upstream_for(stage)}
            result = self.run_stage(session, stage, upstream)
            record = result.record
            if stage == "context_info":
                record = {**record, **static}
            outputs[stage] = record
        return EvaluationBundle(
            session_id=session.session_id,
            context_info=outputs["context_info"],
            llm_response_info=outputs["llm_response_info"],
            issue_attribution=outputs["issue_attribution"],
            evaluation=outputs["evaluation"],
            gateway_metrics_id=session.gateway_metrics_id,
        )

    def _run_single(self, session: Session) -> EvaluationBundle:
        static = extract_static_features(session, self.tokenizer)
        schema = build_union_schema(self.manifest, self.plan.reasoning_mode)
        payload = render_payload(session, {})
        record, reasoning, _calls = self._invoke(session, "single", payload, schema)
        if reasoning is not None:
            self.last_reasonings["single"] = reasoning
            if self.store is not None:
                self.store.insert_reasoning_audit(session.session_id, "single", reasoning)
        per_table: dict[str, dict] = {}
        for table in CORE_TABLES:
            names = [c.name for c in self.manifest.table(table).judge_columns]
            per_table[table] = {n: record[n] for n in names}
        per_table["context_info"].update(static)
        return EvaluationBundle(
            session_id=session.session_id,
            context_info=per_table["context_info"],
            llm_response_info=per_table["llm_response_info"],
            issue_attribution=per_table["issue_attribution"],
            evaluation=per_table["evaluation"],
            gateway_metrics_id=session.gateway_metrics_id,
        )


def session_from_payload(session_id: str, payload: dict, model_id: str = "unknown",
                         provider_id: str = "unknown", gateway_metrics_id: int | None = None) -> Session:
    return Session(
        session_id=session_id,
        messages=payload["messages"],
        model_id=model_id,
        provider_id=provider_id,
        gateway_metrics_id=gateway_metrics_id,
    )
