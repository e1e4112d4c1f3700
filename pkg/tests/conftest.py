"""Shared fixtures: manifests, stores, and warehouse row builders."""

from __future__ import annotations

import pytest

from gatelens.gateway import Session
from gatelens.registry import default_manifest, default_manifest_path, parse_manifest
from gatelens.store import EvaluationBundle, GatewayMetricsRecord, Store

EXTENSION_BLOCK = """extensions:
  - name: tool_call_quality
    role: semantic
    foreign_keys:
      - column: llm_response_id
        references: llm_response_info
        nullable: true
    columns:
      - name: tool_selection_sound
        type: boolean
        instruction: Whether the invoked tool was the right choice for the task.
      - name: tool_argument_quality
        type: ordinal
        levels: [low, medium, high]
        instruction: Quality of the arguments passed to the invoked tool.
"""


@pytest.fixture(scope="session")
def manifest():
    return default_manifest()


@pytest.fixture(scope="session")
def manifest_text():
    return default_manifest_path().read_text()


@pytest.fixture()
def extension_manifest(manifest_text):
    return parse_manifest(manifest_text.replace("extensions: []\n", EXTENSION_BLOCK))


@pytest.fixture()
def store(tmp_path, manifest):
    s = Store(tmp_path / "warehouse.db", manifest)
    s.migrate()
    yield s
    s.close()


def conservative_value(col):
    if col.kind in ("boolean", "static_bool"):
        return False
    if col.kind == "static_int":
        return 0
    if col.kind == "text":
        return "en"
    for preferred in ("not_applicable", "none"):
        if preferred in col.levels:
            return preferred
    return col.levels[0]


def base_records(manifest) -> dict[str, dict]:
    """A fully-populated, consistency-clean record set for the four tables."""
    out = {}
    for table in manifest.core_tables:
        out[table.name] = {c.name: conservative_value(c) for c in table.columns}
    return out


def make_bundle(manifest, session_id, overrides=None, gateway_metrics_id=None) -> EvaluationBundle:
    records = base_records(manifest)
    for table, values in (overrides or {}).items():
        records[table].update(values)
    return EvaluationBundle(
        session_id=session_id,
        context_info=records["context_info"],
        llm_response_info=records["llm_response_info"],
        issue_attribution=records["issue_attribution"],
        evaluation=records["evaluation"],
        gateway_metrics_id=gateway_metrics_id,
    )


def insert_metrics(
    store,
    request_id,
    model_id,
    provider_id,
    prompt_tokens=1000,
    completion_tokens=500,
    latency=1.0,
    ttft=None,
    failed=False,
    user_id="user-1",
    region_id="local",
) -> int:
    total = prompt_tokens + completion_tokens
    record = GatewayMetricsRecord(
        request_id=request_id,
        user_id=user_id,
        model_id=model_id,
        provider_id=provider_id,
        region_id=region_id,
        latency=latency,
        ttft=ttft,
        throughput=total / latency if not failed else None,
        generation_speed=None,
        is_failed=failed,
        is_timeout=False,
        error_type="provider_error" if failed else None,
        error_message="boom" if failed else None,
        prompt_tokens=prompt_tokens if not failed else 0,
        completion_tokens=completion_tokens if not failed else 0,
        reasoning_tokens=0,
        total_tokens=total if not failed else 0,
    )
    return store.insert_gateway_metrics(record)


SIX_SIGNALS = (
    "overall_task_type_quality",
    "overall_response_completeness",
    "overall_instruction_following",
    "overall_factual_accuracy",
    "overall_response_relevance",
    "overall_response_coherence",
)


def quality_signals(level: str) -> dict:
    """All six composite signals at one tier: 'high', 'medium', or 'low'."""
    mapping = {"high": ("high", "complete"), "medium": ("medium", "partial"), "low": ("low", "incomplete")}
    tri, completeness = mapping[level]
    return {
        "overall_task_type_quality": tri,
        "overall_response_completeness": completeness,
        "overall_instruction_following": tri,
        "overall_factual_accuracy": tri,
        "overall_response_relevance": tri,
        "overall_response_coherence": tri,
    }


def seed_eval_session(
    store,
    session_id,
    model_id,
    provider_id,
    *,
    task_quality="high",
    evaluation_overrides=None,
    slice_values=None,
    prompt_tokens=1000,
    completion_tokens=500,
    latency=1.0,
    ttft=0.5,
    failed=False,
    excluded=False,
):
    """One metrics row plus one consistent bundle wired to it."""
    if ttft is not None and latency < ttft:
        latency = ttft + 0.5
    metrics_id = insert_metrics(
        store, session_id, model_id, provider_id,
        prompt_tokens=prompt_tokens, completion_tokens=completion_tokens,
        latency=latency, ttft=ttft, failed=failed,
    )
    eval_over = {"overall_task_type_quality": task_quality}
    eval_over.update(evaluation_overrides or {})
    overrides = {"evaluation": eval_over}
    if slice_values:
        overrides["context_info"] = dict(slice_values)
    bundle = make_bundle(store.manifest, session_id, overrides, gateway_metrics_id=metrics_id)
    store.insert_bundle(bundle)
    if excluded:
        store.set_excluded([session_id])
    return metrics_id


def make_session(session_id="s-1", user_chars=(120,), response_chars=100) -> Session:
    messages = [{"role": "system", "content": "stay concise"}]
    for n in user_chars:
        messages.append({"role": "user", "content": "u" * n})
    messages.append({"role": "assistant", "content": "a" * response_chars})
    return Session(
        session_id=session_id,
        messages=messages,
        model_id="atlas-large",
        provider_id="atlas",
    )
