"""HTTP surface via the ASGI test client."""

from __future__ import annotations

import json

import yaml
from fastapi.testclient import TestClient

from gatelens.server import build_runtime, create_app, load_config


def make_runtime(tmp_path, **overrides):
    doc = {
        "database": str(tmp_path / "gw.db"),
        "sampling": {"fraction": 0.0, "seed": 1},
        "models": [{
            "model_id": "demo-model",
            "providers": [
                {"provider_id": "mock-a", "kind": "mock", "priority": 1, "completion_tokens": 25},
            ],
        }],
    }
    doc.update(overrides)
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(doc))
    return build_runtime(load_config(path))


def chat_body(content="tell me about rivers", stream=False):
    return {"model": "demo-model", "messages": [{"role": "user", "content": content}],
            "stream": stream, "user": "u-1"}


class TestEndpoints:
    def test_healthz(self, tmp_path):
        runtime = make_runtime(tmp_path)
        client = TestClient(create_app(runtime))
        response = client.get("/healthz")
        assert response.status_code == 200
        assert response.json() == {"status": "ok"}

    def test_chat_completion_shape_and_metrics_row(self, tmp_path):
        runtime = make_runtime(tmp_path)
        client = TestClient(create_app(runtime))
        response = client.post("/v1/chat/completions", json=chat_body(),
                               headers={"x-request-id": "req-001"})
        assert response.status_code == 200
        doc = response.json()
        assert doc["object"] == "chat.completion"
        assert doc["model"] == "demo-model"
        assert doc["choices"][0]["message"]["role"] == "assistant"
        assert doc["usage"]["completion_tokens"] == 25
        rows = runtime.store.execute("SELECT request_id, is_failed FROM gateway_metrics")
        assert rows == [{"request_id": "req-001", "is_failed": 0}]

    def test_sampling_persists_sessions(self, tmp_path):
        runtime = make_runtime(tmp_path, sampling={"fraction": 1.0, "seed": 2})
        client = TestClient(create_app(runtime))
        for i in range(5):
            client.post("/v1/chat/completions", json=chat_body(),
                        headers={"x-request-id": f"req-{i}"})
        n = runtime.store.execute("SELECT COUNT(*) AS n FROM sessions")[0]["n"]
        assert n == 5

    def test_failover_served_by_secondary(self, tmp_path):
        runtime = make_runtime(tmp_path, models=[{
            "model_id": "demo-model",
            "providers": [
                {"provider_id": "down", "kind": "mock", "priority": 1, "fail_always": True},
                {"provider_id": "up", "kind": "mock", "priority": 2, "completion_tokens": 5},
            ],
        }])
        client = TestClient(create_app(runtime))
        response = client.post("/v1/chat/completions", json=chat_body())
        assert response.status_code == 200
        assert response.json()["provider"] == "up"

    def test_total_failure_returns_502(self, tmp_path):
        runtime = make_runtime(tmp_path, models=[{
            "model_id": "demo-model",
            "providers": [{"provider_id": "down", "kind": "mock", "priority": 1,
                           "fail_always": True}],
        }])
        client = TestClient(create_app(runtime))
        response = client.post("/v1/chat/completions", json=chat_body())
        assert response.status_code == 502
        assert response.json()["error"]["type"] == "all_providers_failed"

    def test_unknown_model_404(self, tmp_path):
        runtime = make_runtime(tmp_path)
        client = TestClient(create_app(runtime))
        response = client.post("/v1/chat/completions",
                               json={"model": "ghost", "messages": [{"role": "user", "content": "x"}]})
        assert response.status_code == 404

    def test_missing_field_400(self, tmp_path):
        runtime = make_runtime(tmp_path)
        client = TestClient(create_app(runtime))
        response = client.post("/v1/chat/completions", json={"messages": []})
        assert response.status_code == 400

    def test_rate_limited_429_with_retry_after(self, tmp_path):
        runtime = make_runtime(tmp_path, models=[{
            "model_id": "demo-model",
            "providers": [{"provider_id": "tight", "kind": "mock", "priority": 1,
                           "rate_limit_rps": 1.0, "completion_tokens": 5}],
        }])
        client = TestClient(create_app(runtime))
        responses = [client.post("/v1/chat/completions", json=chat_body()) for _ in range(4)]
        assert responses[0].status_code == 200
        limited = [r for r in responses if r.status_code == 429]
        assert limited
        assert all(float(r.headers["retry-after"]) > 0 for r in limited)

    def test_streaming_returns_sse(self, tmp_path):
        runtime = make_runtime(tmp_path)
        client = TestClient(create_app(runtime))
        with client.stream("POST", "/v1/chat/completions", json=chat_body(stream=True)) as response:
            assert response.status_code == 200
            assert response.headers["content-type"].startswith("text/event-stream")
            body = "".join(response.iter_text())
        events = [line for line in body.splitlines() if line.startswith("data: ")]
        assert events[-1] == "data: [DONE]"
        first = json.loads(events[0][len("data: "):])
        assert first["object"] == "chat.completion.chunk"
        # ttft was measured for the streamed request
        row = runtime.store.execute("SELECT ttft, latency FROM gateway_metrics")[0]
        assert row["ttft"] is not None and row["ttft"] <= row["latency"]


class TestJudgeWorkers:
    def test_sampled_sessions_get_judged_in_background(self, tmp_path):
        runtime = make_runtime(
            tmp_path,
            sampling={"fraction": 1.0, "seed": 5},
            judge={"enabled": True, "backend": "fill", "workers": 2},
        )
        client = TestClient(create_app(runtime))
        for i in range(6):
            client.post("/v1/chat/completions", json=chat_body(),
                        headers={"x-request-id": f"bg-{i}"})
        runtime.judge_pool.drain()
        assert runtime.store.bundle_count() == 6
        statuses = runtime.store.execute("SELECT DISTINCT judge_status FROM sessions")
        assert [s["judge_status"] for s in statuses] == ["judged"]
        runtime.judge_pool.stop()
