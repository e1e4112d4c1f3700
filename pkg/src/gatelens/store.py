"""Embedded SQL warehouse over SQLite.

Holds the evaluation tables, gateway metrics, model/provider costs, routing
policies, and sampled sessions. Evaluation bundles commit atomically: all
four linked rows or none. Ad-hoc SQL goes through a read-only guard so the
query surface can be exposed to operators safely.

A MEDIAN(x) aggregate (continuous median, NULLs skipped) is registered on
every connection; it stands in for PERCENTILE_CONT(0.5) in provider-ranking
queries.
"""

from __future__ import annotations

import datetime as _dt
import json
import sqlite3
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

from .registry import SchemaManifest, compile_ddl, validate_record

REASONING_FIELD = "reasoning"


class StoreError(Exception):
    pass


class BundleConstraintError(StoreError):
    """A bundle row violated a declared constraint; nothing was persisted."""


class ReadOnlyQueryError(StoreError):
    """The ad-hoc query surface rejected a write statement."""


def utcnow_iso() -> str:
    return _dt.datetime.now(_dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


@dataclass
class EvaluationBundle:
    """One linked set of four table records for a judged session."""

    session_id: str
    context_info: dict
    llm_response_info: dict
    issue_attribution: dict
    evaluation: dict
    gateway_metrics_id: int | None = None

    def records(self) -> dict[str, dict]:
        return {
            "context_info": self.context_info,
            "llm_response_info": self.llm_response_info,
            "issue_attribution": self.issue_attribution,
            "evaluation": self.evaluation,
        }

    def validate(self, manifest: SchemaManifest) -> None:
        for table, record in self.records().items():
            if REASONING_FIELD in record:
                raise BundleConstraintError(
                    f"{table} record still carries a '{REASONING_FIELD}' key; strip it before storage"
                )
            validate_record(manifest, table, record)


@dataclass
class BundleIds:
    context_id: int
    llm_response_id: int
    issue_attribution_id: int
    evaluation_id: int

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.context_id, self.llm_response_id, self.issue_attribution_id, self.evaluation_id)


@dataclass
class GatewayMetricsRecord:
    request_id: str
    user_id: str
    model_id: str
    provider_id: str
    region_id: str | None
    latency: float
    ttft: float | None
    throughput: float | None
    generation_speed: float | None
    is_failed: bool
    is_timeout: bool
    error_type: str | None
    error_message: str | None
    prompt_tokens: int
    completion_tokens: int
    reasoning_tokens: int
    total_tokens: int
    cached_prompt_tokens: int = 0
    cache_read_input_tokens: int = 0
    cache_creation_input_tokens: int = 0
    created_at: str = field(default_factory=utcnow_iso)

    def __post_init__(self) -> None:
        if self.total_tokens != self.prompt_tokens + self.completion_tokens + self.reasoning_tokens:
            raise ValueError("total_tokens must equal prompt + completion + reasoning tokens")
        if self.is_failed and self.error_type is None:
            raise ValueError("failed request needs an error_type")
        if not self.is_failed and (self.error_type or self.error_message):
            raise ValueError("successful request must not carry error fields")
        if self.ttft is not None and self.ttft > self.latency:
            raise ValueError("ttft cannot exceed latency")


class _Median:
    """Continuous median aggregate; ignores NULLs, averages the middle pair."""

    def __init__(self) -> None:
        self.values: list[float] = []

    def step(self, value) -> None:
        if value is not None:
            self.values.append(float(value))

    def finalize(self):
        if not self.values:
            return None
        ordered = sorted(self.values)
        n = len(ordered)
        mid = n // 2
        if n % 2:
            return ordered[mid]
        return (ordered[mid - 1] + ordered[mid]) / 2.0


_READ_OK_ACTIONS = {
    sqlite3.SQLITE_SELECT,
    sqlite3.SQLITE_READ,
    sqlite3.SQLITE_FUNCTION,
    sqlite3.SQLITE_RECURSIVE,
}


def _readonly_authorizer(action, *_args):
    if action in _READ_OK_ACTIONS:
        return sqlite3.SQLITE_OK
    return sqlite3.SQLITE_DENY


def _permissive_authorizer(*_args):
    return sqlite3.SQLITE_OK


class Store:
    """Warehouse handle. Safe for concurrent use; writes serialize on a lock."""

    def __init__(self, path: str | Path, manifest: SchemaManifest):
        self.path = str(path)
        self.manifest = manifest
        self._lock = threading.RLock()
        self._conn = sqlite3.connect(self.path, check_same_thread=False)
        self._conn.row_factory = sqlite3.Row
        self._conn.execute("PRAGMA foreign_keys = ON")
        if self.path != ":memory:":
            self._conn.execute("PRAGMA journal_mode = WAL")
        self._conn.create_aggregate("median", 1, _Median)
        # Test seam: called with the table name before each bundle row insert.
        self.fault_hook: Callable[[str], None] | None = None

    def close(self) -> None:
        self._conn.close()

    # -- schema ------------------------------------------------------------

    def migrate(self) -> None:
        """Create every table from the compiled DDL; idempotent."""
        with self._lock, self._conn:
            for statement in compile_ddl(self.manifest):
                self._conn.execute(statement)

    def table_names(self) -> list[str]:
        rows = self._conn.execute(
            "SELECT name FROM sqlite_master WHERE type = 'table' ORDER BY name"
        ).fetchall()
        return [r["name"] for r in rows]

    # -- bundles -----------------------------------------------------------

    def insert_bundle(self, bundle: EvaluationBundle, replace: bool = False) -> BundleIds:
        """Commit all four linked records in one transaction.

        Any constraint failure (enum check, foreign key, mid-flight fault)
        rolls the whole bundle back. ``replace=True`` first clears any prior
        rows for the session, inside the same transaction (re-judge path).
        """
        bundle.validate(self.manifest)
        with self._lock:
            try:
                with self._conn:
                    if replace:
                        self._delete_bundle_rows(bundle.session_id)
                    ctx_id = self._insert_record(
                        "context_info",
                        bundle.context_info,
                        extra={"session_id": bundle.session_id},
                    )
                    resp_id = self._insert_record(
                        "llm_response_info",
                        bundle.llm_response_info,
                        extra={
                            "context_id": ctx_id,
                            "gateway_metrics_id": bundle.gateway_metrics_id,
                        },
                    )
                    attr_id = self._insert_record(
                        "issue_attribution",
                        bundle.issue_attribution,
                        extra={"context_id": ctx_id},
                    )
                    eval_id = self._insert_record(
                        "evaluation",
                        bundle.evaluation,
                        extra={"context_id": ctx_id},
                    )
            except sqlite3.IntegrityError as exc:
                raise BundleConstraintError(str(exc)) from exc
            return BundleIds(ctx_id, resp_id, attr_id, eval_id)

    def _insert_record(self, table: str, record: dict, extra: dict) -> int:
        if self.fault_hook is not None:
            self.fault_hook(table)
        values = dict(extra)
        spec = self.manifest.table(table)
        for col in spec.columns:
            value = record[col.name]
            if isinstance(value, bool):
                value = int(value)
            values[col.name] = value
        names = ", ".join(values)
        placeholders = ", ".join("?" for _ in values)
        cur = self._conn.execute(
            f"INSERT INTO {table} ({names}) VALUES ({placeholders})",
            tuple(values.values()),
        )
        return cur.lastrowid

    def _delete_bundle_rows(self, session_id: str) -> None:
        row = self._conn.execute(
            "SELECT id FROM context_info WHERE session_id = ?", (session_id,)
        ).fetchone()
        if row is None:
            return
        ctx_id = row["id"]
        for table in ("evaluation", "issue_attribution", "llm_response_info"):
            self._conn.execute(f"DELETE FROM {table} WHERE context_id = ?", (ctx_id,))
        self._conn.execute("DELETE FROM context_info WHERE id = ?", (ctx_id,))

    def bundle_count(self) -> int:
        return self._conn.execute("SELECT COUNT(*) AS n FROM context_info").fetchone()["n"]

    # -- gateway metrics / costs --------------------------------------------

    def insert_gateway_metrics(self, record: GatewayMetricsRecord) -> int:
        fields = (
            "request_id", "user_id", "model_id", "provider_id", "region_id",
            "latency", "ttft", "throughput", "generation_speed",
            "is_failed", "is_timeout", "error_type", "error_message",
            "prompt_tokens", "completion_tokens", "reasoning_tokens", "total_tokens",
            "cached_prompt_tokens", "cache_read_input_tokens",
            "cache_creation_input_tokens", "created_at",
        )
        values = []
        for name in fields:
            value = getattr(record, name)
            if isinstance(value, bool):
                value = int(value)
            values.append(value)
        sql = (
            f"INSERT INTO gateway_metrics ({', '.join(fields)}) "
            f"VALUES ({', '.join('?' for _ in fields)})"
        )
        with self._lock, self._conn:
            cur = self._conn.execute(sql, values)
            return cur.lastrowid

    def upsert_model_cost(
        self,
        model_id: str,
        provider_id: str,
        input_cost_per_million_token: float,
        output_cost_per_million_token: float,
    ) -> None:
        with self._lock, self._conn:
            self._conn.execute(
                """INSERT INTO model_provider
                       (model_id, provider_id, input_cost_per_million_token,
                        output_cost_per_million_token)
                   VALUES (?, ?, ?, ?)
                   ON CONFLICT(model_id, provider_id) DO UPDATE SET
                       input_cost_per_million_token = excluded.input_cost_per_million_token,
                       output_cost_per_million_token = excluded.output_cost_per_million_token""",
                (model_id, provider_id, input_cost_per_million_token, output_cost_per_million_token),
            )

    # -- sessions ------------------------------------------------------------

    def insert_session(
        self,
        session_id: str,
        model_id: str,
        provider_id: str,
        payload: dict,
        gateway_metrics_id: int | None = None,
        org_id: str | None = None,
        created_at: str | None = None,
    ) -> None:
        with self._lock, self._conn:
            self._conn.execute(
                """INSERT INTO sessions
                       (session_id, org_id, model_id, provider_id,
                        gateway_metrics_id, payload, created_at)
                   VALUES (?, ?, ?, ?, ?, ?, ?)""",
                (
                    session_id, org_id, model_id, provider_id, gateway_metrics_id,
                    json.dumps(payload, ensure_ascii=False),
                    created_at or utcnow_iso(),
                ),
            )

    def fetch_session(self, session_id: str) -> dict | None:
        row = self._conn.execute(
            "SELECT * FROM sessions WHERE session_id = ?", (session_id,)
        ).fetchone()
        if row is None:
            return None
        out = dict(row)
        out["payload"] = json.loads(out["payload"])
        return out

    def pending_sessions(self) -> list[str]:
        rows = self._conn.execute(
            "SELECT session_id FROM sessions WHERE judge_status = 'pending' ORDER BY session_id"
        ).fetchall()
        return [r["session_id"] for r in rows]

    def mark_session(self, session_id: str, status: str, failed_stage: str | None = None) -> None:
        with self._lock, self._conn:
            self._conn.execute(
                "UPDATE sessions SET judge_status = ?, failed_stage = ? WHERE session_id = ?",
                (status, failed_stage, session_id),
            )

    def insert_reasoning_audit(self, session_id: str, stage: str, reasoning: str) -> None:
        with self._lock, self._conn:
            self._conn.execute(
                "INSERT INTO judge_reasoning_audit (session_id, stage, reasoning, created_at)"
                " VALUES (?, ?, ?, ?)",
                (session_id, stage, reasoning, utcnow_iso()),
            )

    # -- exclusion flags -------------------------------------------------------

    def set_excluded(self, session_ids: Iterable[str], excluded: bool = True) -> None:
        ids = list(session_ids)
        with self._lock, self._conn:
            self._conn.executemany(
                "UPDATE context_info SET is_excluded = ? WHERE session_id = ?",
                [(int(excluded), sid) for sid in ids],
            )

    # -- queries ----------------------------------------------------------------

    def query(self, sql: str, params: tuple | dict = ()) -> list[dict]:
        """Run a read-only statement; writes are denied at the engine level."""
        with self._lock:
            self._conn.set_authorizer(_readonly_authorizer)
            try:
                cur = self._conn.execute(sql, params)
                return [dict(r) for r in cur.fetchall()]
            except sqlite3.DatabaseError as exc:
                if "not authorized" in str(exc):
                    raise ReadOnlyQueryError(f"write statements are rejected: {exc}") from exc
                raise
            finally:
                # set_authorizer(None) does not reset on older interpreters;
                # installing an allow-all hook restores write access reliably.
                self._conn.set_authorizer(_permissive_authorizer)

    def execute(self, sql: str, params: tuple | dict = ()) -> list[dict]:
        """Internal read/write access for the package's own modules."""
        with self._lock, self._conn:
            cur = self._conn.execute(sql, params)
            rows = cur.fetchall()
            return [dict(r) for r in rows]

    def executemany(self, sql: str, rows: Iterable[tuple]) -> None:
        with self._lock, self._conn:
            self._conn.executemany(sql, rows)
