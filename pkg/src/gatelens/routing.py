"""Quality/cost-aware routing: offline policy derivation plus the
request-time lookup.

Derivations aggregate per-session quality points and dollar cost by model
or provider and apply margin filters (cheapest within a quality margin of
the best, strictly-better-on-a-slice, provider ranking by median TTFT).
Each derivation has a companion SQL template in the canonical warehouse
dialect; the module computes in Python over raw session rows, and the
templates provide an independent route for equivalence testing and ad-hoc
use. Filtered (inconsistent) sessions and failed requests are excluded
everywhere except the quality ranking, which mirrors its template exactly.

Request-time routing classifies context signals with a lightweight backend
and looks the slice tuple up in a materialized policy; every decision logs
the slice and the supporting evidence so it can be explained afterwards.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import jsonschema

from .analytics import COMPOSITE_SIGNALS, composite_quality
from .registry import REASONING_FIELD, SchemaManifest, build_judge_schema
from .store import Store, utcnow_iso

logger = logging.getLogger(__name__)

DEFAULT_SLICE_KEYS = ("request_task_type", "context_domain_category", "request_complexity")

QUALITY_POINTS = {"high": 3, "medium": 2, "low": 1}


class DerivationError(ValueError):
    pass


@dataclass
class ModelCandidate:
    model_id: str
    session_count: int
    avg_quality: float
    avg_cost: float


@dataclass
class ProviderCandidate:
    provider_id: str
    session_count: int
    avg_quality: float
    median_ttft: float | None


@dataclass
class RankedModel:
    model_id: str
    session_count: int
    avg_quality: float
    input_price: float
    output_price: float


# ---------------------------------------------------------------------------
# SQL templates (canonical dialect; MEDIAN stands in for PERCENTILE_CONT(0.5),
# costs are normalized to USD, and consistency-filtered sessions are excluded)
# ---------------------------------------------------------------------------

_SESSION_COST = (
    "(gw.prompt_tokens * mp.input_cost_per_million_token"
    " + gw.completion_tokens * mp.output_cost_per_million_token) / 1000000.0"
)

_QUALITY_CASE = (
    "CASE eval.overall_task_type_quality"
    " WHEN 'high' THEN 3 WHEN 'medium' THEN 2 WHEN 'low' THEN 1 ELSE 0 END"
)

MIN_COST_MODEL_SQL = f"""
WITH model_perf AS (
  SELECT gw.model_id,
         COUNT(*) AS n,
         AVG({_QUALITY_CASE}) AS avg_quality,
         AVG({_SESSION_COST}) AS avg_cost
  FROM gateway_metrics   gw
  JOIN llm_response_info llm  ON llm.gateway_metrics_id = gw.id
  JOIN context_info      ctx  ON ctx.id = llm.context_id
  JOIN evaluation        eval ON eval.context_id = llm.context_id
  JOIN model_provider    mp   ON mp.model_id = gw.model_id
                             AND mp.provider_id = gw.provider_id
  WHERE gw.is_failed = FALSE AND ctx.is_excluded = 0
  GROUP BY 1
  HAVING COUNT(*) >= :min_sessions
)
SELECT model_id, n, avg_quality, avg_cost
FROM model_perf
WHERE avg_quality >= (1.0 - :quality_margin) * (SELECT MAX(avg_quality) FROM model_perf)
ORDER BY avg_cost, model_id;
"""

TASK_SLICE_MODEL_SQL = f"""
WITH task_perf AS (
  SELECT gw.model_id,
         COUNT(*) AS n,
         AVG({_QUALITY_CASE}) AS avg_quality,
         AVG({_SESSION_COST}) AS avg_cost
  FROM gateway_metrics   gw
  JOIN llm_response_info llm  ON llm.gateway_metrics_id = gw.id
  JOIN context_info      ctx  ON ctx.id = llm.context_id
  JOIN evaluation        eval ON eval.context_id = llm.context_id
  JOIN model_provider    mp   ON mp.model_id = gw.model_id
                             AND mp.provider_id = gw.provider_id
  WHERE ctx.request_task_type = :task_type
    AND gw.is_failed = FALSE AND ctx.is_excluded = 0
  GROUP BY 1
  HAVING COUNT(*) >= :min_sessions
)
SELECT model_id, n, avg_quality, avg_cost
FROM task_perf
WHERE avg_quality > (
    SELECT avg_quality FROM task_perf WHERE model_id = :current_model_id)
ORDER BY avg_cost, model_id;
"""

PROVIDER_RANK_SQL = f"""
WITH provider_perf AS (
  SELECT gw.provider_id,
         COUNT(*) AS n,
         AVG({_QUALITY_CASE}) AS avg_quality,
         MEDIAN(gw.ttft) AS p50_ttft
  FROM gateway_metrics   gw
  JOIN llm_response_info llm  ON llm.gateway_metrics_id = gw.id
  JOIN context_info      ctx  ON ctx.id = llm.context_id
  JOIN evaluation        eval ON eval.context_id = llm.context_id
  WHERE gw.model_id = :target_model_id
    AND gw.is_failed = FALSE AND ctx.is_excluded = 0
  GROUP BY 1
  HAVING COUNT(*) >= :min_sessions
)
SELECT provider_id, n, avg_quality, p50_ttft
FROM provider_perf
WHERE avg_quality >= (1.0 - :quality_margin) * (SELECT MAX(avg_quality) FROM provider_perf)
ORDER BY p50_ttft, provider_id
LIMIT :top_k;
"""

_COMPOSITE_CASE = """CASE eval.overall_task_type_quality
             WHEN 'high' THEN 3 WHEN 'medium' THEN 2
             WHEN 'low' THEN 1 ELSE 0 END
         + CASE eval.overall_response_completeness
             WHEN 'complete' THEN 3 WHEN 'partial' THEN 2
             WHEN 'incomplete' THEN 1 ELSE 0 END
         + CASE eval.overall_instruction_following
             WHEN 'high' THEN 3 WHEN 'medium' THEN 2
             WHEN 'low' THEN 1 ELSE 0 END
         + CASE eval.overall_factual_accuracy
             WHEN 'high' THEN 3 WHEN 'medium' THEN 2
             WHEN 'low' THEN 1 ELSE 3 END
         + CASE eval.overall_response_relevance
             WHEN 'high' THEN 3 WHEN 'medium' THEN 2
             WHEN 'low' THEN 1 ELSE 0 END
         + CASE eval.overall_response_coherence
             WHEN 'high' THEN 3 WHEN 'medium' THEN 2
             WHEN 'low' THEN 1 ELSE 0 END"""

QUALITY_RANK_SQL = f"""
SELECT gw.model_id,
       COUNT(*) AS n,
       AVG({_COMPOSITE_CASE}) AS avg_quality,
       MAX(mp.input_cost_per_million_token)  AS input_price,
       MAX(mp.output_cost_per_million_token) AS output_price
FROM context_info        ctx
JOIN llm_response_info   llm  ON llm.context_id = ctx.id
JOIN evaluation          eval ON eval.context_id = ctx.id
JOIN gateway_metrics     gw   ON gw.id = llm.gateway_metrics_id
JOIN model_provider      mp   ON mp.model_id = gw.model_id
                             AND mp.provider_id = gw.provider_id
WHERE ctx.request_complexity = :complexity AND ctx.is_excluded = 0
GROUP BY 1
HAVING COUNT(*) >= :min_sessions
ORDER BY avg_quality DESC, gw.model_id;
"""


# ---------------------------------------------------------------------------
# Python-side derivations
# ---------------------------------------------------------------------------


def _slice_where(slice_filter: dict | None) -> tuple[str, list]:
    if not slice_filter:
        return "", []
    clauses = []
    params = []
    for column, value in slice_filter.items():
        if not column.isidentifier():
            raise DerivationError(f"bad slice column name {column!r}")
        clauses.append(f"ctx.{column} = ?")
        params.append(value)
    return " AND " + " AND ".join(clauses), params


def _session_rows(store: Store, slice_filter: dict | None = None, include_failed: bool = False) -> list[dict]:
    """One row per evaluated session: model, provider, quality signals,
    token counts, costs, ttft. Excluded sessions are dropped."""
    where, params = _slice_where(slice_filter)
    failed_clause = "" if include_failed else " AND gw.is_failed = 0"
    signal_cols = ", ".join(f"eval.{name}" for name in COMPOSITE_SIGNALS)
    sql = f"""
        SELECT gw.model_id, gw.provider_id, gw.ttft,
               gw.prompt_tokens, gw.completion_tokens,
               mp.input_cost_per_million_token AS input_cost,
               mp.output_cost_per_million_token AS output_cost,
               {signal_cols}
        FROM gateway_metrics gw
        JOIN llm_response_info llm ON llm.gateway_metrics_id = gw.id
        JOIN context_info ctx ON ctx.id = llm.context_id
        JOIN evaluation eval ON eval.context_id = llm.context_id
        JOIN model_provider mp ON mp.model_id = gw.model_id
                              AND mp.provider_id = gw.provider_id
        WHERE ctx.is_excluded = 0{failed_clause}{where}
        ORDER BY gw.id
    """
    return store.execute(sql, tuple(params))


def _session_cost(row: dict) -> float:
    return (
        row["prompt_tokens"] * row["input_cost"]
        + row["completion_tokens"] * row["output_cost"]
    ) / 1_000_000.0


def _quality_points(row: dict) -> int:
    return QUALITY_POINTS.get(row["overall_task_type_quality"], 0)


def _median(values: list[float]) -> float | None:
    present = sorted(v for v in values if v is not None)
    if not present:
        return None
    mid = len(present) // 2
    if len(present) % 2:
        return present[mid]
    return (present[mid - 1] + present[mid]) / 2.0


def _group_models(rows: list[dict]) -> dict[str, list[dict]]:
    grouped: dict[str, list[dict]] = {}
    for row in rows:
        grouped.setdefault(row["model_id"], []).append(row)
    return grouped


def derive_min_cost_policy(
    store: Store,
    quality_margin: float = 0.10,
    min_sessions: int = 30,
    slice_filter: dict | None = None,
) -> list[ModelCandidate]:
    """Models within `quality_margin` of the best average quality, cheapest
    first. Quality is the 3/2/1 mapping of overall task-type quality; cost
    is the mean per-session dollar spend."""
    rows = _session_rows(store, slice_filter)
    if not rows:
        raise DerivationError("no evaluated sessions in the warehouse")
    candidates = []
    for model_id, model_rows in _group_models(rows).items():
        if len(model_rows) < min_sessions:
            continue
        quality = sum(_quality_points(r) for r in model_rows) / len(model_rows)
        cost = sum(_session_cost(r) for r in model_rows) / len(model_rows)
        candidates.append(ModelCandidate(model_id, len(model_rows), quality, cost))
    if not candidates:
        return []
    best = max(c.avg_quality for c in candidates)
    threshold = (1.0 - quality_margin) * best
    survivors = [c for c in candidates if c.avg_quality >= threshold]
    survivors.sort(key=lambda c: (c.avg_cost, c.model_id))
    return survivors


def derive_task_slice_policy(
    store: Store,
    slice_filter: dict,
    current_model: str,
    min_sessions: int = 30,
) -> list[ModelCandidate]:
    """Models strictly better than the deployed one on a slice, cheapest first."""
    rows = _session_rows(store, slice_filter)
    grouped = _group_models(rows)
    stats: dict[str, ModelCandidate] = {}
    for model_id, model_rows in grouped.items():
        if len(model_rows) < min_sessions:
            continue
        quality = sum(_quality_points(r) for r in model_rows) / len(model_rows)
        cost = sum(_session_cost(r) for r in model_rows) / len(model_rows)
        stats[model_id] = ModelCandidate(model_id, len(model_rows), quality, cost)
    if current_model not in stats:
        raise DerivationError(f"current model '{current_model}' absent from the slice")
    bar = stats[current_model].avg_quality
    better = [c for c in stats.values() if c.model_id != current_model and c.avg_quality > bar]
    better.sort(key=lambda c: (c.avg_cost, c.model_id))
    return better


def derive_provider_policy(
    store: Store,
    model_id: str,
    quality_margin: float = 0.05,
    top_k: int = 3,
    min_sessions: int = 30,
) -> list[ProviderCandidate]:
    """Providers of one model within the quality margin, fastest median TTFT first."""
    rows = [r for r in _session_rows(store) if r["model_id"] == model_id]
    grouped: dict[str, list[dict]] = {}
    for row in rows:
        grouped.setdefault(row["provider_id"], []).append(row)
    candidates = []
    for provider_id, provider_rows in grouped.items():
        if len(provider_rows) < min_sessions:
            continue
        quality = sum(_quality_points(r) for r in provider_rows) / len(provider_rows)
        ttft = _median([r["ttft"] for r in provider_rows])
        candidates.append(ProviderCandidate(provider_id, len(provider_rows), quality, ttft))
    if not candidates:
        raise DerivationError(f"no provider with >= {min_sessions} sessions for '{model_id}'")
    best = max(c.avg_quality for c in candidates)
    threshold = (1.0 - quality_margin) * best
    survivors = [c for c in candidates if c.avg_quality >= threshold]
    survivors.sort(key=lambda c: (c.median_ttft if c.median_ttft is not None else float("inf"), c.provider_id))
    return survivors[:top_k]


def rank_models_by_quality(
    store: Store,
    slice_filter: dict | None = None,
    min_sessions: int = 10,
) -> list[RankedModel]:
    """Composite-quality leaderboard for a slice, price columns included.

    Mirrors the quality-rank template exactly, failed requests included,
    so the two routes stay comparable."""
    rows = _session_rows(store, slice_filter, include_failed=True)
    ranked = []
    for model_id, model_rows in _group_models(rows).items():
        if len(model_rows) < min_sessions:
            continue
        quality = sum(composite_quality(r) for r in model_rows) / len(model_rows)
        ranked.append(
            RankedModel(
                model_id=model_id,
                session_count=len(model_rows),
                avg_quality=quality,
                input_price=max(r["input_cost"] for r in model_rows),
                output_price=max(r["output_cost"] for r in model_rows),
            )
        )
    ranked.sort(key=lambda m: (-m.avg_quality, m.model_id))
    return ranked


# ---------------------------------------------------------------------------
# Materialized policies
# ---------------------------------------------------------------------------


@dataclass
class PolicyEntry:
    model_id: str
    provider_id: str | None
    avg_quality: float
    avg_cost: float
    session_count: int

    def evidence(self) -> dict:
        return {
            "avg_quality": self.avg_quality,
            "avg_cost": self.avg_cost,
            "session_count": self.session_count,
        }


@dataclass
class RoutingPolicy:
    slice_keys: tuple[str, ...]
    entries: dict[tuple, PolicyEntry]
    default_model: str

    def to_json(self) -> dict:
        return {
            "slice_keys": list(self.slice_keys),
            "default_model": self.default_model,
            "entries": [
                {
                    "slice": dict(zip(self.slice_keys, key)),
                    "model_id": entry.model_id,
                    "provider_id": entry.provider_id,
                    "evidence": entry.evidence(),
                }
                for key, entry in sorted(self.entries.items())
            ],
        }

    @classmethod
    def from_json(cls, data: dict) -> "RoutingPolicy":
        slice_keys = tuple(data["slice_keys"])
        entries = {}
        for raw in data["entries"]:
            key = tuple(raw["slice"][k] for k in slice_keys)
            ev = raw.get("evidence", {})
            entries[key] = PolicyEntry(
                model_id=raw["model_id"],
                provider_id=raw.get("provider_id"),
                avg_quality=ev.get("avg_quality", 0.0),
                avg_cost=ev.get("avg_cost", 0.0),
                session_count=ev.get("session_count", 0),
            )
        return cls(slice_keys=slice_keys, entries=entries, default_model=data["default_model"])


def build_policy(
    store: Store,
    default_model: str,
    slice_keys: tuple[str, ...] = DEFAULT_SLICE_KEYS,
    quality_margin: float = 0.10,
    min_sessions: int = 10,
) -> RoutingPolicy:
    """Materialize a policy: per observed slice tuple, the cheapest model
    within the quality margin of that slice's best."""
    key_cols = ", ".join(f"ctx.{k}" for k in slice_keys)
    slices = store.execute(
        f"""SELECT DISTINCT {key_cols}
            FROM context_info ctx
            JOIN llm_response_info llm ON llm.context_id = ctx.id
            WHERE ctx.is_excluded = 0 AND llm.gateway_metrics_id IS NOT NULL
            ORDER BY {key_cols}"""
    )
    entries: dict[tuple, PolicyEntry] = {}
    for row in slices:
        slice_filter = {k: row[k] for k in slice_keys}
        candidates = derive_min_cost_policy(
            store, quality_margin=quality_margin, min_sessions=min_sessions,
            slice_filter=slice_filter,
        )
        if not candidates:
            continue
        chosen = candidates[0]
        entries[tuple(row[k] for k in slice_keys)] = PolicyEntry(
            model_id=chosen.model_id,
            provider_id=None,
            avg_quality=chosen.avg_quality,
            avg_cost=chosen.avg_cost,
            session_count=chosen.session_count,
        )
    return RoutingPolicy(slice_keys=tuple(slice_keys), entries=entries, default_model=default_model)


def save_policy(store: Store, policy: RoutingPolicy) -> int:
    rows = store.execute(
        "INSERT INTO routing_policy (created_at, slice_keys, default_model)"
        " VALUES (?, ?, ?) RETURNING id",
        (utcnow_iso(), json.dumps(list(policy.slice_keys)), policy.default_model),
    )
    policy_id = rows[0]["id"]
    for key, entry in sorted(policy.entries.items()):
        store.execute(
            """INSERT INTO routing_policy_entry
                   (policy_id, slice_values, model_id, provider_id,
                    avg_quality, avg_cost, session_count)
               VALUES (?, ?, ?, ?, ?, ?, ?)""",
            (
                policy_id, json.dumps(list(key)), entry.model_id, entry.provider_id,
                entry.avg_quality, entry.avg_cost, entry.session_count,
            ),
        )
    return policy_id


def load_policy(store: Store, policy_id: int | None = None) -> RoutingPolicy:
    if policy_id is None:
        rows = store.execute("SELECT * FROM routing_policy ORDER BY id DESC LIMIT 1")
    else:
        rows = store.execute("SELECT * FROM routing_policy WHERE id = ?", (policy_id,))
    if not rows:
        raise DerivationError("no routing policy stored")
    header = rows[0]
    slice_keys = tuple(json.loads(header["slice_keys"]))
    entries: dict[tuple, PolicyEntry] = {}
    for raw in store.execute(
        "SELECT * FROM routing_policy_entry WHERE policy_id = ? ORDER BY id", (header["id"],)
    ):
        entries[tuple(json.loads(raw["slice_values"]))] = PolicyEntry(
            model_id=raw["model_id"],
            provider_id=raw["provider_id"],
            avg_quality=raw["avg_quality"],
            avg_cost=raw["avg_cost"],
            session_count=raw["session_count"],
        )
    return RoutingPolicy(slice_keys=slice_keys, entries=entries, default_model=header["default_model"])


# ---------------------------------------------------------------------------
# Request-time classification and routing
# ---------------------------------------------------------------------------


def classify_context(
    request,
    backend,
    manifest: SchemaManifest,
    slice_keys: tuple[str, ...] | None = None,
    retry_budget: int = 2,
) -> dict | None:
    """Classify request-side signals with a lightweight backend.

    Only the boolean/categorical/ordinal context signals are requested (the
    free-text columns are skipped); ``slice_keys`` restricts the schema to
    the routing-relevant subset. Any backend failure or persistent
    validation failure degrades to None; the caller falls back to the
    default model and the proxy path never sees an exception.
    """
    schema = build_judge_schema(
        manifest,
        "context_info",
        reasoning_mode="in_schema",
        include_text=False,
        columns=list(slice_keys) if slice_keys else None,
    )
    payload = "<input>\n" + json.dumps({"messages": request.messages}, indent=2, ensure_ascii=False) + "\n</input>"
    prompt = (
        "You are a request classifier. Classify the incoming request's context"
        " signals exactly per the schema field descriptions. Raw input is"
        " provided as <input>...</input>."
    )
    try:
        if hasattr(backend, "begin_stage"):
            backend.begin_stage(getattr(request, "request_id", ""), "classify")
        for _attempt in range(retry_budget + 1):
            text = backend.call(prompt, payload, schema)
            try:
                record = json.loads(text)
                jsonschema.validate(record, schema)
            except (json.JSONDecodeError, jsonschema.ValidationError):
                continue
            record.pop(REASONING_FIELD, None)
            return record
        return None
    except Exception as exc:
        logger.warning("context classification unavailable: %s", exc)
        return None


@dataclass
class RouteDecision:
    model_id: str
    slice: dict
    matched: bool
    evidence: dict | None
    reason: str

    def to_json(self) -> dict:
        return {
            "model_id": self.model_id,
            "slice": self.slice,
            "matched": self.matched,
            "evidence": self.evidence,
            "reason": self.reason,
        }


def route(policy: RoutingPolicy, signals: dict | None, request_id: str | None = None) -> RouteDecision:
    """Algorithm: build the slice tuple from the classified signals, return
    the policy's model on a hit, the default model otherwise. Total: always
    yields a model."""
    if signals is None:
        decision = RouteDecision(policy.default_model, {}, False, None, "classifier_unavailable")
    else:
        missing = [k for k in policy.slice_keys if k not in signals]
        slice_map = {k: signals.get(k) for k in policy.slice_keys}
        if missing:
            decision = RouteDecision(policy.default_model, slice_map, False, None,
                                     f"missing signals: {missing}")
        else:
            key = tuple(signals[k] for k in policy.slice_keys)
            entry = policy.entries.get(key)
            if entry is None:
                decision = RouteDecision(policy.default_model, slice_map, False, None, "slice_miss")
            else:
                decision = RouteDecision(entry.model_id, slice_map, True, entry.evidence(), "slice_hit")
    logger.info(
        "route request=%s model=%s slice=%s evidence=%s reason=%s",
        request_id, decision.model_id, decision.slice, decision.evidence, decision.reason,
    )
    return decision


class PolicyHolder:
    """Atomically swappable policy reference.

    The gateway's router closes over a holder, so a freshly derived policy
    can be swapped in while serving; in-flight requests see either the old
    or the new snapshot, never a mix.
    """

    def __init__(self, policy: RoutingPolicy):
        self._policy = policy

    def get(self) -> RoutingPolicy:
        return self._policy

    def swap(self, policy: RoutingPolicy) -> None:
        self._policy = policy


def make_policy_router(policy: RoutingPolicy | PolicyHolder, backend, manifest: SchemaManifest,
                       restrict_to_slice_keys: bool = True):
    """Adapter giving the gateway a callable(request) -> model id."""
    holder = policy if isinstance(policy, PolicyHolder) else PolicyHolder(policy)

    def _router(request) -> str:
        current = holder.get()
        keys = current.slice_keys if restrict_to_slice_keys else None
        signals = None
        if backend is not None:
            signals = classify_context(request, backend, manifest, slice_keys=keys)
        return route(current, signals, request_id=getattr(request, "request_id", None)).model_id

    return _router
