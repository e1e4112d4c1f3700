"""Multi-provider LLM gateway with schema-driven response evaluation.

A proxy that logs operational metrics for every request, samples sessions
into a staged schema-constrained judging pipeline producing typed
relational records, enforces cross-table consistency over them, and turns
the accumulated warehouse into quality/cost-aware routing policies.
"""

from .analytics import MetricReport, composite_quality, compute_metrics, win_rate
from .consistency import ConsistencyChecker, Violation, classify_values
from .gateway import (
    ChatRequest,
    Gateway,
    ProviderConfig,
    SamplingConfig,
    Session,
    compute_metrics as compute_request_metrics,
    sample_decision,
)
from .judge import (
    HTTPJudgeBackend,
    JudgePipeline,
    SchemaFillBackend,
    ScriptedJudgeBackend,
    StagePlan,
    extract_static_features,
)
from .registry import (
    SchemaManifest,
    build_judge_schema,
    compile_ddl,
    default_manifest,
    load_manifest,
)
from .routing import (
    RoutingPolicy,
    build_policy,
    classify_context,
    derive_min_cost_policy,
    derive_provider_policy,
    derive_task_slice_policy,
    rank_models_by_quality,
    route,
)
from .seeding import SeedSpec, seed_warehouse
from .store import EvaluationBundle, GatewayMetricsRecord, Store

__version__ = "0.1.0"
