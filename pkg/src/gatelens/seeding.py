"""Deterministic synthetic traffic for desk-scale experiments.

Seeding fabricates organizations' sessions (conversations, gateway metrics,
and fully-populated evaluation bundles), writes the ground-truth labels to
a JSON file, and optionally perturbs the stored predictions with judge
noise and a fixed number of injected consistency violations. Everything is
driven by one RNG seed: the same spec reproduces the same warehouse and
the same ground-truth bytes.

Signal distributions are parameterized per organization so slice queries
(simple-complexity, creative tasks, per-domain) come out non-degenerate.
"""

from __future__ import annotations

import copy
import json
import random
from dataclasses import dataclass, field
from pathlib import Path

from .consistency import classify_values
from .gateway import Session
from .judge import extract_static_features
from .registry import SchemaManifest
from .store import EvaluationBundle, GatewayMetricsRecord, Store

_WORDS = (
    "ledger report draft budget itinerary recipe outline summary contract memo "
    "scene chapter lyric slogan campaign dataset schema query ticket incident "
    "translation paragraph caption profile roster syllabus brief agenda thread"
).split()


@dataclass
class ModelProfile:
    model_id: str
    provider_id: str
    input_cost_per_million_token: float
    output_cost_per_million_token: float
    region_id: str = "local"
    weight: float = 1.0
    # probability of each level for the six composite-quality signals
    quality: dict = field(default_factory=lambda: {"high": 0.85, "medium": 0.12, "low": 0.03})
    # optional per-request_complexity override of the quality distribution
    quality_by_complexity: dict = field(default_factory=dict)

    def quality_dist(self, complexity: str) -> dict:
        return self.quality_by_complexity.get(complexity, self.quality)


@dataclass
class SeedSpec:
    organizations: int = 3
    sessions_per_org: int = 100
    seed: int = 7
    noise_rate: float = 0.0
    injected_violations: int = 0
    models: list[ModelProfile] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.sessions_per_org < 1:
            raise ValueError("sessions_per_org must be >= 1")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ValueError("noise_rate must lie in [0, 1]")
        if not self.models:
            self.models = default_model_roster()

    @classmethod
    def from_json(cls, data: dict) -> "SeedSpec":
        models = [ModelProfile(**m) for m in data.get("models", [])]
        return cls(
            organizations=data.get("organizations", 3),
            sessions_per_org=data.get("sessions_per_org", 100),
            seed=data.get("seed", 7),
            noise_rate=data.get("noise_rate", 0.0),
            injected_violations=data.get("injected_violations", 0),
            models=models,
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "SeedSpec":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def default_model_roster() -> list[ModelProfile]:
    return [
        ModelProfile("atlas-large", "atlas", 1.00, 5.00,
                     quality={"high": 0.88, "medium": 0.10, "low": 0.02}),
        ModelProfile("breeze-lite", "breeze", 0.10, 0.40,
                     quality={"high": 0.82, "medium": 0.15, "low": 0.03}),
        ModelProfile("cinder-fast", "cinder", 0.20, 0.50,
                     quality={"high": 0.78, "medium": 0.18, "low": 0.04}),
        ModelProfile("dune-compact", "dune", 0.15, 1.20,
                     quality={"high": 0.70, "medium": 0.22, "low": 0.08}),
    ]


# Per-organization workload shapes: three archetypes (mixed assistant,
# roleplay-heavy, translation-heavy) cycled for additional organizations.
_ORG_PROFILES = [
    {
        "language": {"en": 0.65, "zh": 0.15, "es": 0.12, "fr": 0.08},
        "task_type": {
            "transformation": 0.24, "qa": 0.18, "creative": 0.14, "planning": 0.10,
            "extraction": 0.10, "coding": 0.06, "analysis": 0.06,
            "conversation": 0.06, "translation": 0.04, "other": 0.02,
        },
        "domain": {
            "entertainment_roleplay": 0.23, "technology": 0.18, "other": 0.17,
            "finance": 0.10, "education": 0.10, "business": 0.10,
            "health": 0.06, "marketing": 0.06,
        },
        "request_complexity": {"trivial": 0.08, "simple": 0.27, "moderate": 0.32, "complex": 0.33},
        "bools": {
            "request_requires_tool_call": 0.01, "request_requires_code_task": 0.04,
            "request_requires_math_task": 0.02, "request_requires_stylistic_transformation": 0.29,
            "request_requires_information_extraction": 0.17,
            "request_requires_multistep_reasoning": 0.38,
            "request_requires_multilingual_task": 0.16,
            "request_requires_creative_generation": 0.24, "request_requires_data_analysis": 0.02,
            "request_requires_latest_info": 0.02, "request_has_explicit_constraints": 0.95,
            "request_is_ambiguous": 0.10, "context_involves_safety_sensitive_content": 0.01,
            "context_is_noisy": 0.16, "context_has_persona_or_role_instruction": 0.95,
            "context_has_reference_material": 0.90,
            "context_references_previous_conversations": 0.06,
        },
    },
    {
        "language": {"en": 0.95, "fr": 0.05},
        "task_type": {"creative": 0.40, "planning": 0.25, "conversation": 0.15,
                      "transformation": 0.10, "qa": 0.08, "other": 0.02},
        "domain": {"entertainment_roleplay": 0.88, "other": 0.08, "education": 0.04},
        "request_complexity": {"trivial": 0.02, "simple": 0.10, "moderate": 0.20, "complex": 0.68},
        "bools": {
            "request_requires_tool_call": 0.0, "request_requires_code_task": 0.0,
            "request_requires_math_task": 0.0, "request_requires_stylistic_transformation": 0.07,
            "request_requires_information_extraction": 0.05,
            "request_requires_multistep_reasoning": 0.38,
            "request_requires_multilingual_task": 0.01,
            "request_requires_creative_generation": 0.66, "request_requires_data_analysis": 0.0,
            "request_requires_latest_info": 0.0, "request_has_explicit_constraints": 0.97,
            "request_is_ambiguous": 0.01, "context_involves_safety_sensitive_content": 0.0,
            "context_is_noisy": 0.01, "context_has_persona_or_role_instruction": 0.99,
            "context_has_reference_material": 0.97,
            "context_references_previous_conversations": 0.01,
        },
    },
    {
        "language": {"zh": 0.70, "en": 0.25, "ja": 0.05},
        "task_type": {"transformation": 0.90, "translation": 0.08, "other": 0.02},
        "domain": {"other": 0.36, "business": 0.30, "marketing": 0.20, "technology": 0.14},
        "request_complexity": {"trivial": 0.04, "simple": 0.86, "moderate": 0.08, "complex": 0.02},
        "bools": {
            "request_requires_tool_call": 0.0, "request_requires_code_task": 0.0,
            "request_requires_math_task": 0.0, "request_requires_stylistic_transformation": 0.92,
            "request_requires_information_extraction": 0.02,
            "request_requires_multistep_reasoning": 0.02,
            "request_requires_multilingual_task": 0.93,
            "request_requires_creative_generation": 0.02, "request_requires_data_analysis": 0.0,
            "request_requires_latest_info": 0.0, "request_has_explicit_constraints": 0.96,
            "request_is_ambiguous": 0.01, "context_involves_safety_sensitive_content": 0.0,
            "context_is_noisy": 0.01, "context_has_persona_or_role_instruction": 0.98,
            "context_has_reference_material": 0.97,
            "context_references_previous_conversations": 0.0,
        },
    },
]

_FLAG_TO_RESPONSE = {
    "request_requires_tool_call": "llm_response_has_tool_call",
    "request_requires_code_task": "llm_response_has_code_task",
    "request_requires_math_task": "llm_response_has_math_task",
    "request_requires_stylistic_transformation": "llm_response_has_stylistic_transformation",
    "request_requires_information_extraction": "llm_response_has_information_extraction",
    "request_requires_multistep_reasoning": "llm_response_has_multistep_reasoning",
    "request_requires_multilingual_task": "llm_response_has_multilingual_task",
    "request_requires_latest_info": "llm_response_has_latest_info_dependency",
    "request_requires_creative_generation": "llm_response_has_creative_generation",
    "request_requires_data_analysis": "llm_response_has_data_analysis",
    "context_involves_safety_sensitive_content": "llm_response_has_safety_sensitive_content",
    "context_has_reference_material": "llm_response_has_reference_material",
}


def _pick(rng: random.Random, dist: dict) -> str:
    items = list(dist.items())
    return rng.choices([k for k, _ in items], weights=[w for _, w in items], k=1)[0]


def _sentence(rng: random.Random, n_words: int) -> str:
    return " ".join(rng.choice(_WORDS) for _ in range(n_words))


@dataclass
class SeedResult:
    session_ids: list[str]
    truth: dict
    injected_session_ids: list[str]

    def summary(self) -> dict:
        return {
            "sessions": len(self.session_ids),
            "injected_violations": len(self.injected_session_ids),
        }


class Seeder:
    def __init__(self, store: Store, spec: SeedSpec):
        self.store = store
        self.spec = spec
        self.manifest: SchemaManifest = store.manifest
        self.rng = random.Random(spec.seed)

    # -- per-session fabrication ------------------------------------------------

    def _conversation(self) -> list[dict]:
        rng = self.rng
        messages = [
            {"role": "system", "content": _sentence(rng, rng.randint(8, 20))},
        ]
        for _turn in range(rng.randint(1, 3)):
            msg = {"role": "user", "content": _sentence(rng, rng.randint(10, 60))}
            if rng.random() < 0.04:
                msg["attachments"] = [{"modality": rng.choice(["image", "file"]), "name": "att-1"}]
            messages.append(msg)
            messages.append({"role": "assistant", "content": _sentence(rng, rng.randint(20, 90))})
        if messages[-1]["role"] != "assistant":
            messages.append({"role": "assistant", "content": _sentence(rng, rng.randint(20, 90))})
        return messages

    def _truth_context(self, profile: dict) -> dict:
        rng = self.rng
        record = {}
        for flag, p in profile["bools"].items():
            record[flag] = rng.random() < p
        record["context_domain_category"] = _pick(rng, profile["domain"])
        record["request_task_type"] = _pick(rng, profile["task_type"])
        record["request_output_format"] = _pick(
            rng, {"plain_text": 0.55, "json": 0.25, "markdown": 0.15, "table": 0.05}
        )
        record["context_user_sentiment"] = _pick(
            rng, {"neutral": 0.93, "positive": 0.04, "negative": 0.02, "mixed": 0.01}
        )
        record["request_complexity"] = _pick(rng, profile["request_complexity"])
        record["context_complexity"] = _pick(
            rng, {"trivial": 0.05, "simple": 0.35, "moderate": 0.35, "complex": 0.25}
        )
        lang = _pick(rng, profile["language"])
        record["context_language"] = lang
        record["expected_response_language"] = lang
        return record

    def _truth_response(self, ctx: dict) -> dict:
        rng = self.rng
        record = {}
        for request_flag, response_flag in _FLAG_TO_RESPONSE.items():
            p = 0.90 if ctx[request_flag] else 0.02
            record[response_flag] = rng.random() < p
        record["llm_response_is_ambiguous"] = rng.random() < 0.01
        record["llm_response_is_refusal"] = rng.random() < 0.01
        record["llm_response_has_factual_error"] = rng.random() < 0.02
        record["llm_response_format"] = (
            ctx["request_output_format"] if rng.random() < 0.9 else "plain_text"
        )
        record["llm_response_complexity"] = _pick(
            rng, {"trivial": 0.15, "simple": 0.40, "moderate": 0.30, "complex": 0.15}
        )
        record["llm_response_hallucination_risk"] = _pick(
            rng, {"none": 0.78, "low": 0.15, "medium": 0.05, "high": 0.02}
        )
        record["llm_response_language"] = ctx["expected_response_language"]
        return record

    def _truth_attribution_and_severity(self, ctx: dict, resp: dict) -> tuple[dict, dict]:
        rng = self.rng
        attribution: dict = {}
        severity: dict = {}
        for family in self.manifest.families:
            rq = bool(ctx.get(family.request_flag)) if family.request_flag else False
            rs = bool(resp.get(family.response_flag)) if family.response_flag else False
            applies = rq or rs or (family.name == "output_format")
            if not applies:
                attr = "not_applicable" if rng.random() < 0.9 else "none"
                sev = "not_applicable" if attr == "not_applicable" else "none"
            elif rng.random() < 0.88:
                attr = "none"
                sev = "none"
            else:
                attr = _pick(rng, {"llm": 0.55, "user": 0.15, "context": 0.15, "both": 0.15})
                sev = _pick(rng, {"minor": 0.7, "major": 0.3})
            attribution[family.attribution_column] = attr
            severity[family.severity_column] = sev
        attribution["hallucination_detected"] = rng.random() < 0.02
        if attribution["hallucination_detected"]:
            severity["severity_of_hallucination"] = _pick(rng, {"minor": 0.7, "major": 0.3})
        else:
            severity["severity_of_hallucination"] = _pick(
                rng, {"not_applicable": 0.5, "none": 0.5}
            )
        return attribution, severity

    def _truth_evaluation(self, severity: dict, quality_dist: dict) -> dict:
        rng = self.rng
        record = dict(severity)
        record["response_is_appropriate"] = rng.random() < 0.995
        record["response_is_verbose"] = rng.random() < 0.08
        top = {"high": quality_dist.get("high", 0.8),
               "medium": quality_dist.get("medium", 0.15),
               "low": quality_dist.get("low", 0.05)}
        for signal in (
            "overall_domain_category_quality",
            "overall_task_type_quality",
            "overall_response_relevance",
            "overall_response_coherence",
            "overall_instruction_following",
            "overall_respond_and_resolve_quality",
        ):
            record[signal] = _pick(rng, top)
        completeness_map = {"high": "complete", "medium": "partial", "low": "incomplete"}
        record["overall_response_completeness"] = completeness_map[_pick(rng, top)]
        factual_map = {"high": "high", "medium": "medium", "low": "low"}
        if rng.random() < 0.4:
            record["overall_factual_accuracy"] = "none"
        else:
            record["overall_factual_accuracy"] = factual_map[_pick(rng, top)]
        record["safety_appropriateness"] = _pick(
            rng, {"appropriate": 0.99, "borderline": 0.008, "inappropriate": 0.002}
        )
        return record

    # -- noise and injected violations ---------------------------------------

    def _noise_record(self, table: str, record: dict) -> dict:
        if self.spec.noise_rate <= 0:
            return record
        rng = self.rng
        spec = self.manifest.table(table)
        noisy = dict(record)
        for col in spec.judge_columns:
            if col.kind == "text" or rng.random() >= self.spec.noise_rate:
                continue
            if col.kind == "boolean":
                noisy[col.name] = not noisy[col.name]
            else:
                alternatives = [lvl for lvl in col.levels if lvl != noisy[col.name]]
                noisy[col.name] = rng.choice(alternatives)
        return noisy

    def _repair_consistency(self, predicted: dict[str, dict], truth: dict[str, dict]) -> None:
        """Revert any family cells whose noisy values form a violation."""
        ctx_p, resp_p = predicted["context_info"], predicted["llm_response_info"]
        attr_p, eval_p = predicted["issue_attribution"], predicted["evaluation"]
        for family in self.manifest.families:
            rq = bool(ctx_p.get(family.request_flag)) if family.request_flag else False
            rs = bool(resp_p.get(family.response_flag)) if family.response_flag else False
            kind = classify_values(
                rq, rs,
                attr_p[family.attribution_column],
                eval_p[family.severity_column],
                check_absence=family.absence_checkable,
            )
            if kind is None:
                continue
            if family.request_flag:
                ctx_p[family.request_flag] = truth["context_info"][family.request_flag]
            if family.response_flag:
                resp_p[family.response_flag] = truth["llm_response_info"][family.response_flag]
            attr_p[family.attribution_column] = truth["issue_attribution"][family.attribution_column]
            eval_p[family.severity_column] = truth["evaluation"][family.severity_column]

    @staticmethod
    def inject_violation(predicted: dict[str, dict]) -> None:
        """Force an unmistakable absence violation on the tool_call family."""
        predicted["context_info"]["request_requires_tool_call"] = False
        predicted["llm_response_info"]["llm_response_has_tool_call"] = False
        predicted["issue_attribution"]["issue_caused_by_tool_call"] = "llm"
        predicted["evaluation"]["severity_of_tool_call"] = "major"

    # -- main entry ---------------------------------------------------------------

    def run(self, truth_path: str | Path | None = None) -> SeedResult:
        spec = self.spec
        rng = self.rng
        for profile in spec.models:
            self.store.upsert_model_cost(
                profile.model_id,
                profile.provider_id,
                profile.input_cost_per_million_token,
                profile.output_cost_per_million_token,
            )

        model_weights = [m.weight for m in spec.models]
        truth_out: dict[str, dict] = {}
        session_ids: list[str] = []
        injected: list[str] = []
        pending_bundles: dict[str, EvaluationBundle] = {}
        counter = 0

        for org_index in range(spec.organizations):
            org = f"org-{chr(ord('a') + org_index % 26)}{org_index // 26 or ''}"
            profile = _ORG_PROFILES[org_index % len(_ORG_PROFILES)]
            for j in range(spec.sessions_per_org):
                counter += 1
                session_id = f"{org}-{j + 1:04d}"
                messages = self._conversation()
                model = rng.choices(spec.models, weights=model_weights, k=1)[0]

                session = Session(
                    session_id=session_id,
                    messages=messages,
                    model_id=model.model_id,
                    provider_id=model.provider_id,
                )
                static = extract_static_features(session)
                prompt_tokens = static["prompt_token_count"]
                completion_tokens = static["response_token_count"]

                latency = round(rng.uniform(0.4, 3.0), 4)
                ttft = round(rng.uniform(0.05, latency * 0.5), 4)
                total = prompt_tokens + completion_tokens
                metrics = GatewayMetricsRecord(
                    request_id=session_id,
                    user_id=f"{org}-user-{1 + j % 7}",
                    model_id=model.model_id,
                    provider_id=model.provider_id,
                    region_id=model.region_id,
                    latency=latency,
                    ttft=ttft,
                    throughput=total / latency,
                    generation_speed=completion_tokens / (latency - ttft),
                    is_failed=False,
                    is_timeout=False,
                    error_type=None,
                    error_message=None,
                    prompt_tokens=prompt_tokens,
                    completion_tokens=completion_tokens,
                    reasoning_tokens=0,
                    total_tokens=total,
                    created_at=f"2026-01-01T{counter // 3600 % 24:02d}:{counter // 60 % 60:02d}:{counter % 60:02d}Z",
                )
                metrics_id = self.store.insert_gateway_metrics(metrics)
                self.store.insert_session(
                    session_id, model.model_id, model.provider_id,
                    {"messages": messages}, gateway_metrics_id=metrics_id,
                    org_id=org, created_at=metrics.created_at,
                )

                ctx = self._truth_context(profile)
                resp = self._truth_response(ctx)
                attribution, severity = self._truth_attribution_and_severity(ctx, resp)
                evaluation = self._truth_evaluation(
                    severity, model.quality_dist(ctx["request_complexity"])
                )
                truth = {
                    "context_info": {**ctx, **static},
                    "llm_response_info": resp,
                    "issue_attribution": attribution,
                    "evaluation": evaluation,
                }
                truth_out[session_id] = copy.deepcopy(truth)

                predicted = {
                    table: self._noise_record(table, dict(record))
                    for table, record in truth.items()
                }
                self._repair_consistency(predicted, truth)
                session_ids.append(session_id)

                pending_bundles[session_id] = EvaluationBundle(
                    session_id=session_id,
                    context_info=predicted["context_info"],
                    llm_response_info=predicted["llm_response_info"],
                    issue_attribution=predicted["issue_attribution"],
                    evaluation=predicted["evaluation"],
                    gateway_metrics_id=metrics_id,
                )

        # Corrupt the chosen sessions after all bundles exist, spread evenly.
        if spec.injected_violations:
            stride = max(1, len(session_ids) // spec.injected_violations)
            chosen = session_ids[::stride][: spec.injected_violations]
            for session_id in chosen:
                self.inject_violation(pending_bundles[session_id].records())
                injected.append(session_id)

        for session_id in session_ids:
            self.store.insert_bundle(pending_bundles[session_id])
            self.store.mark_session(session_id, "judged")

        truth_doc = {"seed": spec.seed, "sessions": truth_out}
        if truth_path is not None:
            Path(truth_path).write_text(
                json.dumps(truth_doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
            )
        return SeedResult(session_ids=session_ids, truth=truth_doc, injected_session_ids=injected)


def seed_warehouse(store: Store, spec: SeedSpec, truth_path: str | Path | None = None) -> SeedResult:
    if store.bundle_count() > 0:
        raise RuntimeError("warehouse already contains bundles; refuse to seed (use force)")
    return Seeder(store, spec).run(truth_path)


def load_truth(path: str | Path) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    return doc["sessions"]
