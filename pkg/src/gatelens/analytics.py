"""Judge-accuracy metrics, composite quality, and replay win rates.

Metrics compare predicted signal cells against ground-truth labels over the
judge-generated boolean/categorical/ordinal columns; free-text and static
columns are out of scope. Ordinal columns are compared on their index
encoding in manifest level order.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from fractions import Fraction

from .registry import SchemaManifest

# The six three-point signals that make up composite quality, with the
# columns' short aliases accepted for convenience.
COMPOSITE_SIGNALS = (
    "overall_task_type_quality",
    "overall_response_completeness",
    "overall_instruction_following",
    "overall_factual_accuracy",
    "overall_response_relevance",
    "overall_response_coherence",
)

_POINTS = {
    "high": 3, "complete": 3,
    "medium": 2, "partial": 2,
    "low": 1, "incomplete": 1,
}


class MissingSignalError(KeyError):
    pass


class MetricInputError(ValueError):
    pass


@dataclass
class MetricReport:
    error_rate: float
    hamming_loss: float
    boolean_accuracy: float
    boolean_micro_f1: float
    categorical_accuracy: float
    ordinal_mae: float
    ordinal_rmse: float
    ordinal_norm_mae: float
    # pooled norm variant and per-column MAE kept for diagnostics
    ordinal_mae_per_column: dict[str, float]
    compared_cells: int

    def to_json(self) -> dict:
        return asdict(self)


def _comparable_columns(manifest: SchemaManifest) -> dict[tuple[str, str], object]:
    """(table, column) -> SignalColumn for every metric-covered column."""
    out = {}
    for table in manifest.core_tables:
        for col in table.judge_columns:
            if col.kind == "text":
                continue
            out[(table.name, col.name)] = col
    return out


def _normalize_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    if value in (0, 1):
        return bool(value)
    raise MetricInputError(f"expected a boolean cell, got {value!r}")


def compute_metrics(
    predictions: dict[str, dict[str, dict]],
    truth: dict[str, dict[str, dict]],
    manifest: SchemaManifest,
) -> MetricReport:
    """Score predictions against labels.

    Both inputs map session id -> table -> column -> value. Every labeled
    cell must have a predicted counterpart; extra predicted cells are
    ignored. Error rate pools mismatches over all cells; Hamming loss
    averages the per-session mismatch fraction.
    """
    columns = _comparable_columns(manifest)
    total = 0
    mismatched = 0
    # exact rationals so error_rate == hamming_loss is an identity (not just
    # approximate) whenever sessions have equal cell counts
    per_session_fractions: list[Fraction] = []
    bool_total = bool_correct = 0
    tp = fp = fn = 0
    cat_total = cat_correct = 0
    ordinal_diffs: list[float] = []
    per_column_diffs: dict[str, list[float]] = {}
    per_column_span: dict[str, int] = {}

    for session_id, label_tables in truth.items():
        if session_id not in predictions:
            raise MetricInputError(f"no predictions for session '{session_id}'")
        pred_tables = predictions[session_id]
        session_total = 0
        session_mismatched = 0
        for table_name, label_cols in label_tables.items():
            for col_name, label_value in label_cols.items():
                col = columns.get((table_name, col_name))
                if col is None:
                    continue  # text/static/unknown columns are not scored
                try:
                    predicted = pred_tables[table_name][col_name]
                except KeyError:
                    raise MetricInputError(
                        f"session '{session_id}' missing prediction for {table_name}.{col_name}"
                    ) from None
                session_total += 1
                if col.kind == "boolean":
                    p = _normalize_bool(predicted)
                    t = _normalize_bool(label_value)
                    bool_total += 1
                    if p == t:
                        bool_correct += 1
                    else:
                        session_mismatched += 1
                    if p and t:
                        tp += 1
                    elif p and not t:
                        fp += 1
                    elif t and not p:
                        fn += 1
                elif col.kind == "categorical":
                    cat_total += 1
                    if predicted == label_value:
                        cat_correct += 1
                    else:
                        session_mismatched += 1
                else:  # ordinal
                    levels = list(col.levels)
                    try:
                        diff = abs(levels.index(predicted) - levels.index(label_value))
                    except ValueError as exc:
                        raise MetricInputError(
                            f"{table_name}.{col_name}: value outside declared levels: {exc}"
                        ) from None
                    ordinal_diffs.append(float(diff))
                    key = f"{table_name}.{col_name}"
                    per_column_diffs.setdefault(key, []).append(float(diff))
                    per_column_span[key] = len(levels) - 1
                    if diff != 0:
                        session_mismatched += 1
        total += session_total
        mismatched += session_mismatched
        if session_total:
            per_session_fractions.append(Fraction(session_mismatched, session_total))

    if total == 0:
        raise MetricInputError("no comparable cells found")

    error_rate = float(Fraction(mismatched, total))
    hamming = float(sum(per_session_fractions) / len(per_session_fractions))
    boolean_accuracy = bool_correct / bool_total if bool_total else 1.0
    f1_denominator = 2 * tp + fp + fn
    boolean_micro_f1 = (2 * tp / f1_denominator) if f1_denominator else 1.0
    categorical_accuracy = cat_correct / cat_total if cat_total else 1.0
    if ordinal_diffs:
        ordinal_mae = sum(ordinal_diffs) / len(ordinal_diffs)
        ordinal_rmse = math.sqrt(sum(d * d for d in ordinal_diffs) / len(ordinal_diffs))
    else:
        ordinal_mae = ordinal_rmse = 0.0
    per_column_mae = {
        key: sum(diffs) / len(diffs) for key, diffs in sorted(per_column_diffs.items())
    }
    if per_column_mae:
        ordinal_norm_mae = sum(
            mae / per_column_span[key] for key, mae in per_column_mae.items()
        ) / len(per_column_mae)
    else:
        ordinal_norm_mae = 0.0

    return MetricReport(
        error_rate=error_rate,
        hamming_loss=hamming,
        boolean_accuracy=boolean_accuracy,
        boolean_micro_f1=boolean_micro_f1,
        categorical_accuracy=categorical_accuracy,
        ordinal_mae=ordinal_mae,
        ordinal_rmse=ordinal_rmse,
        ordinal_norm_mae=ordinal_norm_mae,
        ordinal_mae_per_column=per_column_mae,
        compared_cells=total,
    )


def collect_predictions(store, include_excluded: bool = False) -> dict[str, dict[str, dict]]:
    """Assemble stored bundles into the session -> table -> column -> value
    shape that compute_metrics expects. Boolean columns come back as bool."""
    manifest = store.manifest
    where = "" if include_excluded else " WHERE ctx.is_excluded = 0"
    joins = {
        "context_info": "SELECT ctx.session_id AS _sid, t.* FROM context_info t"
                        " JOIN context_info ctx ON ctx.id = t.id" + where,
        "llm_response_info": "SELECT ctx.session_id AS _sid, t.* FROM llm_response_info t"
                             " JOIN context_info ctx ON ctx.id = t.context_id" + where,
        "issue_attribution": "SELECT ctx.session_id AS _sid, t.* FROM issue_attribution t"
                             " JOIN context_info ctx ON ctx.id = t.context_id" + where,
        "evaluation": "SELECT ctx.session_id AS _sid, t.* FROM evaluation t"
                      " JOIN context_info ctx ON ctx.id = t.context_id" + where,
    }
    out: dict[str, dict[str, dict]] = {}
    for table_name, sql in joins.items():
        spec = manifest.table(table_name)
        bool_cols = {c.name for c in spec.columns if c.kind in ("boolean", "static_bool")}
        col_names = [c.name for c in spec.columns]
        for row in store.execute(sql):
            record = {}
            for name in col_names:
                value = row[name]
                record[name] = bool(value) if name in bool_cols else value
            out.setdefault(row["_sid"], {})[table_name] = record
    return out


def composite_quality(record: dict) -> int:
    """Sum of the six quality signals, 6..18.

    high/complete = 3, medium/partial = 2, low/incomplete = 1, anything else
    0, except factual accuracy, whose fallback is 3 so that responses with
    no checkable claims are not penalized.
    """
    score = 0
    for signal in COMPOSITE_SIGNALS:
        if signal not in record:
            raise MissingSignalError(signal)
        value = record[signal]
        if signal == "overall_factual_accuracy":
            score += {"high": 3, "medium": 2, "low": 1}.get(value, 3)
        else:
            score += _POINTS.get(value, 0)
    return score


def win_rate(comparisons: list[float]) -> float:
    """Mean of {1 = candidate wins, 0.5 = tie, 0 = original wins} judgments."""
    if not comparisons:
        raise MetricInputError("empty comparison list")
    for value in comparisons:
        if value not in (0, 0.5, 1):
            raise MetricInputError(f"comparison values must be 0, 0.5 or 1, got {value!r}")
    return sum(comparisons) / len(comparisons)
