"""Metric arithmetic against hand-computed and brute-force oracles."""

from __future__ import annotations

import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from gatelens.analytics import (
    MetricInputError,
    MissingSignalError,
    composite_quality,
    compute_metrics,
    win_rate,
)

from conftest import SIX_SIGNALS, quality_signals

# Small synthetic manifest-shaped fixtures: we drive compute_metrics with the
# real default manifest and cells drawn from a few of its columns.

BOOL_COLS = [
    ("context_info", "request_requires_tool_call"),
    ("context_info", "request_is_ambiguous"),
    ("llm_response_info", "llm_response_is_refusal"),
]
CAT_COLS = [
    ("context_info", "request_task_type", ["qa", "coding", "creative"]),
    ("issue_attribution", "issue_caused_by_tool_call", ["not_applicable", "none", "llm"]),
]
ORD_COLS = [
    ("evaluation", "severity_of_tool_call", ["not_applicable", "none", "minor", "major"]),
    ("evaluation", "overall_task_type_quality", ["low", "medium", "high"]),
    ("context_info", "request_complexity", ["trivial", "simple", "moderate", "complex"]),
]


def cells_to_tables(cells: dict) -> dict:
    out: dict = {}
    for (table, col), value in cells.items():
        out.setdefault(table, {})[col] = value
    return out


def sessions_from_cells(per_session: dict[str, dict]) -> dict:
    return {sid: cells_to_tables(cells) for sid, cells in per_session.items()}


class TestHandArithmetic:
    def test_pooled_vs_per_session_rates(self, manifest):
        bool_cols = [c.name for c in manifest.table("context_info").judge_columns if c.kind == "boolean"][:10]
        truth = {}
        pred = {}
        for sid, wrong in (("a", 1), ("b", 3)):
            truth[sid] = {"context_info": {c: False for c in bool_cols}}
            pred[sid] = {"context_info": {c: (i < wrong) for i, c in enumerate(bool_cols)}}
        report = compute_metrics(pred, truth, manifest)
        assert report.error_rate == pytest.approx(0.20)
        assert report.hamming_loss == pytest.approx(0.20)

    def test_unequal_cell_counts_split_the_rates(self, manifest):
        ctx_bools = [c.name for c in manifest.table("context_info").judge_columns if c.kind == "boolean"]
        resp_bools = [c.name for c in manifest.table("llm_response_info").judge_columns if c.kind == "boolean"]
        truth = {
            "a": {"context_info": {c: False for c in ctx_bools[:10]}},
            "b": {"context_info": {c: False for c in ctx_bools[:10]},
                  "llm_response_info": {c: False for c in resp_bools[:10]}},
        }
        pred = {
            "a": {"context_info": {c: (i < 1) for i, c in enumerate(ctx_bools[:10])}},
            "b": {"context_info": {c: (i < 3) for i, c in enumerate(ctx_bools[:10])},
                  "llm_response_info": {c: False for c in resp_bools[:10]}},
        }
        report = compute_metrics(pred, truth, manifest)
        assert report.error_rate == pytest.approx(4 / 30)
        assert report.hamming_loss == pytest.approx((0.1 + 0.15) / 2)

    def test_ordinal_off_by_one_everywhere(self, manifest):
        levels = ["not_applicable", "none", "minor", "major"]
        truth = {}
        pred = {}
        for i in range(8):
            t = levels[i % 3]  # never the top level, so +1 exists
            truth[f"s{i}"] = {"evaluation": {"severity_of_tool_call": t}}
            pred[f"s{i}"] = {"evaluation": {"severity_of_tool_call": levels[levels.index(t) + 1]}}
        report = compute_metrics(pred, truth, manifest)
        assert report.ordinal_mae == pytest.approx(1.0)
        assert report.ordinal_rmse == pytest.approx(1.0)
        assert report.ordinal_norm_mae == pytest.approx(1 / 3)

    def test_perfect_predictions(self, manifest):
        truth = {"s": {
            "context_info": {"request_requires_tool_call": True, "request_task_type": "qa"},
            "evaluation": {"severity_of_tool_call": "minor"},
        }}
        report = compute_metrics(truth, truth, manifest)
        assert report.error_rate == 0.0
        assert report.hamming_loss == 0.0
        assert report.boolean_accuracy == 1.0
        assert report.boolean_micro_f1 == 1.0
        assert report.categorical_accuracy == 1.0
        assert report.ordinal_mae == 0.0

    def test_missing_prediction_cell_rejected(self, manifest):
        truth = {"s": {"context_info": {"request_requires_tool_call": True}}}
        with pytest.raises(MetricInputError, match="missing prediction"):
            compute_metrics({"s": {"context_info": {}}}, truth, manifest)

    def test_text_and_static_cells_ignored(self, manifest):
        truth = {"s": {"context_info": {
            "request_requires_tool_call": False,
            "context_language": "en",          # text: not scored
            "total_message_count": 5,           # static: not scored
        }}}
        pred = {"s": {"context_info": {
            "request_requires_tool_call": False,
            "context_language": "zh",
            "total_message_count": 99,
        }}}
        report = compute_metrics(pred, truth, manifest)
        assert report.compared_cells == 1
        assert report.error_rate == 0.0


def _random_fixture(rng: random.Random, n_sessions: int):
    truth, pred = {}, {}
    for i in range(n_sessions):
        t_cells, p_cells = {}, {}
        for table, col in BOOL_COLS:
            t_cells[(table, col)] = rng.random() < 0.5
            p_cells[(table, col)] = rng.random() < 0.5
        for table, col, levels in CAT_COLS:
            t_cells[(table, col)] = rng.choice(levels)
            p_cells[(table, col)] = rng.choice(levels)
        for table, col, levels in ORD_COLS:
            t_cells[(table, col)] = rng.choice(levels)
            p_cells[(table, col)] = rng.choice(levels)
        truth[f"s{i}"] = cells_to_tables(t_cells)
        pred[f"s{i}"] = cells_to_tables(p_cells)
    return pred, truth


def brute_force_tally(pred, truth):
    """Independent cell-by-cell tally with its own confusion bookkeeping."""
    level_maps = {(t, c): lv for t, c, lv in ORD_COLS}
    total = wrong = 0
    per_session = []
    tp = fp = fn = tn = 0
    bool_right = bool_all = cat_right = cat_all = 0
    diffs = []
    col_diffs: dict = {}
    for sid, tables in truth.items():
        s_total = s_wrong = 0
        for table, cols in tables.items():
            for col, t_val in cols.items():
                p_val = pred[sid][table][col]
                s_total += 1
                if (table, col) in level_maps:
                    lv = level_maps[(table, col)]
                    d = abs(lv.index(p_val) - lv.index(t_val))
                    diffs.append(d)
                    col_diffs.setdefault((table, col), []).append(d)
                    if d:
                        s_wrong += 1
                elif isinstance(t_val, bool):
                    bool_all += 1
                    if p_val == t_val:
                        bool_right += 1
                    else:
                        s_wrong += 1
                    if t_val and p_val:
                        tp += 1
                    elif not t_val and p_val:
                        fp += 1
                    elif t_val and not p_val:
                        fn += 1
                    else:
                        tn += 1
                else:
                    cat_all += 1
                    if p_val == t_val:
                        cat_right += 1
                    else:
                        s_wrong += 1
        total += s_total
        wrong += s_wrong
        per_session.append(s_wrong / s_total)
    precision = tp / (tp + fp) if tp + fp else None
    recall = tp / (tp + fn) if tp + fn else None
    if precision is None or recall is None or precision + recall == 0:
        f1 = 1.0 if (tp + fp + fn) == 0 else 0.0
    else:
        f1 = 2 * precision * recall / (precision + recall)
    norm_terms = []
    for (table, col), ds in col_diffs.items():
        span = len(level_maps[(table, col)]) - 1
        norm_terms.append((sum(ds) / len(ds)) / span)
    return {
        "error_rate": wrong / total,
        "hamming": sum(per_session) / len(per_session),
        "bool_acc": bool_right / bool_all,
        "f1": f1,
        "cat_acc": cat_right / cat_all,
        "mae": sum(diffs) / len(diffs),
        "rmse": math.sqrt(sum(d * d for d in diffs) / len(diffs)),
        "norm_mae": sum(norm_terms) / len(norm_terms),
    }


class TestBruteForceAgreement:
    def test_random_fixtures_match_independent_tally(self, manifest):
        rng = random.Random(42)
        for _trial in range(50):
            pred, truth = _random_fixture(rng, rng.randint(2, 12))
            report = compute_metrics(pred, truth, manifest)
            oracle = brute_force_tally(pred, truth)
            assert report.error_rate == pytest.approx(oracle["error_rate"], abs=1e-9)
            assert report.hamming_loss == pytest.approx(oracle["hamming"], abs=1e-9)
            assert report.boolean_accuracy == pytest.approx(oracle["bool_acc"], abs=1e-9)
            assert report.boolean_micro_f1 == pytest.approx(oracle["f1"], abs=1e-9)
            assert report.categorical_accuracy == pytest.approx(oracle["cat_acc"], abs=1e-9)
            assert report.ordinal_mae == pytest.approx(oracle["mae"], abs=1e-9)
            assert report.ordinal_rmse == pytest.approx(oracle["rmse"], abs=1e-9)
            assert report.ordinal_norm_mae == pytest.approx(oracle["norm_mae"], abs=1e-9)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_error_rate_equals_hamming_on_equal_cell_sessions(self, manifest, seed):
        rng = random.Random(seed)
        pred, truth = _random_fixture(rng, rng.randint(1, 8))
        report = compute_metrics(pred, truth, manifest)
        assert report.error_rate == pytest.approx(report.hamming_loss, abs=1e-12)
        assert report.ordinal_rmse >= report.ordinal_mae - 1e-12

    def test_ordinal_mae_invariant_to_level_reversal(self, manifest):
        rng = random.Random(9)
        pred, truth = _random_fixture(rng, 10)
        report = compute_metrics(pred, truth, manifest)
        level_maps = {(t, c): lv for t, c, lv in ORD_COLS}

        def reverse(sessions):
            out = {}
            for sid, tables in sessions.items():
                out[sid] = {}
                for table, cols in tables.items():
                    out[sid][table] = {}
                    for col, val in cols.items():
                        lv = level_maps.get((table, col))
                        out[sid][table][col] = lv[-1 - lv.index(val)] if lv else val
            return out

        reversed_report = compute_metrics(reverse(pred), reverse(truth), manifest)
        assert reversed_report.ordinal_mae == pytest.approx(report.ordinal_mae, abs=1e-12)
        assert reversed_report.ordinal_rmse == pytest.approx(report.ordinal_rmse, abs=1e-12)


FACTUAL_LEVELS = ["low", "medium", "high", "none"]
TRI_LEVELS = {"overall_response_completeness": ["incomplete", "partial", "complete"]}


class TestCompositeQuality:
    def test_extremes(self):
        assert composite_quality(quality_signals("high")) == 18
        assert composite_quality(quality_signals("low")) == 6

    def test_factual_accuracy_none_scores_three(self):
        record = quality_signals("high")
        record["overall_factual_accuracy"] = "none"
        assert composite_quality(record) == 18

    def test_missing_signal(self):
        record = quality_signals("high")
        del record["overall_response_coherence"]
        with pytest.raises(MissingSignalError):
            composite_quality(record)

    def test_monotone_over_random_single_bumps(self, manifest):
        eval_table = manifest.table("evaluation")
        levels = {c.name: list(c.levels) for c in eval_table.columns if c.levels}
        rng = random.Random(4)
        for _ in range(1000):
            record = {}
            for signal in SIX_SIGNALS:
                record[signal] = rng.choice(levels[signal])
            signal = rng.choice(SIX_SIGNALS)
            lv = levels[signal]
            idx = lv.index(record[signal])
            if idx == len(lv) - 1:
                continue
            before = composite_quality(record)
            bumped = dict(record)
            bumped[signal] = lv[idx + 1]
            assert composite_quality(bumped) >= before, (signal, record[signal])


class TestWinRate:
    def test_paper_ratio(self):
        comparisons = [1.0] * 12 + [0.5] * 72 + [0.0] * 16
        assert win_rate(comparisons) == pytest.approx(0.48)

    def test_all_ties(self):
        assert win_rate([0.5] * 9) == 0.5

    def test_all_wins(self):
        assert win_rate([1.0] * 4) == 1.0

    def test_empty_rejected(self):
        with pytest.raises(MetricInputError):
            win_rate([])

    def test_out_of_domain_rejected(self):
        with pytest.raises(MetricInputError):
            win_rate([0.9])
