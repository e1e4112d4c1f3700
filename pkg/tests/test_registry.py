"""Manifest loading, validation, DDL compilation, and judge schemas."""

from __future__ import annotations

import sqlite3

import pytest

from gatelens.registry import (
    ManifestValidationError,
    REASONING_FIELD,
    UnknownTableError,
    build_judge_schema,
    compile_ddl,
    parse_manifest,
)

EXPECTED_COUNTS = {
    "context_info": {"boolean": 17, "categorical": 4, "ordinal": 2, "text": 2, "static": 20, "total": 45},
    "llm_response_info": {"boolean": 15, "categorical": 1, "ordinal": 2, "text": 1, "static": 0, "total": 19},
    "issue_attribution": {"boolean": 1, "categorical": 19, "ordinal": 0, "text": 0, "static": 0, "total": 20},
    "evaluation": {"boolean": 2, "categorical": 1, "ordinal": 28, "text": 0, "static": 0, "total": 31},
}


class TestDefaultManifest:
    def test_table_and_column_totals(self, manifest):
        assert len(manifest.tables) == 5  # four semantic stages + gateway metrics
        assert manifest.signal_counts() == EXPECTED_COUNTS
        assert manifest.total_signal_columns() == 115

    def test_core_stage_order(self, manifest):
        assert [t.name for t in manifest.core_tables] == [
            "context_info", "llm_response_info", "issue_attribution", "evaluation",
        ]

    def test_nineteen_families_on_four_distinct_tables(self, manifest):
        assert len(manifest.families) == 19
        attr_table = manifest.table("issue_attribution")
        ctx = {c.name for c in manifest.table("context_info").columns}
        resp = {c.name for c in manifest.table("llm_response_info").columns}
        sev = {c.name for c in manifest.table("evaluation").columns}
        for family in manifest.families:
            assert attr_table.column(family.attribution_column).kind == "categorical"
            assert family.severity_column in sev
            if family.request_flag:
                assert family.request_flag in ctx
            if family.response_flag:
                assert family.response_flag in resp

    def test_families_match_attribution_columns(self, manifest):
        attrs = {c.name for c in manifest.table("issue_attribution").columns if c.kind == "categorical"}
        assert {f.attribution_column for f in manifest.families} == attrs


class TestValidation:
    def test_duplicate_column_rejected(self, manifest_text):
        bad = manifest_text.replace(
            "      - name: request_requires_code_task",
            "      - name: request_requires_tool_call",
            1,
        )
        with pytest.raises(ManifestValidationError, match="duplicate column"):
            parse_manifest(bad)

    def test_dangling_family_severity_rejected(self, manifest_text):
        bad = manifest_text.replace(
            "    severity: severity_of_tool_call\n",
            "    severity: severity_of_nonexistent\n",
            1,
        )
        with pytest.raises(ManifestValidationError, match="does not exist"):
            parse_manifest(bad)

    def test_missing_instruction_rejected(self, manifest_text):
        lines = manifest_text.splitlines(keepends=True)
        start = next(i for i, l in enumerate(lines) if "name: request_requires_tool_call" in l)
        # drop this column's instruction block (the `instruction: >-` line and its indented body)
        instr = next(i for i in range(start, start + 4) if "instruction:" in lines[i])
        end = instr + 1
        while lines[end].startswith("          "):
            end += 1
        bad = "".join(lines[:instr] + lines[end:])
        with pytest.raises(ManifestValidationError, match="empty instruction"):
            parse_manifest(bad)

    def test_extension_fk_must_be_nullable(self, manifest_text):
        block = (
            "extensions:\n"
            "  - name: ext_bad\n"
            "    role: semantic\n"
            "    foreign_keys:\n"
            "      - column: llm_response_id\n"
            "        references: llm_response_info\n"
            "    columns:\n"
            "      - name: extra_flag\n"
            "        type: boolean\n"
            "        instruction: Anything.\n"
        )
        with pytest.raises(ManifestValidationError, match="must be nullable"):
            parse_manifest(manifest_text.replace("extensions: []\n", block))

    def test_parse_error_on_garbage(self):
        with pytest.raises(Exception):
            parse_manifest("tables: [unclosed")


class TestDDL:
    def test_deterministic_across_runs(self, manifest_text):
        first = compile_ddl(parse_manifest(manifest_text))
        second = compile_ddl(parse_manifest(manifest_text))
        assert "\n".join(first) == "\n".join(second)

    def test_context_info_carries_all_45_columns(self, manifest):
        statements = compile_ddl(manifest)
        ctx_stmt = next(s for s in statements if "CREATE TABLE IF NOT EXISTS context_info" in s)
        for col in manifest.table("context_info").columns:
            assert f"\n    {col.name} " in ctx_stmt
        conn = sqlite3.connect(":memory:")
        for s in statements:
            conn.execute(s)
        physical = conn.execute("PRAGMA table_info(context_info)").fetchall()
        # 45 signal columns + id + session_id + is_excluded
        assert len(physical) == 48

    def test_enum_columns_carry_check_constraints(self, manifest):
        statements = compile_ddl(manifest)
        eval_stmt = next(s for s in statements if "CREATE TABLE IF NOT EXISTS evaluation" in s)
        assert "severity_of_tool_call TEXT NOT NULL CHECK (severity_of_tool_call IN "
        assert "'not_applicable', 'none', 'minor', 'major'" in eval_stmt

    def test_extension_table_has_nullable_fk(self, extension_manifest):
        statements = compile_ddl(extension_manifest)
        ext = next(s for s in statements if "tool_call_quality" in s)
        assert "llm_response_id INTEGER REFERENCES llm_response_info(id)" in ext
        assert "llm_response_id INTEGER NOT NULL" not in ext

    def test_empty_extensions_emit_core_statements_only(self, manifest, extension_manifest):
        plain = compile_ddl(manifest)
        extended = compile_ddl(extension_manifest)
        assert len(extended) == len(plain) + 1
        assert not any("tool_call_quality" in s for s in plain)

    def test_appending_a_column_touches_only_its_table(self, manifest_text):
        added = manifest_text.replace(
            "      - name: context_language\n",
            "      - name: request_requires_citation\n"
            "        type: boolean\n"
            "        instruction: Whether the request demands cited sources.\n"
            "      - name: context_language\n",
            1,
        )
        before = compile_ddl(parse_manifest(manifest_text))
        after = compile_ddl(parse_manifest(added))
        assert len(before) == len(after)
        diffs = [i for i, (a, b) in enumerate(zip(before, after)) if a != b]
        assert len(diffs) == 1
        assert "context_info" in after[diffs[0]]
        # and only that table's judge schema changes
        m_before, m_after = parse_manifest(manifest_text), parse_manifest(added)
        for table in ("llm_response_info", "issue_attribution", "evaluation"):
            assert build_judge_schema(m_before, table) == build_judge_schema(m_after, table)
        assert build_judge_schema(m_before, "context_info") != build_judge_schema(m_after, "context_info")


class TestJudgeSchema:
    @pytest.mark.parametrize(
        "table,judge_columns",
        [("context_info", 25), ("llm_response_info", 19), ("issue_attribution", 20), ("evaluation", 31)],
    )
    def test_property_count_matches_judge_column_count(self, manifest, table, judge_columns):
        schema = build_judge_schema(manifest, table, "none")
        assert len(schema["properties"]) == judge_columns
        assert len(build_judge_schema(manifest, table, "in_schema")["properties"]) == judge_columns + 1

    def test_reasoning_is_first_property_in_schema_mode(self, manifest):
        for table in ("context_info", "llm_response_info", "issue_attribution", "evaluation"):
            schema = build_judge_schema(manifest, table, "in_schema")
            assert next(iter(schema["properties"])) == REASONING_FIELD
            assert "identify the task" in schema["properties"][REASONING_FIELD]["description"]
            assert "verify consistency" in schema["properties"][REASONING_FIELD]["description"].lower()

    @pytest.mark.parametrize("mode", ["two_call", "none"])
    def test_no_reasoning_property_in_other_modes(self, manifest, mode):
        schema = build_judge_schema(manifest, "context_info", mode)
        assert REASONING_FIELD not in schema["properties"]

    def test_properties_keep_manifest_order(self, manifest):
        schema = build_judge_schema(manifest, "issue_attribution", "in_schema")
        names = list(schema["properties"])
        expected = [REASONING_FIELD] + [c.name for c in manifest.table("issue_attribution").judge_columns]
        assert names == expected

    def test_descriptions_are_column_instructions(self, manifest):
        schema = build_judge_schema(manifest, "context_info", "none")
        col = manifest.table("context_info").column("request_requires_tool_call")
        assert schema["properties"]["request_requires_tool_call"]["description"] == col.instruction

    def test_static_columns_excluded(self, manifest):
        schema = build_judge_schema(manifest, "context_info", "none")
        assert "total_message_count" not in schema["properties"]
        assert "has_image_attachment" not in schema["properties"]

    def test_classifier_subset_excludes_text(self, manifest):
        # the pre-routing classifier sees the 23 non-text context signals
        schema = build_judge_schema(manifest, "context_info", "in_schema", include_text=False)
        assert len(schema["properties"]) == 24
        assert "context_language" not in schema["properties"]

    def test_restricted_columns(self, manifest):
        schema = build_judge_schema(
            manifest, "context_info", "in_schema", include_text=False,
            columns=["request_task_type", "context_domain_category", "request_complexity"],
        )
        assert list(schema["properties"]) == [
            REASONING_FIELD, "context_domain_category", "request_task_type", "request_complexity",
        ]

    def test_unknown_table_rejected(self, manifest):
        with pytest.raises((UnknownTableError, KeyError)):
            build_judge_schema(manifest, "no_such_table", "none")

    def test_enum_membership_encoded(self, manifest):
        schema = build_judge_schema(manifest, "evaluation", "none")
        prop = schema["properties"]["severity_of_tool_call"]
        assert prop["enum"] == ["not_applicable", "none", "minor", "major"]
        assert schema["additionalProperties"] is False
        assert set(schema["required"]) == set(schema["properties"])
