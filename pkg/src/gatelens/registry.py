"""Declarative signal-schema manifest: loading, validation, compilation.

The manifest is a YAML data file describing the semantic evaluation tables
(typed signal columns with per-column judge instructions), the gateway
metrics table, the cross-table signal families, and optional extension
tables. Everything downstream derives from it: warehouse DDL, the JSON
schemas handed to judge backends, and the consistency predicates. Adding a
table or column is a data edit, not a code change.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import yaml

SEMANTIC_KINDS = ("boolean", "categorical", "ordinal", "text", "static_int", "static_bool")
OPERATIONAL_KINDS = ("int", "real", "bool", "text", "timestamp")

ATTRIBUTION_LEVELS = ("not_applicable", "none", "user", "context", "llm", "both")
SEVERITY_LEVELS = ("not_applicable", "none", "minor", "major")
NO_ISSUE = ("not_applicable", "none")

CORE_TABLES = ("context_info", "llm_response_info", "issue_attribution", "evaluation")

REASONING_FIELD = "reasoning"
REASONING_GUIDANCE = (
    "Think step-by-step before setting any other field: "
    "(1) identify the task: state what the system and user messages ask the serving LLM to do; "
    "(2) derive the signals step by step: based on (1), decide which fields should be set and to what values; "
    "(3) verify consistency: check that the derived values agree with the task identified in (1)."
)


class ManifestError(Exception):
    """Manifest file could not be parsed."""


class ManifestValidationError(ManifestError):
    """Manifest parsed but violates a structural invariant."""


class UnknownTableError(KeyError):
    """Requested table is not declared in the manifest."""


@dataclass(frozen=True)
class SignalColumn:
    """One typed evaluation signal in a semantic table."""

    name: str
    kind: str
    levels: tuple[str, ...] = ()
    instruction: str = ""

    @property
    def judge_generated(self) -> bool:
        return self.kind not in ("static_int", "static_bool")

    @property
    def is_static(self) -> bool:
        return not self.judge_generated


@dataclass(frozen=True)
class OperationalColumn:
    """One plain storage column in an operational table."""

    name: str
    kind: str
    nullable: bool = False
    default: str | None = None


@dataclass(frozen=True)
class ForeignKey:
    column: str
    references: str
    nullable: bool = False


@dataclass(frozen=True)
class TableSpec:
    name: str
    role: str  # "semantic" | "operational"
    columns: tuple = ()
    foreign_keys: tuple[ForeignKey, ...] = ()
    stage: int | None = None
    description: str = ""
    checks: tuple[str, ...] = ()

    def column(self, name: str):
        for col in self.columns:
            if col.name == name:
                return col
        raise KeyError(name)

    @property
    def judge_columns(self) -> tuple[SignalColumn, ...]:
        return tuple(c for c in self.columns if isinstance(c, SignalColumn) and c.judge_generated)

    @property
    def static_columns(self) -> tuple[SignalColumn, ...]:
        return tuple(c for c in self.columns if isinstance(c, SignalColumn) and c.is_static)


@dataclass(frozen=True)
class SignalFamily:
    """Four aligned columns tracking one capability across the core tables.

    ``request_flag``/``response_flag`` may be None for capabilities that are
    only observable on one side (a refusal has no request-side flag);
    ``missing_flag_is_false`` controls whether the absence predicate
    substitutes False for the missing flag or is skipped entirely.
    """

    name: str
    attribution_column: str
    severity_column: str
    request_flag: str | None = None
    response_flag: str | None = None
    missing_flag_is_false: bool = False

    @property
    def absence_checkable(self) -> bool:
        if self.request_flag and self.response_flag:
            return True
        if self.request_flag or self.response_flag:
            return self.missing_flag_is_false
        return False


@dataclass(frozen=True)
class SchemaManifest:
    tables: tuple[TableSpec, ...]
    families: tuple[SignalFamily, ...]
    extensions: tuple[TableSpec, ...] = ()
    version: int = 1

    def table(self, name: str) -> TableSpec:
        for t in list(self.tables) + list(self.extensions):
            if t.name == name:
                return t
        raise UnknownTableError(name)

    @property
    def core_tables(self) -> tuple[TableSpec, ...]:
        staged = [t for t in self.tables if t.stage is not None]
        return tuple(sorted(staged, key=lambda t: t.stage))

    @property
    def semantic_tables(self) -> tuple[TableSpec, ...]:
        return tuple(t for t in self.tables if t.role == "semantic")

    def family(self, name: str) -> SignalFamily:
        for fam in self.families:
            if fam.name == name:
                return fam
        raise KeyError(name)

    def signal_counts(self) -> dict[str, dict[str, int]]:
        """Per-table count of signal columns by kind, plus totals."""
        out: dict[str, dict[str, int]] = {}
        for t in self.semantic_tables:
            counts = {k: 0 for k in ("boolean", "categorical", "ordinal", "text", "static")}
            for col in t.columns:
                key = "static" if col.is_static else col.kind
                counts[key] += 1
            counts["total"] = len(t.columns)
            out[t.name] = counts
        return out

    def total_signal_columns(self) -> int:
        return sum(len(t.columns) for t in self.semantic_tables)


# ---------------------------------------------------------------------------
# Loading and validation
# ---------------------------------------------------------------------------


def _parse_signal_column(raw: dict, table: str) -> SignalColumn:
    name = raw.get("name")
    kind = raw.get("type")
    if not name or not isinstance(name, str):
        raise ManifestValidationError(f"table '{table}': column without a name")
    if kind not in SEMANTIC_KINDS:
        raise ManifestValidationError(f"table '{table}' column '{name}': unknown type tag '{kind}'")
    levels = tuple(raw.get("levels") or ())
    return SignalColumn(name=name, kind=kind, levels=levels, instruction=raw.get("instruction", "") or "")


def _parse_operational_column(raw: dict, table: str) -> OperationalColumn:
    name = raw.get("name")
    kind = raw.get("type")
    if not name or not isinstance(name, str):
        raise ManifestValidationError(f"table '{table}': column without a name")
    if kind not in OPERATIONAL_KINDS:
        raise ManifestValidationError(f"table '{table}' column '{name}': unknown type tag '{kind}'")
    return OperationalColumn(
        name=name,
        kind=kind,
        nullable=bool(raw.get("nullable", False)),
        default=None if raw.get("default") is None else str(raw["default"]),
    )


def _parse_table(raw: dict) -> TableSpec:
    name = raw.get("name")
    if not name or not isinstance(name, str):
        raise ManifestValidationError("table without a name")
    role = raw.get("role", "semantic")
    if role not in ("semantic", "operational"):
        raise ManifestValidationError(f"table '{name}': unknown role '{role}'")
    raw_cols = raw.get("columns") or []
    if role == "semantic":
        columns = tuple(_parse_signal_column(c, name) for c in raw_cols)
    else:
        columns = tuple(_parse_operational_column(c, name) for c in raw_cols)
    fks = tuple(
        ForeignKey(
            column=fk["column"],
            references=fk["references"],
            nullable=bool(fk.get("nullable", False)),
        )
        for fk in raw.get("foreign_keys") or []
    )
    return TableSpec(
        name=name,
        role=role,
        columns=columns,
        foreign_keys=fks,
        stage=raw.get("stage"),
        description=raw.get("description", "") or "",
        checks=tuple(raw.get("checks") or ()),
    )


def _parse_family(raw: dict) -> SignalFamily:
    name = raw.get("name")
    if not name:
        raise ManifestValidationError("family without a name")
    for key in ("attribution", "severity"):
        if not raw.get(key):
            raise ManifestValidationError(f"family '{name}': missing '{key}' column")
    return SignalFamily(
        name=name,
        attribution_column=raw["attribution"],
        severity_column=raw["severity"],
        request_flag=raw.get("request_flag"),
        response_flag=raw.get("response_flag"),
        missing_flag_is_false=bool(raw.get("missing_flag_is_false", False)),
    )


def load_manifest(path: str | Path) -> SchemaManifest:
    """Load and validate a manifest file, raising on the first violated invariant."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ManifestError(f"cannot read manifest: {exc}") from exc
    return parse_manifest(text)


def parse_manifest(text: str) -> SchemaManifest:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ManifestError(f"manifest is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict) or "tables" not in raw:
        raise ManifestError("manifest has no 'tables' section")
    tables = tuple(_parse_table(t) for t in raw["tables"])
    families = tuple(_parse_family(f) for f in raw.get("families") or [])
    extensions = tuple(_parse_table(t) for t in raw.get("extensions") or [])
    manifest = SchemaManifest(
        tables=tables,
        families=families,
        extensions=extensions,
        version=int(raw.get("version", 1)),
    )
    validate_manifest(manifest)
    return manifest


def validate_manifest(manifest: SchemaManifest) -> None:
    """Check every structural invariant; raise naming the first violation."""
    names = [t.name for t in manifest.tables] + [t.name for t in manifest.extensions]
    seen: set[str] = set()
    for n in names:
        if n in seen:
            raise ManifestValidationError(f"duplicate table name '{n}'")
        seen.add(n)

    for table in list(manifest.tables) + list(manifest.extensions):
        col_seen: set[str] = set()
        for col in table.columns:
            if col.name in col_seen:
                raise ManifestValidationError(f"duplicate column '{col.name}' in table '{table.name}'")
            col_seen.add(col.name)
        if table.role == "semantic":
            for col in table.columns:
                if col.kind in ("ordinal", "categorical"):
                    if not col.levels:
                        raise ManifestValidationError(
                            f"column '{table.name}.{col.name}' is {col.kind} but declares no levels"
                        )
                    if len(set(col.levels)) != len(col.levels):
                        raise ManifestValidationError(
                            f"column '{table.name}.{col.name}' declares duplicate levels"
                        )
                elif col.levels:
                    raise ManifestValidationError(
                        f"column '{table.name}.{col.name}' is {col.kind} and must not declare levels"
                    )
                if col.judge_generated and not col.instruction.strip():
                    raise ManifestValidationError(
                        f"judge-generated column '{table.name}.{col.name}' has an empty instruction"
                    )
        for fk in table.foreign_keys:
            if fk.references not in seen:
                raise ManifestValidationError(
                    f"table '{table.name}' foreign key '{fk.column}' references unknown table '{fk.references}'"
                )

    stages = [t for t in manifest.tables if t.stage is not None]
    stage_ids = sorted(t.stage for t in stages)
    if stage_ids != [1, 2, 3, 4]:
        raise ManifestValidationError(f"expected core stages 1..4, found {stage_ids}")
    for t in stages:
        if t.role != "semantic":
            raise ManifestValidationError(f"core table '{t.name}' must be semantic")
        # Stage order must match foreign-key direction: later stages point at
        # earlier ones (or at operational tables).
        by_name = {x.name: x for x in manifest.tables}
        for fk in t.foreign_keys:
            target = by_name.get(fk.references)
            if target is not None and target.stage is not None and target.stage >= t.stage:
                raise ManifestValidationError(
                    f"table '{t.name}' (stage {t.stage}) references '{target.name}' "
                    f"(stage {target.stage}); foreign keys must point upstream"
                )

    for ext in manifest.extensions:
        for fk in ext.foreign_keys:
            if not fk.nullable:
                raise ManifestValidationError(
                    f"extension table '{ext.name}' foreign key '{fk.column}' must be nullable"
                )

    _validate_families(manifest)


_FAMILY_SLOTS = (
    ("request_flag", "context_info", ("boolean",), None),
    ("response_flag", "llm_response_info", ("boolean",), None),
    ("attribution_column", "issue_attribution", ("categorical",), ATTRIBUTION_LEVELS),
    ("severity_column", "evaluation", ("ordinal",), SEVERITY_LEVELS),
)


def _validate_families(manifest: SchemaManifest) -> None:
    fam_seen: set[str] = set()
    for fam in manifest.families:
        if fam.name in fam_seen:
            raise ManifestValidationError(f"duplicate family '{fam.name}'")
        fam_seen.add(fam.name)
        tables_used = []
        for attr, table_name, kinds, levels in _FAMILY_SLOTS:
            col_name = getattr(fam, attr)
            if col_name is None:
                continue
            try:
                table = manifest.table(table_name)
                col = table.column(col_name)
            except KeyError:
                raise ManifestValidationError(
                    f"family '{fam.name}' {attr} '{col_name}' does not exist in '{table_name}'"
                ) from None
            if col.kind not in kinds:
                raise ManifestValidationError(
                    f"family '{fam.name}' {attr} '{col_name}' must be {kinds[0]}, found {col.kind}"
                )
            if levels is not None and tuple(col.levels) != levels:
                raise ManifestValidationError(
                    f"family '{fam.name}' {attr} '{col_name}' levels {col.levels} != required {levels}"
                )
            tables_used.append(table_name)
        if len(set(tables_used)) != len(tables_used):
            raise ManifestValidationError(f"family '{fam.name}' maps two slots onto one table")


@functools.lru_cache(maxsize=1)
def default_manifest() -> SchemaManifest:
    """The bundled manifest (cached; manifests are immutable after load)."""
    text = resources.files("gatelens.data").joinpath("default_manifest.yaml").read_text()
    return parse_manifest(text)


def default_manifest_path() -> Path:
    return Path(str(resources.files("gatelens.data").joinpath("default_manifest.yaml")))


# ---------------------------------------------------------------------------
# DDL compilation
# ---------------------------------------------------------------------------

_OPERATIONAL_SQL_TYPES = {
    "int": "INTEGER",
    "real": "REAL",
    "bool": "INTEGER",
    "text": "TEXT",
    "timestamp": "TEXT",
}

# Tables the warehouse always carries regardless of manifest contents:
# model/provider cost metadata, materialized routing policies, sampled
# sessions awaiting or holding judge output, and the reasoning audit log.
_BUILTIN_DDL = (
    """CREATE TABLE IF NOT EXISTS model_provider (
    id INTEGER PRIMARY KEY,
    model_id TEXT NOT NULL,
    provider_id TEXT NOT NULL,
    input_cost_per_million_token REAL NOT NULL CHECK (input_cost_per_million_token >= 0),
    output_cost_per_million_token REAL NOT NULL CHECK (output_cost_per_million_token >= 0),
    UNIQUE (model_id, provider_id)
);""",
    """CREATE TABLE IF NOT EXISTS routing_policy (
    id INTEGER PRIMARY KEY,
    created_at TEXT NOT NULL,
    slice_keys TEXT NOT NULL,
    default_model TEXT NOT NULL
);""",
    """CREATE TABLE IF NOT EXISTS routing_policy_entry (
    id INTEGER PRIMARY KEY,
    policy_id INTEGER NOT NULL REFERENCES routing_policy(id),
    slice_values TEXT NOT NULL,
    model_id TEXT NOT NULL,
    provider_id TEXT,
    avg_quality REAL NOT NULL,
    avg_cost REAL NOT NULL,
    session_count INTEGER NOT NULL
);""",
    """CREATE TABLE IF NOT EXISTS sessions (
    session_id TEXT PRIMARY KEY,
    org_id TEXT,
    model_id TEXT NOT NULL,
    provider_id TEXT NOT NULL,
    gateway_metrics_id INTEGER REFERENCES gateway_metrics(id),
    payload TEXT NOT NULL,
    judge_status TEXT NOT NULL DEFAULT 'pending'
        CHECK (judge_status IN ('pending', 'judged', 'failed')),
    failed_stage TEXT,
    created_at TEXT NOT NULL
);""",
    """CREATE TABLE IF NOT EXISTS judge_reasoning_audit (
    id INTEGER PRIMARY KEY,
    session_id TEXT NOT NULL,
    stage TEXT NOT NULL,
    reasoning TEXT NOT NULL,
    created_at TEXT NOT NULL
);""",
    "CREATE UNIQUE INDEX IF NOT EXISTS idx_gateway_metrics_request"
    " ON gateway_metrics(request_id);",
    "CREATE INDEX IF NOT EXISTS idx_gateway_metrics_model"
    " ON gateway_metrics(model_id, provider_id);",
)


def _signal_column_sql(col: SignalColumn) -> str:
    if col.kind in ("boolean", "static_bool"):
        return f"{col.name} INTEGER NOT NULL CHECK ({col.name} IN (0, 1))"
    if col.kind == "static_int":
        return f"{col.name} INTEGER NOT NULL"
    if col.kind == "text":
        return f"{col.name} TEXT NOT NULL"
    levels = ", ".join(f"'{lvl}'" for lvl in col.levels)
    return f"{col.name} TEXT NOT NULL CHECK ({col.name} IN ({levels}))"


def _operational_column_sql(col: OperationalColumn) -> str:
    sql = f"{col.name} {_OPERATIONAL_SQL_TYPES[col.kind]}"
    if not col.nullable:
        sql += " NOT NULL"
    if col.default is not None:
        sql += f" DEFAULT {col.default}"
    if col.kind == "bool":
        sql += f" CHECK ({col.name} IN (0, 1))"
    return sql


def _table_ddl(table: TableSpec, is_stage_one: bool) -> str:
    lines = ["    id INTEGER PRIMARY KEY"]
    if is_stage_one:
        lines.append("    session_id TEXT NOT NULL UNIQUE")
    for fk in table.foreign_keys:
        null_sql = "" if fk.nullable else " NOT NULL"
        lines.append(f"    {fk.column} INTEGER{null_sql} REFERENCES {fk.references}(id)")
    if table.role == "semantic":
        lines.extend("    " + _signal_column_sql(c) for c in table.columns)
    else:
        lines.extend("    " + _operational_column_sql(c) for c in table.columns)
    if is_stage_one:
        lines.append("    is_excluded INTEGER NOT NULL DEFAULT 0 CHECK (is_excluded IN (0, 1))")
    lines.extend(f"    CHECK ({check})" for check in table.checks)
    body = ",\n".join(lines)
    return f"CREATE TABLE IF NOT EXISTS {table.name} (\n{body}\n);"


def compile_ddl(manifest: SchemaManifest) -> list[str]:
    """Emit one deterministic creation statement per table.

    Order: manifest tables (operational dependencies first so foreign keys
    resolve), then extensions, then the built-in operational tables.
    """
    operational = [t for t in manifest.tables if t.role == "operational"]
    semantic = [t for t in manifest.tables if t.role == "semantic"]
    statements = [_table_ddl(t, is_stage_one=False) for t in operational]
    statements += [_table_ddl(t, is_stage_one=t.stage == 1) for t in semantic]
    statements += [_table_ddl(t, is_stage_one=False) for t in manifest.extensions]
    statements += list(_BUILTIN_DDL)
    return statements


# ---------------------------------------------------------------------------
# Judge JSON schemas
# ---------------------------------------------------------------------------


def _property_schema(col: SignalColumn) -> dict:
    if col.kind == "boolean":
        return {"type": "boolean", "description": col.instruction}
    if col.kind == "text":
        return {"type": "string", "description": col.instruction}
    return {"type": "string", "enum": list(col.levels), "description": col.instruction}


def build_judge_schema(
    manifest: SchemaManifest,
    table_name: str,
    reasoning_mode: str = "in_schema",
    include_text: bool = True,
    columns: list[str] | None = None,
) -> dict:
    """JSON schema for one table's judge call.

    Properties map one-to-one onto the table's judge-generated columns in
    manifest order, each described by its self-contained instruction. In
    ``in_schema`` mode a text ``reasoning`` property carrying the self-check
    guidance comes first; ``two_call`` and ``none`` emit no reasoning
    property. ``include_text=False`` drops free-text signals (used by the
    pre-routing context classifier); ``columns`` restricts to a named subset.
    """
    if reasoning_mode not in ("in_schema", "two_call", "none"):
        raise ValueError(f"unknown reasoning mode '{reasoning_mode}'")
    table = manifest.table(table_name)
    if table.role != "semantic":
        raise UnknownTableError(table_name)
    cols = list(table.judge_columns)
    if not include_text:
        cols = [c for c in cols if c.kind != "text"]
    if columns is not None:
        wanted = set(columns)
        unknown = wanted - {c.name for c in cols}
        if unknown:
            raise KeyError(f"unknown or non-judge columns requested: {sorted(unknown)}")
        cols = [c for c in cols if c.name in wanted]

    properties: dict[str, dict] = {}
    if reasoning_mode == "in_schema":
        properties[REASONING_FIELD] = {"type": "string", "description": REASONING_GUIDANCE}
    for col in cols:
        properties[col.name] = _property_schema(col)
    return {
        "type": "object",
        "description": table.description,
        "properties": properties,
        "required": list(properties),
        "additionalProperties": False,
    }


# ---------------------------------------------------------------------------
# Record validation against the manifest (friendlier errors than DB CHECKs)
# ---------------------------------------------------------------------------


class RecordValidationError(ValueError):
    """A record value does not conform to its declared column."""


def validate_record(manifest: SchemaManifest, table_name: str, record: dict) -> None:
    """Check a column→value map against a semantic table's declaration."""
    table = manifest.table(table_name)
    declared = {c.name: c for c in table.columns}
    unknown = set(record) - set(declared)
    if unknown:
        raise RecordValidationError(f"{table_name}: unknown columns {sorted(unknown)}")
    missing = set(declared) - set(record)
    if missing:
        raise RecordValidationError(f"{table_name}: missing columns {sorted(missing)}")
    for name, col in declared.items():
        value = record[name]
        if col.kind in ("boolean", "static_bool"):
            if not isinstance(value, bool) and value not in (0, 1):
                raise RecordValidationError(f"{table_name}.{name}: expected boolean, got {value!r}")
        elif col.kind == "static_int":
            if isinstance(value, bool) or not isinstance(value, int):
                raise RecordValidationError(f"{table_name}.{name}: expected integer, got {value!r}")
        elif col.kind == "text":
            if not isinstance(value, str):
                raise RecordValidationError(f"{table_name}.{name}: expected text, got {value!r}")
        else:
            if value not in col.levels:
                raise RecordValidationError(
                    f"{table_name}.{name}: {value!r} is not one of {list(col.levels)}"
                )
