"""Operator entry points.

Every subcommand prints machine-readable JSON on stdout and keeps human
logs on stderr. Exit codes: 0 success, 1 systemic failure, 2 bad usage or
configuration. The database path comes from --db or the GATELENS_DB
environment variable.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from . import analytics as _analytics
from .consistency import ConsistencyChecker
from .gateway import ChatRequest, Gateway
from .judge import JudgePipeline, StagePlan, StageFailedError, session_from_payload
from .registry import default_manifest, load_manifest
from .routing import (
    RoutingPolicy,
    build_policy,
    load_policy,
    route,
    save_policy,
)
from .seeding import SeedSpec, load_truth
from .server import ConfigError, load_config, parse_backend_spec, serve
from .store import ReadOnlyQueryError, Store

logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
logger = logging.getLogger(__name__)


def _emit(payload: dict) -> None:
    click.echo(json.dumps(payload, indent=2, sort_keys=True))


def _open_store(db: str, manifest_path: str | None) -> Store:
    manifest = load_manifest(manifest_path) if manifest_path else default_manifest()
    store = Store(db, manifest)
    store.migrate()
    return store


db_option = click.option("--db", envvar="GATELENS_DB", required=True, help="Warehouse database path.")
manifest_option = click.option("--manifest", "manifest_path", default=None, help="Manifest YAML override.")


@click.group()
def main() -> None:
    """Gateway, judge, and routing toolkit."""


@main.command("serve")
@click.option("--config", "config_path", required=True, help="Gateway YAML config.")
def serve_cmd(config_path: str) -> None:
    """Run the gateway HTTP service."""
    try:
        config = load_config(config_path)
    except ConfigError as exc:
        raise click.ClickException(str(exc)) from exc
    serve(config)


@main.command()
@db_option
@manifest_option
@click.option("--source", type=click.Path(exists=True), default=None,
              help="JSONL file of sessions; defaults to pending sessions in the warehouse.")
@click.option("--mode", type=click.Choice(["multi", "single"]), default="multi")
@click.option("--reasoning", type=click.Choice(["in_schema", "two_call", "none"]), default="in_schema")
@click.option("--backend", "backend_spec", default="fill",
              help="Judge backend: fill | mock:<fixtures.json> | http:<url>.")
def judge(db, manifest_path, source, mode, reasoning, backend_spec) -> None:
    """Batch-judge sessions into evaluation bundles."""
    store = _open_store(db, manifest_path)
    try:
        backend = parse_backend_spec(backend_spec)
    except ConfigError as exc:
        raise click.ClickException(str(exc)) from exc
    plan = StagePlan(mode=mode, reasoning_mode=reasoning)
    pipeline = JudgePipeline(store.manifest, backend, store, plan)

    sessions = []
    if source:
        with open(source) as fh:
            for line in fh:
                if not line.strip():
                    continue
                raw = json.loads(line)
                sessions.append(session_from_payload(
                    raw["session_id"], {"messages": raw["messages"]},
                    model_id=raw.get("model_id", "unknown"),
                    provider_id=raw.get("provider_id", "unknown"),
                ))
    else:
        for session_id in store.pending_sessions():
            stored = store.fetch_session(session_id)
            sessions.append(session_from_payload(
                session_id, stored["payload"], stored["model_id"],
                stored["provider_id"], stored["gateway_metrics_id"],
            ))

    judged = failed = 0
    for session in sessions:
        try:
            pipeline.run_pipeline(session)
            judged += 1
        except StageFailedError as exc:
            logger.warning("session %s failed at stage %s", session.session_id, exc.stage)
            failed += 1
    _emit({"judged": judged, "failed": failed, "backend_calls": pipeline.calls})


@main.command()
@db_option
@manifest_option
@click.option("--resolve", "resolve_action", type=click.Choice(["filter", "rejudge"]), default=None)
@click.option("--backend", "backend_spec", default="fill", help="Judge backend for --resolve rejudge.")
def check(db, manifest_path, resolve_action, backend_spec) -> None:
    """Audit cross-table consistency; optionally filter or re-judge violators."""
    from .consistency import RejudgeUnavailable

    store = _open_store(db, manifest_path)
    checker = ConsistencyChecker(store)
    report = checker.check_all()
    if resolve_action:
        pipeline = None
        if resolve_action == "rejudge":
            pipeline = JudgePipeline(store.manifest, parse_backend_spec(backend_spec), store)
        try:
            checker.resolve(report.violations, resolve_action, pipeline=pipeline)
        except RejudgeUnavailable as exc:
            raise click.ClickException(str(exc)) from exc
    out = report.to_json()
    out["resolved"] = resolve_action
    _emit(out)


@main.command()
@db_option
@manifest_option
@click.option("--truth", "truth_path", required=True, type=click.Path(exists=True))
@click.option("--include-excluded", is_flag=True, default=False,
              help="Score filtered sessions too.")
def metrics(db, manifest_path, truth_path, include_excluded) -> None:
    """Judge-accuracy metrics against a ground-truth file."""
    store = _open_store(db, manifest_path)
    truth = load_truth(truth_path)
    predictions = _analytics.collect_predictions(store, include_excluded=include_excluded)
    truth = {sid: tables for sid, tables in truth.items() if sid in predictions}
    if not truth:
        raise click.ClickException("no labeled sessions overlap the stored bundles")
    try:
        report = _analytics.compute_metrics(predictions, truth, store.manifest)
    except _analytics.MetricInputError as exc:
        raise click.ClickException(str(exc)) from exc
    _emit(report.to_json())


@main.group()
def policy() -> None:
    """Derive and store routing policies."""


@policy.command("derive")
@db_option
@manifest_option
@click.option("--default-model", required=True)
@click.option("--slice-keys", default=",".join(("request_task_type", "context_domain_category", "request_complexity")),
              show_default=True, help="Comma-separated context columns.")
@click.option("--margin", default=0.10, show_default=True)
@click.option("--min-sessions", default=10, show_default=True)
@click.option("--out", "out_path", default=None, help="Write the policy JSON here.")
@click.option("--save-table", is_flag=True, default=False, help="Also materialize into routing_policy.")
def policy_derive(db, manifest_path, default_model, slice_keys, margin, min_sessions, out_path, save_table) -> None:
    store = _open_store(db, manifest_path)
    keys = tuple(k.strip() for k in slice_keys.split(",") if k.strip())
    derived = build_policy(store, default_model, slice_keys=keys,
                           quality_margin=margin, min_sessions=min_sessions)
    doc = derived.to_json()
    if out_path:
        Path(out_path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    policy_id = save_policy(store, derived) if save_table else None
    _emit({"policy": doc, "entries": len(derived.entries), "policy_id": policy_id,
           "written_to": out_path})


@main.command("route-test")
@click.option("--policy", "policy_path", default=None, type=click.Path(exists=True),
              help="Policy JSON file (otherwise latest stored policy via --db).")
@db_option
@manifest_option
@click.option("--signals", "signals_json", default=None,
              help="Classified context signals as inline JSON; omit to simulate classifier failure.")
def route_test(policy_path, db, manifest_path, signals_json) -> None:
    """Dry-run a routing decision for a classified slice."""
    if policy_path:
        policy_obj = RoutingPolicy.from_json(json.loads(Path(policy_path).read_text()))
    else:
        store = _open_store(db, manifest_path)
        policy_obj = load_policy(store)
    signals = json.loads(signals_json) if signals_json else None
    decision = route(policy_obj, signals)
    _emit(decision.to_json())


@main.group()
def replay() -> None:
    """Replay sessions against a candidate model and score comparisons."""


@replay.command("run")
@db_option
@manifest_option
@click.option("--config", "config_path", required=True, help="Gateway config with the candidate's providers.")
@click.option("--candidate", required=True, help="Candidate model id.")
@click.option("--org", default=None, help="Restrict to one organization.")
@click.option("--limit", default=0, help="Cap the number of replayed sessions (0 = all).")
@click.option("--out", "out_path", required=True, help="Pairs JSONL output path.")
def replay_run(db, manifest_path, config_path, candidate, org, limit, out_path) -> None:
    store = _open_store(db, manifest_path)
    try:
        config = load_config(config_path)
    except ConfigError as exc:
        raise click.ClickException(str(exc)) from exc
    if candidate not in config.models:
        raise click.ClickException(f"candidate model '{candidate}' has no configured provider")
    gateway = Gateway(providers=config.models)  # no store: replays stay out of live metrics

    where = ""
    params: tuple = ()
    if org:
        where = "WHERE org_id = ?"
        params = (org,)
    rows = store.execute(f"SELECT session_id, payload FROM sessions {where} ORDER BY session_id", params)
    if limit:
        rows = rows[:limit]
    if not rows:
        raise click.ClickException("session filter matched nothing to replay")

    pairs = 0
    with open(out_path, "w") as fh:
        for row in rows:
            payload = json.loads(row["payload"])
            messages = payload["messages"]
            original = messages[-1]["content"] if messages[-1]["role"] == "assistant" else ""
            request = ChatRequest(
                model=candidate,
                messages=[m for m in messages[:-1]] or messages,
                request_id=f"replay-{row['session_id']}",
            )
            result = gateway.handle_request(request)
            fh.write(json.dumps({
                "session_id": row["session_id"],
                "original": original,
                "candidate": result.response["choices"][0]["message"]["content"],
            }, ensure_ascii=False) + "\n")
            pairs += 1
    _emit({"replayed": pairs, "pairs_file": out_path})


@replay.command("score")
@click.option("--comparisons", "comparisons_path", required=True, type=click.Path(exists=True),
              help="JSON: list of {1, 0.5, 0} or {session_id: value} mapping.")
def replay_score(comparisons_path) -> None:
    raw = json.loads(Path(comparisons_path).read_text())
    values = list(raw.values()) if isinstance(raw, dict) else list(raw)
    rate = _analytics.win_rate(values)
    _emit({"win_rate": rate, "n": len(values)})


@main.command()
@db_option
@manifest_option
@click.option("--spec", "spec_path", default=None, type=click.Path(exists=True),
              help="SeedSpec JSON; defaults to 3 orgs x 100 sessions.")
@click.option("--truth-out", "truth_out", default=None, help="Ground-truth JSON output path.")
@click.option("--force", is_flag=True, default=False, help="Seed even if bundles already exist.")
def seed(db, manifest_path, spec_path, truth_out, force) -> None:
    """Populate the warehouse with deterministic synthetic traffic."""
    store = _open_store(db, manifest_path)
    spec = SeedSpec.from_file(spec_path) if spec_path else SeedSpec()
    if store.bundle_count() > 0 and not force:
        raise click.ClickException("warehouse is not empty; pass --force to seed anyway")
    from .seeding import Seeder

    result = Seeder(store, spec).run(truth_out)
    _emit({**result.summary(), "truth_file": truth_out, "seed": spec.seed})


@main.command()
@db_option
@manifest_option
@click.argument("sql")
def query(db, manifest_path, sql) -> None:
    """Run a read-only SQL statement against the warehouse."""
    store = _open_store(db, manifest_path)
    try:
        rows = store.query(sql)
    except ReadOnlyQueryError as exc:
        raise click.ClickException(str(exc)) from exc
    _emit({"rows": rows, "count": len(rows)})


if __name__ == "__main__":
    main()
