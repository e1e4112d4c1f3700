"""Cross-table consistency predicates per signal family.

For each family the four aligned columns must tell one coherent story:
a gap can only exist where the capability was in play (absence), a severity
needs a matching attribution (orphan severity), and a real attribution is
required under any minor/major rating (severity mismatch). Overlapping
branches resolve by fixed priority (absence > orphan > mismatch) so every
violating row reports exactly one kind.

Violating sessions can be soft-filtered out of analytics and routing, or
re-queued through the judge pipeline; filtering never deletes rows.
"""

from __future__ import annotations

from dataclasses import dataclass

from .registry import NO_ISSUE, SignalFamily
from .store import Store

VIOLATION_KINDS = ("absence", "orphan_severity", "severity_mismatch")


class UnknownFamilyError(KeyError):
    pass


class RejudgeUnavailable(RuntimeError):
    """resolve(rejudge) needs a configured judge pipeline."""


@dataclass
class Violation:
    session_id: str
    family: str
    kind: str
    values: dict

    def to_json(self) -> dict:
        return {
            "session_id": self.session_id,
            "family": self.family,
            "kind": self.kind,
            "values": self.values,
        }


@dataclass
class ConsistencyReport:
    violations: list[Violation]
    judged_session_count: int

    @property
    def inconsistent_session_count(self) -> int:
        return len({v.session_id for v in self.violations})

    @property
    def filter_fraction(self) -> float:
        if self.judged_session_count == 0:
            return 0.0
        return self.inconsistent_session_count / self.judged_session_count

    def to_json(self) -> dict:
        return {
            "violations": [v.to_json() for v in self.violations],
            "judged_session_count": self.judged_session_count,
            "inconsistent_session_count": self.inconsistent_session_count,
            "filter_fraction": self.filter_fraction,
        }


def classify_values(
    rq: bool,
    rs: bool,
    attribution: str,
    severity: str,
    check_absence: bool = True,
) -> str | None:
    """Classify one (request flag, response flag, attribution, severity) row.

    Returns the violation kind or None. Branch priority keeps the kinds
    disjoint when several conditions hold at once.
    """
    attr_clear = attribution in NO_ISSUE
    sev_clear = severity in NO_ISSUE
    if check_absence and not rq and not rs and not (attr_clear and sev_clear):
        return "absence"
    if attr_clear and not sev_clear:
        return "orphan_severity"
    if severity in ("minor", "major") and attr_clear:
        return "severity_mismatch"
    return None


def family_violation_sql(family: SignalFamily) -> str:
    """The violation-detection SQL for one family, in the canonical
    four-table join shape. Used as the independent route in equivalence
    tests and runnable through the read-only query surface."""
    no_issue = "('not_applicable','none')"
    attr = f"ia.{family.attribution_column}"
    sev = f"eval.{family.severity_column}"
    branches = []
    if family.absence_checkable:
        rq = f"ctx.{family.request_flag} = FALSE" if family.request_flag else "TRUE"
        rs = f"llm.{family.response_flag} = FALSE" if family.response_flag else "TRUE"
        branches.append(
            f"({rq}\n   AND {rs}\n"
            f"   AND ({attr} NOT IN {no_issue}\n     OR {sev} NOT IN {no_issue}))"
        )
    branches.append(f"({attr} IN {no_issue}\n   AND {sev} NOT IN {no_issue})")
    branches.append(f"({sev} IN ('minor','major')\n   AND {attr} IN {no_issue})")
    where = "\n  OR ".join(branches)
    return (
        "SELECT ctx.id, llm.id, ia.id, eval.id\n"
        "FROM context_info      AS ctx\n"
        "JOIN llm_response_info AS llm  ON llm.context_id = ctx.id\n"
        "JOIN issue_attribution AS ia   ON ia.context_id  = ctx.id\n"
        "JOIN evaluation        AS eval ON eval.context_id = ctx.id\n"
        f"WHERE\n  {where};"
    )


class ConsistencyChecker:
    def __init__(self, store: Store):
        self.store = store
        self.manifest = store.manifest

    def _family(self, name: str) -> SignalFamily:
        try:
            return self.manifest.family(name)
        except KeyError:
            raise UnknownFamilyError(name) from None

    def _rows_for(self, family: SignalFamily) -> list[dict]:
        rq = f"ctx.{family.request_flag}" if family.request_flag else "0"
        rs = f"llm.{family.response_flag}" if family.response_flag else "0"
        sql = (
            f"SELECT ctx.session_id AS session_id, {rq} AS rq, {rs} AS rs, "
            f"ia.{family.attribution_column} AS attribution, "
            f"eval.{family.severity_column} AS severity "
            "FROM context_info ctx "
            "JOIN llm_response_info llm ON llm.context_id = ctx.id "
            "JOIN issue_attribution ia ON ia.context_id = ctx.id "
            "JOIN evaluation eval ON eval.context_id = ctx.id "
            "ORDER BY ctx.id"
        )
        return self.store.execute(sql)

    def check_family(self, family_name: str) -> list[Violation]:
        family = self._family(family_name)
        violations = []
        for row in self._rows_for(family):
            kind = classify_values(
                bool(row["rq"]),
                bool(row["rs"]),
                row["attribution"],
                row["severity"],
                check_absence=family.absence_checkable,
            )
            if kind is None:
                continue
            values = {
                "attribution": row["attribution"],
                "severity": row["severity"],
            }
            if family.request_flag:
                values["request_flag"] = bool(row["rq"])
            if family.response_flag:
                values["response_flag"] = bool(row["rs"])
            violations.append(
                Violation(session_id=row["session_id"], family=family.name, kind=kind, values=values)
            )
        return violations

    def check_all(self) -> ConsistencyReport:
        violations: list[Violation] = []
        for family in self.manifest.families:
            violations.extend(self.check_family(family.name))
        judged = self.store.bundle_count()
        return ConsistencyReport(violations=violations, judged_session_count=judged)

    def resolve(self, violations: list[Violation], action: str, pipeline=None) -> None:
        """Soft-filter or re-judge the violating sessions.

        Filtering flags sessions out of analytics and derivation queries;
        re-judging re-runs the pipeline and replaces the stored bundle only
        when the new commit succeeds.
        """
        session_ids = sorted({v.session_id for v in violations})
        if action == "filter":
            self.store.set_excluded(session_ids, True)
            return
        if action == "rejudge":
            if pipeline is None:
                raise RejudgeUnavailable("no judge pipeline configured for rejudging")
            from .judge import session_from_payload  # local import avoids a cycle

            for session_id in session_ids:
                stored = self.store.fetch_session(session_id)
                if stored is None:
                    raise RejudgeUnavailable(f"session '{session_id}' has no stored payload")
                session = session_from_payload(
                    session_id,
                    stored["payload"],
                    model_id=stored["model_id"],
                    provider_id=stored["provider_id"],
                    gateway_metrics_id=stored["gateway_metrics_id"],
                )
                pipeline.run_pipeline(session, commit=True, replace=True)
            return
        raise ValueError(f"unknown resolve action '{action}'")
