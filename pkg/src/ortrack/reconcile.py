"""Closing-time counting, retention detection, location queries and reports.

Reconciliation is a pure set computation over the cart's checklist, the
re-verification tray and bin reads, and the final cavity scan:

* expected   — every checklist tag not removed from the room
* accounted  — expected tags re-verified on the tray or in the bin
* missing    — expected minus accounted
* outcome    — retention suspected whenever the cavity scan saw anything;
               otherwise clean iff nothing is missing

A suspected retention loops the case back for staff action and a re-scan.
A persistent count mismatch burns a bounded re-scan budget and then demands
a manual override; the case can never quietly complete either way.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

from .protocol import (
    Alert,
    AlertKind,
    CasePhase,
    CmsState,
    MtcState,
    Outputs,
    ProtocolMessage,
    Severity,
    TagStatus,
    UnknownCaseError,
    mtc_bin_sweep,
    mtc_tray_sweep,
)
from .sensing import ScanResult


class UnknownTagError(Exception):
    """Location query for a tag that was never registered."""


class TraceIOError(Exception):
    """A persisted trace could not be read back intact."""


class Outcome(Enum):
    CLEAN = "Clean"
    RSB_SUSPECTED = "RsbSuspected"
    COUNT_MISMATCH = "CountMismatch"


@dataclass(frozen=True)
class ReconciliationReport:
    case_id: str
    expected: frozenset[str]
    accounted: frozenset[str]
    missing: frozenset[str]
    cavity_detected: frozenset[str]
    outcome: Outcome

    def to_json(self) -> dict:
        return {"case_id": self.case_id,
                "expected": sorted(self.expected),
                "accounted": sorted(self.accounted),
                "missing": sorted(self.missing),
                "cavity_detected": sorted(self.cavity_detected),
                "outcome": self.outcome.value}


def reconcile(checklist, tray_reads: set[str], bin_reads: set[str],
              scan: ScanResult) -> ReconciliationReport:
    """Compare expected against re-verified items; pure set arithmetic."""
    expected = frozenset(checklist.active_tags())
    accounted = frozenset((set(tray_reads) | set(bin_reads)) & expected)
    missing = expected - accounted
    cavity = frozenset(scan.detected)
    if cavity:
        outcome = Outcome.RSB_SUSPECTED
    elif missing:
        outcome = Outcome.COUNT_MISMATCH
    else:
        outcome = Outcome.CLEAN
    return ReconciliationReport(case_id=checklist.case_id, expected=expected,
                                accounted=accounted, missing=missing,
                                cavity_detected=cavity, outcome=outcome)


def apply_scan_outcome(state: MtcState, scan: ScanResult, tray_reads: set[str],
                       bin_reads: set[str], now: int) -> tuple[Outputs, ReconciliationReport]:
    """One reconciliation pass: sweep, reconcile, and move the case lifecycle.

    Shared by the synchronous closing loop and the event-driven kernel.
    On a count mismatch within budget the returned outputs carry a fresh
    scan request; past the budget a manual override is demanded and the
    phase stays at the cavity scan.
    """
    out = Outputs()
    if state.case.phase is CasePhase.CLOSING_ANNOUNCED:
        out.phase_changes.append(state.case.advance(CasePhase.CAVITY_SCAN))
    elif state.case.phase is not CasePhase.CAVITY_SCAN:
        raise ValueError(f"scan result in phase {state.case.phase.value}")

    out.extend(mtc_tray_sweep(state, set(tray_reads), now))
    out.extend(mtc_bin_sweep(state, set(bin_reads), now))
    report = reconcile(state.case.checklist, tray_reads, bin_reads, scan)
    state.scans_done += 1
    state.last_outcome = report.outcome.value

    if report.outcome is Outcome.CLEAN:
        state.awaiting_staff_removal = False
        out.phase_changes.append(state.case.advance(CasePhase.RECONCILED))
        out.phase_changes.append(state.case.advance(CasePhase.AWAITING_SPD))

    elif report.outcome is Outcome.RSB_SUSPECTED:
        for tag in report.cavity_detected:
            entry = state.case.checklist.entries.get(tag)
            if entry is not None and entry.status is not TagStatus.REMOVED_FROM_OR:
                entry.status = TagStatus.IN_CAVITY_BELIEF
                entry.last_seen_s = now
        out.alerts.append(Alert(
            time_s=now, severity=Severity.CRITICAL, kind=AlertKind.RSB_SUSPECTED,
            tags=report.cavity_detected,
            text=f"cavity scan detected {sorted(report.cavity_detected)}; "
                 f"remove before closing"))
        state.awaiting_staff_removal = True
        out.phase_changes.append(state.case.advance(CasePhase.CLOSING_ANNOUNCED))

    else:  # count mismatch
        out.alerts.append(Alert(
            time_s=now, severity=Severity.CRITICAL, kind=AlertKind.COUNT_MISMATCH,
            tags=report.missing,
            text=f"{len(report.missing)} item(s) unaccounted: {sorted(report.missing)}"))
        if state.rescans_used < state.max_rescans:
            state.rescans_used += 1
            out.phase_changes.append(state.case.advance(CasePhase.CLOSING_ANNOUNCED))
            out.messages.append(ProtocolMessage(
                time_s=now, from_node=state.node_id, to_node=state.med_node,
                payload={"kind": "RequestCavityScan", "case": state.case.case_id}))
        else:
            out.alerts.append(Alert(
                time_s=now, severity=Severity.CRITICAL, kind=AlertKind.MANUAL_OVERRIDE,
                tags=report.missing,
                text="re-scan budget exhausted; manual override required"))
    return out, report


def closing_loop(state: MtcState,
                 scan_fn: Callable[[], ScanResult],
                 verify_fn: Callable[[], tuple[set[str], set[str]]],
                 now: int = 0,
                 max_rescans: int | None = None,
                 on_rsb: Callable[[ReconciliationReport], bool] | None = None,
                 ) -> tuple[MtcState, list[Alert]]:
    """Run the closing re-scan loop synchronously until it settles.

    ``scan_fn`` performs one cavity scan; ``verify_fn`` returns fresh tray
    and bin read sets. ``on_rsb`` is the staff response to a retention
    alert: it returns True once it removed something, enabling another
    pass. Without it the case stays parked awaiting staff action.
    """
    if state.case.phase is not CasePhase.CLOSING_ANNOUNCED:
        raise ValueError(f"closing loop requires an announced closing, "
                         f"case is {state.case.phase.value}")
    if max_rescans is not None:
        state.max_rescans = max_rescans
    alerts: list[Alert] = []
    while True:
        tray_reads, bin_reads = verify_fn()
        out, report = apply_scan_outcome(state, scan_fn(), tray_reads, bin_reads, now)
        alerts.extend(out.alerts)
        if report.outcome is Outcome.CLEAN:
            return state, alerts
        if report.outcome is Outcome.RSB_SUSPECTED:
            if on_rsb is None or not on_rsb(report):
                return state, alerts
            state.awaiting_staff_removal = False
            continue
        # count mismatch: apply_scan_outcome already consumed budget if any
        if state.case.phase is CasePhase.CAVITY_SCAN:
            return state, alerts  # budget exhausted, override demanded


@dataclass(frozen=True)
class LocationBelief:
    """Last believed room for a tag; ``site`` None means never seen or in transit."""

    site: str | None
    last_seen_s: int | None

    @property
    def known(self) -> bool:
        return self.last_seen_s is not None


def locate(tag_id: str, cms: CmsState) -> LocationBelief:
    """Room-level location query against the central service's belief."""
    if tag_id not in cms.registered_tags:
        raise UnknownTagError(f"unknown tag: {tag_id}")
    belief = cms.belief.get(tag_id)
    if belief is None:
        return LocationBelief(site=None, last_seen_s=None)
    return LocationBelief(site=belief.site, last_seen_s=belief.last_seen_s)


# --------------------------------------------------------------------------
# Reports


@dataclass
class SurgeryReport:
    case_id: str
    items: list[dict]  # tag_id, kind, first_seen_s, last_seen_s, final_status
    alerts: list[dict]
    scan_passes: int
    duration_s: int
    final_phase: str
    outcomes: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"case_id": self.case_id, "items": self.items, "alerts": self.alerts,
                "scan_passes": self.scan_passes, "duration_s": self.duration_s,
                "final_phase": self.final_phase, "outcomes": self.outcomes}

    def to_csv(self) -> str:
        lines = ["tag_id,kind,first_seen_s,last_seen_s,final_status"]
        for row in self.items:
            lines.append(f"{row['tag_id']},{row['kind']},{row['first_seen_s']},"
                         f"{row['last_seen_s']},{row['final_status']}")
        return "\n".join(lines) + "\n"


def _record_tags(record: dict) -> set[str]:
    if record["type"] == "alert":
        return set(record.get("tags", ()))
    if record["type"] == "msg":
        payload = record["msg"]["payload"]
        tags = set()
        if "tag" in payload:
            tags.add(payload["tag"])
        if "scan" in payload:
            tags.update(payload["scan"]["detected"])
        return tags
    if record["type"] == "gt":
        return {record["tag"]}
    return set()


def generate_report(trace, case_id: str) -> SurgeryReport:
    """Deterministic per-case summary projected from a trace."""
    meta = None
    case_record = None
    alerts = []
    scan_passes = 0
    first_seen: dict[str, int] = {}
    for record in trace.records:
        if record["type"] == "meta":
            meta = record
        elif record["type"] == "case" and record["case_id"] == case_id:
            case_record = record
        elif record["type"] == "alert" and record.get("case") == case_id:
            alerts.append({"t": record["t"], "severity": record["severity"],
                           "kind": record["kind"], "tags": record["tags"],
                           "text": record["text"]})
        if record["type"] == "msg" and record["status"] == "delivered":
            payload = record["msg"]["payload"]
            if payload.get("kind") == "CavityScanResult" and payload.get("case") == case_id:
                scan_passes += payload["scan"]["passes"]
        for tag in _record_tags(record):
            first_seen.setdefault(tag, record["t"])
    if case_record is None:
        raise UnknownCaseError(f"unknown case: {case_id}")
    kinds = {item["tag"]: item["kind"] for item in meta["items"]} if meta else {}
    items = []
    for tag in sorted(case_record["entries"]):
        entry = case_record["entries"][tag]
        items.append({"tag_id": tag, "kind": kinds.get(tag, "?"),
                      "first_seen_s": first_seen.get(tag, entry["last_seen_s"]),
                      "last_seen_s": entry["last_seen_s"],
                      "final_status": entry["status"]})
    completed = case_record.get("completed_s")
    duration = completed if completed is not None else (meta["horizon_s"] if meta else 0)
    return SurgeryReport(case_id=case_id, items=items, alerts=alerts,
                         scan_passes=scan_passes, duration_s=duration,
                         final_phase=case_record["phase"],
                         outcomes=list(case_record.get("outcomes", ())))


# --------------------------------------------------------------------------
# History store


def persist(trace, store_path: str) -> None:
    """Write a trace atomically as newline-delimited JSON."""
    data = trace.to_ndjson()
    directory = os.path.dirname(os.path.abspath(store_path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".trace-", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as handle:
            handle.write(data)
        os.replace(tmp, store_path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(store_path: str):
    """Read a persisted trace back; complains about any torn record."""
    from .kernel import Trace  # local import to keep module layering acyclic

    try:
        with open(store_path, "r") as handle:
            data = handle.read()
    except OSError as exc:
        raise TraceIOError(str(exc)) from exc
    if data and not data.endswith("\n"):
        raise TraceIOError("truncated record")
    records = []
    for lineno, line in enumerate(data.splitlines(), start=1):
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise TraceIOError(f"truncated record at line {lineno}") from exc
    return Trace(records=records)
