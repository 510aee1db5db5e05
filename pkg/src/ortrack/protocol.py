"""Communicating state machines: room sensors, tool cart, detector, central service.

Node responsibilities:

* Room sensors (``RS:<room>``) sit at entrances. One antenna cannot see
  direction, so each sensor keeps a believed inside-set per tag and toggles
  it on every successful read; a missed read desynchronizes the toggle,
  which is exactly the failure mode worth simulating.
* The central service (``CMS``) keeps a room-level location belief for
  every registered tag plus a mirror of each case's checklist, and decides
  when a crossing means new equipment arrived or tracked equipment left.
* The tool cart (``MTC:<room>``) owns the per-case monitoring checklist and
  the case lifecycle. Tray and bin antennas report full sweeps; everything
  else arrives as messages.
* The handheld detector (``MED:<room>``) performs cavity scans on request.
* ``SPD`` acknowledges readiness to receive contaminated instruments; a
  case cannot complete without that acknowledgment.

All handlers are deterministic: same state and input always produce the
same successor state and outputs. The kernel serializes delivery, so no
handler ever runs concurrently with another.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .sensing import ScanResult, TagReadEvent

CMS_NODE = "CMS"
SPD_NODE = "SPD"

#: Tie-break order for simultaneous deliveries (staff/world actions are 0).
NODE_PRIORITY = {"RS": 1, "MED": 2, "MTC": 3, "CMS": 4, "SPD": 5}


def node_type(node_id: str) -> str:
    return node_id.split(":", 1)[0]


def node_priority(node_id: str) -> int:
    return NODE_PRIORITY.get(node_type(node_id), 9)


class TagStatus(Enum):
    ON_TRAY = "OnTray"
    IN_USE = "InUse"
    IN_CAVITY_BELIEF = "InCavityBelief"
    DISCARDED = "Discarded"
    REMOVED_FROM_OR = "RemovedFromOR"


class CasePhase(Enum):
    SETUP = "Setup"
    IN_PROGRESS = "InProgress"
    CLOSING_ANNOUNCED = "ClosingAnnounced"
    CAVITY_SCAN = "CavityScan"
    RECONCILED = "Reconciled"
    AWAITING_SPD = "AwaitingSpd"
    COMPLETE = "Complete"


#: Legal phase transitions. The cavity-scan loop may return to
#: ClosingAnnounced for a re-scan, but Reconciled can never be skipped on
#: the way to AwaitingSpd, and Complete is only reachable after the SPD ack.
PHASE_GRAPH: dict[CasePhase, tuple[CasePhase, ...]] = {
    CasePhase.SETUP: (CasePhase.IN_PROGRESS,),
    CasePhase.IN_PROGRESS: (CasePhase.CLOSING_ANNOUNCED,),
    CasePhase.CLOSING_ANNOUNCED: (CasePhase.CAVITY_SCAN,),
    CasePhase.CAVITY_SCAN: (CasePhase.RECONCILED, CasePhase.CLOSING_ANNOUNCED),
    CasePhase.RECONCILED: (CasePhase.AWAITING_SPD,),
    CasePhase.AWAITING_SPD: (CasePhase.COMPLETE,),
    CasePhase.COMPLETE: (),
}


class Severity(Enum):
    INFO = "Info"
    WARNING = "Warning"
    CRITICAL = "Critical"


class AlertKind(Enum):
    NEW_EQUIPMENT_DETECTED = "NewEquipmentDetected"
    EQUIPMENT_LEFT_OR = "EquipmentLeftOR"
    RSB_SUSPECTED = "RsbSuspected"
    COUNT_MISMATCH = "CountMismatch"
    SENSOR_DOWN = "SensorDown"
    MANUAL_OVERRIDE = "ManualOverride"
    UNKNOWN_TAG = "UnknownTag"


class InvalidPhaseError(Exception):
    """A case operation was attempted in the wrong lifecycle phase."""


class StaleCaseError(Exception):
    """A message referenced a case that has already completed."""


class UnknownCaseError(Exception):
    """No case with the given id exists."""


@dataclass
class Alert:
    """Staff-facing notification. Retention and count findings are always critical."""

    time_s: int
    severity: Severity
    kind: AlertKind
    tags: frozenset[str]
    text: str

    def __post_init__(self) -> None:
        if self.kind in (AlertKind.RSB_SUSPECTED, AlertKind.COUNT_MISMATCH):
            self.severity = Severity.CRITICAL

    def to_json(self) -> dict:
        return {"severity": self.severity.value, "kind": self.kind.value,
                "tags": sorted(self.tags), "text": self.text}


@dataclass
class ProtocolMessage:
    """Typed message between nodes. ``msg_id`` is stamped by the bus on send."""

    time_s: int
    from_node: str
    to_node: str
    payload: dict
    msg_id: int = 0

    def __post_init__(self) -> None:
        if self.from_node == self.to_node:
            raise ValueError("a node cannot message itself")

    def to_json(self) -> dict:
        return {"msg_id": self.msg_id, "from": self.from_node, "to": self.to_node,
                "payload": self.payload}


@dataclass
class Outputs:
    """Everything a handler wants the kernel to do or record."""

    messages: list[ProtocolMessage] = field(default_factory=list)
    alerts: list[Alert] = field(default_factory=list)
    phase_changes: list[tuple[str, CasePhase, CasePhase]] = field(default_factory=list)

    def extend(self, other: "Outputs") -> None:
        self.messages.extend(other.messages)
        self.alerts.extend(other.alerts)
        self.phase_changes.extend(other.phase_changes)


@dataclass
class ChecklistEntry:
    status: TagStatus
    last_seen_s: int


@dataclass
class MonitoringChecklist:
    """The cart's believed per-surgery inventory, keyed by tag."""

    case_id: str
    entries: dict[str, ChecklistEntry] = field(default_factory=dict)

    def active_tags(self) -> set[str]:
        """Tags counted toward reconciliation (everything not removed from the OR)."""
        return {t for t, e in self.entries.items()
                if e.status is not TagStatus.REMOVED_FROM_OR}

    def tags_with_status(self, status: TagStatus) -> set[str]:
        return {t for t, e in self.entries.items() if e.status is status}


@dataclass
class SurgeryCase:
    case_id: str
    room_id: str
    phase: CasePhase = CasePhase.SETUP
    checklist: MonitoringChecklist = None  # type: ignore[assignment]
    spd_acked: bool = False

    def __post_init__(self) -> None:
        if self.checklist is None:
            self.checklist = MonitoringChecklist(case_id=self.case_id)

    def advance(self, to: CasePhase) -> tuple[str, CasePhase, CasePhase]:
        if to not in PHASE_GRAPH[self.phase]:
            raise InvalidPhaseError(
                f"{self.case_id}: illegal transition {self.phase.value} -> {to.value}")
        if to is CasePhase.COMPLETE and not self.spd_acked:
            raise InvalidPhaseError(f"{self.case_id}: cannot complete without SPD ack")
        change = (self.case_id, self.phase, to)
        self.phase = to
        return change


# --------------------------------------------------------------------------
# Room sensor


@dataclass
class RoomSensorState:
    room_id: str
    believed_inside: set[str] = field(default_factory=set)

    @property
    def node_id(self) -> str:
        return f"RS:{self.room_id}"


def room_sensor_on_reads(state: RoomSensorState,
                         reads: list[TagReadEvent]) -> list[ProtocolMessage]:
    """Turn entrance reads into crossing reports for the central service.

    Direction is inferred from the believed side of the entrance: a read of
    a tag believed outside means it came in, and vice versa.
    """
    messages = []
    for read in reads:
        if read.tag_id in state.believed_inside:
            direction = "out"
            state.believed_inside.discard(read.tag_id)
        else:
            direction = "in"
            state.believed_inside.add(read.tag_id)
        messages.append(ProtocolMessage(
            time_s=read.time_s, from_node=state.node_id, to_node=CMS_NODE,
            payload={"kind": "RoomCrossing", "tag": read.tag_id,
                     "room": state.room_id, "direction": direction}))
    return messages


# --------------------------------------------------------------------------
# Central management service


@dataclass
class TagBelief:
    site: str | None  # None = seen leaving, not yet seen arriving
    last_seen_s: int


@dataclass
class CmsState:
    """Global locator plus per-case checklist mirror."""

    registered_tags: set[str] = field(default_factory=set)
    belief: dict[str, TagBelief] = field(default_factory=dict)
    case_by_room: dict[str, str] = field(default_factory=dict)
    room_by_case: dict[str, str] = field(default_factory=dict)
    checklist_mirror: dict[str, set[str]] = field(default_factory=dict)

    def register_case(self, case_id: str, room_id: str) -> None:
        self.case_by_room[room_id] = case_id
        self.room_by_case[case_id] = room_id
        self.checklist_mirror[case_id] = set()

    def register_tag(self, tag_id: str) -> None:
        # Registration is administrative; location belief only ever comes
        # from sensor reads.
        self.registered_tags.add(tag_id)


def cms_handle(state: CmsState, msg: ProtocolMessage) -> Outputs:
    """Route one message through the central service."""
    out = Outputs()
    payload = msg.payload
    kind = payload["kind"]

    if kind == "RoomCrossing":
        tag, room, direction = payload["tag"], payload["room"], payload["direction"]
        if tag not in state.registered_tags:
            out.alerts.append(Alert(
                time_s=msg.time_s, severity=Severity.WARNING, kind=AlertKind.UNKNOWN_TAG,
                tags=frozenset([tag]), text=f"unregistered tag {tag} read at {room}"))
            return out
        state.belief[tag] = TagBelief(site=room if direction == "in" else None,
                                      last_seen_s=msg.time_s)
        case_id = state.case_by_room.get(room)
        if case_id is None:
            return out  # non-OR room: location bookkeeping only
        mirror = state.checklist_mirror[case_id]
        mtc = f"MTC:{room}"
        if direction == "in" and tag not in mirror:
            out.messages.append(ProtocolMessage(
                time_s=msg.time_s, from_node=CMS_NODE, to_node=mtc,
                payload={"kind": "NewEquipmentInOR", "tag": tag, "case": case_id}))
        elif direction == "out" and tag in mirror:
            out.messages.append(ProtocolMessage(
                time_s=msg.time_s, from_node=CMS_NODE, to_node=mtc,
                payload={"kind": "EquipmentLeftOR", "tag": tag, "case": case_id}))

    elif kind == "ChecklistUpdate":
        mirror = state.checklist_mirror[payload["case"]]
        if payload["action"] == "add":
            mirror.add(payload["tag"])
        else:
            mirror.discard(payload["tag"])

    elif kind == "SpdReadyAck":
        room = state.room_by_case.get(payload["case"])
        if room is None:
            raise UnknownCaseError(f"unknown case: {payload['case']}")
        out.messages.append(ProtocolMessage(
            time_s=msg.time_s, from_node=CMS_NODE, to_node=f"MTC:{room}",
            payload=dict(payload)))

    elif kind == "ClosingAnnounced":
        pass  # report bookkeeping only; the trace already records it

    else:
        raise ValueError(f"CMS cannot handle payload kind {kind!r}")
    return out


# --------------------------------------------------------------------------
# Mobile tool cart


@dataclass
class MtcState:
    """Checklist authority and case lifecycle owner for one operating room."""

    case: SurgeryCase
    scan_passes: int = 2
    max_rescans: int = 2
    rescans_used: int = 0
    awaiting_staff_removal: bool = False
    scans_done: int = 0
    last_outcome: str | None = None

    @property
    def node_id(self) -> str:
        return f"MTC:{self.case.room_id}"

    @property
    def med_node(self) -> str:
        return f"MED:{self.case.room_id}"


def _checklist_update(state: MtcState, action: str, tag: str, now: int) -> ProtocolMessage:
    return ProtocolMessage(
        time_s=now, from_node=state.node_id, to_node=CMS_NODE,
        payload={"kind": "ChecklistUpdate", "case": state.case.case_id,
                 "action": action, "tag": tag})


def _ensure_in_progress(state: MtcState, out: Outputs) -> None:
    if state.case.phase is CasePhase.SETUP:
        out.phase_changes.append(state.case.advance(CasePhase.IN_PROGRESS))


def _add_or_reactivate(state: MtcState, tag: str, status: TagStatus, now: int,
                       out: Outputs) -> bool:
    """Put a tag on the active checklist; returns False if already active."""
    entry = state.case.checklist.entries.get(tag)
    if entry is not None and entry.status is not TagStatus.REMOVED_FROM_OR:
        entry.last_seen_s = now
        return False
    state.case.checklist.entries[tag] = ChecklistEntry(status=status, last_seen_s=now)
    out.messages.append(_checklist_update(state, "add", tag, now))
    _ensure_in_progress(state, out)
    return True


def mtc_handle(state: MtcState, msg: ProtocolMessage) -> Outputs:
    """Apply one message from the central service to the cart's checklist."""
    if state.case.phase is CasePhase.COMPLETE:
        raise StaleCaseError(f"case {state.case.case_id} already complete")
    out = Outputs()
    payload = msg.payload
    kind = payload["kind"]
    now = msg.time_s

    if kind == "NewEquipmentInOR":
        entry = state.case.checklist.entries.get(payload["tag"])
        already_active = entry is not None and entry.status is not TagStatus.REMOVED_FROM_OR
        if already_active:
            entry.last_seen_s = now  # idempotent: no duplicate alert
        else:
            _add_or_reactivate(state, payload["tag"], TagStatus.IN_USE, now, out)
            out.alerts.append(Alert(
                time_s=now, severity=Severity.INFO, kind=AlertKind.NEW_EQUIPMENT_DETECTED,
                tags=frozenset([payload["tag"]]),
                text=f"new equipment {payload['tag']} detected in {state.case.room_id}, "
                     f"added to monitoring checklist"))

    elif kind == "EquipmentLeftOR":
        entry = state.case.checklist.entries.get(payload["tag"])
        if entry is not None and entry.status is not TagStatus.REMOVED_FROM_OR:
            entry.status = TagStatus.REMOVED_FROM_OR
            entry.last_seen_s = now
            out.messages.append(_checklist_update(state, "remove", payload["tag"], now))
            # Removing items mid-reconciliation can mask a retained item.
            severity = (Severity.WARNING
                        if state.case.phase in (CasePhase.CLOSING_ANNOUNCED,
                                                CasePhase.CAVITY_SCAN)
                        else Severity.INFO)
            out.alerts.append(Alert(
                time_s=now, severity=severity, kind=AlertKind.EQUIPMENT_LEFT_OR,
                tags=frozenset([payload["tag"]]),
                text=f"{payload['tag']} left {state.case.room_id}, "
                     f"removed from monitoring checklist"))

    elif kind == "SpdReadyAck":
        if state.case.phase not in (CasePhase.RECONCILED, CasePhase.AWAITING_SPD):
            raise InvalidPhaseError(
                f"SPD ack for {state.case.case_id} in phase {state.case.phase.value}")
        state.case.spd_acked = True
        if state.case.phase is CasePhase.RECONCILED:
            out.phase_changes.append(state.case.advance(CasePhase.AWAITING_SPD))
        out.phase_changes.append(state.case.advance(CasePhase.COMPLETE))

    else:
        raise ValueError(f"MTC cannot handle payload kind {kind!r}")
    return out


def mtc_tray_sweep(state: MtcState, detected: set[str], now: int) -> Outputs:
    """Full tray antenna sweep: presence sets OnTray, absence demotes to InUse."""
    if state.case.phase is CasePhase.COMPLETE:
        raise StaleCaseError(f"case {state.case.case_id} already complete")
    out = Outputs()
    for tag in sorted(detected):
        _add_or_reactivate(state, tag, TagStatus.ON_TRAY, now, out)
        state.case.checklist.entries[tag].status = TagStatus.ON_TRAY
    for tag, entry in state.case.checklist.entries.items():
        if entry.status is TagStatus.ON_TRAY and tag not in detected:
            entry.status = TagStatus.IN_USE
    return out


def mtc_bin_sweep(state: MtcState, detected: set[str], now: int) -> Outputs:
    """Full trash-bin antenna sweep; discarded items stay on the count."""
    if state.case.phase is CasePhase.COMPLETE:
        raise StaleCaseError(f"case {state.case.case_id} already complete")
    out = Outputs()
    for tag in sorted(detected):
        _add_or_reactivate(state, tag, TagStatus.DISCARDED, now, out)
        state.case.checklist.entries[tag].status = TagStatus.DISCARDED
    for tag, entry in state.case.checklist.entries.items():
        if entry.status is TagStatus.DISCARDED and tag not in detected:
            entry.status = TagStatus.IN_USE
    return out


def announce_closing(state: MtcState, now: int) -> Outputs:
    """Staff announced closing: request a cavity scan from the detector."""
    if state.case.phase is not CasePhase.IN_PROGRESS:
        raise InvalidPhaseError(
            f"cannot announce closing in phase {state.case.phase.value}")
    out = Outputs()
    out.phase_changes.append(state.case.advance(CasePhase.CLOSING_ANNOUNCED))
    out.messages.append(ProtocolMessage(
        time_s=now, from_node=state.node_id, to_node=CMS_NODE,
        payload={"kind": "ClosingAnnounced", "case": state.case.case_id}))
    out.messages.append(ProtocolMessage(
        time_s=now, from_node=state.node_id, to_node=state.med_node,
        payload={"kind": "RequestCavityScan", "case": state.case.case_id}))
    return out


def mtc_staff_rescan(state: MtcState, now: int) -> Outputs:
    """Staff acted after a retention alert and asked for a verification re-scan."""
    out = Outputs()
    if state.awaiting_staff_removal and state.case.phase is CasePhase.CLOSING_ANNOUNCED:
        state.awaiting_staff_removal = False
        out.messages.append(ProtocolMessage(
            time_s=now, from_node=state.node_id, to_node=state.med_node,
            payload={"kind": "RequestCavityScan", "case": state.case.case_id}))
    return out


# --------------------------------------------------------------------------
# Medical equipment detector


def med_on_request(room_id: str, case_id: str, scan: ScanResult, now: int) -> ProtocolMessage:
    """Wrap a finished cavity scan into a result message for the cart."""
    return ProtocolMessage(
        time_s=now, from_node=f"MED:{room_id}", to_node=f"MTC:{room_id}",
        payload={"kind": "CavityScanResult", "case": case_id, "scan": scan.to_json()})


# --------------------------------------------------------------------------
# Sterile processing department


def spd_acknowledge(case_id: str, cases: dict[str, SurgeryCase]) -> ProtocolMessage:
    """SPD confirms readiness; only valid once the case is reconciled."""
    case = cases.get(case_id)
    if case is None:
        raise UnknownCaseError(f"unknown case: {case_id}")
    if case.phase not in (CasePhase.RECONCILED, CasePhase.AWAITING_SPD):
        raise InvalidPhaseError(
            f"SPD ack for {case_id} in phase {case.phase.value}")
    return ProtocolMessage(
        time_s=0, from_node=SPD_NODE, to_node=CMS_NODE,
        payload={"kind": "SpdReadyAck", "case": case_id})
