"""Minimal-communication swarm layer.

Each agent carries an a-priori info record per peer (constraint
envelope plus antenna array), checks its own envelope every step, and
transmits only on validity transitions: one announce at startup, one
violation message when its measured state leaves the envelope, one
resume (with refreshed info) when it returns. While invalid, the
violation is re-sent every 5 s so lossy channels cannot wedge peers in
a stale-valid state. Relative z/roll/pitch for the solver come from
differencing commanded envelope values; agents flagged invalid are
skipped entirely.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace

from .errors import DecodeError, DomainError, ObservabilityError
from .estimator import (
    EstimationProblem,
    PoseEstimate,
    SmoothingFilter,
    SolverConfig,
    solve_with_config,
)
from .geometry import AntennaArray, wrap_deg
from .sensing import BiasModel, RangeMeasurement

PROTO_VERSION = 1
KEEPALIVE_PERIOD_S = 5.0
_KINDS = ("announce_info", "violation", "resume")


@dataclass(frozen=True)
class ConstraintEnvelope:
    """Commanded z/roll/pitch with per-axis tolerances (m, deg)."""

    z_cmd: float
    roll_cmd: float = 0.0
    pitch_cmd: float = 0.0
    z_tol: float = 0.1
    roll_tol: float = 5.0
    pitch_tol: float = 5.0

    def __post_init__(self) -> None:
        for name in ("z_cmd", "roll_cmd", "pitch_cmd", "z_tol", "roll_tol", "pitch_tol"):
            if not math.isfinite(float(getattr(self, name))):
                raise DomainError(f"envelope field {name} must be finite")
        if self.z_tol < 0 or self.roll_tol < 0 or self.pitch_tol < 0:
            raise DomainError("envelope tolerances must be >= 0")


@dataclass(frozen=True)
class EnvelopeMeasurement:
    """Locally measured z/roll/pitch at a timestamp."""

    time_s: float
    z_m: float
    roll_deg: float
    pitch_deg: float

    def __post_init__(self) -> None:
        for name in ("time_s", "z_m", "roll_deg", "pitch_deg"):
            if not math.isfinite(float(getattr(self, name))):
                raise DomainError(f"measurement field {name} must be finite")


@dataclass(frozen=True)
class AgentInfo:
    """The static per-agent record peers need: envelope, array, validity."""

    agent: str
    envelope: ConstraintEnvelope
    array: AntennaArray
    valid: bool = True
    info_version: int = 0


@dataclass(frozen=True)
class SwarmMessage:
    kind: str
    sender: str
    seq: int
    time_s: float
    payload: AgentInfo | None = None

    def __post_init__(self) -> None:
        if self.kind not in _KINDS:
            raise DomainError(f"unknown message kind {self.kind!r}")
        if self.kind == "violation":
            if self.payload is not None:
                raise DomainError("violation messages carry no payload")
        elif self.payload is None:
            raise DomainError(f"{self.kind} messages require an AgentInfo payload")
        if self.seq < 0:
            raise DomainError("seq must be >= 0")


def check_envelope(env: ConstraintEnvelope, meas: EnvelopeMeasurement) -> bool:
    """True iff the measured state sits inside all three tolerances (inclusive)."""
    return (
        abs(meas.z_m - env.z_cmd) <= env.z_tol
        and abs(meas.roll_deg - env.roll_cmd) <= env.roll_tol
        and abs(meas.pitch_deg - env.pitch_cmd) <= env.pitch_tol
    )


def _info_to_doc(info: AgentInfo) -> dict:
    env = info.envelope
    return {
        "agent": info.agent,
        "valid": info.valid,
        "info_version": info.info_version,
        "envelope": {
            "z_cmd": env.z_cmd,
            "roll_cmd": env.roll_cmd,
            "pitch_cmd": env.pitch_cmd,
            "z_tol": env.z_tol,
            "roll_tol": env.roll_tol,
            "pitch_tol": env.pitch_tol,
        },
        "array": json.loads(info.array.to_json()),
    }


def _info_from_doc(doc: dict) -> AgentInfo:
    env = doc["envelope"]
    return AgentInfo(
        agent=doc["agent"],
        envelope=ConstraintEnvelope(
            z_cmd=float(env["z_cmd"]),
            roll_cmd=float(env["roll_cmd"]),
            pitch_cmd=float(env["pitch_cmd"]),
            z_tol=float(env["z_tol"]),
            roll_tol=float(env["roll_tol"]),
            pitch_tol=float(env["pitch_tol"]),
        ),
        array=AntennaArray.from_json(json.dumps(doc["array"])),
        valid=bool(doc["valid"]),
        info_version=int(doc["info_version"]),
    )


def encode_message(msg: SwarmMessage) -> bytes:
    """Length-prefixed canonical JSON (4-byte big-endian length, UTF-8)."""
    doc = {
        "proto_version": PROTO_VERSION,
        "kind": msg.kind,
        "sender": msg.sender,
        "seq": msg.seq,
        "time_s": msg.time_s,
        "payload": None if msg.payload is None else _info_to_doc(msg.payload),
    }
    body = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack(">I", len(body)) + body


def decode_message(data: bytes) -> SwarmMessage:
    """Inverse of :func:`encode_message` for exactly one framed message.

    Raises
    ------
    DecodeError
        Malformed input; the message names the byte offset of the fault.
    """
    if len(data) < 4:
        raise DecodeError(f"byte 0: need 4-byte length prefix, have {len(data)} bytes")
    (length,) = struct.unpack(">I", data[:4])
    if len(data) < 4 + length:
        raise DecodeError(
            f"byte {len(data)}: truncated body, expected {length} bytes after prefix"
        )
    if len(data) > 4 + length:
        raise DecodeError(f"byte {4 + length}: trailing bytes after framed message")
    try:
        doc = json.loads(data[4 : 4 + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        offset = 4 + getattr(exc, "pos", getattr(exc, "start", 0))
        raise DecodeError(f"byte {offset}: invalid message body: {exc}") from exc
    if not isinstance(doc, dict):
        raise DecodeError("byte 4: message body must be a JSON object")
    if doc.get("proto_version") != PROTO_VERSION:
        raise DecodeError(
            f"byte 4: unsupported proto_version {doc.get('proto_version')!r}"
        )
    try:
        payload = None if doc["payload"] is None else _info_from_doc(doc["payload"])
        return SwarmMessage(
            kind=doc["kind"],
            sender=doc["sender"],
            seq=int(doc["seq"]),
            time_s=float(doc["time_s"]),
            payload=payload,
        )
    except (KeyError, TypeError, ValueError, DomainError) as exc:
        raise DecodeError(f"byte 4: invalid message fields: {exc}") from exc


@dataclass
class AgentState:
    """Mutable per-agent protocol state driven by :func:`step_agent`.

    ``peers`` seeds the a-priori directory; agents announced later join
    it. ``bias`` is this agent's own ranging calibration.
    """

    info: AgentInfo
    peers: dict[str, AgentInfo] = field(default_factory=dict)
    bias: BiasModel | None = None
    config: SolverConfig = field(default_factory=SolverConfig)
    range_rate_hz: float = 25.0

    def __post_init__(self) -> None:
        if self.range_rate_hz <= 0:
            raise DomainError("range_rate_hz must be positive")
        self.peers = {p.agent: p for p in self.peers.values()} if isinstance(
            self.peers, dict
        ) else {p.agent: p for p in self.peers}
        self.peers.pop(self.info.agent, None)
        self._seq = 0
        self._announced = False
        self._pending_announce = False
        self._in_violation = not self.info.valid
        self._last_violation_sent = -math.inf
        self._last_seq: dict[str, int] = {}
        self._range_filters: dict[tuple[str, int, int], SmoothingFilter] = {}
        self._stack: dict[str, dict[tuple[int, int], float]] = {}
        self._warm: dict[str, tuple[float, float, float]] = {}
        self.dropped_unknown_ranges = 0
        self.last_targets: list[str] = []

    @property
    def agent_id(self) -> str:
        return self.info.agent

    def set_envelope(self, envelope: ConstraintEnvelope) -> None:
        """Replace the commanded envelope; the next step announces it."""
        self.info = replace(
            self.info, envelope=envelope, info_version=self.info.info_version + 1
        )
        self._pending_announce = True

    def _next_message(self, kind: str, time_s: float) -> SwarmMessage:
        self._seq += 1
        payload = None
        if kind != "violation":
            self.info = replace(self.info, info_version=self.info.info_version + 1)
            payload = self.info
        return SwarmMessage(kind=kind, sender=self.agent_id, seq=self._seq,
                            time_s=time_s, payload=payload)

    def _apply_inbox(self, inbox: list[SwarmMessage]) -> None:
        # Sorting per sender by seq makes application order-independent.
        for msg in sorted(inbox, key=lambda m: (m.sender, m.seq)):
            if msg.sender == self.agent_id:
                continue
            if msg.seq <= self._last_seq.get(msg.sender, -1):
                continue
            self._last_seq[msg.sender] = msg.seq
            if msg.kind == "violation":
                known = self.peers.get(msg.sender)
                if known is not None:
                    self.peers[msg.sender] = replace(known, valid=False)
                continue
            info = msg.payload
            current = self.peers.get(msg.sender)
            if current is not None and info.info_version <= current.info_version:
                continue
            self.peers[msg.sender] = replace(info, valid=True)

    def _ingest_ranges(self, ranges: list[RangeMeasurement]) -> None:
        for m in ranges:
            if m.measuring_agent != self.agent_id or m.target_agent not in self.peers:
                self.dropped_unknown_ranges += 1
                continue
            key = (m.target_agent, m.antenna_i, m.antenna_j)
            filt = self._range_filters.get(key)
            if filt is None:
                filt = SmoothingFilter(self.config.range_window_s)
                self._range_filters[key] = filt
            filt.insert(m.time_s, m.range_m)
            # Smoothed values materialize lazily at solve time.
            self._stack.setdefault(m.target_agent, {})[(m.antenna_i, m.antenna_j)] = m.time_s

    def _estimate_peer(self, peer: AgentInfo, now_s: float) -> PoseEstimate | None:
        stack = self._stack.get(peer.agent)
        if not stack:
            return None
        smoothed = [
            RangeMeasurement(
                t, self.agent_id, peer.agent, i, j,
                max(self._range_filters[(peer.agent, i, j)].value(), 0.0),
            )
            for (i, j), t in stack.items()
        ]
        max_age = self.config.staleness_factor / self.range_rate_hz
        own_env = self.info.envelope
        env = peer.envelope
        try:
            problem = EstimationProblem.from_latest(
                smoothed,
                self.info.array,
                peer.array,
                z_rel=env.z_cmd - own_env.z_cmd,
                now_s=now_s,
                max_age_s=max_age,
                roll_rel=wrap_deg(env.roll_cmd - own_env.roll_cmd),
                pitch_rel=env.pitch_cmd - own_env.pitch_cmd,
                bias=self.bias,
                loss=self.config.loss,
                ablation=self.config.ablation,
            )
        except ObservabilityError:
            return None
        warm = self._warm.get(peer.agent)
        estimate = solve_with_config(
            problem, self.config, init=warm, multistart=None if warm is None else False
        )
        self._warm[peer.agent] = (estimate.x, estimate.y, estimate.yaw)
        return estimate


def step_agent(
    state: AgentState,
    meas: EnvelopeMeasurement,
    inbox: list[SwarmMessage],
    ranges: list[RangeMeasurement],
    estimate: bool = True,
) -> tuple[list[PoseEstimate], list[SwarmMessage]]:
    """One protocol step: inbox, own-envelope check, then estimation.

    Returns the instantaneous pose estimates (one per valid peer with a
    fresh measurement stack; targets are identified by position in
    ``state.peers`` iteration order via ``estimate.pairs`` context) and
    the messages to transmit this step. ``estimate=False`` skips the
    solver, e.g. when an outer loop decimates the solve rate.
    """
    state._apply_inbox(inbox)

    outbox: list[SwarmMessage] = []
    if not state._announced:
        outbox.append(state._next_message("announce_info", meas.time_s))
        state._announced = True
        state._pending_announce = False
    elif state._pending_announce:
        outbox.append(state._next_message("announce_info", meas.time_s))
        state._pending_announce = False

    inside = check_envelope(state.info.envelope, meas)
    if state._in_violation:
        if inside:
            state._in_violation = False
            state.info = replace(state.info, valid=True)
            outbox.append(state._next_message("resume", meas.time_s))
        elif meas.time_s - state._last_violation_sent >= KEEPALIVE_PERIOD_S:
            outbox.append(state._next_message("violation", meas.time_s))
            state._last_violation_sent = meas.time_s
    elif not inside:
        state._in_violation = True
        state.info = replace(state.info, valid=False)
        outbox.append(state._next_message("violation", meas.time_s))
        state._last_violation_sent = meas.time_s

    state._ingest_ranges(ranges)

    estimates: list[PoseEstimate] = []
    state.last_targets = []
    if estimate and state.info.valid:
        for peer in state.peers.values():
            if not peer.valid:
                continue
            result = state._estimate_peer(peer, meas.time_s)
            if result is not None:
                estimates.append(result)
                state.last_targets.append(peer.agent)
    return estimates, outbox
