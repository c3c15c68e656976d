"""Deterministic multi-agent scenario engine.

Generates ground-truth trajectories, 25 Hz directed antenna-pair range
measurements through the sensing model (bias, heavy-tailed noise,
geometric occlusion), envelope measurement streams, and the protocol
message traffic under a lossy/delayed channel. Every stochastic stream
hangs off its own child of the scenario seed, so runs are bit-stable
and the message channel can be reseeded without touching the ranging
draws.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import DomainError, SchemaError
from .geometry import AntennaArray, Pose3, pose_from_tuple, wrap_deg
from .protocol import (
    AgentInfo,
    AgentState,
    ConstraintEnvelope,
    EnvelopeMeasurement,
    SwarmMessage,
    decode_message,
    encode_message,
    step_agent,
)
from .sensing import (
    BiasModel,
    NoiseProfile,
    occlusion_mask,
    pair_geometry,
    sample_range_errors,
)

MAX_SPEED_MPS = 1.0
MAX_YAW_RATE_DPS = math.degrees(1.0)


@dataclass(frozen=True)
class TrajectorySpec:
    """One agent's scripted motion: static, line, circle, or waypoint.

    Yaw spins at ``yaw_rate_dps`` from ``yaw0_deg`` independently of the
    path; roll/pitch stay at the given constants. Speeds are capped at
    1 m/s positional and 1 rad/s angular.
    """

    kind: str
    position: tuple[float, float, float] | None = None
    start: tuple[float, float, float] | None = None
    end: tuple[float, float, float] | None = None
    center: tuple[float, float, float] | None = None
    radius_m: float = 0.0
    waypoints: tuple[tuple[float, float, float], ...] = ()
    speed_mps: float = 0.0
    phase0_deg: float = 0.0
    yaw0_deg: float = 0.0
    yaw_rate_dps: float = 0.0
    roll_deg: float = 0.0
    pitch_deg: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("static", "line", "circle", "waypoint"):
            raise DomainError(f"unknown trajectory kind {self.kind!r}")
        if self.speed_mps < 0 or self.speed_mps > MAX_SPEED_MPS:
            raise DomainError(f"speed {self.speed_mps} outside [0, {MAX_SPEED_MPS}] m/s")
        if abs(self.yaw_rate_dps) > MAX_YAW_RATE_DPS:
            raise DomainError(f"yaw rate beyond {MAX_YAW_RATE_DPS:.2f} deg/s cap")
        if self.kind == "static" and self.position is None:
            raise DomainError("static trajectory needs a position")
        if self.kind == "line" and (self.start is None or self.end is None):
            raise DomainError("line trajectory needs start and end")
        if self.kind == "circle":
            if self.center is None or self.radius_m <= 0:
                raise DomainError("circle trajectory needs a center and radius > 0")
            if self.speed_mps / self.radius_m > 1.0:
                raise DomainError("circle angular rate exceeds the 1 rad/s cap")
        if self.kind == "waypoint" and len(self.waypoints) < 2:
            raise DomainError("waypoint trajectory needs at least two points")


def pose_at(spec: TrajectorySpec, t: float) -> Pose3:
    """Ground-truth pose along the scripted path at time ``t`` seconds.

    Line and waypoint paths hold their final position after arrival.
    """
    if not (t >= 0.0 and math.isfinite(t)):
        raise DomainError(f"trajectory time {t!r} out of range")
    yaw = wrap_deg(spec.yaw0_deg + spec.yaw_rate_dps * t)
    if spec.kind == "static":
        pos = np.array(spec.position, dtype=float)
    elif spec.kind == "line":
        start = np.array(spec.start, dtype=float)
        end = np.array(spec.end, dtype=float)
        length = float(np.linalg.norm(end - start))
        if length == 0.0:
            pos = start
        else:
            travel = min(spec.speed_mps * t, length)
            pos = start + (end - start) * (travel / length)
    elif spec.kind == "circle":
        theta = math.radians(spec.phase0_deg) + (spec.speed_mps / spec.radius_m) * t
        cx, cy, cz = spec.center
        pos = np.array(
            [cx + spec.radius_m * math.cos(theta), cy + spec.radius_m * math.sin(theta), cz]
        )
    else:
        pts = np.array(spec.waypoints, dtype=float)
        legs = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        cum = np.concatenate([[0.0], np.cumsum(legs)])
        travel = min(spec.speed_mps * t, float(cum[-1]))
        seg = int(np.searchsorted(cum, travel, side="right") - 1)
        seg = min(seg, len(legs) - 1)
        frac = 0.0 if legs[seg] == 0 else (travel - cum[seg]) / legs[seg]
        pos = pts[seg] + (pts[seg + 1] - pts[seg]) * frac
    return pose_from_tuple(pos[0], pos[1], pos[2], spec.roll_deg, spec.pitch_deg, yaw)


@dataclass(frozen=True)
class AgentSpec:
    """Agent identity plus the hardware/constraint/trajectory triple."""

    agent: str
    array: AntennaArray
    envelope: ConstraintEnvelope
    trajectory: TrajectorySpec
    body_radius_m: float | None = None

    def body_radius(self) -> float:
        if self.body_radius_m is not None:
            return self.body_radius_m
        return float(np.linalg.norm(self.array.positions[:, :2], axis=1).max())


@dataclass(frozen=True)
class ChannelModel:
    """Message channel: iid per-recipient drops plus a fixed delay."""

    drop_prob: float = 0.0
    delay_s: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.drop_prob <= 1.0:
            raise DomainError("drop_prob must be within [0, 1]")
        if self.delay_s < 0:
            raise DomainError("delay_s must be >= 0")


@dataclass(frozen=True)
class SimEvent:
    """Scripted mid-run change, snapped to the next tick boundary."""

    time_s: float
    agent: str
    kind: str
    dz: float = 0.0
    envelope: ConstraintEnvelope | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("altitude_shift", "envelope_change"):
            raise DomainError(f"unknown event kind {self.kind!r}")
        if self.kind == "envelope_change" and self.envelope is None:
            raise DomainError("envelope_change events need an envelope")
        if not math.isfinite(self.dz):
            raise DomainError("dz must be finite")


@dataclass(frozen=True)
class Scenario:
    agents: tuple[AgentSpec, ...]
    duration_s: float
    range_rate_hz: float = 25.0
    noise: NoiseProfile = field(default_factory=NoiseProfile)
    bias_truth: BiasModel | None = None
    channel: ChannelModel = field(default_factory=ChannelModel)
    events: tuple[SimEvent, ...] = ()
    seed: int = 0

    def __post_init__(self) -> None:
        if self.duration_s <= 0:
            raise DomainError("duration_s must be positive")
        if self.range_rate_hz <= 0:
            raise DomainError("range_rate_hz must be positive")
        if len(self.agents) < 2:
            raise DomainError("scenario needs at least two agents")
        ids = [a.agent for a in self.agents]
        if len(set(ids)) != len(ids):
            raise DomainError("agent ids must be unique")
        known = set(ids)
        for ev in self.events:
            if ev.agent not in known:
                raise DomainError(f"event references unknown agent {ev.agent!r}")
        object.__setattr__(self, "agents", tuple(self.agents))
        object.__setattr__(self, "events", tuple(self.events))

    def to_json(self) -> str:
        return json.dumps(_scenario_to_doc(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Scenario":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"scenario JSON is invalid: {exc}") from exc
        return _scenario_from_doc(doc)


def _traj_to_doc(spec: TrajectorySpec) -> dict:
    doc = {"kind": spec.kind}
    for name in ("position", "start", "end", "center", "waypoints"):
        value = getattr(spec, name)
        if value:
            doc[name] = [list(p) for p in value] if name == "waypoints" else list(value)
    for name in ("radius_m", "speed_mps", "phase0_deg", "yaw0_deg", "yaw_rate_dps",
                 "roll_deg", "pitch_deg"):
        value = getattr(spec, name)
        if value:
            doc[name] = value
    return doc


def _traj_from_doc(doc: dict) -> TrajectorySpec:
    if "kind" not in doc:
        raise SchemaError("trajectory document needs a 'kind'")
    kwargs = dict(doc)
    for name in ("position", "start", "end", "center"):
        if name in kwargs:
            kwargs[name] = tuple(float(v) for v in kwargs[name])
    if "waypoints" in kwargs:
        kwargs["waypoints"] = tuple(tuple(float(v) for v in p) for p in kwargs["waypoints"])
    try:
        return TrajectorySpec(**kwargs)
    except TypeError as exc:
        raise SchemaError(f"bad trajectory fields: {exc}") from exc


def _env_to_doc(env: ConstraintEnvelope) -> dict:
    return {
        "z_cmd": env.z_cmd, "roll_cmd": env.roll_cmd, "pitch_cmd": env.pitch_cmd,
        "z_tol": env.z_tol, "roll_tol": env.roll_tol, "pitch_tol": env.pitch_tol,
    }


def _env_from_doc(doc: dict) -> ConstraintEnvelope:
    try:
        return ConstraintEnvelope(**{k: float(v) for k, v in doc.items()})
    except TypeError as exc:
        raise SchemaError(f"bad envelope fields: {exc}") from exc


def _scenario_to_doc(scenario: Scenario) -> dict:
    events = []
    for ev in scenario.events:
        doc = {"time_s": ev.time_s, "agent": ev.agent, "kind": ev.kind}
        if ev.kind == "altitude_shift":
            doc["dz"] = ev.dz
        else:
            doc["envelope"] = _env_to_doc(ev.envelope)
        events.append(doc)
    return {
        "agents": [
            {
                "agent": spec.agent,
                "array": json.loads(spec.array.to_json()),
                "envelope": _env_to_doc(spec.envelope),
                "trajectory": _traj_to_doc(spec.trajectory),
                "body_radius_m": spec.body_radius_m,
            }
            for spec in scenario.agents
        ],
        "duration_s": scenario.duration_s,
        "range_rate_hz": scenario.range_rate_hz,
        "noise": json.loads(scenario.noise.to_json()),
        "bias_truth": None
        if scenario.bias_truth is None
        else json.loads(scenario.bias_truth.to_json()),
        "channel": {
            "drop_prob": scenario.channel.drop_prob,
            "delay_s": scenario.channel.delay_s,
            "seed": scenario.channel.seed,
        },
        "events": events,
        "seed": scenario.seed,
    }


def _scenario_from_doc(doc: dict) -> Scenario:
    if not isinstance(doc, dict):
        raise SchemaError("scenario must be a JSON object")
    missing = {"agents", "duration_s"} - set(doc)
    if missing:
        raise SchemaError(f"scenario missing fields {sorted(missing)}")
    try:
        agents = tuple(
            AgentSpec(
                agent=a["agent"],
                array=AntennaArray.from_json(json.dumps(a["array"])),
                envelope=_env_from_doc(a["envelope"]),
                trajectory=_traj_from_doc(a["trajectory"]),
                body_radius_m=a.get("body_radius_m"),
            )
            for a in doc["agents"]
        )
        events = []
        for ev in doc.get("events", ()):
            events.append(
                SimEvent(
                    time_s=float(ev["time_s"]),
                    agent=ev["agent"],
                    kind=ev["kind"],
                    dz=float(ev.get("dz", 0.0)),
                    envelope=_env_from_doc(ev["envelope"]) if "envelope" in ev else None,
                )
            )
        channel_doc = doc.get("channel", {})
        return Scenario(
            agents=agents,
            duration_s=float(doc["duration_s"]),
            range_rate_hz=float(doc.get("range_rate_hz", 25.0)),
            noise=NoiseProfile.from_json(json.dumps(doc["noise"]))
            if "noise" in doc
            else NoiseProfile(),
            bias_truth=BiasModel.from_json(json.dumps(doc["bias_truth"]))
            if doc.get("bias_truth") is not None
            else None,
            channel=ChannelModel(
                drop_prob=float(channel_doc.get("drop_prob", 0.0)),
                delay_s=float(channel_doc.get("delay_s", 0.0)),
                seed=int(channel_doc.get("seed", 0)),
            ),
            events=tuple(events),
            seed=int(doc.get("seed", 0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"bad scenario document: {exc}") from exc


@dataclass(frozen=True)
class Delivery:
    """A message arriving at one recipient after channel effects."""

    recipient: str
    deliver_time_s: float
    message: SwarmMessage


@dataclass
class SimulationLog:
    """Columnar run record: truth, measurements, and message traffic."""

    agents: tuple[str, ...]
    arrays: dict[str, AntennaArray]
    envelopes: dict[str, ConstraintEnvelope]
    times: np.ndarray
    range_rate_hz: float
    poses: dict[str, np.ndarray]
    envelope_meas: dict[str, np.ndarray]
    pair_columns: dict[tuple[str, str], tuple[tuple[int, int], ...]]
    ranges: dict[tuple[str, str], np.ndarray]
    messages: list[Delivery]
    events: tuple[SimEvent, ...] = ()
    dropped_messages: int = 0
    seed: int = 0
    scenario_doc: dict | None = None

    @property
    def tick_count(self) -> int:
        return len(self.times)

    def measurement_count(self) -> int:
        return sum(arr.size for arr in self.ranges.values())

    def truth_pose(self, agent: str, tick: int) -> Pose3:
        x, y, z, roll, pitch, yaw = self.poses[agent][tick]
        return pose_from_tuple(x, y, z, roll, pitch, yaw)

    def truth_relative(self, measuring: str, target: str, tick: int) -> Pose3:
        return self.truth_pose(measuring, tick).inverse() @ self.truth_pose(target, tick)

    def save(self, path: str | Path) -> None:
        """Write the run as a CSV bundle; a pure function of the log.

        Saving, loading, and saving again produces byte-identical files.
        """
        out = Path(path)
        out.mkdir(parents=True, exist_ok=True)

        manifest = {
            "format": "rangepose-simlog",
            "version": 1,
            "agents": list(self.agents),
            "range_rate_hz": self.range_rate_hz,
            "tick_count": self.tick_count,
            "seed": self.seed,
            "dropped_messages": self.dropped_messages,
            "arrays": {aid: json.loads(arr.to_json()) for aid, arr in self.arrays.items()},
            "envelopes": {aid: _env_to_doc(env) for aid, env in self.envelopes.items()},
            "events": [
                {
                    "time_s": ev.time_s,
                    "agent": ev.agent,
                    "kind": ev.kind,
                    "dz": ev.dz,
                    "envelope": None if ev.envelope is None else _env_to_doc(ev.envelope),
                }
                for ev in self.events
            ],
            "scenario": self.scenario_doc,
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

        pose_frames = []
        for aid in self.agents:
            frame = pd.DataFrame(
                self.poses[aid],
                columns=["x_m", "y_m", "z_m", "roll_deg", "pitch_deg", "yaw_deg"],
            )
            frame.insert(0, "agent", aid)
            frame.insert(0, "time_s", self.times)
            pose_frames.append(frame)
        pd.concat(pose_frames, ignore_index=True).to_csv(out / "poses.csv", index=False)

        env_frames = []
        for aid in self.agents:
            frame = pd.DataFrame(
                self.envelope_meas[aid], columns=["z_m", "roll_deg", "pitch_deg"]
            )
            frame.insert(0, "agent", aid)
            frame.insert(0, "time_s", self.times)
            env_frames.append(frame)
        pd.concat(env_frames, ignore_index=True).to_csv(out / "envelopes.csv", index=False)

        range_frames = []
        for (a, b), cols in self.pair_columns.items():
            n_cols = len(cols)
            idx = np.array(cols, dtype=int)
            frame = pd.DataFrame(
                {
                    "time_s": np.repeat(self.times, n_cols),
                    "meas_agent": a,
                    "targ_agent": b,
                    "ant_i": np.tile(idx[:, 0], self.tick_count),
                    "ant_j": np.tile(idx[:, 1], self.tick_count),
                    "range_m": self.ranges[(a, b)].ravel(),
                }
            )
            range_frames.append(frame)
        pd.concat(range_frames, ignore_index=True).to_csv(out / "ranges.csv", index=False)

        rows = []
        for d in self.messages:
            rows.append(
                {
                    "recipient": d.recipient,
                    "deliver_time_s": d.deliver_time_s,
                    "encoded": encode_message(d.message)[4:].decode("utf-8"),
                }
            )
        pd.DataFrame(rows, columns=["recipient", "deliver_time_s", "encoded"]).to_csv(
            out / "messages.csv", index=False
        )

    @classmethod
    def load(cls, path: str | Path) -> "SimulationLog":
        """Reconstruct a log from a :meth:`save` bundle."""
        src = Path(path)
        manifest_path = src / "manifest.json"
        if not manifest_path.exists():
            raise SchemaError(f"{src} has no manifest.json")
        try:
            manifest = json.loads(manifest_path.read_text())
        except json.JSONDecodeError as exc:
            raise SchemaError(f"manifest.json is invalid JSON: {exc}") from exc
        if manifest.get("format") != "rangepose-simlog":
            raise SchemaError(f"unrecognized bundle format {manifest.get('format')!r}")

        agents = tuple(manifest["agents"])
        n_ticks = int(manifest["tick_count"])
        arrays = {
            aid: AntennaArray.from_json(json.dumps(doc))
            for aid, doc in manifest["arrays"].items()
        }
        envelopes = {
            aid: _env_from_doc(doc) for aid, doc in manifest["envelopes"].items()
        }
        events = tuple(
            SimEvent(
                time_s=ev["time_s"],
                agent=ev["agent"],
                kind=ev["kind"],
                dz=ev.get("dz", 0.0),
                envelope=None
                if ev.get("envelope") is None
                else _env_from_doc(ev["envelope"]),
            )
            for ev in manifest.get("events", ())
        )

        pose_df = pd.read_csv(src / "poses.csv", float_precision="round_trip")
        env_df = pd.read_csv(src / "envelopes.csv", float_precision="round_trip")
        range_df = pd.read_csv(src / "ranges.csv", float_precision="round_trip")
        msg_df = pd.read_csv(src / "messages.csv", float_precision="round_trip")

        times = pose_df[pose_df["agent"] == agents[0]]["time_s"].to_numpy()
        poses = {}
        env_meas = {}
        for aid in agents:
            block = pose_df[pose_df["agent"] == aid]
            if len(block) != n_ticks:
                raise SchemaError(f"poses.csv has {len(block)} rows for {aid!r}")
            poses[aid] = block[
                ["x_m", "y_m", "z_m", "roll_deg", "pitch_deg", "yaw_deg"]
            ].to_numpy()
            env_meas[aid] = env_df[env_df["agent"] == aid][
                ["z_m", "roll_deg", "pitch_deg"]
            ].to_numpy()

        pair_columns = {}
        ranges = {}
        for a in agents:
            for b in agents:
                if a == b:
                    continue
                block = range_df[
                    (range_df["meas_agent"] == a) & (range_df["targ_agent"] == b)
                ]
                cols = tuple(
                    (int(i), int(j))
                    for i, j in block[["ant_i", "ant_j"]].head(
                        len(block) // max(n_ticks, 1)
                    ).to_numpy()
                )
                pair_columns[(a, b)] = cols
                ranges[(a, b)] = block["range_m"].to_numpy().reshape(n_ticks, len(cols))

        messages = []
        for row in msg_df.itertuples(index=False):
            raw = row.encoded.encode("utf-8")
            msg = decode_message(struct.pack(">I", len(raw)) + raw)
            messages.append(Delivery(row.recipient, float(row.deliver_time_s), msg))

        return cls(
            agents=agents,
            arrays=arrays,
            envelopes=envelopes,
            times=times,
            range_rate_hz=float(manifest["range_rate_hz"]),
            poses=poses,
            envelope_meas=env_meas,
            pair_columns=pair_columns,
            ranges=ranges,
            messages=messages,
            events=events,
            dropped_messages=int(manifest.get("dropped_messages", 0)),
            seed=int(manifest.get("seed", 0)),
            scenario_doc=manifest.get("scenario"),
        )


def run(scenario: Scenario) -> SimulationLog:
    """Execute a scenario tick-by-tick; deterministic under its seeds.

    Each ordered agent pair owns an independent noise substream, so the
    two directions of a pair draw independently and reseeding the
    channel cannot shift the ranging streams. Protocol agents run with
    estimation off; their announce/violation/resume traffic passes
    through the channel and is logged per delivery.
    """
    ids = [spec.agent for spec in scenario.agents]
    specs = {spec.agent: spec for spec in scenario.agents}
    n_ticks = int(round(scenario.duration_s * scenario.range_rate_hz))
    times = np.arange(n_ticks) / scenario.range_rate_hz

    pairs = [(a, b) for a in ids for b in ids if b != a]
    root = np.random.SeedSequence(scenario.seed)
    pair_rngs = {
        pair: np.random.default_rng(child)
        for pair, child in zip(pairs, root.spawn(len(pairs)))
    }
    chan_rng = np.random.default_rng(np.random.SeedSequence(scenario.channel.seed))

    states = {}
    for aid in ids:
        peers = {
            other: AgentInfo(other, specs[other].envelope, specs[other].array)
            for other in ids
            if other != aid
        }
        states[aid] = AgentState(
            AgentInfo(aid, specs[aid].envelope, specs[aid].array),
            peers=peers,
            range_rate_hz=scenario.range_rate_hz,
        )

    events_by_tick: dict[int, list[SimEvent]] = {}
    for ev in scenario.events:
        tick = int(np.searchsorted(times, ev.time_s - 1e-12, side="left"))
        if tick < n_ticks:
            events_by_tick.setdefault(tick, []).append(ev)

    poses = {aid: np.empty((n_ticks, 6)) for aid in ids}
    env_meas = {aid: np.empty((n_ticks, 3)) for aid in ids}
    pair_columns = {
        (a, b): tuple(
            (i, j)
            for i in range(specs[a].array.count)
            for j in range(specs[b].array.count)
        )
        for a, b in pairs
    }
    ranges = {pair: np.empty((n_ticks, len(cols))) for pair, cols in pair_columns.items()}

    altitude_shift = {aid: 0.0 for aid in ids}
    pending: list[tuple[int, Delivery]] = []
    deliveries: list[Delivery] = []
    dropped = 0
    bias = scenario.bias_truth

    for k in range(n_ticks):
        t = float(times[k])
        for ev in events_by_tick.get(k, ()):
            if ev.kind == "altitude_shift":
                altitude_shift[ev.agent] += ev.dz
            else:
                states[ev.agent].set_envelope(ev.envelope)

        tick_poses: dict[str, Pose3] = {}
        for aid in ids:
            base = pose_at(specs[aid].trajectory, t)
            shift = altitude_shift[aid]
            pose = (
                base
                if shift == 0.0
                else Pose3(base.rotation, base.translation + np.array([0.0, 0.0, shift]))
            )
            tick_poses[aid] = pose
            poses[aid][k] = pose.to_tuple()
            env_meas[aid][k] = poses[aid][k][[2, 3, 4]]

        for pair in pairs:
            a, b = pair
            rel = tick_poses[a].inverse() @ tick_poses[b]
            dist, elev = pair_geometry(rel, specs[a].array, specs[b].array)
            occluded = occlusion_mask(
                rel, specs[a].array, specs[b].array,
                specs[a].body_radius(), specs[b].body_radius(),
            )
            errors = sample_range_errors(scenario.noise, elev, occluded, pair_rngs[pair])
            measured = dist + errors
            if bias is not None:
                measured = measured + bias.evaluate(elev)
            ranges[pair][k] = np.maximum(measured, 0.0).ravel()

        inboxes = {aid: [] for aid in ids}
        still_pending = []
        for deliver_tick, delivery in pending:
            if deliver_tick == k:
                inboxes[delivery.recipient].append(delivery.message)
                deliveries.append(delivery)
            else:
                still_pending.append((deliver_tick, delivery))
        pending = still_pending

        for aid in ids:
            z, roll, pitch = env_meas[aid][k]
            meas = EnvelopeMeasurement(t, z, roll, pitch)
            _, outbox = step_agent(states[aid], meas, inboxes[aid], [], estimate=False)
            for msg in outbox:
                for recipient in ids:
                    if recipient == aid:
                        continue
                    if chan_rng.uniform() < scenario.channel.drop_prob:
                        dropped += 1
                        continue
                    target_t = t + scenario.channel.delay_s
                    tick_idx = int(np.searchsorted(times, target_t - 1e-12, side="left"))
                    tick_idx = max(tick_idx, k + 1)
                    if tick_idx >= n_ticks:
                        dropped += 1
                        continue
                    pending.append(
                        (tick_idx, Delivery(recipient, float(times[tick_idx]), msg))
                    )

    return SimulationLog(
        agents=tuple(ids),
        arrays={aid: specs[aid].array for aid in ids},
        envelopes={aid: specs[aid].envelope for aid in ids},
        times=times,
        range_rate_hz=scenario.range_rate_hz,
        poses=poses,
        envelope_meas=env_meas,
        pair_columns=pair_columns,
        ranges=ranges,
        messages=deliveries,
        events=scenario.events,
        dropped_messages=dropped,
        seed=scenario.seed,
        scenario_doc=_scenario_to_doc(scenario),
    )


DEFAULT_BIAS_TRUTH = BiasModel(coefficients=(0.15, 1e-3, 8e-5))


def ugv_three_agent(duration_s: float = 60.0, seed: int = 1, **overrides) -> Scenario:
    """Three ground agents with 6-antenna rings at 0.32 m radius.

    One tall unit (antennas at 1.75 m) spins slowly in place while two
    low units (0.5 m) orbit nearby; relative motion stays slow enough
    for trailing-window smoothing to track.
    """
    ring = AntennaArray.ring(6, 0.32, 0.0)
    agents = (
        AgentSpec(
            "ugv1",
            ring,
            ConstraintEnvelope(z_cmd=1.75, z_tol=0.15),
            TrajectorySpec(kind="static", position=(0.0, 0.0, 1.76),
                           yaw0_deg=10.0, yaw_rate_dps=0.9),
            body_radius_m=0.12,
        ),
        AgentSpec(
            "ugv2",
            ring,
            ConstraintEnvelope(z_cmd=0.5, z_tol=0.15),
            TrajectorySpec(kind="circle", center=(2.2, -0.4, 0.51), radius_m=0.4,
                           speed_mps=0.04, phase0_deg=0.0, yaw0_deg=-40.0,
                           yaw_rate_dps=-1.1),
            body_radius_m=0.12,
        ),
        AgentSpec(
            "ugv3",
            ring,
            ConstraintEnvelope(z_cmd=0.5, z_tol=0.15),
            TrajectorySpec(kind="circle", center=(-0.9, 1.9, 0.49), radius_m=0.45,
                           speed_mps=0.045, phase0_deg=90.0, yaw0_deg=120.0,
                           yaw_rate_dps=0.7),
            body_radius_m=0.12,
        ),
    )
    params = dict(
        agents=agents,
        duration_s=duration_s,
        noise=NoiseProfile(),
        bias_truth=DEFAULT_BIAS_TRUTH,
        seed=seed,
    )
    params.update(overrides)
    return Scenario(**params)


def uav_circle(duration_s: float = 40.0, dz: float = 1.0, seed: int = 2, **overrides) -> Scenario:
    """A 6-antenna aerial agent circling a static 4-antenna base.

    ``dz`` sets the flight height above the base antenna plane (0 for
    the level variant).
    """
    base_z = 1.0
    agents = (
        AgentSpec(
            "base",
            AntennaArray.ring(4, 0.37, 0.0),
            ConstraintEnvelope(z_cmd=base_z, z_tol=0.1),
            TrajectorySpec(kind="static", position=(0.0, 0.0, base_z)),
            body_radius_m=0.12,
        ),
        AgentSpec(
            "uav",
            AntennaArray.ring(6, 0.31, 0.0),
            ConstraintEnvelope(z_cmd=base_z + dz, z_tol=0.1),
            TrajectorySpec(kind="circle", center=(0.0, 0.0, base_z + dz + 0.02),
                           radius_m=2.0, speed_mps=0.12, yaw0_deg=0.0,
                           yaw_rate_dps=1.2),
            body_radius_m=0.12,
        ),
    )
    params = dict(
        agents=agents,
        duration_s=duration_s,
        noise=NoiseProfile(),
        bias_truth=DEFAULT_BIAS_TRUTH,
        seed=seed,
    )
    params.update(overrides)
    return Scenario(**params)


def uav_line(duration_s: float = 40.0, dz: float = 1.0, seed: int = 3, **overrides) -> Scenario:
    """A 6-antenna aerial agent sweeping line passes over a static base."""
    base_z = 1.0
    alt = base_z + dz
    agents = (
        AgentSpec(
            "base",
            AntennaArray.ring(4, 0.37, 0.0),
            ConstraintEnvelope(z_cmd=base_z, z_tol=0.1),
            TrajectorySpec(kind="static", position=(0.0, 0.0, base_z)),
            body_radius_m=0.12,
        ),
        AgentSpec(
            "uav",
            AntennaArray.ring(6, 0.31, 0.0),
            ConstraintEnvelope(z_cmd=alt, z_tol=0.1),
            TrajectorySpec(
                kind="waypoint",
                waypoints=((-2.0, 2.5, alt + 0.02), (2.0, 2.5, alt + 0.02),
                           (-2.0, 2.5, alt + 0.02)),
                speed_mps=0.1,
                yaw0_deg=-90.0,
                yaw_rate_dps=1.0,
            ),
            body_radius_m=0.12,
        ),
    )
    params = dict(
        agents=agents,
        duration_s=duration_s,
        noise=NoiseProfile(),
        bias_truth=DEFAULT_BIAS_TRUTH,
        seed=seed,
    )
    params.update(overrides)
    return Scenario(**params)


PRESETS = {
    "ugv_three_agent": ugv_three_agent,
    "uav_circle": uav_circle,
    "uav_line": uav_line,
}
