"""Evaluation and dataset I/O: APE/AHE metrics against interpolated
ground truth, full-pipeline replay of simulation logs, the 8-row flag
ablation table, and import of external range datasets into the
canonical bundle layout.

Replay mirrors the on-agent pipeline (trailing-window range smoothing,
staleness-gated problem assembly, warm-started solving, trailing pose
smoothing) while sourcing envelope validity and peer directories from
the logged message traffic.
"""

from __future__ import annotations

import concurrent.futures
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import DomainError, ObservabilityError, RangePoseError, SchemaError
from .estimator import (
    AblationFlags,
    EstimationProblem,
    PoseEstimate,
    SolverConfig,
    moving_average,
    moving_circular_mean,
    solve_with_config,
)
from .geometry import AntennaArray, Pose3, pose_from_tuple, wrap_deg
from .protocol import ConstraintEnvelope, EnvelopeMeasurement, check_envelope
from .sensing import BiasModel, RangeMeasurement
from .simulator import SimulationLog

TRUTH_TOLERANCE_S = 0.020
Z_SOURCES = ("commanded", "measured", "true")


def ape(estimate: Pose3, truth: Pose3) -> float:
    """Absolute position error: 3D Euclidean distance in meters."""
    return float(np.linalg.norm(estimate.translation - truth.translation))


def ahe(estimate: Pose3, truth: Pose3) -> float:
    """Absolute heading error: wrapped yaw difference in [0, 180] degrees."""
    yaw_est = estimate.to_tuple()[5]
    yaw_true = truth.to_tuple()[5]
    return abs(wrap_deg(yaw_est - yaw_true))


@dataclass(frozen=True)
class EvalRecord:
    """One timestamped estimate paired with interpolated ground truth."""

    time_s: float
    pair: tuple[str, str]
    estimate: PoseEstimate
    truth: Pose3

    def ape(self) -> float:
        return ape(self.estimate.pose, self.truth)

    def ahe(self) -> float:
        return ahe(self.estimate.pose, self.truth)


@dataclass(frozen=True)
class MetricSummary:
    """Population statistics over a record set (Mean/Max/Std columns)."""

    mean_ape: float
    max_ape: float
    std_ape: float
    mean_ahe: float
    max_ahe: float
    std_ahe: float
    count: int


def summarize(records) -> MetricSummary:
    records = list(records)
    if not records:
        raise DomainError("cannot summarize an empty record set")
    apes = np.array([r.ape() for r in records])
    ahes = np.array([r.ahe() for r in records])
    return MetricSummary(
        mean_ape=float(apes.mean()),
        max_ape=float(apes.max()),
        std_ape=float(apes.std()),
        mean_ahe=float(ahes.mean()),
        max_ahe=float(ahes.max()),
        std_ahe=float(ahes.std()),
        count=len(records),
    )


def _skew(vec: np.ndarray) -> np.ndarray:
    x, y, z = vec
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _rot_log(rot: np.ndarray) -> np.ndarray:
    cos_t = min(1.0, max(-1.0, (np.trace(rot) - 1.0) / 2.0))
    theta = math.acos(cos_t)
    if theta < 1e-12:
        return np.zeros(3)
    if theta < math.pi - 1e-6:
        vec = np.array(
            [rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]]
        )
        return vec * (theta / (2.0 * math.sin(theta)))
    # Near pi the skew part vanishes; recover the axis from R + I.
    mat = (rot + np.eye(3)) / 2.0
    k = int(np.argmax(np.diag(mat)))
    axis = mat[k] / math.sqrt(max(mat[k, k], 1e-18))
    axis = axis / np.linalg.norm(axis)
    return axis * theta


def _rot_exp(vec: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(vec))
    if theta < 1e-12:
        return np.eye(3) + _skew(vec)
    k = _skew(vec / theta)
    return np.eye(3) + math.sin(theta) * k + (1.0 - math.cos(theta)) * (k @ k)


def interpolate_pose(times: np.ndarray, tuples: np.ndarray, t: float) -> Pose3:
    """World pose at ``t``: linear in translation, geodesic in rotation.

    ``tuples`` rows are (x, y, z, roll, pitch, yaw). ``t`` must fall
    within 20 ms of a sample or between two samples.
    """
    times = np.asarray(times, dtype=float)
    if times.size == 0:
        raise DomainError("no truth samples to interpolate")
    right = int(np.searchsorted(times, t, side="left"))
    lo = max(right - 1, 0)
    hi = min(right, times.size - 1)
    if min(abs(t - times[lo]), abs(times[hi] - t)) > TRUTH_TOLERANCE_S + 1e-12:
        if not (times[lo] <= t <= times[hi]):
            raise DomainError(
                f"no ground truth within {TRUTH_TOLERANCE_S * 1e3:.0f} ms of t={t}"
            )
    p0 = pose_from_tuple(*tuples[lo])
    if lo == hi or times[hi] == times[lo]:
        return p0
    p1 = pose_from_tuple(*tuples[hi])
    alpha = (t - times[lo]) / (times[hi] - times[lo])
    trans = (1.0 - alpha) * p0.translation + alpha * p1.translation
    delta = p0.rotation.T @ p1.rotation
    rot = p0.rotation @ _rot_exp(alpha * _rot_log(delta))
    return Pose3(rot, trans)


def truth_relative_at(log: SimulationLog, measuring: str, target: str, t: float) -> Pose3:
    own = interpolate_pose(log.times, log.poses[measuring], t)
    other = interpolate_pose(log.times, log.poses[target], t)
    return own.inverse() @ other


def _window_mean_with_presence(times, values, window_s):
    """Trailing nan-aware mean plus presence and last-sample-time tracks.

    Matches :func:`moving_average` bitwise when every value is finite.
    """
    finite = np.isfinite(values)
    vals = np.where(finite, values, 0.0)
    start = np.searchsorted(times, times - window_s * (1.0 - 1e-9), side="right")
    idx = np.arange(times.size) + 1
    csum = np.concatenate([[0.0], np.cumsum(vals)])
    ccnt = np.concatenate([[0.0], np.cumsum(finite.astype(float))])
    count = ccnt[idx] - ccnt[start]
    with np.errstate(invalid="ignore"):
        mean = (csum[idx] - csum[start]) / count
    last_idx = np.maximum.accumulate(np.where(finite, np.arange(times.size), -1))
    last_time = np.where(last_idx >= 0, times[np.maximum(last_idx, 0)], -np.inf)
    return mean, count > 0, last_time


class _PeerView:
    """One agent's belief about a peer, fed by logged deliveries."""

    __slots__ = ("envelope", "valid")

    def __init__(self, envelope: ConstraintEnvelope):
        self.envelope = envelope
        self.valid = True

    def apply(self, message) -> None:
        if message.kind == "violation":
            self.valid = False
        else:
            self.envelope = message.payload.envelope
            self.valid = message.payload.valid


def _bias_from_log(log: SimulationLog) -> BiasModel | None:
    doc = (log.scenario_doc or {}).get("bias_truth")
    if doc is None:
        return None
    return BiasModel.from_json(json.dumps(doc))


def replay(
    log: SimulationLog,
    config: SolverConfig | None = None,
    *,
    z_source: str = "commanded",
    bias: BiasModel | None = None,
) -> list[EvalRecord]:
    """Run the estimation pipeline over a log and attach ground truth.

    ``z_source`` selects where the z constraint comes from: announced
    commands, the envelope measurement stream, or true poses. ``bias``
    defaults to the generating model recorded in the log's scenario,
    mirroring a calibrated system.
    """
    if z_source not in Z_SOURCES:
        raise DomainError(f"z_source must be one of {Z_SOURCES}, got {z_source!r}")
    if config is None:
        config = SolverConfig()
    if bias is None:
        bias = _bias_from_log(log)

    times = log.times
    n = log.tick_count
    stride = max(1, int(round(log.range_rate_hz / config.solve_rate_hz)))
    max_age = config.staleness_factor / log.range_rate_hz

    smoothed, present, last_time = {}, {}, {}
    for pair, arr in log.ranges.items():
        mean = np.empty_like(arr)
        here = np.empty(arr.shape, dtype=bool)
        last = np.empty_like(arr)
        for c in range(arr.shape[1]):
            mean[:, c], here[:, c], last[:, c] = _window_mean_with_presence(
                times, arr[:, c], config.range_window_s
            )
        smoothed[pair], present[pair], last_time[pair] = mean, here, last

    own_env = {aid: [(0, log.envelopes[aid])] for aid in log.agents}
    for ev in log.events:
        if ev.kind == "envelope_change":
            tick = int(np.searchsorted(times, ev.time_s - 1e-12, side="left"))
            own_env[ev.agent].append((tick, ev.envelope))

    def env_at(aid: str, tick: int) -> ConstraintEnvelope:
        env = own_env[aid][0][1]
        for start_tick, candidate in own_env[aid]:
            if start_tick <= tick:
                env = candidate
        return env

    peer_view = {
        (viewer, other): _PeerView(log.envelopes[other])
        for viewer in log.agents
        for other in log.agents
        if other != viewer
    }
    deliveries = sorted(
        log.messages, key=lambda d: (d.deliver_time_s, d.message.sender, d.message.seq)
    )
    delivered = 0

    ordered_pairs = list(log.pair_columns)
    warm: dict[tuple[str, str], tuple] = {}
    raw: dict[tuple[str, str], list] = {pair: [] for pair in ordered_pairs}

    for k in range(0, n, stride):
        t = float(times[k])
        while delivered < len(deliveries) and deliveries[delivered].deliver_time_s <= t:
            d = deliveries[delivered]
            key = (d.recipient, d.message.sender)
            if key in peer_view:
                peer_view[key].apply(d.message)
            delivered += 1

        for pair in ordered_pairs:
            a, b = pair
            own = env_at(a, k)
            z_own, roll_own, pitch_own = log.envelope_meas[a][k]
            if not check_envelope(own, EnvelopeMeasurement(t, z_own, roll_own, pitch_own)):
                continue
            view = peer_view[(a, b)]
            if not view.valid:
                continue

            mask = present[pair][k] & (t - last_time[pair][k] <= max_age + 1e-12)
            if mask.sum() < 3:
                continue
            measurements = tuple(
                RangeMeasurement(
                    time_s=t,
                    measuring_agent=a,
                    target_agent=b,
                    antenna_i=i,
                    antenna_j=j,
                    range_m=float(smoothed[pair][k, c]),
                )
                for c, (i, j) in enumerate(log.pair_columns[pair])
                if mask[c]
            )

            if z_source == "commanded":
                z_rel = view.envelope.z_cmd - own.z_cmd
            elif z_source == "measured":
                z_rel = log.envelope_meas[b][k, 0] - log.envelope_meas[a][k, 0]
            else:
                z_rel = log.poses[b][k, 2] - log.poses[a][k, 2]

            try:
                problem = EstimationProblem(
                    measurements=measurements,
                    array_a=log.arrays[a],
                    array_b=log.arrays[b],
                    z_rel=z_rel,
                    roll_rel=wrap_deg(view.envelope.roll_cmd - own.roll_cmd),
                    pitch_rel=view.envelope.pitch_cmd - own.pitch_cmd,
                    bias=bias,
                    loss=config.loss,
                    ablation=config.ablation,
                )
            except ObservabilityError:
                continue
            init = warm.get(pair)
            estimate = solve_with_config(
                problem, config, init=init, multistart=init is None
            )
            # A non-converged endpoint is a drift point in a flat valley;
            # seeding the next solve from it just repeats the crawl before
            # the multi-start fan runs anyway.  Only converged fixes warm.
            if not estimate.converged:
                warm.pop(pair, None)
            elif config.ablation.z_fixed:
                warm[pair] = (estimate.x, estimate.y, estimate.yaw)
            else:
                warm[pair] = (estimate.x, estimate.y, estimate.z, estimate.yaw)
            raw[pair].append((t, estimate))

    records: list[EvalRecord] = []
    for pair in ordered_pairs:
        if not raw[pair]:
            continue
        ts = np.array([t for t, _ in raw[pair]])
        xs = moving_average(ts, np.array([e.x for _, e in raw[pair]]), config.pose_window_s)
        ys = moving_average(ts, np.array([e.y for _, e in raw[pair]]), config.pose_window_s)
        zs = moving_average(ts, np.array([e.z for _, e in raw[pair]]), config.pose_window_s)
        yaws = moving_circular_mean(
            ts, np.array([e.yaw for _, e in raw[pair]]), config.pose_window_s
        )
        for idx, (t, est) in enumerate(raw[pair]):
            pose = pose_from_tuple(
                xs[idx], ys[idx], zs[idx], est.roll, est.pitch, yaws[idx]
            )
            smoothed_est = replace(
                est, x=float(xs[idx]), y=float(ys[idx]), z=float(zs[idx]),
                yaw=float(yaws[idx]), pose=pose,
            )
            records.append(
                EvalRecord(
                    time_s=t,
                    pair=pair,
                    estimate=smoothed_est,
                    truth=truth_relative_at(log, pair[0], pair[1], t),
                )
            )
    records.sort(key=lambda r: (r.time_s, r.pair))
    return records


ABLATION_ORDER = tuple(
    AblationFlags(el_bias=el, z_fixed=zf, huber=hb)
    for el in (False, True)
    for zf in (False, True)
    for hb in (False, True)
)


@dataclass(frozen=True)
class AblationRow:
    flags: AblationFlags
    summary: MetricSummary | None
    error: str | None = None


def _ablation_row(log, config, flags, z_source) -> AblationRow:
    try:
        records = replay(log, config.with_flags(flags), z_source=z_source)
        return AblationRow(flags=flags, summary=summarize(records))
    except RangePoseError as exc:
        return AblationRow(flags=flags, summary=None, error=str(exc))


def ablation_table(
    log: SimulationLog,
    config: SolverConfig | None = None,
    *,
    z_source: str = "commanded",
    jobs: int = 1,
    out_dir: str | Path | None = None,
) -> list[AblationRow]:
    """Run the full pipeline once per flag combination (full config last).

    A row that fails (e.g. unobservable under its flags) carries its
    error message without aborting the other rows. With ``out_dir`` the
    table is written as ``table.csv`` plus aligned ``table.txt``.
    """
    if config is None:
        config = SolverConfig()
    if jobs < 1:
        raise DomainError("jobs must be >= 1")
    if jobs == 1:
        rows = [_ablation_row(log, config, flags, z_source) for flags in ABLATION_ORDER]
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(
                pool.map(
                    _ablation_row,
                    [log] * len(ABLATION_ORDER),
                    [config] * len(ABLATION_ORDER),
                    ABLATION_ORDER,
                    [z_source] * len(ABLATION_ORDER),
                )
            )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "table.csv").write_text(ablation_csv(rows))
        (out / "table.txt").write_text(ablation_text(rows))
    return rows


_ABLATION_COLUMNS = (
    "el_bias", "z_fixed", "huber",
    "mean_ape_m", "max_ape_m", "std_ape_m",
    "mean_ahe_deg", "max_ahe_deg", "std_ahe_deg",
    "count", "error",
)


def _row_cells(row: AblationRow) -> list[str]:
    cells = [
        "on" if row.flags.el_bias else "off",
        "on" if row.flags.z_fixed else "off",
        "on" if row.flags.huber else "off",
    ]
    if row.summary is None:
        cells += [""] * 6 + ["0", row.error or ""]
    else:
        s = row.summary
        cells += [
            f"{s.mean_ape:.4f}", f"{s.max_ape:.4f}", f"{s.std_ape:.4f}",
            f"{s.mean_ahe:.3f}", f"{s.max_ahe:.3f}", f"{s.std_ahe:.3f}",
            str(s.count), "",
        ]
    return cells


def ablation_csv(rows: list[AblationRow]) -> str:
    lines = [",".join(_ABLATION_COLUMNS)]
    for row in rows:
        lines.append(",".join(_row_cells(row)))
    return "\n".join(lines) + "\n"


def ablation_text(rows: list[AblationRow]) -> str:
    table = [list(_ABLATION_COLUMNS)] + [_row_cells(row) for row in rows]
    widths = [max(len(line[c]) for line in table) for c in range(len(_ABLATION_COLUMNS))]
    lines = []
    for line in table:
        lines.append("  ".join(cell.rjust(w) for cell, w in zip(line, widths)))
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class ImportResult:
    """A normalized log plus the import report (units, counts, sidecars)."""

    log: SimulationLog
    report: dict


def import_dataset(path: str | Path, format: str) -> ImportResult:
    """Normalize an external dataset into the canonical bundle layout."""
    src = Path(path)
    if not src.exists():
        raise DomainError(f"dataset path {src} does not exist")
    if format == "simlog":
        log = SimulationLog.load(src)
        report = {
            "format": "simlog",
            "source": str(src),
            "ticks": log.tick_count,
            "measurements": log.measurement_count(),
            "unit_conversions": {},
            "sidecar_columns": [],
        }
        return ImportResult(log=log, report=report)
    if format == "murp":
        return _import_murp(src)
    raise DomainError(f"unknown dataset format {format!r}")


_MURP_RANGE_COLUMNS = ("time_s", "src_agent", "src_antenna", "dst_agent",
                       "dst_antenna", "range")
_MURP_TRUTH_COLUMNS = ("time_s", "agent", "x_m", "y_m", "z_m", "roll_deg",
                       "pitch_deg", "yaw_deg")
_RANGE_UNIT_SCALE = {"m": 1.0, "mm": 1e-3, "cm": 1e-2}


def _murp_require(frame: pd.DataFrame, needed, name: str) -> None:
    missing = [c for c in needed if c not in frame.columns]
    if missing:
        raise SchemaError(f"{name} is missing mandatory columns {missing}")


def _import_murp(src: Path) -> ImportResult:
    """Importer for the published range dataset, written against a
    fixture snapshot of its layout; any schema drift fails loudly."""
    meta_path = src / "metadata.json"
    if not meta_path.exists():
        raise SchemaError(f"{src} has no metadata.json")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"metadata.json is invalid JSON: {exc}") from exc
    for key in ("dataset", "units", "agents"):
        if key not in meta:
            raise SchemaError(f"metadata.json is missing mandatory key {key!r}")
    range_unit = meta["units"].get("range")
    if range_unit not in _RANGE_UNIT_SCALE:
        raise SchemaError(f"unsupported range unit {range_unit!r}")
    scale = _RANGE_UNIT_SCALE[range_unit]

    ranges_df = pd.read_csv(src / "uwb_ranges.csv", float_precision="round_trip")
    truth_df = pd.read_csv(src / "ground_truth.csv", float_precision="round_trip")
    _murp_require(ranges_df, _MURP_RANGE_COLUMNS, "uwb_ranges.csv")
    _murp_require(truth_df, _MURP_TRUTH_COLUMNS, "ground_truth.csv")
    extra_cols = [c for c in ranges_df.columns if c not in _MURP_RANGE_COLUMNS]

    arrays = {}
    envelopes = {}
    for spec in meta["agents"]:
        for key in ("id", "antennas"):
            if key not in spec:
                raise SchemaError(f"agent entry is missing mandatory key {key!r}")
        aid = spec["id"]
        arrays[aid] = AntennaArray.from_json(json.dumps({"mounts": spec["antennas"]}))
        block = truth_df[truth_df["agent"] == aid]
        if block.empty:
            raise SchemaError(f"ground_truth.csv has no rows for agent {aid!r}")
        z_cmd = float(spec.get("z_cmd_m", block["z_m"].mean()))
        envelopes[aid] = ConstraintEnvelope(
            z_cmd=z_cmd,
            z_tol=float(spec.get("z_tol_m", 1.0)),
            roll_tol=float(spec.get("roll_tol_deg", 30.0)),
            pitch_tol=float(spec.get("pitch_tol_deg", 30.0)),
        )
    agents = tuple(arrays)

    times = np.unique(truth_df["time_s"].to_numpy())
    if times.size == 0:
        raise SchemaError("ground_truth.csv is empty")
    tick_of = {t: k for k, t in enumerate(times)}

    poses = {}
    env_meas = {}
    for aid in agents:
        block = truth_df[truth_df["agent"] == aid].sort_values("time_s")
        if len(block) != times.size:
            raise SchemaError(
                f"ground_truth.csv rows for {aid!r} do not cover every timestamp"
            )
        poses[aid] = block[
            ["x_m", "y_m", "z_m", "roll_deg", "pitch_deg", "yaw_deg"]
        ].to_numpy()
        env_meas[aid] = poses[aid][:, [2, 3, 4]]

    pair_columns = {}
    ranges = {}
    for a in agents:
        for b in agents:
            if a == b:
                continue
            cols = tuple(
                (i, j) for i in range(arrays[a].count) for j in range(arrays[b].count)
            )
            pair_columns[(a, b)] = cols
            ranges[(a, b)] = np.full((times.size, len(cols)), np.nan)

    dropped_rows = 0
    for row in ranges_df.itertuples(index=False):
        pair = (row.src_agent, row.dst_agent)
        if pair not in ranges or row.time_s not in tick_of:
            dropped_rows += 1
            continue
        cols = pair_columns[pair]
        key = (int(row.src_antenna), int(row.dst_antenna))
        if key not in cols:
            dropped_rows += 1
            continue
        ranges[pair][tick_of[row.time_s], cols.index(key)] = row.range * scale

    if times.size > 1:
        dt = np.diff(times)
        rate = 1.0 / float(np.median(dt))
    else:
        rate = float(meta.get("range_rate_hz", 1.0))

    log = SimulationLog(
        agents=agents,
        arrays=arrays,
        envelopes=envelopes,
        times=times,
        range_rate_hz=float(meta.get("range_rate_hz", rate)),
        poses=poses,
        envelope_meas=env_meas,
        pair_columns=pair_columns,
        ranges=ranges,
        messages=[],
        events=(),
        seed=0,
        scenario_doc=None,
    )
    report = {
        "format": "murp",
        "source": str(src),
        "dataset": meta["dataset"],
        "ticks": int(times.size),
        "measurements": int(sum(np.isfinite(arr).sum() for arr in ranges.values())),
        "dropped_rows": dropped_rows,
        "unit_conversions": {"range": f"{range_unit} -> m (x{scale})"},
        "sidecar_columns": extra_cols,
        "derived_envelopes": {
            aid: env.z_cmd for aid, env in envelopes.items()
        },
    }
    return ImportResult(log=log, report=report)


def export_import(result: ImportResult, out_dir: str | Path) -> None:
    """Write the normalized bundle plus report and any sidecar columns."""
    out = Path(out_dir)
    result.log.save(out)
    (out / "import_report.json").write_text(
        json.dumps(result.report, indent=2, sort_keys=True)
    )
    if result.report.get("sidecar_columns"):
        src = Path(result.report["source"])
        frame = pd.read_csv(src / "uwb_ranges.csv", float_precision="round_trip")
        keep = ["time_s", "src_agent", "dst_agent"] + list(
            result.report["sidecar_columns"]
        )
        frame[keep].to_csv(out / "sidecar.csv", index=False)
