"""Command-line front end for the estimation pipeline.

Subcommands cover the full chain: ``simulate`` (scenario to measurement
bundle), ``fit-bias`` (calibration samples to bias polynomial),
``estimate`` (bundle replay to pose estimates), ``evaluate`` (estimates
or flag ablation against ground truth), and ``dop`` (array geometry
analysis). Data goes to files or standard output; diagnostics go to
standard error. Exit codes: 0 success, 1 validation error, 2 runtime
error.

Every subcommand that writes artifacts also records a ``run_meta.json``
(configuration hash, seed, library versions). The meta deliberately
excludes paths and timestamps so reruns of the same configuration
produce byte-identical output trees.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import platform
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .errors import DomainError, RangePoseError, SchemaError
from .estimator import PoseEstimate, SolverConfig
from .evalio import (
    EvalRecord,
    Z_SOURCES,
    ablation_csv,
    ablation_table,
    ablation_text,
    interpolate_pose,
    replay,
    summarize,
)
from .geometry import AntennaArray, pose_from_tuple, position_dop
from .sensing import fit_bias_polynomial
from .simulator import PRESETS, Scenario, SimulationLog, run

_ESTIMATE_COLUMNS = (
    "time_s", "meas_agent", "targ_agent",
    "x_m", "y_m", "z_m", "roll_deg", "pitch_deg", "yaw_deg",
    "converged", "objective", "iterations",
)

_SUMMARY_COLUMNS = (
    "mean_ape_m", "max_ape_m", "std_ape_m",
    "mean_ahe_deg", "max_ahe_deg", "std_ahe_deg", "count",
)


class _UsageError(Exception):
    """Raised in place of argparse's sys.exit so main controls the code."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _build_parser() -> _Parser:
    parser = _Parser(
        prog="rangepose",
        description="Range-only relative pose estimation pipeline.",
    )
    parser.add_argument("--version", action="version", version=f"rangepose {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True, metavar="SUBCOMMAND")

    sim = sub.add_parser(
        "simulate", help="run a scenario and write the measurement bundle"
    )
    sim.add_argument(
        "scenario",
        help="scenario JSON path, or one of the presets: " + ", ".join(sorted(PRESETS)),
    )
    sim.add_argument("-o", "--output", required=True, help="output bundle directory")
    sim.add_argument("--seed", type=int, default=None,
                     help="override the scenario seed")
    sim.add_argument("--duration", type=float, default=None,
                     help="override the scenario duration in seconds")
    sim.add_argument("-v", "--verbose", action="count", default=0)

    fit = sub.add_parser(
        "fit-bias", help="fit the elevation bias polynomial from calibration samples"
    )
    fit.add_argument(
        "ranges",
        help="CSV with columns elevation_deg, error_m (observed range minus truth)",
    )
    fit.add_argument("--degree", type=int, default=6,
                     help="polynomial degree (default 6)")
    fit.add_argument("-o", "--output", required=True, help="output bias model JSON path")
    fit.add_argument("-v", "--verbose", action="count", default=0)

    est = sub.add_parser(
        "estimate", help="replay the estimation pipeline over a measurement bundle"
    )
    est.add_argument("bundle", help="simulation bundle directory")
    est.add_argument("--config", default=None, help="solver configuration JSON path")
    est.add_argument("-o", "--output", required=True, help="output estimates directory")
    est.add_argument("--z-source", choices=Z_SOURCES, default="commanded",
                     help="where the relative-z constraint comes from")
    est.add_argument("--el-bias", action=argparse.BooleanOptionalAction, default=None,
                     help="toggle the elevation bias correction")
    est.add_argument("--z-fixed", action=argparse.BooleanOptionalAction, default=None,
                     help="toggle the fixed-z constraint")
    est.add_argument("--huber", action=argparse.BooleanOptionalAction, default=None,
                     help="toggle the robust loss")
    est.add_argument("-v", "--verbose", action="count", default=0)

    ev = sub.add_parser(
        "evaluate", help="score estimates against ground truth, or run the ablation"
    )
    ev.add_argument("estimates", help="estimates directory produced by `estimate`")
    ev.add_argument("--truth", required=True, help="simulation bundle with ground truth")
    ev.add_argument("--ablation", action="store_true",
                    help="replay all 8 flag rows instead of scoring the estimates")
    ev.add_argument("--config", default=None, help="solver configuration JSON path")
    ev.add_argument("--z-source", choices=Z_SOURCES, default="commanded")
    ev.add_argument("--jobs", type=int, default=1,
                    help="parallel processes for ablation rows")
    ev.add_argument("-o", "--output", default=None,
                    help="output CSV path or directory (default: standard output)")
    ev.add_argument("-v", "--verbose", action="count", default=0)

    dop = sub.add_parser("dop", help="dilution of precision for an antenna array")
    dop.add_argument("array", help="antenna array JSON path")
    dop.add_argument("--target", required=True,
                     help="target point as x,y,z in meters")
    dop.add_argument("-v", "--verbose", action="count", default=0)

    return parser


def _note(args, message: str) -> None:
    if args.verbose:
        print(message, file=sys.stderr)


def _sha256(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def _run_meta(subcommand: str, config_text: str, seed: int | None) -> dict:
    return {
        "subcommand": subcommand,
        "config_hash": _sha256(config_text),
        "seed": seed,
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "pandas": pd.__version__,
            "rangepose": __version__,
        },
    }


def _write_meta(directory: Path, meta: dict) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "run_meta.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n"
    )


def _require_file(path: Path, what: str) -> Path:
    if not path.is_file():
        raise DomainError(f"{what} {path} is not a file")
    return path


def _require_dir(path: Path, what: str) -> Path:
    if not path.is_dir():
        raise DomainError(f"{what} {path} is not a directory")
    return path


def _load_scenario(token: str, seed: int | None, duration: float | None) -> Scenario:
    if token in PRESETS:
        kwargs = {}
        if duration is not None:
            kwargs["duration_s"] = duration
        if seed is not None:
            kwargs["seed"] = seed
        return PRESETS[token](**kwargs)
    scenario = Scenario.from_json(_require_file(Path(token), "scenario").read_text())
    if duration is not None:
        scenario = dataclasses.replace(scenario, duration_s=duration)
    if seed is not None:
        scenario = dataclasses.replace(scenario, seed=seed)
    return scenario


def _load_config(path: str | None) -> SolverConfig:
    if path is None:
        return SolverConfig()
    return SolverConfig.from_json(_require_file(Path(path), "config").read_text())


def _cmd_simulate(args) -> int:
    scenario = _load_scenario(args.scenario, args.seed, args.duration)
    out = Path(args.output)
    log = run(scenario)
    _note(args, f"simulated {log.tick_count} ticks, "
                f"{log.measurement_count()} range measurements")
    log.save(out)
    _write_meta(out, _run_meta("simulate", scenario.to_json(), scenario.seed))
    return 0


def _cmd_fit_bias(args) -> int:
    frame = pd.read_csv(
        _require_file(Path(args.ranges), "calibration CSV"),
        float_precision="round_trip",
    )
    missing = [c for c in ("elevation_deg", "error_m") if c not in frame.columns]
    if missing:
        raise SchemaError(f"calibration CSV is missing mandatory columns {missing}")
    samples = list(zip(frame["elevation_deg"], frame["error_m"]))
    fit = fit_bias_polynomial(samples, args.degree)
    _note(args, f"fit degree {args.degree} over {fit.sample_count} samples, "
                f"rms residual {fit.rms_residual_m:.4f} m")
    fit_config = json.dumps({"degree": args.degree}, sort_keys=True)
    doc = {
        "model": json.loads(fit.model.to_json()),
        "diagnostics": {
            "rms_residual_m": fit.rms_residual_m,
            "max_abs_residual_m": fit.max_abs_residual_m,
            "sample_count": fit.sample_count,
            "elevation_min_deg": fit.elevation_min_deg,
            "elevation_max_deg": fit.elevation_max_deg,
        },
        "run_meta": _run_meta("fit-bias", fit_config, None),
    }
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return 0


def _apply_flag_overrides(config: SolverConfig, args) -> SolverConfig:
    flags = config.ablation
    for name in ("el_bias", "z_fixed", "huber"):
        value = getattr(args, name)
        if value is not None:
            flags = dataclasses.replace(flags, **{name: value})
    return config.with_flags(flags)


def _cmd_estimate(args) -> int:
    log = SimulationLog.load(_require_dir(Path(args.bundle), "bundle"))
    config = _apply_flag_overrides(_load_config(args.config), args)
    records = replay(log, config, z_source=args.z_source)
    _note(args, f"replayed {len(records)} estimates over {log.tick_count} ticks")
    rows = [
        (
            r.time_s, r.pair[0], r.pair[1],
            r.estimate.x, r.estimate.y, r.estimate.z,
            r.estimate.roll, r.estimate.pitch, r.estimate.yaw,
            r.estimate.converged, r.estimate.objective, r.estimate.iterations,
        )
        for r in records
    ]
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(rows, columns=list(_ESTIMATE_COLUMNS))
    frame.to_csv(out / "estimates.csv", index=False)
    run_config = json.dumps(
        {"solver": json.loads(config.to_json()), "z_source": args.z_source},
        sort_keys=True,
    )
    _write_meta(out, _run_meta("estimate", run_config, log.seed))
    return 0


def _summary_csv(summary) -> str:
    cells = [
        f"{summary.mean_ape:.6f}", f"{summary.max_ape:.6f}", f"{summary.std_ape:.6f}",
        f"{summary.mean_ahe:.4f}", f"{summary.max_ahe:.4f}", f"{summary.std_ahe:.4f}",
        str(summary.count),
    ]
    return ",".join(_SUMMARY_COLUMNS) + "\n" + ",".join(cells) + "\n"


def _score_estimates(est_dir: Path, truth: SimulationLog):
    frame = pd.read_csv(
        _require_file(est_dir / "estimates.csv", "estimates CSV"),
        float_precision="round_trip",
    )
    missing = [c for c in _ESTIMATE_COLUMNS if c not in frame.columns]
    if missing:
        raise SchemaError(f"estimates.csv is missing mandatory columns {missing}")
    records = []
    for row in frame.itertuples(index=False):
        own = interpolate_pose(truth.times, truth.poses[row.meas_agent], row.time_s)
        other = interpolate_pose(truth.times, truth.poses[row.targ_agent], row.time_s)
        estimate = PoseEstimate(
            x=row.x_m, y=row.y_m, z=row.z_m,
            roll=row.roll_deg, pitch=row.pitch_deg, yaw=row.yaw_deg,
            objective=row.objective, iterations=int(row.iterations),
            converged=bool(row.converged), residuals=(), pairs=(),
            pose=pose_from_tuple(row.x_m, row.y_m, row.z_m,
                                 row.roll_deg, row.pitch_deg, row.yaw_deg),
        )
        records.append(
            EvalRecord(
                time_s=row.time_s,
                pair=(row.meas_agent, row.targ_agent),
                estimate=estimate,
                truth=own.inverse() @ other,
            )
        )
    return summarize(records)


def _cmd_evaluate(args) -> int:
    est_dir = _require_dir(Path(args.estimates), "estimates directory")
    truth = SimulationLog.load(_require_dir(Path(args.truth), "truth bundle"))

    if not args.ablation:
        text = _summary_csv(_score_estimates(est_dir, truth))
        if args.output is None:
            sys.stdout.write(text)
        else:
            out = Path(args.output)
            if out.suffix:
                out.parent.mkdir(parents=True, exist_ok=True)
                out.write_text(text)
            else:
                out.mkdir(parents=True, exist_ok=True)
                (out / "summary.csv").write_text(text)
        return 0

    config = _load_config(args.config)
    rows = ablation_table(truth, config, z_source=args.z_source, jobs=args.jobs)
    for row in rows:
        _note(args, f"{row.flags}: "
                    + (row.error or f"mean APE {row.summary.mean_ape:.4f} m"))
    csv_text = ablation_csv(rows)
    run_config = json.dumps(
        {"solver": json.loads(config.to_json()), "z_source": args.z_source},
        sort_keys=True,
    )
    meta = _run_meta("evaluate", run_config, truth.seed)
    if args.output is None:
        sys.stdout.write(csv_text)
        return 0
    out = Path(args.output)
    if out.suffix:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(csv_text)
        out.with_suffix(".txt").write_text(ablation_text(rows))
        _write_meta(out.parent, meta)
    else:
        out.mkdir(parents=True, exist_ok=True)
        (out / "table.csv").write_text(csv_text)
        (out / "table.txt").write_text(ablation_text(rows))
        _write_meta(out, meta)
    return 0


def _cmd_dop(args) -> int:
    array = AntennaArray.from_json(_require_file(Path(args.array), "array").read_text())
    parts = args.target.split(",")
    if len(parts) != 3:
        raise DomainError(f"target must be x,y,z; got {args.target!r}")
    try:
        target = np.array([float(p) for p in parts])
    except ValueError as exc:
        raise DomainError(f"target must be numeric x,y,z; got {args.target!r}") from exc
    report = position_dop(array.positions, target)
    doc = {
        "position_dop": report.position_dop,
        "horizontal_dop": report.horizontal_dop,
        "vertical_dop": report.vertical_dop,
        "geometry_matrix_condition": report.geometry_matrix_condition,
        "degenerate": report.degenerate,
    }
    sys.stdout.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return 0


_DISPATCH = {
    "simulate": _cmd_simulate,
    "fit-bias": _cmd_fit_bias,
    "estimate": _cmd_estimate,
    "evaluate": _cmd_evaluate,
    "dop": _cmd_dop,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    try:
        return _DISPATCH[args.subcommand](args)
    except (DomainError, SchemaError) as exc:
        print(f"rangepose {args.subcommand}: {exc}", file=sys.stderr)
        return 1
    except RangePoseError as exc:
        print(f"rangepose {args.subcommand}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"rangepose {args.subcommand}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
