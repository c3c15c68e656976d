"""End-to-end acceptance suite.

One test per shipping criterion, each printing a single summary line
with the measured margins. Criteria with runtime budgets assert wall
time inside the test. The final dataset-replay check is a stretch item:
it runs only when RANGEPOSE_MURP_DATASET points at a downloaded copy of
the published dataset and is skipped (not failed) otherwise.
"""

import math
import os
import time

import numpy as np
import pytest

from rangepose.estimator import (
    AblationFlags,
    EstimationProblem,
    LossConfig,
    SolverConfig,
    grid_oracle,
    loss,
    objective_and_gradient,
    objective_at,
    solve,
)
from rangepose.evalio import ABLATION_ORDER, ablation_table, ahe, ape, replay, summarize
from rangepose.geometry import (
    AntennaArray,
    horn_align,
    pose_from_tuple,
    position_dop,
    wrap_deg,
)
from rangepose.sensing import NoiseProfile, RangeMeasurement, pair_geometry, sample_range_errors
from rangepose.simulator import SimEvent, run, ugv_three_agent

RING_A = AntennaArray.ring(6, 0.32, 0.0)
RING_B = AntennaArray.ring(6, 0.32, 0.0)


def _measurements(pose_ab, noise_sigma=0.0, rng=None):
    dist, _ = pair_geometry(pose_ab, RING_A, RING_B)
    if noise_sigma > 0.0:
        dist = dist + rng.normal(0.0, noise_sigma, size=dist.shape)
    return tuple(
        RangeMeasurement(0.0, "a", "b", i, j, float(dist[i, j]))
        for i in range(RING_A.count)
        for j in range(RING_B.count)
    )


def _problem(truth, noise_sigma=0.0, rng=None, flags=AblationFlags(),
             loss_cfg=LossConfig()):
    pose_ab = pose_from_tuple(*truth)
    return EstimationProblem(
        measurements=_measurements(pose_ab, noise_sigma, rng),
        array_a=RING_A,
        array_b=RING_B,
        z_rel=truth[2],
        roll_rel=truth[3],
        pitch_rel=truth[4],
        bias=None,
        loss=loss_cfg,
        ablation=flags,
    )


def _random_truth(rng):
    span = rng.uniform(1.0, 8.0)
    heading = rng.uniform(-math.pi, math.pi)
    z = rng.uniform(-0.4, 0.4)
    horizontal = math.sqrt(span**2 - z**2)
    return (
        horizontal * math.cos(heading),
        horizontal * math.sin(heading),
        z,
        rng.uniform(-10.0, 10.0),
        rng.uniform(-10.0, 10.0),
        rng.uniform(-180.0, 180.0),
    )


@pytest.fixture(scope="module")
def preset_sweep():
    """Fifty seeded preset runs through all eight flag rows, pooled."""
    config = SolverConfig(solve_rate_hz=1.0)
    totals = {flags: [0.0, 0.0, 0] for flags in ABLATION_ORDER}
    start = time.perf_counter()
    for seed in range(1, 51):
        log = run(ugv_three_agent(duration_s=6.0, seed=seed))
        for row in ablation_table(log, config):
            assert row.error is None, f"seed {seed} {row.flags}: {row.error}"
            acc = totals[row.flags]
            acc[0] += row.summary.mean_ape * row.summary.count
            acc[1] += row.summary.mean_ahe * row.summary.count
            acc[2] += row.summary.count
    elapsed = time.perf_counter() - start
    means = {
        flags: (ape_sum / n, ahe_sum / n)
        for flags, (ape_sum, ahe_sum, n) in totals.items()
    }
    return means, elapsed


def test_c01_exact_recovery_noiseless():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst_ape = 0.0
    worst_ahe = 0.0
    for _ in range(100):
        truth = _random_truth(rng)
        estimate = solve(_problem(truth))
        assert estimate.converged
        truth_pose = pose_from_tuple(*truth)
        worst_ape = max(worst_ape, ape(estimate.pose, truth_pose))
        worst_ahe = max(worst_ahe, ahe(estimate.pose, truth_pose))
    elapsed = time.perf_counter() - start
    assert worst_ape < 1e-6
    assert worst_ahe < 1e-6
    assert elapsed < 5.0
    print(f"criterion 1 exact recovery: worst APE {worst_ape:.2e} m, "
          f"worst AHE {worst_ahe:.2e} deg, {elapsed:.2f} s")


def test_c02_solver_beats_grid_oracle():
    rng = np.random.default_rng(202)
    start = time.perf_counter()
    worst_gap = -math.inf
    for _ in range(20):
        truth = _random_truth(rng)
        problem = _problem(truth, noise_sigma=0.08, rng=rng)
        estimate = solve(problem)
        oracle = grid_oracle(
            problem,
            bounds=((truth[0] - 1.0, truth[0] + 1.0),
                    (truth[1] - 1.0, truth[1] + 1.0),
                    (-180.0, 180.0)),
            resolution=(64, 64, 72),
        )
        worst_gap = max(worst_gap, estimate.objective - oracle.objective)
        assert estimate.objective <= oracle.objective + 1e-3
    elapsed = time.perf_counter() - start
    assert elapsed < 120.0
    print(f"criterion 2 oracle equivalence: worst objective gap {worst_gap:.2e}, "
          f"{elapsed:.1f} s")


def test_c03_planar_ambiguity_mirror_pair():
    truth = (2.1, -0.7, 0.8, 0.0, 0.0, 25.0)
    free = _problem(truth, flags=AblationFlags(z_fixed=False))
    at_truth = objective_at(free, truth[0], truth[1], truth[5], z=truth[2])
    at_mirror = objective_at(free, truth[0], truth[1], truth[5], z=-truth[2])
    assert abs(at_mirror - at_truth) <= 1e-9

    fixed = _problem(truth)
    best = grid_oracle(
        fixed,
        bounds=((truth[0] - 1.0, truth[0] + 1.0),
                (truth[1] - 1.0, truth[1] + 1.0),
                (-180.0, 180.0)),
        resolution=(64, 64, 72),
    )
    # Localization to a few grid cells (pitch 0.032 m / 5.07 deg); the
    # strip floors below carry the uniqueness claim.
    assert abs(best.x - truth[0]) <= 0.10
    assert abs(best.y - truth[1]) <= 0.10
    assert abs(wrap_deg(best.yaw_deg - truth[5])) <= 10.0
    # Away from the truth cell the constrained objective stays strictly
    # above the minimum: no second basin survives fixing z.
    exclusion = 0.15
    strips = (
        ((truth[0] - 1.0, truth[0] - exclusion), (truth[1] - 1.0, truth[1] + 1.0),
         (-180.0, 180.0)),
        ((truth[0] + exclusion, truth[0] + 1.0), (truth[1] - 1.0, truth[1] + 1.0),
         (-180.0, 180.0)),
        ((truth[0] - exclusion, truth[0] + exclusion),
         (truth[1] - 1.0, truth[1] - exclusion), (-180.0, 180.0)),
        ((truth[0] - exclusion, truth[0] + exclusion),
         (truth[1] + exclusion, truth[1] + 1.0), (-180.0, 180.0)),
        ((truth[0] - 1.0, truth[0] + 1.0), (truth[1] - 1.0, truth[1] + 1.0),
         (truth[5] + 15.0, truth[5] + 345.0)),
    )
    floor = min(
        grid_oracle(fixed, bounds=strip, resolution=(32, 32, 72)).objective
        for strip in strips
    )
    assert floor > best.objective + 1e-4
    print(f"criterion 3 planar ambiguity: mirror gap {abs(at_mirror - at_truth):.1e}, "
          f"constrained off-truth floor {floor:.2e}")


def test_c04_ablation_directions(preset_sweep):
    means, elapsed = preset_sweep
    full = means[AblationFlags(el_bias=True, z_fixed=True, huber=True)]
    no_z = means[AblationFlags(el_bias=True, z_fixed=False, huber=True)]
    no_el = means[AblationFlags(el_bias=False, z_fixed=True, huber=True)]
    assert all(full[0] <= row_ape for row_ape, _ in means.values())
    assert no_z[0] >= 2.0 * full[0]
    assert no_el[0] >= 1.10 * full[0]
    assert elapsed < 600.0
    print(f"criterion 4 ablation directions: full {full[0]:.3f} m, "
          f"z free {no_z[0] / full[0]:.1f}x, bias off +{(no_el[0] / full[0] - 1) * 100:.0f}%, "
          f"{elapsed:.0f} s for 50 seeds")


def test_c05_magnitude_band(preset_sweep):
    means, _ = preset_sweep
    full_ape, full_ahe = means[AblationFlags(el_bias=True, z_fixed=True, huber=True)]
    assert 0.05 <= full_ape <= 0.50
    assert 2.0 <= full_ahe <= 20.0
    print(f"criterion 5 magnitude band: mean APE {full_ape:.3f} m, "
          f"mean AHE {full_ahe:.2f} deg")


def test_c06_protocol_quiescence_and_gating():
    start = time.perf_counter()
    scenario = ugv_three_agent(
        duration_s=120.0,
        seed=11,
        events=(
            SimEvent(time_s=50.04, agent="ugv2", kind="altitude_shift", dz=0.8),
            SimEvent(time_s=60.04, agent="ugv2", kind="altitude_shift", dz=-0.8),
        ),
    )
    log = run(scenario)

    unique = {}
    for delivery in log.messages:
        msg = delivery.message
        unique[(msg.sender, msg.seq)] = msg
    by_kind = {}
    for msg in unique.values():
        by_kind.setdefault(msg.kind, []).append(msg)
    announces = by_kind.get("announce_info", [])
    violations = sorted(by_kind.get("violation", []), key=lambda m: m.time_s)
    resumes = by_kind.get("resume", [])

    breach_tick_time = float(log.times[np.searchsorted(log.times, 50.04 - 1e-12)])
    assert len(announces) == 3
    assert len(resumes) == 1
    assert violations and violations[0].time_s == pytest.approx(breach_tick_time, abs=1e-9)
    assert all(m.sender == "ugv2" for m in violations)
    # Re-sent violations are 5 s keepalives confined to the invalid window.
    for earlier, later in zip(violations, violations[1:]):
        assert later.time_s - earlier.time_s == pytest.approx(5.0, abs=1e-9)
    assert all(50.04 <= m.time_s < 60.04 for m in violations)
    assert len(unique) == 4 + len(violations)
    assert resumes[0].time_s == pytest.approx(60.04, abs=1e-9)

    records = replay(log, SolverConfig(solve_rate_hz=1.0))
    touching = [r for r in records if "ugv2" in r.pair]
    gap = [r for r in touching if 50.04 < r.time_s < 60.5]
    assert gap == []
    times_touching = {r.time_s for r in touching}
    assert 50.0 in times_touching and 61.0 in times_touching
    elapsed = time.perf_counter() - start
    assert elapsed < 30.0
    print(f"criterion 6 protocol quiescence: {len(unique)} distinct messages "
          f"({len(violations)} violations), gate window clean, {elapsed:.1f} s")


def test_c07_sensor_error_statistics():
    profile = NoiseProfile()
    rng = np.random.default_rng(707)
    n = 100_000
    expected_mean = profile.tail_mixture_weight * profile.tail_scale_m
    for elevation in (-60.0, -30.0, 0.0, 30.0, 60.0):
        els = np.full(n, elevation)
        clear = sample_range_errors(profile, els, np.zeros(n, dtype=bool), rng)
        occluded = sample_range_errors(profile, els, np.ones(n, dtype=bool), rng)
        band = 3.0 * clear.std() / math.sqrt(n)
        assert abs(clear.mean() - expected_mean) <= band
        centered = clear - clear.mean()
        skew = (centered**3).mean() / (centered**2).mean() ** 1.5
        assert skew > 0.0
        assert occluded.mean() > clear.mean()
        assert occluded.var() > clear.var()
    print(f"criterion 7 sensor statistics: mean within {band:.2e} of "
          f"{expected_mean:.3f} m, positive skew, occlusion dominates")


def test_c08_dop_improves_with_baseline():
    target = np.array([1.0, 0.5, 1.2])
    wide = position_dop(AntennaArray.ring(4, 3.0, 0.0).positions, target)
    narrow = position_dop(AntennaArray.ring(4, 1.5, 0.0).positions, target)
    assert not wide.degenerate and not narrow.degenerate
    assert wide.horizontal_dop < narrow.horizontal_dop
    print(f"criterion 8 DOP monotonicity: 6 m baseline {wide.horizontal_dop:.3f} "
          f"< 3 m baseline {narrow.horizontal_dop:.3f}")


def test_c09_numerical_hygiene():
    rng = np.random.default_rng(909)
    step = 1e-6
    worst_rel = 0.0
    for trial in range(50):
        truth = _random_truth(rng)
        z_free = trial % 2 == 1
        flags = AblationFlags(z_fixed=not z_free, huber=False)
        problem = _problem(truth, noise_sigma=0.1, rng=rng, flags=flags,
                           loss_cfg=LossConfig(kind="squared"))
        point = [
            truth[0] + rng.uniform(-0.5, 0.5),
            truth[1] + rng.uniform(-0.5, 0.5),
            truth[5] + rng.uniform(-30.0, 30.0),
        ]
        z_val = truth[2] + rng.uniform(-0.3, 0.3) if z_free else None
        _, grad = objective_and_gradient(problem, *point, z=z_val)

        def at(x, y, yaw, z):
            return objective_at(problem, x, y, yaw, z=z)

        fd = [
            (at(point[0] + step, point[1], point[2], z_val)
             - at(point[0] - step, point[1], point[2], z_val)) / (2 * step),
            (at(point[0], point[1] + step, point[2], z_val)
             - at(point[0], point[1] - step, point[2], z_val)) / (2 * step),
        ]
        if z_free:
            fd.append(
                (at(point[0], point[1], point[2], z_val + step)
                 - at(point[0], point[1], point[2], z_val - step)) / (2 * step)
            )
        fd.append(
            (at(point[0], point[1], point[2] + step, z_val)
             - at(point[0], point[1], point[2] - step, z_val)) / (2 * step)
        )
        fd = np.array(fd)
        rel = np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-6)
        worst_rel = max(worst_rel, rel)
        assert rel <= 1e-5

    for _ in range(20):
        pose = pose_from_tuple(*_random_truth(rng))
        src = rng.uniform(-2.0, 2.0, size=(3, 3))
        while np.linalg.matrix_rank(src[1:] - src[0]) < 2:
            src = rng.uniform(-2.0, 2.0, size=(3, 3))
        recovered = horn_align(src, pose.apply(src))
        assert np.abs(recovered.translation - pose.translation).max() < 1e-9
        assert np.abs(recovered.rotation - pose.rotation).max() < 1e-9

    huber = LossConfig(kind="huber", delta_m=0.06)
    assert loss(huber, 0.03) == pytest.approx(0.00045, abs=1e-18)
    assert loss(huber, 0.12) == pytest.approx(0.0054, abs=1e-18)
    assert loss(huber, -0.12) == pytest.approx(0.0054, abs=1e-18)
    assert loss(huber, 0.06) == pytest.approx(0.06 * (0.06 - 0.03), abs=1e-18)
    assert loss(LossConfig(kind="squared"), 0.09) == pytest.approx(0.0081, abs=1e-18)
    print(f"criterion 9 numerical hygiene: worst gradient rel error {worst_rel:.1e}, "
          f"alignment exact, robust-loss branches exact")


def test_c10_dataset_replay_stretch():
    dataset = os.environ.get("RANGEPOSE_MURP_DATASET")
    if not dataset:
        pytest.skip(
            "stretch criterion: published dataset not downloaded; "
            "set RANGEPOSE_MURP_DATASET to its trial directory to run"
        )
    from rangepose.evalio import import_dataset

    # Schema drift inside import_dataset must surface loudly, so no
    # exception handling here.
    result = import_dataset(dataset, format="murp")
    records = replay(result.log, SolverConfig(solve_rate_hz=1.0), bias=None)
    summary = summarize(records)
    assert 0.22 * 0.7 <= summary.mean_ape <= 0.22 * 1.3
    assert 8.6 * 0.7 <= summary.mean_ahe <= 8.6 * 1.3
    print(f"criterion 10 dataset replay: mean APE {summary.mean_ape:.3f} m, "
          f"mean AHE {summary.mean_ahe:.2f} deg")
