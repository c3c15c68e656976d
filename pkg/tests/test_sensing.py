from __future__ import annotations

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from rangepose.errors import DegeneracyError, DomainError, SchemaError
from rangepose.geometry import AntennaArray, Pose3, pose_from_tuple, relative_antenna_pose
from rangepose.sensing import (
    BiasModel,
    NoiseProfile,
    RangeMeasurement,
    bias_correction,
    expected_range,
    fit_bias_polynomial,
    is_occluded,
    pair_elevation,
    pair_geometry,
    relative_elevation,
    sample_measurement,
    sample_range_errors,
)


def _single_antenna(x: float, y: float, z: float) -> AntennaArray:
    return AntennaArray((Pose3(np.eye(3), np.array([x, y, z])),))


NOISELESS = NoiseProfile(
    base_sigma_m=0.0,
    sigma_vs_elevation_m=(0.0,),
    tail_mixture_weight=0.0,
    tail_scale_m=0.0,
    nlos_bias_m=0.0,
    nlos_sigma_inflation=1.0,
)


class TestExpectedRange:
    def test_coincident_antennas(self):
        array = _single_antenna(0.0, 0.0, 0.0)
        assert expected_range(Pose3.identity(), array, array, 0, 0) == 0.0

    def test_ground_vehicle_heights_give_exact_325(self):
        # Sensors 1.75 m and 0.5 m above the ground, bodies 3 m apart:
        # sqrt(3^2 + 1.25^2) = 3.25 exactly.
        array_a = _single_antenna(0.32, 0.0, 1.75)
        array_b = _single_antenna(0.32, 0.0, 0.5)
        pose = pose_from_tuple(3.0, 0.0, 0.0, 0.0, 0.0, 0.0)
        assert_allclose(expected_range(pose, array_a, array_b, 0, 0), 3.25, atol=1e-12)

    def test_matches_relative_antenna_pose_norm(self):
        rng = np.random.default_rng(41)
        array_a = AntennaArray.ring(6, 0.32)
        array_b = AntennaArray.ring(4, 0.37)
        for _ in range(20):
            pose = pose_from_tuple(
                *rng.uniform(-4.0, 4.0, size=3),
                rng.uniform(-20, 20),
                rng.uniform(-20, 20),
                rng.uniform(-179, 179),
            )
            i = int(rng.integers(0, 6))
            j = int(rng.integers(0, 4))
            rel = relative_antenna_pose(pose, array_a.mounts[i], array_b.mounts[j])
            assert_allclose(
                expected_range(pose, array_a, array_b, i, j),
                np.linalg.norm(rel.translation),
                atol=1e-12,
            )

    def test_symmetric_under_inverse(self):
        rng = np.random.default_rng(43)
        array_a = AntennaArray.ring(6, 0.32)
        array_b = AntennaArray.ring(4, 0.37)
        for _ in range(20):
            pose = pose_from_tuple(
                *rng.uniform(-4.0, 4.0, size=3), 0.0, 0.0, rng.uniform(-179, 179)
            )
            i = int(rng.integers(0, 6))
            j = int(rng.integers(0, 4))
            forward = expected_range(pose, array_a, array_b, i, j)
            backward = expected_range(pose.inverse(), array_b, array_a, j, i)
            assert abs(forward - backward) < 1e-10

    def test_index_out_of_range(self):
        array = AntennaArray.ring(4, 0.3)
        with pytest.raises(DomainError):
            expected_range(Pose3.identity(), array, array, 0, 4)


class TestRelativeElevation:
    def test_frozen_values(self):
        assert relative_elevation(pose_from_tuple(1, 0, 0, 0, 0, 0)) == 0.0
        assert_allclose(relative_elevation(pose_from_tuple(0, 0, 5, 0, 0, 0)), 90.0, atol=1e-12)
        expected = math.degrees(math.asin(-1.25 / 3.25))
        assert_allclose(
            relative_elevation(pose_from_tuple(3.0, 0.0, -1.25, 0, 0, 0)), expected, atol=1e-12
        )

    def test_zero_translation_degenerate(self):
        with pytest.raises(DegeneracyError):
            relative_elevation(Pose3.identity())


class TestPairGeometry:
    def test_matches_scalar_routines(self):
        rng = np.random.default_rng(44)
        arr_a = AntennaArray.ring(5, 0.32, 0.1)
        arr_b = AntennaArray.ring(4, 0.25, -0.05)
        for _ in range(5):
            pose = pose_from_tuple(
                rng.uniform(1, 6), rng.uniform(-4, 4), rng.uniform(-1.5, 1.5),
                rng.uniform(-8, 8), rng.uniform(-8, 8), rng.uniform(-180, 180),
            )
            dist, elev = pair_geometry(pose, arr_a, arr_b)
            assert dist.shape == (5, 4) and elev.shape == (5, 4)
            for i in range(5):
                for j in range(4):
                    assert_allclose(dist[i, j], expected_range(pose, arr_a, arr_b, i, j),
                                    atol=1e-12)
                    assert_allclose(elev[i, j], pair_elevation(pose, arr_a, arr_b, i, j),
                                    atol=1e-10)


class TestBiasCorrection:
    def test_constant_model(self):
        array = AntennaArray.ring(6, 0.32)
        pose = pose_from_tuple(2.0, 1.0, -0.5, 0.0, 0.0, 30.0)
        model = BiasModel((0.1,))
        assert_allclose(bias_correction(model, pose, array, array, 0, 3), 0.1, atol=1e-15)

    def test_linear_model_at_zero_elevation(self):
        array = _single_antenna(0.0, 0.0, 0.0)
        model = BiasModel((0.0, 0.01))
        pose = pose_from_tuple(4.0, 0.0, 0.0, 0.0, 0.0, 0.0)
        assert bias_correction(model, pose, array, array, 0, 0) == 0.0

    def test_invariant_to_common_world_offset(self):
        rng = np.random.default_rng(47)
        array = AntennaArray.ring(6, 0.32)
        model = BiasModel((0.05, 1e-3, 2e-5))
        for _ in range(10):
            world_a = pose_from_tuple(*rng.uniform(-5, 5, size=3), 0.0, 0.0, rng.uniform(-90, 90))
            world_b = pose_from_tuple(*rng.uniform(-5, 5, size=3), 0.0, 0.0, rng.uniform(-90, 90))
            offset = rng.uniform(-10, 10, size=3)
            shifted_a = Pose3(world_a.rotation, world_a.translation + offset)
            shifted_b = Pose3(world_b.rotation, world_b.translation + offset)
            pose = world_a.inverse() @ world_b
            pose_shifted = shifted_a.inverse() @ shifted_b
            before = bias_correction(model, pose, array, array, 1, 4)
            after = bias_correction(model, pose_shifted, array, array, 1, 4)
            assert abs(before - after) < 1e-10


class TestFitBiasPolynomial:
    def test_recovers_cubic_exactly(self):
        coeffs = (0.12, 1.5e-3, -2.0e-5, 3.0e-7)
        elevations = np.linspace(-70.0, 70.0, 40)
        errors = BiasModel(coeffs).evaluate(elevations)
        fit = fit_bias_polynomial(np.column_stack([elevations, errors]), degree=3)
        assert_allclose(fit.model.coefficients, coeffs, atol=1e-9)
        assert fit.rms_residual_m < 1e-12

    def test_constant_signal_degree_six(self):
        elevations = np.linspace(-80.0, 80.0, 30)
        errors = np.full_like(elevations, 0.25)
        fit = fit_bias_polynomial(np.column_stack([elevations, errors]), degree=6)
        assert_allclose(fit.model.coefficients[0], 0.25, atol=1e-9)
        assert np.abs(fit.model.coefficients[1:]).max() < 1e-9

    def test_round_trip_through_bias_correction(self):
        truth = BiasModel((0.08, 2e-3, 5e-5, 0.0, -1e-9, 0.0, 2e-12))
        elevations = np.linspace(-60.0, 60.0, 200)
        samples = np.column_stack([elevations, truth.evaluate(elevations)])
        fit = fit_bias_polynomial(samples, degree=6)
        assert np.abs(fit.model.evaluate(elevations) - truth.evaluate(elevations)).max() < 1e-6

    def test_matches_normal_equations_oracle(self):
        rng = np.random.default_rng(53)
        elevations = rng.uniform(-75.0, 75.0, size=120)
        errors = 0.1 + 1e-3 * elevations + rng.normal(0.0, 0.02, size=120)
        fit = fit_bias_polynomial(np.column_stack([elevations, errors]), degree=6)
        rss_fit = np.sum((errors - fit.model.evaluate(elevations)) ** 2)
        # Normal equations on the scaled Vandermonde: an independent
        # least-squares route; the fitted RSS may not exceed it.
        design = np.vander(elevations / 90.0, 7, increasing=True)
        oracle = np.linalg.solve(design.T @ design, design.T @ errors)
        rss_oracle = np.sum((errors - design @ oracle) ** 2)
        assert rss_fit <= rss_oracle + 1e-9

    def test_input_validation(self):
        with pytest.raises(DomainError):
            fit_bias_polynomial([(0.0, 0.1), (1.0, 0.2)], degree=3)
        with pytest.raises(DegeneracyError):
            fit_bias_polynomial([(5.0, 0.1), (5.0, 0.2), (5.0, 0.3)], degree=1)


class TestOcclusion:
    def test_elevated_facing_antennas_clear(self):
        array = AntennaArray.ring(6, 0.31)
        pose = pose_from_tuple(5.0, 0.0, 1.0, 0.0, 0.0, 0.0)
        # Antenna 0 of A points +x (toward B); antenna 3 of B points -x
        # (toward A): the direct path never crosses a body.
        assert not is_occluded(pose, array, array, 0, 3, 0.15, 0.15)

    def test_far_side_antenna_blocked_by_target_body(self):
        array = AntennaArray.ring(6, 0.31)
        pose = pose_from_tuple(5.0, 0.0, 0.0, 0.0, 0.0, 0.0)
        # Antenna 0 of B faces away from A: the path runs through B.
        assert is_occluded(pose, array, array, 0, 0, 0.15, 0.15)

    def test_zero_radius_never_occludes(self):
        array = AntennaArray.ring(6, 0.31)
        pose = pose_from_tuple(5.0, 0.0, 0.0, 0.0, 0.0, 0.0)
        for j in range(6):
            assert not is_occluded(pose, array, array, 0, j, 0.0, 0.0)

    def test_negative_radius_rejected(self):
        array = AntennaArray.ring(6, 0.31)
        with pytest.raises(DomainError):
            is_occluded(Pose3.identity(), array, array, 0, 1, -0.1, 0.1)


class TestSampleMeasurement:
    def test_noiseless_profile_returns_exact_model(self):
        array_a = AntennaArray.ring(6, 0.32)
        array_b = AntennaArray.ring(6, 0.32)
        pose = pose_from_tuple(3.0, 1.0, -1.25, 0.0, 0.0, 40.0)
        bias = BiasModel((0.1, 0.0, 4e-5))
        rng = np.random.default_rng(0)
        meas = sample_measurement(NOISELESS, bias, pose, array_a, array_b, 2, 5, False, rng)
        d = expected_range(pose, array_a, array_b, 2, 5)
        el = pair_elevation(pose, array_a, array_b, 2, 5)
        assert meas.range_m == pytest.approx(d + float(bias.evaluate(el)), abs=1e-15)

    def test_bit_reproducible_with_fixed_seed(self):
        array = AntennaArray.ring(6, 0.32)
        pose = pose_from_tuple(3.0, 0.0, 0.0, 0.0, 0.0, 0.0)
        profile = NoiseProfile()
        draws = []
        for _ in range(2):
            rng = np.random.default_rng(1234)
            draws.append(
                [
                    sample_measurement(profile, None, pose, array, array, 0, 3, False, rng).range_m
                    for _ in range(50)
                ]
            )
        assert draws[0] == draws[1]

    def test_moment_and_skew_properties(self):
        profile = NoiseProfile(base_sigma_m=0.1, sigma_vs_elevation_m=(0.0,))
        rng = np.random.default_rng(99)
        n = 200_000
        errors = sample_range_errors(profile, np.zeros(n), np.zeros(n, dtype=bool), rng)
        w, scale, sigma = (
            profile.tail_mixture_weight,
            profile.tail_scale_m,
            profile.base_sigma_m,
        )
        mean_expected = w * scale
        var_expected = (1 - w) * sigma**2 + w * 2 * scale**2 - mean_expected**2
        assert abs(errors.mean() - mean_expected) < 3 * math.sqrt(var_expected / n)
        centered = errors - errors.mean()
        skew = np.mean(centered**3) / np.mean(centered**2) ** 1.5
        assert skew > 0

    def test_occlusion_raises_mean_and_variance(self):
        profile = NoiseProfile()
        rng = np.random.default_rng(7)
        n = 50_000
        clear = sample_range_errors(profile, np.zeros(n), np.zeros(n, dtype=bool), rng)
        blocked = sample_range_errors(profile, np.zeros(n), np.ones(n, dtype=bool), rng)
        assert blocked.mean() > clear.mean()
        assert blocked.var() > clear.var()

    def test_range_floor_at_zero(self):
        profile = NoiseProfile(base_sigma_m=50.0)
        array = AntennaArray.ring(6, 0.32)
        pose = pose_from_tuple(1.0, 0.0, 0.0, 0.0, 0.0, 0.0)
        rng = np.random.default_rng(5)
        for _ in range(200):
            meas = sample_measurement(profile, None, pose, array, array, 0, 3, False, rng)
            assert meas.range_m >= 0.0


class TestSerialization:
    def test_bias_model_round_trip(self):
        model = BiasModel((0.1, -2e-3, 4e-5, 0.0, 0.0, 0.0, 1e-12))
        again = BiasModel.from_json(model.to_json())
        assert again.coefficients == model.coefficients
        assert again.degree == 6

    def test_bias_model_schema_error(self):
        with pytest.raises(SchemaError):
            BiasModel.from_json('{"degree": 2, "c0_m": 0.1}')
        with pytest.raises(SchemaError):
            BiasModel.from_json("[]")

    def test_noise_profile_round_trip(self):
        profile = NoiseProfile(seed=42)
        again = NoiseProfile.from_json(profile.to_json())
        assert again == profile

    def test_noise_profile_schema_error(self):
        with pytest.raises(SchemaError):
            NoiseProfile.from_json('{"base_sigma_m": 0.1}')

    def test_measurement_validation(self):
        with pytest.raises(DomainError):
            RangeMeasurement(0.0, "A", "B", 0, 0, -1.0)
        with pytest.raises(DomainError):
            RangeMeasurement(math.nan, "A", "B", 0, 0, 1.0)
