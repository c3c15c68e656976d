"""UWB range observation model, elevation-dependent bias, and noise synthesis.

The measured range between antenna i on the measuring agent and antenna
j on the target decomposes as ``d + mean_bias(elevation) + noise`` with
``d`` the true antenna-to-antenna distance. The mean bias is a
polynomial over the relative elevation of the antenna pair; the noise
mixes a Gaussian core with a positive exponential tail and grows under
body occlusion.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import polynomial as npoly

from .errors import DegeneracyError, DomainError, SchemaError
from .geometry import AntennaArray, Pose3, relative_antenna_pose

_ELEVATION_SCALE_DEG = 90.0


@dataclass(frozen=True)
class RangeMeasurement:
    """One directed antenna-pair range sample."""

    time_s: float
    measuring_agent: str
    target_agent: str
    antenna_i: int
    antenna_j: int
    range_m: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.time_s):
            raise DomainError("measurement time must be finite")
        if not math.isfinite(self.range_m) or self.range_m < 0.0:
            raise DomainError(f"range must be finite and >= 0, got {self.range_m!r}")
        if self.antenna_i < 0 or self.antenna_j < 0:
            raise DomainError("antenna indices must be non-negative")


@dataclass(frozen=True)
class BiasModel:
    """Polynomial mean-bias model over relative elevation in degrees.

    ``coefficients`` are ascending powers: the bias at elevation ``e`` is
    ``sum_k coefficients[k] * e**k`` in meters. Models fit by
    :func:`fit_bias_polynomial` use signed elevation; the convention is
    recorded in ``metadata``.
    """

    coefficients: tuple[float, ...]
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        coeffs = tuple(float(c) for c in self.coefficients)
        if len(coeffs) == 0:
            raise DomainError("bias model needs at least one coefficient")
        if not all(math.isfinite(c) for c in coeffs):
            raise DomainError("bias coefficients must be finite")
        object.__setattr__(self, "coefficients", coeffs)

    @property
    def degree(self) -> int:
        return len(self.coefficients) - 1

    def evaluate(self, elevation_deg):
        """Evaluate the bias in meters at elevations in degrees."""
        return npoly.polyval(np.asarray(elevation_deg, dtype=float), self.coefficients)

    def derivative(self, elevation_deg):
        """Evaluate d(bias)/d(elevation) in meters per degree."""
        der = npoly.polyder(self.coefficients)
        return npoly.polyval(np.asarray(elevation_deg, dtype=float), der)

    def to_json(self) -> str:
        doc = {"degree": self.degree, "domain": "signed_elevation_deg"}
        for k, c in enumerate(self.coefficients):
            doc[f"c{k}_m"] = c
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "BiasModel":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"bias model JSON is invalid: {exc}") from exc
        if not isinstance(doc, dict) or "degree" not in doc:
            raise SchemaError("bias model JSON must be an object with a 'degree' field")
        degree = int(doc["degree"])
        coeffs = []
        for k in range(degree + 1):
            key = f"c{k}_m"
            if key not in doc:
                raise SchemaError(f"bias model JSON missing coefficient '{key}'")
            coeffs.append(float(doc[key]))
        meta = {"domain": doc.get("domain", "signed_elevation_deg")}
        return cls(tuple(coeffs), metadata=meta)


@dataclass(frozen=True)
class NoiseProfile:
    """Generative ranging-noise parameters for simulation.

    The error mixes a zero-mean Gaussian (std ``sigma(el)``) with
    probability ``1 - tail_mixture_weight`` and a positive exponential
    tail (scale ``tail_scale_m``) otherwise. Occluded pairs gain
    ``nlos_bias_m`` and have the Gaussian std inflated by
    ``nlos_sigma_inflation``. Defaults are synthetic calibration-free
    choices, not measured hardware values.
    """

    base_sigma_m: float = 0.10
    sigma_vs_elevation_m: tuple[float, ...] = (0.0, 0.0, 1.5e-5)
    tail_mixture_weight: float = 0.1
    tail_scale_m: float = 0.3
    nlos_bias_m: float = 0.5
    nlos_sigma_inflation: float = 3.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not (self.base_sigma_m >= 0.0 and math.isfinite(self.base_sigma_m)):
            raise DomainError("base_sigma_m must be >= 0 and finite")
        if not 0.0 <= self.tail_mixture_weight <= 1.0:
            raise DomainError("tail_mixture_weight must be in [0, 1]")
        if self.tail_scale_m < 0.0:
            raise DomainError("tail_scale_m must be >= 0")
        if self.nlos_bias_m < 0.0:
            raise DomainError("nlos_bias_m must be >= 0")
        if self.nlos_sigma_inflation < 1.0:
            raise DomainError("nlos_sigma_inflation must be >= 1")
        object.__setattr__(
            self, "sigma_vs_elevation_m", tuple(float(c) for c in self.sigma_vs_elevation_m)
        )

    def sigma_at(self, elevation_deg):
        """Gaussian std in meters at elevations in degrees (clipped at zero)."""
        extra = npoly.polyval(np.asarray(elevation_deg, dtype=float), self.sigma_vs_elevation_m)
        return np.maximum(self.base_sigma_m + extra, 0.0)

    @classmethod
    def noiseless(cls) -> "NoiseProfile":
        """Profile whose every error draw is exactly zero."""
        return cls(
            base_sigma_m=0.0,
            sigma_vs_elevation_m=(0.0,),
            tail_mixture_weight=0.0,
            tail_scale_m=0.0,
            nlos_bias_m=0.0,
        )

    def to_json(self) -> str:
        doc = {
            "base_sigma_m": self.base_sigma_m,
            "sigma_vs_elevation_m": list(self.sigma_vs_elevation_m),
            "tail_mixture_weight": self.tail_mixture_weight,
            "tail_scale_m": self.tail_scale_m,
            "nlos_bias_m": self.nlos_bias_m,
            "nlos_sigma_inflation": self.nlos_sigma_inflation,
            "seed": self.seed,
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NoiseProfile":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"noise profile JSON is invalid: {exc}") from exc
        required = {
            "base_sigma_m",
            "sigma_vs_elevation_m",
            "tail_mixture_weight",
            "tail_scale_m",
            "nlos_bias_m",
            "nlos_sigma_inflation",
            "seed",
        }
        missing = required - set(doc)
        if missing:
            raise SchemaError(f"noise profile JSON missing fields {sorted(missing)}")
        return cls(
            base_sigma_m=float(doc["base_sigma_m"]),
            sigma_vs_elevation_m=tuple(doc["sigma_vs_elevation_m"]),
            tail_mixture_weight=float(doc["tail_mixture_weight"]),
            tail_scale_m=float(doc["tail_scale_m"]),
            nlos_bias_m=float(doc["nlos_bias_m"]),
            nlos_sigma_inflation=float(doc["nlos_sigma_inflation"]),
            seed=int(doc["seed"]),
        )


def _check_indices(array_a: AntennaArray, array_b: AntennaArray, i: int, j: int) -> None:
    if not (0 <= i < array_a.count):
        raise DomainError(f"antenna_i={i} out of range for array with {array_a.count} mounts")
    if not (0 <= j < array_b.count):
        raise DomainError(f"antenna_j={j} out of range for array with {array_b.count} mounts")


def expected_range(
    pose_ab: Pose3, array_a: AntennaArray, array_b: AntennaArray, i: int, j: int
) -> float:
    """True antenna-to-antenna distance under relative pose ``pose_ab``."""
    _check_indices(array_a, array_b, i, j)
    q = pose_ab.apply(array_b.positions[j])
    return float(np.linalg.norm(q - array_a.positions[i]))


def relative_elevation(pose_aibj: Pose3) -> float:
    """Elevation angle in degrees of an antenna-pair relative pose.

    Defined as ``asin(t_z / |t|)`` on the pose translation, in [-90, 90].

    Raises
    ------
    DegeneracyError
        Translation shorter than 1e-9 m (direction undefined).
    """
    t = pose_aibj.translation
    norm = float(np.linalg.norm(t))
    if norm <= 1e-9:
        raise DegeneracyError("antenna separation below 1e-9 m; elevation undefined")
    ratio = min(1.0, max(-1.0, float(t[2]) / norm))
    return math.degrees(math.asin(ratio))


def pair_elevation(
    pose_ab: Pose3, array_a: AntennaArray, array_b: AntennaArray, i: int, j: int
) -> float:
    """Relative elevation of antenna pair (i, j) under body pose ``pose_ab``."""
    _check_indices(array_a, array_b, i, j)
    return relative_elevation(relative_antenna_pose(pose_ab, array_a.mounts[i], array_b.mounts[j]))


def pair_geometry(
    pose_ab: Pose3, array_a: AntennaArray, array_b: AntennaArray
) -> tuple[np.ndarray, np.ndarray]:
    """Distances and elevations for every antenna pair at once.

    Returns ``(dist, elevation_deg)`` as (Na, Nb) arrays matching
    :func:`expected_range` and :func:`pair_elevation` per entry.
    """
    target_pts = pose_ab.apply(array_b.positions)
    vec = target_pts[None, :, :] - array_a.positions[:, None, :]
    dist = np.linalg.norm(vec, axis=-1)
    axes = np.stack([m.rotation[:, 2] for m in array_a.mounts])
    rise = np.einsum("ak,abk->ab", axes, vec)
    ratio = np.clip(rise / np.maximum(dist, 1e-12), -1.0, 1.0)
    return dist, np.degrees(np.arcsin(ratio))


def bias_correction(
    model: BiasModel,
    pose_ab: Pose3,
    array_a: AntennaArray,
    array_b: AntennaArray,
    i: int,
    j: int,
) -> float:
    """Mean-bias estimate in meters for antenna pair (i, j) at ``pose_ab``."""
    return float(model.evaluate(pair_elevation(pose_ab, array_a, array_b, i, j)))


@dataclass(frozen=True)
class BiasFit:
    """A fitted bias model with its least-squares residual diagnostics."""

    model: BiasModel
    rms_residual_m: float
    max_abs_residual_m: float
    sample_count: int
    elevation_min_deg: float
    elevation_max_deg: float


def fit_bias_polynomial(samples, degree: int) -> BiasFit:
    """Least-squares polynomial bias fit over signed elevation.

    Parameters
    ----------
    samples : iterable of (elevation_deg, error_m)
        Observed range errors at known relative elevations.
    degree : int
        Polynomial degree (the operating choice in this stack is 6).

    Returns
    -------
    BiasFit
        Fitted model plus residual diagnostics.

    Notes
    -----
    The design matrix is built in the scaled variable ``el / 90`` to keep
    the high-degree Vandermonde well conditioned, then coefficients are
    rescaled exactly back to powers of elevation in degrees.
    """
    if degree < 0:
        raise DomainError("degree must be >= 0")
    data = np.asarray(list(samples), dtype=float)
    if data.ndim != 2 or data.shape[1] != 2:
        raise DomainError("samples must be (elevation_deg, error_m) pairs")
    if not np.all(np.isfinite(data)):
        raise DomainError("samples must be finite")
    if data.shape[0] < degree + 1:
        raise DomainError(f"need at least degree+1={degree + 1} samples, got {data.shape[0]}")
    elevations = data[:, 0]
    errors = data[:, 1]
    if np.ptp(elevations) <= 0.0 and degree >= 1:
        raise DegeneracyError("all sample elevations identical; polynomial underdetermined")

    scaled = elevations / _ELEVATION_SCALE_DEG
    design = np.vander(scaled, degree + 1, increasing=True)
    solution, _, rank, _ = np.linalg.lstsq(design, errors, rcond=None)
    if rank < degree + 1:
        raise DegeneracyError(
            f"design matrix rank {rank} < {degree + 1}; spread the sample elevations"
        )
    coeffs = solution / _ELEVATION_SCALE_DEG ** np.arange(degree + 1)
    model = BiasModel(tuple(coeffs), metadata={"domain": "signed_elevation_deg"})
    residuals = errors - model.evaluate(elevations)
    return BiasFit(
        model=model,
        rms_residual_m=float(np.sqrt(np.mean(residuals**2))),
        max_abs_residual_m=float(np.abs(residuals).max()),
        sample_count=int(data.shape[0]),
        elevation_min_deg=float(elevations.min()),
        elevation_max_deg=float(elevations.max()),
    )


def _segment_segment_distance(p1, q1, p2, q2) -> np.ndarray:
    """Minimum distance between segments [p1, q1] and [p2, q2], broadcast over leading dims."""
    p1 = np.asarray(p1, dtype=float)
    q1 = np.asarray(q1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    q2 = np.asarray(q2, dtype=float)
    d1 = q1 - p1
    d2 = q2 - p2
    r = p1 - p2
    a = np.sum(d1 * d1, axis=-1)
    e = np.sum(d2 * d2, axis=-1)
    f = np.sum(d2 * r, axis=-1)
    c = np.sum(d1 * r, axis=-1)
    b = np.sum(d1 * d2, axis=-1)

    tiny = 1e-12
    seg1_ok = a > tiny
    seg2_ok = e > tiny

    def _safe_div(num, den, ok):
        return np.where(ok, num / np.where(ok, den, 1.0), 0.0)

    # General case: clamp s on segment 1, then re-clamp t and s again
    # (Ericson's closest-point-of-two-segments recipe), with point
    # segments short-circuited to point-segment projections.
    denom = a * e - b * b
    s = np.clip(_safe_div(b * f - c * e, denom, denom > tiny), 0.0, 1.0)
    t = _safe_div(b * s + f, e, seg2_ok)
    t_clamped = np.clip(t, 0.0, 1.0)
    s = np.where(
        t != t_clamped, np.clip(_safe_div(b * t_clamped - c, a, seg1_ok), 0.0, 1.0), s
    )
    t = t_clamped

    s = np.where(seg2_ok, s, np.clip(_safe_div(-c, a, seg1_ok), 0.0, 1.0))
    t = np.where(seg2_ok, t, 0.0)
    s = np.where(seg1_ok, s, 0.0)
    t = np.where(seg1_ok, t, np.clip(_safe_div(f, e, seg2_ok), 0.0, 1.0))

    closest1 = p1 + s[..., None] * d1
    closest2 = p2 + t[..., None] * d2
    return np.linalg.norm(closest1 - closest2, axis=-1)


def _body_axis_segment(array: AntennaArray) -> tuple[np.ndarray, np.ndarray]:
    z = array.positions[:, 2]
    return np.array([0.0, 0.0, float(z.min())]), np.array([0.0, 0.0, float(z.max())])


def occlusion_mask(
    pose_ab: Pose3,
    array_a: AntennaArray,
    array_b: AntennaArray,
    body_radius_a: float,
    body_radius_b: float,
) -> np.ndarray:
    """Occlusion flags for every antenna pair, shape (count_A, count_B).

    A pair is occluded when the straight segment between the two
    antennas passes strictly within the body radius of either agent's
    body-center axis segment (spanning that agent's antenna heights).
    """
    if body_radius_a < 0.0 or body_radius_b < 0.0:
        raise DomainError("body radii must be >= 0")
    a_pts = array_a.positions
    b_pts = pose_ab.apply(array_b.positions)
    seg_p = np.repeat(a_pts, array_b.count, axis=0)
    seg_q = np.tile(b_pts, (array_a.count, 1))

    axis_a_lo, axis_a_hi = _body_axis_segment(array_a)
    axis_b_lo_body, axis_b_hi_body = _body_axis_segment(array_b)
    axis_b_lo = pose_ab.apply(axis_b_lo_body)
    axis_b_hi = pose_ab.apply(axis_b_hi_body)

    near_a = _segment_segment_distance(seg_p, seg_q, axis_a_lo, axis_a_hi) < body_radius_a
    near_b = _segment_segment_distance(seg_p, seg_q, axis_b_lo, axis_b_hi) < body_radius_b
    return (near_a | near_b).reshape(array_a.count, array_b.count)


def is_occluded(
    pose_ab: Pose3,
    array_a: AntennaArray,
    array_b: AntennaArray,
    i: int,
    j: int,
    body_radius_a: float,
    body_radius_b: float,
) -> bool:
    """Whether the (i, j) ranging path crosses either agent's body cylinder."""
    _check_indices(array_a, array_b, i, j)
    return bool(occlusion_mask(pose_ab, array_a, array_b, body_radius_a, body_radius_b)[i, j])


def sample_range_errors(
    profile: NoiseProfile,
    elevations_deg: np.ndarray,
    occluded: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """Draw additive range errors for a batch of measurements.

    The draw order (mixture selector, Gaussian, exponential) is fixed so
    a given generator state maps to the same errors regardless of the
    occlusion pattern.
    """
    el = np.asarray(elevations_deg, dtype=float)
    occ = np.broadcast_to(np.asarray(occluded, dtype=bool), el.shape)
    pick_tail = rng.uniform(size=el.shape) < profile.tail_mixture_weight
    gauss = rng.normal(size=el.shape)
    tail = rng.exponential(scale=profile.tail_scale_m, size=el.shape)
    sigma = profile.sigma_at(el) * np.where(occ, profile.nlos_sigma_inflation, 1.0)
    errors = np.where(pick_tail, tail, gauss * sigma)
    return errors + np.where(occ, profile.nlos_bias_m, 0.0)


def sample_measurement(
    profile: NoiseProfile,
    bias: BiasModel | None,
    pose_ab: Pose3,
    array_a: AntennaArray,
    array_b: AntennaArray,
    i: int,
    j: int,
    occluded: bool,
    rng: np.random.Generator,
    time_s: float = 0.0,
    measuring_agent: str = "A",
    target_agent: str = "B",
) -> RangeMeasurement:
    """Draw one noisy directed range measurement at the true geometry.

    The sample is ``max(0, d + bias(el) + error)`` with ``error`` from
    :func:`sample_range_errors`; deterministic given the generator state.
    """
    d = expected_range(pose_ab, array_a, array_b, i, j)
    el = pair_elevation(pose_ab, array_a, array_b, i, j)
    mean_bias = float(bias.evaluate(el)) if bias is not None else 0.0
    err = float(sample_range_errors(profile, np.array(el), np.array(occluded), rng))
    return RangeMeasurement(
        time_s=time_s,
        measuring_agent=measuring_agent,
        target_agent=target_agent,
        antenna_i=i,
        antenna_j=j,
        range_m=max(0.0, d + mean_bias + err),
    )
