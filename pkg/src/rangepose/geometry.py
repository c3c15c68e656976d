"""Rigid-body poses, antenna arrays, alignment, and ranging geometry quality.

Conventions
-----------
Angles cross public boundaries in degrees. A pose tuple is
``(x, y, z, roll, pitch, yaw)`` with the rotation composed as
``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``. Valid Euler ranges are
roll in [-180, 180], pitch in [-90, 90], yaw in [-180, 180]; ties at
-180 normalize to +180 on extraction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegeneracyError, DomainError, SchemaError

_ORTHO_TOL = 1e-9
_GIMBAL_PITCH_DEG = 89.0
_DOP_CONDITION_LIMIT = 1e12


def wrap_deg(angle: float) -> float:
    """Wrap an angle in degrees to (-180, 180], mapping -180 to +180."""
    wrapped = math.fmod(float(angle), 360.0)
    if wrapped <= -180.0:
        wrapped += 360.0
    elif wrapped > 180.0:
        wrapped -= 360.0
    return wrapped


def euler_to_rotation(roll_deg: float, pitch_deg: float, yaw_deg: float) -> np.ndarray:
    """Build a rotation matrix from ZYX Euler angles in degrees.

    Parameters
    ----------
    roll_deg, pitch_deg, yaw_deg : float
        Rotations about body x, y, z. The matrix applies roll first:
        ``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``.

    Returns
    -------
    np.ndarray
        3x3 rotation matrix.
    """
    ca, sa = _cos_sin_deg(roll_deg)
    cb, sb = _cos_sin_deg(pitch_deg)
    cg, sg = _cos_sin_deg(yaw_deg)
    return np.array(
        [
            [cg * cb, cg * sb * sa - sg * ca, cg * sb * ca + sg * sa],
            [sg * cb, sg * sb * sa + cg * ca, sg * sb * ca - cg * sa],
            [-sb, cb * sa, cb * ca],
        ]
    )


def rotation_to_euler(rotation: np.ndarray) -> tuple[float, float, float]:
    """Extract ZYX Euler angles in degrees from a rotation matrix.

    Within ``|pitch| >= 89`` degrees the decomposition is near-singular;
    the convention there is roll = 0 with yaw absorbing the remaining
    rotation about the vertical.

    Returns
    -------
    (roll_deg, pitch_deg, yaw_deg) : tuple of float
    """
    rot = np.asarray(rotation, dtype=float)
    sin_pitch = -rot[2, 0]
    sin_pitch = min(1.0, max(-1.0, float(sin_pitch)))
    pitch = math.degrees(math.asin(sin_pitch))
    if abs(pitch) >= _GIMBAL_PITCH_DEG:
        # Gimbal convention: roll folded into yaw.
        roll = 0.0
        yaw = math.degrees(math.atan2(-rot[0, 1], rot[1, 1]))
    else:
        roll = math.degrees(math.atan2(rot[2, 1], rot[2, 2]))
        yaw = math.degrees(math.atan2(rot[1, 0], rot[0, 0]))
    return wrap_deg(roll) + 0.0, pitch + 0.0, wrap_deg(yaw) + 0.0


def _cos_sin_deg(angle_deg: float) -> tuple[float, float]:
    rad = math.radians(float(angle_deg))
    return math.cos(rad), math.sin(rad)


def _check_angle(name: str, value: float, lo: float, hi: float) -> float:
    value = float(value)
    if not math.isfinite(value):
        raise DomainError(f"{name} must be finite, got {value!r}")
    if value < lo or value > hi:
        raise DomainError(f"{name}={value} outside [{lo}, {hi}]; wrap explicitly")
    return value


@dataclass(frozen=True)
class Pose3:
    """Rigid transform in 3D, stored as rotation matrix plus translation.

    ``Pose3`` maps points from its source frame into its target frame:
    for the relative pose of B in A, ``pose.apply(p_b)`` yields the same
    physical point expressed in A.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        rot = np.array(self.rotation, dtype=float)
        trans = np.array(self.translation, dtype=float).reshape(3)
        if rot.shape != (3, 3):
            raise DomainError(f"rotation must be 3x3, got {rot.shape}")
        if not np.all(np.isfinite(rot)) or not np.all(np.isfinite(trans)):
            raise DomainError("pose entries must be finite")
        if np.abs(rot.T @ rot - np.eye(3)).max() > _ORTHO_TOL:
            raise DomainError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(rot) - 1.0) > _ORTHO_TOL:
            raise DomainError("rotation determinant differs from +1 beyond 1e-9")
        rot.flags.writeable = False
        trans.flags.writeable = False
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Pose3):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    def __hash__(self) -> int:
        return hash((self.rotation.tobytes(), self.translation.tobytes()))

    @classmethod
    def identity(cls) -> "Pose3":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_tuple(
        cls,
        x: float,
        y: float,
        z: float,
        roll_deg: float,
        pitch_deg: float,
        yaw_deg: float,
    ) -> "Pose3":
        """Construct from the six-tuple parameterization (degrees).

        Out-of-range angles raise ``DomainError`` rather than wrapping.
        """
        for name, value in (("x", x), ("y", y), ("z", z)):
            if not math.isfinite(float(value)):
                raise DomainError(f"{name} must be finite, got {value!r}")
        roll = _check_angle("roll_deg", roll_deg, -180.0, 180.0)
        pitch = _check_angle("pitch_deg", pitch_deg, -90.0, 90.0)
        yaw = _check_angle("yaw_deg", yaw_deg, -180.0, 180.0)
        rot = euler_to_rotation(roll, pitch, yaw)
        return cls(rot, np.array([x, y, z], dtype=float))

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "Pose3":
        mat = np.asarray(matrix, dtype=float)
        if mat.shape != (4, 4):
            raise DomainError(f"homogeneous matrix must be 4x4, got {mat.shape}")
        if np.abs(mat[3] - np.array([0.0, 0.0, 0.0, 1.0])).max() > _ORTHO_TOL:
            raise DomainError("bottom row of homogeneous matrix must be [0, 0, 0, 1]")
        return cls(mat[:3, :3], mat[:3, 3])

    def to_tuple(self) -> tuple[float, float, float, float, float, float]:
        """Return ``(x, y, z, roll_deg, pitch_deg, yaw_deg)``."""
        roll, pitch, yaw = rotation_to_euler(self.rotation)
        x, y, z = (float(v) for v in self.translation)
        return (x, y, z, roll, pitch, yaw)

    def as_matrix(self) -> np.ndarray:
        mat = np.eye(4)
        mat[:3, :3] = self.rotation
        mat[:3, 3] = self.translation
        return mat

    def compose(self, other: "Pose3") -> "Pose3":
        """Chain transforms: ``(self.compose(other)).apply(p) == self.apply(other.apply(p))``."""
        return Pose3(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def __matmul__(self, other: "Pose3") -> "Pose3":
        return self.compose(other)

    def inverse(self) -> "Pose3":
        rot_t = self.rotation.T.copy()
        return Pose3(rot_t, -rot_t @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one point (3,) or a stack (N, 3) into the target frame."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.T + self.translation


def pose_from_tuple(
    x: float, y: float, z: float, roll_deg: float, pitch_deg: float, yaw_deg: float
) -> Pose3:
    """Module-level alias for :meth:`Pose3.from_tuple`."""
    return Pose3.from_tuple(x, y, z, roll_deg, pitch_deg, yaw_deg)


def transform_point(pose: Pose3, point: np.ndarray) -> np.ndarray:
    """Apply ``pose`` to a single point, returning shape (3,)."""
    return pose.apply(np.asarray(point, dtype=float).reshape(3))


def relative_antenna_pose(pose_ab: Pose3, mount_i: Pose3, mount_j: Pose3) -> Pose3:
    """Pose of antenna j on agent B expressed in the frame of antenna i on A.

    ``mount_i`` is fixed in A's body frame, ``mount_j`` in B's, and
    ``pose_ab`` carries B's body frame into A's.
    """
    return mount_i.inverse() @ pose_ab @ mount_j


@dataclass(frozen=True)
class AntennaArray:
    """Ordered antenna mount poses in an agent's body frame."""

    mounts: tuple[Pose3, ...]
    positions: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        mounts = tuple(self.mounts)
        if len(mounts) == 0:
            raise DomainError("antenna array needs at least one mount")
        for mount in mounts:
            if not isinstance(mount, Pose3):
                raise DomainError("mounts must be Pose3 instances")
        pos = np.stack([m.translation for m in mounts])
        if len(mounts) > 1:
            diff = pos[:, None, :] - pos[None, :, :]
            dist = np.linalg.norm(diff, axis=-1)
            dist[np.diag_indices(len(mounts))] = np.inf
            if dist.min() <= 1e-6:
                raise DomainError("antenna mounts closer than 1e-6 m")
        pos.flags.writeable = False
        object.__setattr__(self, "mounts", mounts)
        object.__setattr__(self, "positions", pos)

    @property
    def count(self) -> int:
        return len(self.mounts)

    @classmethod
    def ring(cls, count: int, radius: float, z: float = 0.0) -> "AntennaArray":
        """Evenly spaced mounts on a circle of ``radius`` at height ``z``."""
        if count < 1:
            raise DomainError("ring needs count >= 1")
        if radius <= 0.0:
            raise DomainError("ring needs radius > 0")
        mounts = []
        for k in range(count):
            ang = 2.0 * math.pi * k / count
            mounts.append(
                Pose3(np.eye(3), np.array([radius * math.cos(ang), radius * math.sin(ang), z]))
            )
        return cls(tuple(mounts))

    def to_json(self) -> str:
        rows = []
        for mount in self.mounts:
            x, y, z, roll, pitch, yaw = mount.to_tuple()
            rows.append({"x": x, "y": y, "z": z, "roll": roll, "pitch": pitch, "yaw": yaw})
        return json.dumps({"mounts": rows}, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "AntennaArray":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"antenna array JSON is invalid: {exc}") from exc
        if not isinstance(doc, dict) or "mounts" not in doc:
            raise SchemaError("antenna array JSON must be an object with a 'mounts' list")
        mounts = []
        for idx, row in enumerate(doc["mounts"]):
            missing = {"x", "y", "z", "roll", "pitch", "yaw"} - set(row)
            if missing:
                raise SchemaError(f"mount {idx} missing fields {sorted(missing)}")
            mounts.append(
                Pose3.from_tuple(row["x"], row["y"], row["z"], row["roll"], row["pitch"], row["yaw"])
            )
        return cls(tuple(mounts))


def horn_align(src: np.ndarray, dst: np.ndarray) -> Pose3:
    """Closed-form rigid alignment mapping ``src`` points onto ``dst``.

    Solves ``argmin_T sum_k || T(src_k) - dst_k ||^2`` with Horn's
    quaternion eigendecomposition; exact (to machine precision) for
    noise-free correspondences.

    Parameters
    ----------
    src, dst : np.ndarray
        Matched point sets, shape (N, 3) with N >= 3.

    Raises
    ------
    DomainError
        Fewer than 3 points or mismatched shapes.
    DegeneracyError
        Source points collinear (rotation about the line unobservable).
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.ndim != 2 or src.shape[1] != 3 or src.shape != dst.shape:
        raise DomainError(f"expected matching (N, 3) point sets, got {src.shape} and {dst.shape}")
    if src.shape[0] < 3:
        raise DomainError("alignment needs at least 3 correspondences")
    if not (np.all(np.isfinite(src)) and np.all(np.isfinite(dst))):
        raise DomainError("points must be finite")

    centroid_src = src.mean(axis=0)
    centroid_dst = dst.mean(axis=0)
    src_c = src - centroid_src
    dst_c = dst - centroid_dst

    singular = np.linalg.svd(src_c, compute_uv=False)
    if singular[1] <= 1e-9 * max(singular[0], 1.0):
        raise DegeneracyError("source points are collinear; rotation underdetermined")

    m = src_c.T @ dst_c
    sxx, sxy, sxz = m[0]
    syx, syy, syz = m[1]
    szx, szy, szz = m[2]
    profile = np.array(
        [
            [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
            [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
            [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
            [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
        ]
    )
    eigvals, eigvecs = np.linalg.eigh(profile)
    quat = eigvecs[:, np.argmax(eigvals)]
    rotation = _quaternion_to_matrix(quat)
    translation = centroid_dst - rotation @ centroid_src
    return Pose3(rotation, translation)


def _quaternion_to_matrix(quat: np.ndarray) -> np.ndarray:
    w, x, y, z = quat / np.linalg.norm(quat)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def reflect_across_plane(
    points: np.ndarray, plane_point: np.ndarray, plane_normal: np.ndarray
) -> np.ndarray:
    """Mirror points across the plane through ``plane_point`` with ``plane_normal``."""
    normal = np.asarray(plane_normal, dtype=float).reshape(3)
    norm = np.linalg.norm(normal)
    if norm <= 1e-12:
        raise DomainError("plane normal must be non-zero")
    normal = normal / norm
    origin = np.asarray(plane_point, dtype=float).reshape(3)
    pts = np.asarray(points, dtype=float)
    offsets = (pts - origin) @ normal
    return pts - 2.0 * np.multiply.outer(offsets, normal)


@dataclass(frozen=True)
class DopReport:
    """Dilution-of-precision summary for a ranging geometry.

    Values are unitless noise-amplification factors; directions the
    geometry cannot observe report ``inf`` together with the
    ``degenerate`` flag.
    """

    position_dop: float
    horizontal_dop: float
    vertical_dop: float
    geometry_matrix_condition: float
    degenerate: bool


def position_dop(bases: np.ndarray, target: np.ndarray) -> DopReport:
    """Position DOP of ranging from ``bases`` to ``target``.

    Rows of the geometry matrix are unit line-of-sight vectors; the DOP
    values come from the diagonal of ``inv(G.T @ G)``. Geometry with
    condition beyond 1e12 is flagged degenerate and the unobservable
    axes report ``inf`` instead of raising.

    Parameters
    ----------
    bases : np.ndarray
        Base (anchor) positions, shape (N, 3) with N >= 3.
    target : np.ndarray
        Queried position, shape (3,).
    """
    bases = np.asarray(bases, dtype=float)
    target = np.asarray(target, dtype=float).reshape(3)
    if bases.ndim != 2 or bases.shape[1] != 3:
        raise DomainError(f"bases must have shape (N, 3), got {bases.shape}")
    if bases.shape[0] < 3:
        raise DomainError("position_dop needs at least 3 base points")
    if not (np.all(np.isfinite(bases)) and np.all(np.isfinite(target))):
        raise DomainError("bases and target must be finite")
    offsets = bases - target
    dists = np.linalg.norm(offsets, axis=1)
    if dists.min() <= 1e-9:
        raise DegeneracyError("a base point coincides with the target")
    los = offsets / dists[:, None]
    gram = los.T @ los

    eigvals, eigvecs = np.linalg.eigh(gram)
    lam_max = float(eigvals[-1])
    observable = eigvals > lam_max * 1e-12
    if bool(np.all(observable)):
        condition = lam_max / float(eigvals[0])
        degenerate = condition > _DOP_CONDITION_LIMIT
    else:
        condition = math.inf
        degenerate = True

    # Covariance diagonal on the observable subspace; null axes go to inf.
    diag = np.zeros(3)
    for lam, vec in zip(eigvals, eigvecs.T):
        if lam > lam_max * 1e-12:
            diag += (vec**2) / lam
        else:
            diag = np.where(vec**2 > 1e-16, np.inf, diag)

    return DopReport(
        position_dop=float(np.sqrt(diag.sum())),
        horizontal_dop=float(np.sqrt(diag[0] + diag[1])),
        vertical_dop=float(np.sqrt(diag[2])),
        geometry_matrix_condition=condition,
        degenerate=degenerate,
    )
