"""Range-only relative pose solver.

Solves for the planar relative pose (x, y, yaw) of a target agent from
the stacked antenna-pair ranges, with z, roll, and pitch held at values
derived from the agents' constraint envelopes. The per-pair residual is

    e_ij = (measured_ij - mean_bias(elevation_ij(T))) - distance_ij(T)

aggregated through a robust (Huber) or squared loss. A damped
Gauss-Newton iteration runs batched over multiple yaw-spaced starts
because the yaw objective is multimodal; an exhaustive grid oracle
provides an independent check of the same objective.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from numpy.polynomial import polynomial as npoly

from .errors import DomainError, ObservabilityError, ResourceError, SchemaError
from .geometry import AntennaArray, Pose3, euler_to_rotation, pose_from_tuple, wrap_deg
from .sensing import BiasModel, RangeMeasurement, bias_correction, expected_range

_RAD_PER_DEG = math.pi / 180.0
_MIN_DISTINCT_PAIRS = 3


@dataclass(frozen=True)
class LossConfig:
    """Aggregation loss: robust Huber (threshold in meters) or squared."""

    kind: str = "huber"
    delta_m: float = 0.06

    def __post_init__(self) -> None:
        if self.kind not in ("huber", "squared"):
            raise DomainError(f"loss kind must be 'huber' or 'squared', got {self.kind!r}")
        if self.kind == "huber" and not (self.delta_m > 0.0 and math.isfinite(self.delta_m)):
            raise DomainError("huber delta_m must be positive")


@dataclass(frozen=True)
class AblationFlags:
    """Pipeline switches matching the evaluation table columns.

    ``el_bias`` applies the elevation bias correction, ``z_fixed``
    constrains z to the envelope-derived value (off frees z as a fourth
    variable), ``huber`` selects the robust loss (off forces squared).
    """

    el_bias: bool = True
    z_fixed: bool = True
    huber: bool = True

    def label(self) -> str:
        marks = ["el_bias" if self.el_bias else "-", "z_fixed" if self.z_fixed else "-",
                 "huber" if self.huber else "-"]
        return ",".join(marks)


def loss(cfg: LossConfig, a):
    """Loss value for residual(s) ``a`` in meters.

    Squared: ``a**2``. Huber: ``a**2 / 2`` inside ``|a| <= delta`` and
    ``delta * (|a| - delta / 2)`` outside; continuous with continuous
    first derivative at the threshold.
    """
    a = np.asarray(a, dtype=float)
    if cfg.kind == "squared":
        out = a**2
    else:
        absa = np.abs(a)
        out = np.where(absa <= cfg.delta_m, 0.5 * a**2, cfg.delta_m * (absa - 0.5 * cfg.delta_m))
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class EstimationProblem:
    """One agent-pair solve: current measurements plus constrained state.

    ``z_rel``, ``roll_rel``, ``pitch_rel`` hold the envelope-differenced
    relative z/roll/pitch of the target agent in the measuring agent's
    frame (meters/degrees).
    """

    measurements: tuple[RangeMeasurement, ...]
    array_a: AntennaArray
    array_b: AntennaArray
    z_rel: float
    roll_rel: float = 0.0
    pitch_rel: float = 0.0
    bias: BiasModel | None = None
    loss: LossConfig = LossConfig()
    ablation: AblationFlags = AblationFlags()

    def __post_init__(self) -> None:
        meas = tuple(self.measurements)
        if not all(isinstance(m, RangeMeasurement) for m in meas):
            raise DomainError("measurements must be RangeMeasurement instances")
        for value, name in ((self.z_rel, "z_rel"), (self.roll_rel, "roll_rel"),
                            (self.pitch_rel, "pitch_rel")):
            if not math.isfinite(float(value)):
                raise DomainError(f"{name} must be finite")
        for m in meas:
            if m.antenna_i >= self.array_a.count or m.antenna_j >= self.array_b.count:
                raise DomainError(
                    f"measurement pair ({m.antenna_i}, {m.antenna_j}) outside array sizes"
                )
        pairs = {(m.antenna_i, m.antenna_j) for m in meas}
        if len(pairs) < _MIN_DISTINCT_PAIRS:
            raise ObservabilityError(
                f"need >= {_MIN_DISTINCT_PAIRS} distinct antenna pairs, got {len(pairs)}"
            )
        object.__setattr__(self, "measurements", meas)

    @classmethod
    def from_latest(
        cls,
        measurements,
        array_a: AntennaArray,
        array_b: AntennaArray,
        z_rel: float,
        now_s: float,
        max_age_s: float,
        **kwargs,
    ) -> "EstimationProblem":
        """Build a problem from the freshest measurement per antenna pair.

        Measurements older than ``now_s - max_age_s`` are dropped (stale);
        raises ``ObservabilityError`` if fewer than 3 distinct pairs stay.
        """
        latest: dict[tuple[int, int], RangeMeasurement] = {}
        for m in measurements:
            key = (m.antenna_i, m.antenna_j)
            if key not in latest or m.time_s >= latest[key].time_s:
                latest[key] = m
        fresh = tuple(
            m for m in latest.values() if m.time_s >= now_s - max_age_s
        )
        if len(fresh) < _MIN_DISTINCT_PAIRS:
            raise ObservabilityError(
                f"only {len(fresh)} fresh antenna pairs at t={now_s:.3f} (max age {max_age_s})"
            )
        return cls(fresh, array_a, array_b, z_rel, **kwargs)

    def effective_loss(self) -> LossConfig:
        """Loss after applying the ablation switch (huber off -> squared)."""
        if not self.ablation.huber:
            return LossConfig(kind="squared")
        return self.loss


class _Compiled(NamedTuple):
    """Per-pair arrays the iteration consumes (one row per antenna pair)."""

    pairs: tuple[tuple[int, int], ...]
    a_pts: np.ndarray      # (N, 3) measuring-agent antenna positions
    m_vec: np.ndarray      # (N, 3) antenna-frame vertical axes (elevation reference)
    u_vec: np.ndarray      # (N, 3) target antenna offsets pre-rotated by roll/pitch
    d_meas: np.ndarray     # (N,)
    z_fix: float
    z_free: bool
    bias_coeffs: np.ndarray | None
    bias_deriv: np.ndarray | None
    loss_cfg: LossConfig


def _compile(problem: EstimationProblem) -> _Compiled:
    latest: dict[tuple[int, int], RangeMeasurement] = {}
    for m in problem.measurements:
        key = (m.antenna_i, m.antenna_j)
        if key not in latest or m.time_s >= latest[key].time_s:
            latest[key] = m
    pairs = tuple(sorted(latest))
    a_pts = np.stack([problem.array_a.positions[i] for i, _ in pairs])
    m_vec = np.stack([problem.array_a.mounts[i].rotation[:, 2] for i, _ in pairs])
    tilt = euler_to_rotation(problem.roll_rel, problem.pitch_rel, 0.0)
    u_vec = np.stack([tilt @ problem.array_b.positions[j] for _, j in pairs])
    d_meas = np.array([latest[p].range_m for p in pairs])
    use_bias = problem.ablation.el_bias and problem.bias is not None
    coeffs = np.asarray(problem.bias.coefficients) if use_bias else None
    deriv = npoly.polyder(coeffs) if use_bias else None
    return _Compiled(
        pairs=pairs,
        a_pts=a_pts,
        m_vec=m_vec,
        u_vec=u_vec,
        d_meas=d_meas,
        z_fix=float(problem.z_rel),
        z_free=not problem.ablation.z_fixed,
        bias_coeffs=coeffs,
        bias_deriv=deriv,
        loss_cfg=problem.effective_loss(),
    )


def _residuals_batch(comp: _Compiled, params: np.ndarray, with_jac: bool):
    """Residuals (S, N) and optional Jacobian (S, N, K) at parameter rows.

    Parameter columns are (x, y, yaw_rad) with z fixed, or
    (x, y, z, yaw_rad) when z is free.
    """
    x = params[:, 0:1]
    y = params[:, 1:2]
    if comp.z_free:
        z = params[:, 2:3]
        yaw = params[:, 3:4]
    else:
        z = np.full_like(x, comp.z_fix)
        yaw = params[:, 2:3]
    cg, sg = np.cos(yaw), np.sin(yaw)
    ux, uy, uz = comp.u_vec[:, 0], comp.u_vec[:, 1], comp.u_vec[:, 2]
    ax, ay, az = comp.a_pts[:, 0], comp.a_pts[:, 1], comp.a_pts[:, 2]

    rot_x = cg * ux - sg * uy
    rot_y = sg * ux + cg * uy
    vx = rot_x + x - ax
    vy = rot_y + y - ay
    vz = uz + z - az
    dist = np.sqrt(vx**2 + vy**2 + vz**2)
    dist = np.maximum(dist, 1e-12)

    if comp.bias_coeffs is not None:
        mx, my, mz = comp.m_vec[:, 0], comp.m_vec[:, 1], comp.m_vec[:, 2]
        s = mx * vx + my * vy + mz * vz
        ratio = np.clip(s / dist, -1.0 + 1e-12, 1.0 - 1e-12)
        el_deg = np.degrees(np.arcsin(ratio))
        bias = npoly.polyval(el_deg, comp.bias_coeffs)
    else:
        bias = 0.0
    res = comp.d_meas - bias - dist
    if not with_jac:
        return res, None

    n_par = params.shape[1]
    jac = np.empty(res.shape + (n_par,))
    # d(distance)/d(param); the yaw column uses d(v)/d(yaw) = (-rot_y, rot_x, 0).
    dd = np.empty_like(jac)
    dd[..., 0] = vx / dist
    dd[..., 1] = vy / dist
    col = 2
    if comp.z_free:
        dd[..., 2] = vz / dist
        col = 3
    dd[..., col] = (vx * (-rot_y) + vy * rot_x) / dist

    jac[:] = -dd
    if comp.bias_coeffs is not None:
        bias_slope = npoly.polyval(el_deg, comp.bias_deriv)
        denom = dist**2 * np.sqrt(1.0 - ratio**2)
        ds = np.empty_like(jac)
        ds[..., 0] = mx
        ds[..., 1] = my
        if comp.z_free:
            ds[..., 2] = mz
        ds[..., col] = mx * (-rot_y) + my * rot_x
        del_deg = (180.0 / math.pi) * (ds * dist[..., None] - s[..., None] * dd) / denom[..., None]
        jac -= bias_slope[..., None] * del_deg
    return res, jac


def _loss_terms(cfg: LossConfig, res: np.ndarray):
    """Per-residual loss, derivative, and Gauss-Newton weight."""
    if cfg.kind == "squared":
        return res**2, 2.0 * res, np.full_like(res, 2.0)
    absr = np.abs(res)
    inside = absr <= cfg.delta_m
    value = np.where(inside, 0.5 * res**2, cfg.delta_m * (absr - 0.5 * cfg.delta_m))
    grad = np.where(inside, res, cfg.delta_m * np.sign(res))
    weight = np.where(inside, 1.0, cfg.delta_m / np.maximum(absr, 1e-300))
    return value, grad, weight


def _objective_batch(comp: _Compiled, params: np.ndarray) -> np.ndarray:
    res, _ = _residuals_batch(comp, params, with_jac=False)
    value, _, _ = _loss_terms(comp.loss_cfg, res)
    return value.sum(axis=1)


def _gauss_newton_batch(
    comp: _Compiled,
    params0: np.ndarray,
    max_iters: int,
    step_tol: float,
    rel_tol: float,
):
    """Damped Gauss-Newton over a batch of starts; returns finals per start."""
    params = params0.copy()
    n_starts, n_par = params.shape
    objective = _objective_batch(comp, params)
    damping = np.full(n_starts, 1e-4)
    growth = np.full(n_starts, 2.0)
    converged = np.zeros(n_starts, dtype=bool)
    frozen = np.zeros(n_starts, dtype=bool)
    iterations = np.zeros(n_starts, dtype=int)
    stall = np.zeros(n_starts, dtype=int)

    for _ in range(max_iters):
        active = ~(converged | frozen)
        if not active.any():
            break
        res, jac = _residuals_batch(comp, params, with_jac=True)
        _, grad_r, weight = _loss_terms(comp.loss_cfg, res)
        gradient = np.einsum("sn,snk->sk", grad_r, jac)
        # Zero-gradient starts are already at a stationary point.
        at_optimum = np.abs(gradient).max(axis=1) < 1e-12
        converged |= at_optimum & active
        active &= ~at_optimum
        if not active.any():
            continue

        hess = np.einsum("sn,snk,snl->skl", weight, jac, jac)
        diag = np.einsum("skk->sk", hess).copy()
        diag = np.maximum(diag, 1e-12)
        damped = hess + damping[:, None, None] * diag[:, None, :] * np.eye(n_par)
        try:
            step = -np.linalg.solve(damped, gradient[..., None])[..., 0]
        except np.linalg.LinAlgError:
            step = -np.linalg.lstsq(damped.reshape(-1, n_par), gradient.reshape(-1, 1),
                                    rcond=None)[0].reshape(n_starts, n_par)

        trial = params + step
        trial_obj = _objective_batch(comp, trial)
        accept = active & (trial_obj <= objective)
        with np.errstate(invalid="ignore", divide="ignore"):
            rel_decrease = (objective - trial_obj) / np.maximum(objective, 1e-300)
        step_norm = np.linalg.norm(step, axis=1)

        # Gain ratio against the local quadratic model steers the damping
        # (Nielsen's schedule): smooth growth beats fixed up/down factors
        # in the long shallow valleys that weak z observability creates.
        predicted = 0.5 * np.einsum(
            "sk,sk->s", step, damping[:, None] * diag * step - gradient
        )
        gain = (objective - trial_obj) / np.maximum(predicted, 1e-300)
        gain = np.clip(gain, -1e6, 1e6)
        shrink = np.maximum(1.0 / 3.0, 1.0 - (2.0 * gain - 1.0) ** 3)

        params = np.where(accept[:, None], trial, params)
        params[:, -1] = np.mod(params[:, -1] + math.pi, 2.0 * math.pi) - math.pi
        objective = np.where(accept, trial_obj, objective)
        damping = np.where(
            accept, damping * shrink, np.where(active, damping * growth, damping)
        )
        growth = np.where(accept, 2.0, np.where(active, growth * 2.0, growth))
        iterations += active.astype(int)

        done = accept & (step_norm < step_tol) & (rel_decrease < rel_tol)
        done |= accept & (trial_obj < 1e-24)
        converged |= done
        frozen |= active & (damping > 1e15)
        # Weakly observable directions (near-coplanar z) creep forever
        # without meeting the convergence test; cap that budget per start.
        # The converged flag stays false for such starts.
        stall = np.where(accept & (rel_decrease >= 1e-7), 0, stall + active.astype(int))
        frozen |= active & (stall >= 40)

    return params, objective, converged, iterations


def _triangulate_xy(comp: _Compiled) -> tuple[float, float]:
    """Coarse target-center fix from per-antenna mean ranges.

    Linearizes the sphere equations pairwise against the first antenna;
    falls back to a range-ring guess when the array geometry is too thin.
    """
    pairs = np.array(comp.pairs)
    mean_d = float(np.mean(comp.d_meas))
    idx = sorted(set(pairs[:, 0]))
    if len(idx) < 3:
        return mean_d, 0.0
    anchors = []
    means = []
    for i in idx:
        sel = pairs[:, 0] == i
        anchors.append(comp.a_pts[sel][0])
        means.append(float(np.mean(comp.d_meas[sel])))
    anchors = np.array(anchors)
    means = np.array(means)
    ref_p, ref_d = anchors[0], means[0]
    rows = 2.0 * (anchors[1:] - ref_p)
    rhs = (
        np.sum(anchors[1:] ** 2, axis=1)
        - np.sum(ref_p**2)
        - (means[1:] ** 2 - ref_d**2)
        - rows[:, 2] * comp.z_fix
    )
    try:
        sol, _, rank, _ = np.linalg.lstsq(rows[:, :2], rhs, rcond=None)
    except np.linalg.LinAlgError:
        return mean_d, 0.0
    if rank < 2 or not np.all(np.isfinite(sol)):
        return mean_d, 0.0
    return float(sol[0]), float(sol[1])


def _mirror_z(comp: _Compiled) -> float | None:
    """Reflected z for the planar ambiguity, if both antenna sets are level."""
    a_z = comp.a_pts[:, 2]
    u_z = comp.u_vec[:, 2]
    if np.ptp(a_z) > 1e-9 or np.ptp(u_z) > 1e-9:
        return None
    plane_a = float(a_z[0])
    plane_b = float(u_z[0])
    return 2.0 * (plane_a - plane_b)


def _start_params(
    comp: _Compiled,
    init: tuple | None,
    multistart: bool,
    yaw_count: int,
) -> np.ndarray:
    n_par = 4 if comp.z_free else 3
    starts: list[list[float]] = []
    if init is not None:
        vals = [float(v) for v in init]
        if len(vals) == 3:
            x0, y0, yaw0 = vals
            z0 = comp.z_fix
        elif len(vals) == 4 and comp.z_free:
            x0, y0, z0, yaw0 = vals
        else:
            raise DomainError("init must be (x, y, yaw_deg) or (x, y, z, yaw_deg) with z free")
        row = [x0, y0, math.radians(wrap_deg(yaw0))]
        if comp.z_free:
            row.insert(2, z0)
        starts.append(row)
    if multistart or not starts:
        cx, cy = _triangulate_xy(comp)
        z_starts = [comp.z_fix]
        if comp.z_free:
            mirror_offset = _mirror_z(comp)
            if mirror_offset is not None:
                z_starts.append(mirror_offset - comp.z_fix)
        for z0 in z_starts:
            for k in range(yaw_count):
                yaw0 = -math.pi + 2.0 * math.pi * k / yaw_count
                row = [cx, cy, yaw0]
                if comp.z_free:
                    row.insert(2, z0)
                starts.append(row)
    params = np.array(starts, dtype=float)
    if params.shape[1] != n_par:
        raise DomainError("internal: start vector width mismatch")
    return params


@dataclass(frozen=True)
class PoseEstimate:
    """Solver output: the six pose fields plus optimization diagnostics."""

    x: float
    y: float
    z: float
    roll: float
    pitch: float
    yaw: float
    objective: float
    iterations: int
    converged: bool
    residuals: tuple[float, ...]
    pairs: tuple[tuple[int, int], ...]
    pose: Pose3 = field(compare=False)
    ambiguous: bool = False

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)


def solve(
    problem: EstimationProblem,
    init: tuple | None = None,
    multistart: bool | None = None,
    max_iters: int = 200,
    step_tol: float = 1e-8,
    rel_tol: float = 1e-10,
    yaw_starts: int = 8,
) -> PoseEstimate:
    """Minimize the stacked ranging loss over (x, y, yaw) (+ z when free).

    Parameters
    ----------
    problem : EstimationProblem
        Measurements, arrays, constrained state, loss, and flags.
    init : tuple, optional
        Extra start ``(x, y, yaw_deg)`` (or ``(x, y, z, yaw_deg)`` with
        z free), e.g. the previous smoothed estimate.
    multistart : bool, optional
        The multi-start fan (a coarse trilateration fix fanned over
        ``yaw_starts`` evenly spaced yaws) runs by default because the
        yaw objective is multimodal. Pass ``False`` for a fast
        warm-start-only run; that path falls back to the full fan when
        it fails to converge.

    Returns
    -------
    PoseEstimate
        Best local minimizer found across starts; ``ambiguous`` marks a
        mirror solution of equal objective when z is free (planar
        reflection of the target across the antenna plane).
    """
    comp = _compile(problem)
    if len(comp.pairs) < _MIN_DISTINCT_PAIRS:
        raise ObservabilityError(f"only {len(comp.pairs)} usable antenna pairs")
    if multistart is None:
        multistart = True

    params0 = _start_params(comp, init, multistart, yaw_starts)
    params, objective, converged, iterations = _gauss_newton_batch(
        comp, params0, max_iters, step_tol, rel_tol
    )
    if not multistart and not bool(converged[np.argmin(objective)]):
        params0 = _start_params(comp, init, True, yaw_starts)
        params, objective, converged, iterations = _gauss_newton_batch(
            comp, params0, max_iters, step_tol, rel_tol
        )

    best = int(np.argmin(objective))
    best_params = params[best]
    best_obj = float(objective[best])

    ambiguous = False
    if comp.z_free:
        mirror_offset = _mirror_z(comp)
        if mirror_offset is not None:
            mirrored = best_params.copy()
            mirrored[2] = mirror_offset - mirrored[2]
            mirror_obj = float(_objective_batch(comp, mirrored[None, :])[0])
            if (
                abs(mirrored[2] - best_params[2]) > 1e-9
                and mirror_obj <= best_obj + 1e-9 + 1e-6 * abs(best_obj)
            ):
                ambiguous = True

    res, _ = _residuals_batch(comp, best_params[None, :], with_jac=False)
    residuals = tuple(float(v) for v in res[0])
    x, y = float(best_params[0]), float(best_params[1])
    z = float(best_params[2]) if comp.z_free else comp.z_fix
    yaw_deg = wrap_deg(math.degrees(float(best_params[-1])))
    pose = pose_from_tuple(x, y, z, problem.roll_rel, problem.pitch_rel, yaw_deg)
    return PoseEstimate(
        x=x,
        y=y,
        z=z,
        roll=float(problem.roll_rel),
        pitch=float(problem.pitch_rel),
        yaw=yaw_deg,
        objective=best_obj,
        iterations=int(iterations[best]),
        converged=bool(converged[best]),
        residuals=residuals,
        pairs=comp.pairs,
        pose=pose,
        ambiguous=ambiguous,
    )


def residual(problem: EstimationProblem, candidate: Pose3, pair: tuple[int, int]) -> float:
    """Measured-minus-predicted range for one antenna pair at a candidate pose.

    Evaluated through the scalar geometry/sensing route, independent of
    the vectorized iteration internals.

    Raises
    ------
    KeyError
        The pair has no measurement in the problem.
    """
    key = (int(pair[0]), int(pair[1]))
    latest = None
    for m in problem.measurements:
        if (m.antenna_i, m.antenna_j) == key:
            if latest is None or m.time_s >= latest.time_s:
                latest = m
    if latest is None:
        raise KeyError(f"no measurement for antenna pair {key}")
    d = expected_range(candidate, problem.array_a, problem.array_b, *key)
    mean_bias = 0.0
    if problem.ablation.el_bias and problem.bias is not None:
        mean_bias = bias_correction(
            problem.bias, candidate, problem.array_a, problem.array_b, *key
        )
    return float(latest.range_m - mean_bias - d)


def objective_at(
    problem: EstimationProblem, x: float, y: float, yaw_deg: float, z: float | None = None
) -> float:
    """Objective value at explicit planar parameters (degrees for yaw)."""
    comp = _compile(problem)
    row = [float(x), float(y), math.radians(float(yaw_deg))]
    if comp.z_free:
        row.insert(2, comp.z_fix if z is None else float(z))
    elif z is not None:
        raise DomainError("z is constrained for this problem; omit it")
    return float(_objective_batch(comp, np.array([row]))[0])


def objective_and_gradient(
    problem: EstimationProblem, x: float, y: float, yaw_deg: float, z: float | None = None
):
    """Objective and its analytic gradient w.r.t. (x, y[, z], yaw_deg)."""
    comp = _compile(problem)
    row = [float(x), float(y), math.radians(float(yaw_deg))]
    if comp.z_free:
        row.insert(2, comp.z_fix if z is None else float(z))
    params = np.array([row])
    res, jac = _residuals_batch(comp, params, with_jac=True)
    value, grad_r, _ = _loss_terms(comp.loss_cfg, res)
    gradient = np.einsum("sn,snk->sk", grad_r, jac)[0]
    gradient[-1] *= _RAD_PER_DEG  # report per degree of yaw
    return float(value.sum()), gradient


class GridBest(NamedTuple):
    x: float
    y: float
    yaw_deg: float
    objective: float


def grid_oracle(
    problem: EstimationProblem,
    bounds: tuple[tuple[float, float], tuple[float, float], tuple[float, float]],
    resolution: tuple[int, int, int],
) -> GridBest:
    """Exhaustive objective minimum over an (x, y, yaw) grid.

    Grid axes are inclusive linspaces over ``bounds`` (meters, meters,
    degrees), so refining a resolution ``n`` to ``2n - 1`` evaluates a
    superset of points. Intended as a verification oracle; z stays at
    the constrained value.

    Raises
    ------
    ResourceError
        More than 1e8 cells requested.
    """
    (x_lo, x_hi), (y_lo, y_hi), (yaw_lo, yaw_hi) = (
        (float(a), float(b)) for a, b in bounds
    )
    nx, ny, nyaw = (int(n) for n in resolution)
    if min(nx, ny, nyaw) < 1:
        raise DomainError("resolution entries must be >= 1")
    for lo, hi in ((x_lo, x_hi), (y_lo, y_hi), (yaw_lo, yaw_hi)):
        if not (math.isfinite(lo) and math.isfinite(hi)) or hi < lo:
            raise DomainError("bounds must be finite with hi >= lo")
    n_cells = nx * ny * nyaw
    if n_cells > 1e8:
        raise ResourceError(f"grid of {n_cells} cells exceeds the 1e8 limit")

    comp = _compile(problem)
    if comp.z_free:
        comp = comp._replace(z_free=False)
    xs = np.linspace(x_lo, x_hi, nx)
    ys = np.linspace(y_lo, y_hi, ny)
    yaws = np.radians(np.linspace(yaw_lo, yaw_hi, nyaw))
    grid_x, grid_y = np.meshgrid(xs, ys, indexing="ij")
    plane = np.column_stack([grid_x.ravel(), grid_y.ravel()])

    best_obj = math.inf
    best = (xs[0], ys[0], math.degrees(yaws[0]))
    # Keep each evaluated block near 2M pose-pair terms to bound memory.
    max_rows = max(1, 2_000_000 // max(len(comp.pairs), 1))
    plane_chunk = min(plane.shape[0], max_rows)
    yaw_chunk = max(1, max_rows // plane_chunk)
    for i0 in range(0, plane.shape[0], plane_chunk):
        sub = plane[i0 : i0 + plane_chunk]
        for j0 in range(0, nyaw, yaw_chunk):
            batch_yaws = yaws[j0 : j0 + yaw_chunk]
            params = np.concatenate(
                [
                    np.repeat(sub, len(batch_yaws), axis=0),
                    np.tile(batch_yaws, sub.shape[0])[:, None],
                ],
                axis=1,
            )
            obj = _objective_batch(comp, params)
            k = int(np.argmin(obj))
            if obj[k] < best_obj:
                best_obj = float(obj[k])
                best = (
                    float(params[k, 0]),
                    float(params[k, 1]),
                    math.degrees(float(params[k, 2])),
                )
    return GridBest(best[0], best[1], wrap_deg(best[2]), best_obj)


class SmoothingFilter:
    """Trailing moving-average filter over a timestamped stream.

    The window is half-open ``(t - window, t]``; at a steady input rate
    of ``r`` Hz a ``w`` second window averages ``r * w`` samples once
    warm. ``kind='angle_deg'`` averages on the circle (degrees).
    """

    def __init__(self, window_s: float, kind: str = "linear", rate_hz: float | None = None):
        if not (window_s > 0.0 and math.isfinite(window_s)):
            raise DomainError("window_s must be positive")
        if kind not in ("linear", "angle_deg"):
            raise DomainError("kind must be 'linear' or 'angle_deg'")
        self.window_s = float(window_s)
        self.kind = kind
        self.rate_hz = rate_hz
        self._buffer: deque[tuple[float, float]] = deque()
        self._last_t = -math.inf

    def __len__(self) -> int:
        return len(self._buffer)

    def insert(self, time_s: float, value: float) -> None:
        """Insert a sample without evaluating the mean (cheap hot path)."""
        time_s = float(time_s)
        if time_s < self._last_t:
            raise DomainError(
                f"timestamps must be non-decreasing ({time_s} after {self._last_t})"
            )
        self._last_t = time_s
        self._buffer.append((time_s, float(value)))
        # Small slack so float timestamps at exactly one window back evict.
        cutoff = time_s - self.window_s * (1.0 - 1e-9)
        while self._buffer[0][0] <= cutoff:
            self._buffer.popleft()

    def add(self, time_s: float, value: float) -> float:
        """Insert a sample and return the current smoothed value."""
        self.insert(time_s, value)
        return self.value()

    def value(self) -> float:
        if not self._buffer:
            raise DomainError("filter is empty; nothing to emit")
        vals = np.array([v for _, v in self._buffer])
        if self.kind == "linear":
            return float(vals.mean())
        rad = np.radians(vals)
        return wrap_deg(math.degrees(math.atan2(np.sin(rad).mean(), np.cos(rad).mean())))


def smooth(filt: SmoothingFilter, stream) -> list[float]:
    """Run a timestamped stream of (time_s, value) through ``filt``."""
    return [filt.add(t, v) for t, v in stream]


def moving_average(times: np.ndarray, values: np.ndarray, window_s: float) -> np.ndarray:
    """Vectorized trailing mean over (t - window, t], matching SmoothingFilter."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if np.any(np.diff(times) < 0):
        raise DomainError("timestamps must be non-decreasing")
    start = np.searchsorted(times, times - window_s * (1.0 - 1e-9), side="right")
    idx = np.arange(times.size) + 1
    csum = np.concatenate([[0.0], np.cumsum(values)])
    return (csum[idx] - csum[start]) / (idx - start)


def moving_circular_mean(times: np.ndarray, values_deg: np.ndarray, window_s: float) -> np.ndarray:
    """Vectorized trailing circular mean in degrees."""
    rad = np.radians(np.asarray(values_deg, dtype=float))
    mean_sin = moving_average(times, np.sin(rad), window_s)
    mean_cos = moving_average(times, np.cos(rad), window_s)
    out = np.degrees(np.arctan2(mean_sin, mean_cos))
    return np.where(out <= -180.0, out + 360.0, out)


@dataclass(frozen=True)
class SolverConfig:
    """Serializable knob set for the full estimate pipeline."""

    loss: LossConfig = LossConfig()
    ablation: AblationFlags = AblationFlags()
    range_window_s: float = 1.0
    pose_window_s: float = 4.0
    max_iters: int = 200
    step_tol_m: float = 1e-8
    objective_rel_tol: float = 1e-10
    yaw_starts: int = 8
    solve_rate_hz: float = 5.0
    staleness_factor: float = 2.0

    def __post_init__(self) -> None:
        if self.range_window_s <= 0 or self.pose_window_s <= 0:
            raise DomainError("smoothing windows must be positive")
        if self.max_iters < 1:
            raise DomainError("max_iters must be >= 1")
        if self.solve_rate_hz <= 0:
            raise DomainError("solve_rate_hz must be positive")
        if self.staleness_factor <= 0:
            raise DomainError("staleness_factor must be positive")

    def with_flags(self, flags: AblationFlags) -> "SolverConfig":
        return replace(self, ablation=flags)

    def to_json(self) -> str:
        doc = {
            "loss": {"kind": self.loss.kind, "delta_m": self.loss.delta_m},
            "ablation": {
                "el_bias": self.ablation.el_bias,
                "z_fixed": self.ablation.z_fixed,
                "huber": self.ablation.huber,
            },
            "range_window_s": self.range_window_s,
            "pose_window_s": self.pose_window_s,
            "max_iters": self.max_iters,
            "step_tol_m": self.step_tol_m,
            "objective_rel_tol": self.objective_rel_tol,
            "yaw_starts": self.yaw_starts,
            "solve_rate_hz": self.solve_rate_hz,
            "staleness_factor": self.staleness_factor,
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SolverConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"solver config JSON is invalid: {exc}") from exc
        if not isinstance(doc, dict):
            raise SchemaError("solver config must be a JSON object")
        kwargs = {}
        if "loss" in doc:
            loss_doc = doc["loss"]
            if not isinstance(loss_doc, dict) or "kind" not in loss_doc:
                raise SchemaError("config 'loss' must be an object with a 'kind'")
            kwargs["loss"] = LossConfig(
                kind=loss_doc["kind"], delta_m=float(loss_doc.get("delta_m", 0.06))
            )
        if "ablation" in doc:
            ab = doc["ablation"]
            if not isinstance(ab, dict):
                raise SchemaError("config 'ablation' must be an object")
            kwargs["ablation"] = AblationFlags(
                el_bias=bool(ab.get("el_bias", True)),
                z_fixed=bool(ab.get("z_fixed", True)),
                huber=bool(ab.get("huber", True)),
            )
        for key in (
            "range_window_s",
            "pose_window_s",
            "step_tol_m",
            "objective_rel_tol",
            "solve_rate_hz",
            "staleness_factor",
        ):
            if key in doc:
                kwargs[key] = float(doc[key])
        for key in ("max_iters", "yaw_starts"):
            if key in doc:
                kwargs[key] = int(doc[key])
        unknown = set(doc) - {
            "loss",
            "ablation",
            "range_window_s",
            "pose_window_s",
            "max_iters",
            "step_tol_m",
            "objective_rel_tol",
            "yaw_starts",
            "solve_rate_hz",
            "staleness_factor",
        }
        if unknown:
            raise SchemaError(f"unknown solver config fields {sorted(unknown)}")
        return cls(**kwargs)


def solve_with_config(
    problem: EstimationProblem,
    config: SolverConfig,
    init: tuple | None = None,
    multistart: bool | None = None,
) -> PoseEstimate:
    """``solve`` with iteration limits and start counts from a config."""
    return solve(
        problem,
        init=init,
        multistart=multistart,
        max_iters=config.max_iters,
        step_tol=config.step_tol_m,
        rel_tol=config.objective_rel_tol,
        yaw_starts=config.yaw_starts,
    )
