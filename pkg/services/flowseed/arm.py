"""
Planar N-link arm: kinematics, capsule clearance against discs and against itself,
and the ground-truth feasibility check that defines planning success.

Joint space is treated as a torus: stored angles are wrapped to (-pi, pi] and every
difference between configurations is the shortest angular difference.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from errors import ConfigurationError, InputError

TWO_PI = 2.0 * math.pi
LIMIT_TOL = 1e-9


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    a = np.asarray(a, dtype=np.float64)
    w = a - TWO_PI * np.round(a / TWO_PI)
    w = np.where(w <= -math.pi, w + TWO_PI, w)
    return np.where(w > math.pi, w - TWO_PI, w)


def angle_diff(a, b):
    """Shortest signed difference a - b, in (-pi, pi]."""
    return wrap_angle(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))


# ----------------------------------------------------------------------
# Domain types
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class RobotSpec:
    link_lengths: Tuple[float, ...] = (0.4, 0.3, 0.2)
    link_radius: float = 0.03
    base: Tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "link_lengths", tuple(float(v) for v in self.link_lengths))
        object.__setattr__(self, "base", (float(self.base[0]), float(self.base[1])))
        if len(self.link_lengths) < 2:
            raise ConfigurationError(f"Robot needs at least 2 joints, got {len(self.link_lengths)}")
        if any(v <= 0 for v in self.link_lengths):
            raise ConfigurationError("Link lengths must be positive")
        if self.link_radius <= 0:
            raise ConfigurationError("Link radius must be positive")

    @property
    def n_joints(self) -> int:
        return len(self.link_lengths)

    @property
    def reach(self) -> float:
        return float(sum(self.link_lengths))


@dataclass(frozen=True)
class JointConfig:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(v)):
            raise InputError("Joint configuration must be finite")
        object.__setattr__(self, "values", wrap_angle(v))

    @property
    def n_joints(self) -> int:
        return int(self.values.shape[0])


@dataclass
class Trajectory:
    values: np.ndarray  # [K, J]
    dt: float = 0.1

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 2:
            raise InputError(f"Trajectory must be K x J with K >= 2, got {self.values.shape}")
        if not self.dt > 0:
            raise InputError(f"Trajectory time step must be positive, got {self.dt}")

    @property
    def n_waypoints(self) -> int:
        return int(self.values.shape[0])

    @property
    def n_joints(self) -> int:
        return int(self.values.shape[1])

    def copy(self) -> "Trajectory":
        return Trajectory(self.values.copy(), self.dt)


def _bounds(default: float, n: int) -> Tuple[np.ndarray, np.ndarray]:
    return -np.full(n, default), np.full(n, default)


@dataclass
class Limits:
    pos_lo: np.ndarray
    pos_hi: np.ndarray
    vel_lo: np.ndarray
    vel_hi: np.ndarray
    acc_lo: np.ndarray
    acc_hi: np.ndarray
    jerk_lo: np.ndarray
    jerk_hi: np.ndarray

    def __post_init__(self):
        for name in ("pos", "vel", "acc", "jerk"):
            lo = np.asarray(getattr(self, f"{name}_lo"), dtype=np.float64)
            hi = np.asarray(getattr(self, f"{name}_hi"), dtype=np.float64)
            if lo.shape != hi.shape or not np.all(lo < hi):
                raise ConfigurationError(f"{name} limits need lower < upper elementwise")
            setattr(self, f"{name}_lo", lo)
            setattr(self, f"{name}_hi", hi)

    @classmethod
    def default(cls, n_joints: int = 3) -> "Limits":
        return cls(
            *_bounds(math.pi, n_joints),
            *_bounds(2.0, n_joints),
            *_bounds(10.0, n_joints),
            *_bounds(100.0, n_joints),
        )

    def as_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in (
            "pos_lo", "pos_hi", "vel_lo", "vel_hi", "acc_lo", "acc_hi", "jerk_lo", "jerk_hi"
        )}

    @classmethod
    def from_dict(cls, data: dict) -> "Limits":
        return cls(**{k: np.asarray(v, dtype=np.float64) for k, v in data.items()})


@dataclass
class FeasibilityReport:
    reached_goal: bool
    collision_free: bool
    within_limits: bool
    min_clearance: float
    goal_error: float
    first_violation: Optional[int] = None
    details: dict = field(default_factory=dict)

    @property
    def feasible(self) -> bool:
        return self.reached_goal and self.collision_free and self.within_limits


# ----------------------------------------------------------------------
# Kinematics
# ----------------------------------------------------------------------
def joint_positions(q: np.ndarray, robot: RobotSpec) -> np.ndarray:
    """q [..., J] -> joint positions [..., J+1, 2] (base first, tip last)."""
    q = np.asarray(q, dtype=np.float64)
    phi = np.cumsum(q, axis=-1)
    lengths = np.asarray(robot.link_lengths)
    steps = np.stack([lengths * np.cos(phi), lengths * np.sin(phi)], axis=-1)
    zero = np.zeros(q.shape[:-1] + (1, 2))
    return np.asarray(robot.base) + np.concatenate([zero, np.cumsum(steps, axis=-2)], axis=-2)


def forward_kinematics(q: JointConfig, robot: RobotSpec) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Link segments as (start, end) pairs, base to tip."""
    if q.n_joints != robot.n_joints:
        raise InputError(f"Configuration has {q.n_joints} joints, robot has {robot.n_joints}")
    pts = joint_positions(q.values, robot)
    return [(pts[i].copy(), pts[i + 1].copy()) for i in range(robot.n_joints)]


def joint_position_jacobian(points: np.ndarray) -> np.ndarray:
    """
    d(point m)/d(q_j) for joint positions [..., J+1, 2] -> [..., J+1, J, 2].
    Rotating joint j swings every point past it: perp(P_m - P_j) for j < m.
    """
    n_pts = points.shape[-2]
    n_joints = n_pts - 1
    rel = points[..., :, None, :] - points[..., None, :n_joints, :]
    perp = np.stack([-rel[..., 1], rel[..., 0]], axis=-1)
    mask = np.arange(n_joints)[None, :] < np.arange(n_pts)[:, None]
    return perp * mask[..., None]


def nonadjacent_pairs(n_joints: int) -> List[Tuple[int, int]]:
    return [(i, k) for i in range(n_joints) for k in range(i + 2, n_joints)]


# ----------------------------------------------------------------------
# Distances
# ----------------------------------------------------------------------
def _closest_on_segment(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Projection parameter s in [0, 1] and closest point of segment a-b to c (broadcasting)."""
    ab = b - a
    denom = np.sum(ab * ab, axis=-1)
    num = np.sum((c - a) * ab, axis=-1)
    safe = np.where(denom > 0, denom, 1.0)
    s = np.where(denom > 0, np.clip(num / safe, 0.0, 1.0), 0.0)
    return s, a + s[..., None] * ab


def segment_circle_distance(segment, center, radius: float) -> float:
    """Distance from the circle center to the segment minus the circle radius."""
    a = np.asarray(segment[0], dtype=np.float64)
    b = np.asarray(segment[1], dtype=np.float64)
    c = np.asarray(center, dtype=np.float64)
    _, p = _closest_on_segment(a, b, c)
    return float(np.linalg.norm(p - c) - radius)


def _segments_cross(a1, b1, a2, b2) -> np.ndarray:
    def orient(p, q, r):
        return (q[..., 0] - p[..., 0]) * (r[..., 1] - p[..., 1]) - (q[..., 1] - p[..., 1]) * (r[..., 0] - p[..., 0])

    d1 = orient(a2, b2, a1)
    d2 = orient(a2, b2, b1)
    d3 = orient(a1, b1, a2)
    d4 = orient(a1, b1, b2)
    return (d1 * d2 < 0) & (d3 * d4 < 0)


def _segment_pair_closest(a1, b1, a2, b2):
    """
    Distance between segments and the closest-point parameters (s on seg 1, u on seg 2).
    For non-crossing planar segments the minimum is attained at an endpoint of one of them.
    """
    s_a2, _ = _closest_on_segment(a1, b1, a2)
    s_b2, _ = _closest_on_segment(a1, b1, b2)
    u_a1, _ = _closest_on_segment(a2, b2, a1)
    u_b1, _ = _closest_on_segment(a2, b2, b1)
    zeros = np.zeros_like(s_a2)
    ones = np.ones_like(s_a2)
    s_cand = np.stack([zeros, ones, s_a2, s_b2], axis=-1)
    u_cand = np.stack([u_a1, u_b1, zeros, ones], axis=-1)
    p1 = a1[..., None, :] + s_cand[..., None] * (b1 - a1)[..., None, :]
    p2 = a2[..., None, :] + u_cand[..., None] * (b2 - a2)[..., None, :]
    dists = np.linalg.norm(p1 - p2, axis=-1)
    best = np.argmin(dists, axis=-1)[..., None]
    d = np.take_along_axis(dists, best, axis=-1)[..., 0]
    s = np.take_along_axis(s_cand, best, axis=-1)[..., 0]
    u = np.take_along_axis(u_cand, best, axis=-1)[..., 0]
    crossing = _segments_cross(a1, b1, a2, b2)
    d = np.where(crossing, 0.0, d)
    return d, s, u, crossing


def pair_clearances(points: np.ndarray, discs: np.ndarray, robot: RobotSpec) -> np.ndarray:
    """
    Clearances for every link x disc pair and every nonadjacent link x link pair.
    points [N, J+1, 2], discs [M, 3] -> [N, J*M + P]
    """
    return clearances_with_grad(points, discs, robot, need_grad=False)[0]


def clearances_with_grad(points: np.ndarray, discs: np.ndarray, robot: RobotSpec, need_grad: bool = True):
    """
    Pair clearances [N, C] and, when `need_grad`, their derivatives w.r.t. the joint
    angles [N, C, J]. Clearance <= 0 means contact.
    """
    n = points.shape[0]
    n_joints = points.shape[1] - 1
    r = robot.link_radius
    a = points[:, :-1, :]
    b = points[:, 1:, :]
    jac = joint_position_jacobian(points) if need_grad else None

    parts = []
    grads = []
    discs = np.asarray(discs, dtype=np.float64).reshape(-1, 3)
    if discs.shape[0] > 0:
        centers = discs[:, :2]
        radii = discs[:, 2]
        s, p = _closest_on_segment(a[:, :, None, :], b[:, :, None, :], centers[None, None, :, :])
        delta = p - centers[None, None, :, :]
        dist = np.linalg.norm(delta, axis=-1)
        parts.append((dist - radii[None, None, :] - r).reshape(n, -1))
        if need_grad:
            unit = np.where(dist[..., None] > 0, delta / np.where(dist > 0, dist, 1.0)[..., None], 0.0)
            ja = jac[:, :-1]  # [N, J(link), J(q), 2]
            jb = jac[:, 1:]
            g = (np.einsum("nlmc,nljc->nlmj", unit * (1.0 - s)[..., None], ja)
                 + np.einsum("nlmc,nljc->nlmj", unit * s[..., None], jb))
            grads.append(g.reshape(n, -1, n_joints))

    pairs = nonadjacent_pairs(n_joints)
    if pairs:
        i_idx = np.array([p[0] for p in pairs])
        k_idx = np.array([p[1] for p in pairs])
        a1, b1 = a[:, i_idx], b[:, i_idx]
        a2, b2 = a[:, k_idx], b[:, k_idx]
        d, s, u, crossing = _segment_pair_closest(a1, b1, a2, b2)
        parts.append(d - 2.0 * r)
        if need_grad:
            p1 = a1 + s[..., None] * (b1 - a1)
            p2 = a2 + u[..., None] * (b2 - a2)
            delta = p1 - p2
            ok = (d > 0) & ~crossing
            unit = np.where(ok[..., None], delta / np.where(ok, d, 1.0)[..., None], 0.0)
            g = (np.einsum("npc,npjc->npj", unit * (1.0 - s)[..., None], jac[:, i_idx])
                 + np.einsum("npc,npjc->npj", unit * s[..., None], jac[:, i_idx + 1])
                 - np.einsum("npc,npjc->npj", unit * (1.0 - u)[..., None], jac[:, k_idx])
                 - np.einsum("npc,npjc->npj", unit * u[..., None], jac[:, k_idx + 1]))
            grads.append(g)

    if not parts:
        return np.zeros((n, 0)), (np.zeros((n, 0, n_joints)) if need_grad else None)
    clear = np.concatenate(parts, axis=1)
    grad = np.concatenate(grads, axis=1) if need_grad else None
    return clear, grad


def config_clearances(qs: np.ndarray, discs: np.ndarray, robot: RobotSpec) -> np.ndarray:
    """Minimum clearance per configuration, qs [N, J] -> [N]; +inf when nothing can touch."""
    qs = np.atleast_2d(np.asarray(qs, dtype=np.float64))
    clear = pair_clearances(joint_positions(qs, robot), discs, robot)
    if clear.shape[1] == 0:
        return np.full(qs.shape[0], np.inf)
    return clear.min(axis=1)


def config_clearance(q: JointConfig, discs: np.ndarray, robot: RobotSpec) -> float:
    """Minimum clearance over link x disc and nonadjacent link x link pairs (meters)."""
    return float(config_clearances(q.values[None, :], discs, robot)[0])


# ----------------------------------------------------------------------
# Feasibility
# ----------------------------------------------------------------------
def substep_fractions(substeps: int) -> np.ndarray:
    """
    Interior interpolation fractions checked between consecutive waypoints: the union of
    the uniform grids j/(m+1) for every m <= substeps, so a finer setting always checks a
    superset of the samples of a coarser one. `substeps` is therefore the finest grid
    level, not the sample count: substeps=4 checks 9 fractions per segment.
    """
    fracs = {(j, m + 1) for m in range(1, substeps + 1) for j in range(1, m + 1)}
    values = sorted({j / d for j, d in fracs})
    return np.asarray(values, dtype=np.float64)


def interpolate_waypoints(values: np.ndarray, fractions: np.ndarray) -> np.ndarray:
    """[K, J] -> [K-1, F, J] configurations between each consecutive pair."""
    step = angle_diff(values[1:], values[:-1])
    return values[:-1, None, :] + fractions[None, :, None] * step[:, None, :]


def divided_differences(values: np.ndarray, dt: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Velocity [K-1, J], acceleration [K-2, J] and jerk [K-3, J] by one-sided differences."""
    vel = angle_diff(values[1:], values[:-1]) / dt
    acc = np.diff(vel, axis=0) / dt
    jerk = np.diff(acc, axis=0) / dt
    return vel, acc, jerk


def _violations(x: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Row indices where any joint leaves [lo, hi] beyond rounding tolerance."""
    tol_hi = LIMIT_TOL * np.maximum(1.0, np.abs(hi))
    tol_lo = LIMIT_TOL * np.maximum(1.0, np.abs(lo))
    bad = (x > hi + tol_hi) | (x < lo - tol_lo)
    return np.nonzero(bad.any(axis=-1))[0]


def check_feasibility(
    traj: Trajectory,
    discs: np.ndarray,
    limits: Limits,
    goal: JointConfig,
    robot: RobotSpec,
    goal_tol: float = 0.1,
    substeps: int = 4,
) -> FeasibilityReport:
    """Ground-truth success check: goal reached, collision-free, within all limits."""
    values = wrap_angle(traj.values)
    k = values.shape[0]

    goal_error = float(np.linalg.norm(angle_diff(values[-1], goal.values)))
    reached = goal_error <= goal_tol

    # Collision at waypoints and interpolated substeps
    way_clear = config_clearances(values, discs, robot)
    min_clear = float(way_clear.min())
    first_hit: Optional[int] = None
    bad_way = np.nonzero(way_clear <= 0)[0]
    if bad_way.size:
        first_hit = int(bad_way[0])
    fractions = substep_fractions(substeps) if substeps > 0 else np.zeros(0)
    if fractions.size and k > 1:
        between = interpolate_waypoints(values, fractions)
        sub_clear = config_clearances(between.reshape(-1, values.shape[1]), discs, robot)
        sub_clear = sub_clear.reshape(k - 1, fractions.size)
        min_clear = min(min_clear, float(sub_clear.min()))
        bad_seg = np.nonzero((sub_clear <= 0).any(axis=1))[0]
        if bad_seg.size:
            seg_idx = int(bad_seg[0]) + 1
            first_hit = seg_idx if first_hit is None else min(first_hit, seg_idx)
    collision_free = first_hit is None

    # Limits at waypoint resolution; a difference is attributed to its last waypoint
    vel, acc, jerk = divided_differences(values, traj.dt)
    limit_hits = []
    checks = (
        ("pos", values, limits.pos_lo, limits.pos_hi, 0),
        ("vel", vel, limits.vel_lo, limits.vel_hi, 1),
        ("acc", acc, limits.acc_lo, limits.acc_hi, 2),
        ("jerk", jerk, limits.jerk_lo, limits.jerk_hi, 3),
    )
    violated = {}
    for name, series, lo, hi, shift in checks:
        if series.shape[0] == 0:
            continue
        rows = _violations(series, lo, hi)
        if rows.size:
            violated[name] = int(rows.size)
            limit_hits.append(int(rows[0]) + shift)
    within = not limit_hits

    candidates = [i for i in [first_hit] + limit_hits if i is not None]
    return FeasibilityReport(
        reached_goal=bool(reached),
        collision_free=bool(collision_free),
        within_limits=bool(within),
        min_clearance=min_clear,
        goal_error=goal_error,
        first_violation=min(candidates) if candidates else None,
        details={"limit_violations": violated} if violated else {},
    )
