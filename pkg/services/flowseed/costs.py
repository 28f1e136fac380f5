"""
Trajectory objective: goal, smoothness, collision and limit penalties with analytic
gradients. Evaluation is vectorized over a leading batch of candidate trajectories so
the particle warm-up can score all particles in one call.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from arm import (
    JointConfig,
    Limits,
    RobotSpec,
    Trajectory,
    angle_diff,
    clearances_with_grad,
    joint_positions,
    wrap_angle,
)
from errors import ConfigurationError, InputError, NumericalError
from scene import EstimatedWorld


@dataclass(frozen=True)
class CostWeights:
    w_goal: float = 50.0
    w_smooth: float = 1.0
    w_collision: float = 200.0
    w_limits: float = 100.0
    margin: float = 0.02

    def __post_init__(self):
        for name in ("w_goal", "w_smooth", "w_collision", "w_limits", "margin"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"Cost weight {name} must be >= 0")


@dataclass
class OptProblem:
    """Everything the optimizer may see. Ground truth is deliberately absent."""

    start: JointConfig
    goal: JointConfig
    world: EstimatedWorld
    robot: RobotSpec = field(default_factory=RobotSpec)
    limits: Optional[Limits] = None
    weights: CostWeights = field(default_factory=CostWeights)
    n_waypoints: int = 32
    dt: float = 0.1

    def __post_init__(self):
        if self.limits is None:
            self.limits = Limits.default(self.robot.n_joints)
        if self.n_waypoints < 2:
            raise ConfigurationError(f"Need at least 2 waypoints, got {self.n_waypoints}")
        for q in (self.start, self.goal):
            if q.n_joints != self.robot.n_joints:
                raise InputError(f"Configuration has {q.n_joints} joints, robot has {self.robot.n_joints}")


@dataclass
class CostBreakdown:
    goal: float = 0.0
    smooth: float = 0.0
    collision: float = 0.0
    limits: float = 0.0

    @property
    def total(self) -> float:
        return self.goal + self.smooth + self.collision + self.limits

    def to_dict(self) -> dict:
        return {"goal": self.goal, "smooth": self.smooth, "collision": self.collision, "limits": self.limits}


def linear_seed(start: JointConfig, goal: JointConfig, n_waypoints: int, dt: float = 0.1) -> Trajectory:
    """Straight line in joint space along the shortest angular difference."""
    if n_waypoints < 2:
        raise ConfigurationError(f"Need at least 2 waypoints, got {n_waypoints}")
    frac = np.arange(n_waypoints, dtype=np.float64)[:, None] / (n_waypoints - 1)
    values = wrap_angle(start.values[None, :] + frac * angle_diff(goal.values, start.values)[None, :])
    values[0] = start.values
    return Trajectory(values, dt)


# ----------------------------------------------------------------------
# Helpers
# ----------------------------------------------------------------------
def _diff_transpose(g: np.ndarray, n: int) -> np.ndarray:
    """Adjoint of np.diff along axis 1: maps [B, n-1, J] back to [B, n, J]."""
    out = np.zeros(g.shape[:1] + (n,) + g.shape[2:])
    out[:, 1:] += g
    out[:, :-1] -= g
    return out


def _hinge(x: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Sum of squared excursions outside [lo, hi] per batch item, and d/dx."""
    over = np.maximum(x - hi, 0.0)
    under = np.maximum(lo - x, 0.0)
    cost = np.sum(over * over + under * under, axis=tuple(range(1, x.ndim)))
    return cost, 2.0 * over - 2.0 * under


def _check_finite(terms: dict, strict: bool):
    if not strict:
        return
    for name, value in terms.items():
        if not np.all(np.isfinite(value)):
            raise NumericalError(f"cost:{name}")


def evaluate_costs(values: np.ndarray, problem: OptProblem, need_grad: bool = True, strict: bool = True):
    """
    values [B, K, J] -> (costs [B], grads [B, K, J] or None, per-term costs dict of [B]).
    With strict=False non-finite totals come back as +inf instead of raising.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 3 or values.shape[2] != problem.robot.n_joints:
        raise InputError(f"Expected trajectories [B, K, {problem.robot.n_joints}], got {values.shape}")
    n_batch, k, j = values.shape
    w = problem.weights
    lim = problem.limits
    dt = problem.dt
    grad = np.zeros_like(values) if need_grad else None

    # Goal
    goal_err = angle_diff(values[:, -1], problem.goal.values[None, :])
    c_goal = w.w_goal * np.sum(goal_err * goal_err, axis=-1)
    if need_grad:
        grad[:, -1] += 2.0 * w.w_goal * goal_err

    # Divided differences shared by smoothness and limits
    step = angle_diff(values[:, 1:], values[:, :-1])
    vel = step / dt
    acc = np.diff(vel, axis=1) / dt
    jerk = np.diff(acc, axis=1) / dt

    c_smooth = w.w_smooth * dt * np.sum(acc * acc, axis=(1, 2))
    g_acc = 2.0 * w.w_smooth * dt * acc

    c_pos, g_pos = _hinge(wrap_angle(values), lim.pos_lo, lim.pos_hi)
    c_vel, g_vel = _hinge(vel, lim.vel_lo, lim.vel_hi)
    c_acc, g_acc_lim = _hinge(acc, lim.acc_lo, lim.acc_hi)
    if k >= 4:
        c_jerk, g_jerk = _hinge(jerk, lim.jerk_lo, lim.jerk_hi)
    else:
        c_jerk, g_jerk = np.zeros(n_batch), np.zeros((n_batch, 0, j))
    c_limits = w.w_limits * (c_pos + c_vel + c_acc + c_jerk)

    if need_grad:
        g_acc = g_acc + w.w_limits * g_acc_lim
        if k >= 4:
            g_acc = g_acc + _diff_transpose(w.w_limits * g_jerk, k - 2) / dt
        g_vel_total = w.w_limits * g_vel
        if k >= 3:
            g_vel_total = g_vel_total + _diff_transpose(g_acc, k - 1) / dt
        grad += _diff_transpose(g_vel_total / dt, k)
        grad += w.w_limits * g_pos

    # Collision against the estimated world
    c_coll = np.zeros(n_batch)
    if w.w_collision > 0:
        flat = values.reshape(n_batch * k, j)
        clear, dclear = clearances_with_grad(
            joint_positions(flat, problem.robot), problem.world.discs, problem.robot, need_grad=need_grad
        )
        if clear.shape[1]:
            h = np.maximum(w.margin - clear, 0.0)
            c_coll = w.w_collision * np.sum((h * h).reshape(n_batch, -1), axis=1)
            if need_grad:
                g = -2.0 * w.w_collision * np.einsum("nc,ncj->nj", h, dclear)
                grad += g.reshape(n_batch, k, j)

    terms = {"goal": c_goal, "smooth": c_smooth, "collision": c_coll, "limits": c_limits}
    _check_finite(terms, strict)
    total = c_goal + c_smooth + c_coll + c_limits
    if need_grad:
        _check_finite({"gradient": grad}, strict)
    if not strict:
        total = np.where(np.isfinite(total), total, np.inf)
    return total, grad, terms


def total_cost(traj: Trajectory, problem: OptProblem) -> Tuple[float, np.ndarray, CostBreakdown]:
    """Scalar cost, its gradient w.r.t. every waypoint [K, J], and the per-term breakdown."""
    costs, grad, terms = evaluate_costs(traj.values[None], problem)
    breakdown = CostBreakdown(**{name: float(v[0]) for name, v in terms.items()})
    return float(costs[0]), grad[0], breakdown
