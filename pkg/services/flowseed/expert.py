"""
Expert trajectories for the dataset: RRT-Connect in the joint-limit box, clamped
B-spline resampling, then refinement against the ground-truth discs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from scipy.interpolate import BSpline

from arm import JointConfig, Limits, RobotSpec, Trajectory, check_feasibility, config_clearances, wrap_angle
from costs import CostWeights, OptProblem
from errors import ExpertFailure, InputError
from scene import EstimatedWorld, Scene
from trajopt import solve_batch

RRT_STEP = 0.1
RRT_EDGE_RESOLUTION = 0.05
RRT_MAX_NODES = 20000
EXPERT_BUDGET = 100


# ----------------------------------------------------------------------
# RRT-Connect
# ----------------------------------------------------------------------
class _Tree:
    def __init__(self, root: np.ndarray, capacity: int):
        self.nodes = np.zeros((capacity, root.shape[0]))
        self.parent = np.full(capacity, -1, dtype=np.int64)
        self.nodes[0] = root
        self.size = 1

    def nearest(self, q: np.ndarray) -> int:
        d = np.sum((self.nodes[: self.size] - q) ** 2, axis=-1)
        return int(np.argmin(d))

    def add(self, q: np.ndarray, parent: int) -> int:
        idx = self.size
        self.nodes[idx] = q
        self.parent[idx] = parent
        self.size += 1
        return idx

    def path_to_root(self, idx: int) -> List[np.ndarray]:
        out = []
        while idx >= 0:
            out.append(self.nodes[idx].copy())
            idx = int(self.parent[idx])
        return out


def edge_is_free(a: np.ndarray, b: np.ndarray, discs: np.ndarray, robot: RobotSpec, resolution: float = RRT_EDGE_RESOLUTION) -> bool:
    """Straight joint-space edge checked at the given resolution, endpoint b included."""
    n = max(1, int(math.ceil(np.linalg.norm(b - a) / resolution)))
    fracs = np.arange(1, n + 1, dtype=np.float64)[:, None] / n
    qs = a[None, :] + fracs * (b - a)[None, :]
    return bool(np.all(config_clearances(qs, discs, robot) > 0))


def _steer(q_from: np.ndarray, q_to: np.ndarray, step: float) -> np.ndarray:
    d = q_to - q_from
    dist = float(np.linalg.norm(d))
    if dist <= step:
        return q_to.copy()
    return q_from + d * (step / dist)


def rrt_connect(
    start: JointConfig,
    goal: JointConfig,
    scene: Scene,
    robot: RobotSpec,
    rng: np.random.Generator,
    limits: Optional[Limits] = None,
    step_size: float = RRT_STEP,
    max_nodes: int = RRT_MAX_NODES,
) -> Optional[List[np.ndarray]]:
    """
    Bidirectional RRT in the position-limit box (no wrap-around). Returns the waypoint
    list start..goal, or None when `max_nodes` is exhausted.
    """
    limits = limits or Limits.default(robot.n_joints)
    discs = scene.discs
    q_start, q_goal = start.values.copy(), goal.values.copy()
    if not np.all(config_clearances(np.stack([q_start, q_goal]), discs, robot) > 0):
        raise InputError("RRT endpoints must be collision-free")
    if np.array_equal(q_start, q_goal):
        return [q_start]
    if edge_is_free(q_start, q_goal, discs, robot):
        return [q_start, q_goal]

    tree_a = _Tree(q_start, max_nodes)
    tree_b = _Tree(q_goal, max_nodes)
    a_is_start = True

    while tree_a.size + tree_b.size < max_nodes:
        q_rand = rng.uniform(limits.pos_lo, limits.pos_hi)
        near = tree_a.nearest(q_rand)
        q_new = _steer(tree_a.nodes[near], q_rand, step_size)
        if edge_is_free(tree_a.nodes[near], q_new, discs, robot):
            new_idx = tree_a.add(q_new, near)

            # Greedy connect of the other tree toward q_new
            b_idx = tree_b.nearest(q_new)
            while tree_a.size + tree_b.size < max_nodes:
                q_next = _steer(tree_b.nodes[b_idx], q_new, step_size)
                if not edge_is_free(tree_b.nodes[b_idx], q_next, discs, robot):
                    break
                b_idx = tree_b.add(q_next, b_idx)
                if np.array_equal(q_next, q_new):
                    path_a = tree_a.path_to_root(new_idx)[::-1]
                    path_b = tree_b.path_to_root(b_idx)[1:]
                    path = path_a + path_b
                    return path if a_is_start else path[::-1]

        tree_a, tree_b = tree_b, tree_a
        a_is_start = not a_is_start
    return None


# ----------------------------------------------------------------------
# B-spline resampling
# ----------------------------------------------------------------------
def clamped_knots(n_ctrl: int, degree: int) -> np.ndarray:
    interior = np.linspace(0.0, 1.0, n_ctrl - degree + 1)[1:-1]
    return np.concatenate([np.zeros(degree + 1), interior, np.ones(degree + 1)])


def bspline_resample(waypoints, n_waypoints: int, dt: float = 0.1) -> Trajectory:
    """
    Clamped B-spline with the waypoints as control points (cubic when there are at least
    four), evaluated at `n_waypoints` uniform parameters.
    """
    ctrl = np.asarray(waypoints, dtype=np.float64)
    if ctrl.ndim != 2 or ctrl.shape[0] < 1:
        raise InputError(f"Expected a [n, J] waypoint array, got {ctrl.shape}")
    if ctrl.shape[0] == 1:
        return Trajectory(np.repeat(ctrl, n_waypoints, axis=0), dt)
    degree = min(3, ctrl.shape[0] - 1)
    spline = BSpline(clamped_knots(ctrl.shape[0], degree), ctrl, degree)
    values = spline(np.linspace(0.0, 1.0, n_waypoints))
    values[0] = ctrl[0]
    return Trajectory(wrap_angle(values), dt)


# ----------------------------------------------------------------------
# Expert
# ----------------------------------------------------------------------
@dataclass
class ExpertConfig:
    n_waypoints: int = 32
    dt: float = 0.1
    budget: int = EXPERT_BUDGET
    goal_tol: float = 0.1
    substeps: int = 4


def make_expert(
    scene: Scene,
    start: JointConfig,
    goal: JointConfig,
    robot: RobotSpec,
    rng: np.random.Generator,
    weights: Optional[CostWeights] = None,
    limits: Optional[Limits] = None,
    config: Optional[ExpertConfig] = None,
) -> Trajectory:
    """RRT-Connect -> B-spline -> privileged refinement on ground truth -> feasibility gate."""
    config = config or ExpertConfig()
    limits = limits or Limits.default(robot.n_joints)
    path = rrt_connect(start, goal, scene, robot, rng, limits=limits)
    if path is None:
        raise ExpertFailure("RRT-Connect exhausted its node budget")
    seed = bspline_resample(path, config.n_waypoints, config.dt)
    seed.values[0] = start.values

    problem = OptProblem(
        start=start,
        goal=goal,
        world=EstimatedWorld(scene.discs),
        robot=robot,
        limits=limits,
        weights=weights or CostWeights(),
        n_waypoints=config.n_waypoints,
        dt=config.dt,
    )
    result = solve_batch([seed], problem, config.budget, rng=rng, max_workers=1)[0]
    if result.error:
        raise ExpertFailure(f"Refinement failed: {result.error}")
    report = check_feasibility(
        result.trajectory, scene.discs, limits, goal, robot,
        goal_tol=config.goal_tol, substeps=config.substeps,
    )
    if not report.feasible:
        raise ExpertFailure(
            f"Refined expert infeasible (goal={report.reached_goal}, "
            f"collision_free={report.collision_free}, limits={report.within_limits})"
        )
    return result.trajectory
