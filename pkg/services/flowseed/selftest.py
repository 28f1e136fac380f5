"""
In-process oracle checks, runnable without pytest (`flowseed selftest`).
"""
from __future__ import annotations

import math
import traceback
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from arm import JointConfig, RobotSpec, joint_positions, segment_circle_distance
from autodiff import Tape
from bench import BenchRecord, aggregate
from costs import CostWeights, OptProblem, linear_seed, total_cost
from expert import bspline_resample
from flowmatch import euler_integrate
from fm_model import ModelConfig, VelocityFieldModel, encode_pointcloud
from logging_utils import Stage, StructuredLogHandler
from scene import EstimatedWorld, PointCloud
from trajopt import lbfgs_refine, particle_warmup


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def _check_fk():
    robot = RobotSpec()
    rng = np.random.default_rng(0)
    for _ in range(100):
        q = rng.uniform(-math.pi, math.pi, 3)
        tip = complex(*robot.base) + sum(
            l * np.exp(1j * np.sum(q[: i + 1])) for i, l in enumerate(robot.link_lengths)
        )
        got = joint_positions(q, robot)[-1]
        assert abs(complex(got[0], got[1]) - tip) < 1e-9, "tip position disagrees with complex-exponential FK"


def _check_segment_distance():
    rng = np.random.default_rng(1)
    u = np.linspace(0.0, 1.0, 20001)
    for _ in range(100):
        a, b, c = rng.uniform(-1, 1, (3, 2))
        r = rng.uniform(0.01, 0.3)
        dense = np.min(np.linalg.norm(a + u[:, None] * (b - a) - c, axis=-1)) - r
        assert abs(segment_circle_distance((a, b), c, r) - dense) < 1e-4


def _random_problem(rng) -> OptProblem:
    start = JointConfig(rng.uniform(-2, 2, 3))
    goal = JointConfig(rng.uniform(-2, 2, 3))
    discs = np.column_stack([rng.uniform(-0.6, 0.6, (3, 2)), rng.uniform(0.05, 0.15, 3)])
    return OptProblem(start, goal, EstimatedWorld(discs), n_waypoints=8)


def _check_cost_gradient():
    rng = np.random.default_rng(2)
    for _ in range(5):
        problem = _random_problem(rng)
        seed = linear_seed(problem.start, problem.goal, problem.n_waypoints)
        seed.values[1:] += rng.normal(0, 0.1, seed.values[1:].shape)
        _, grad, _ = total_cost(seed, problem)
        fd = np.zeros_like(grad)
        h = 1e-6
        for idx in np.ndindex(*seed.values.shape):
            if idx[0] == 0:
                continue
            plus, minus = seed.copy(), seed.copy()
            plus.values[idx] += h
            minus.values[idx] -= h
            fd[idx] = (total_cost(plus, problem)[0] - total_cost(minus, problem)[0]) / (2 * h)
        err = np.linalg.norm(grad[1:] - fd[1:]) / max(np.linalg.norm(fd[1:]), 1e-12)
        assert err < 1e-4, f"cost gradient relative error {err:.2e}"


def _check_matmul_gradient():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    tape = Tape()
    ta, tb = tape.variable(a), tape.variable(b)
    tape.forward(lambda t, x, y: t.sum(t.matmul(x, y)), [ta, tb])
    tape.backward()
    a32 = ta.data.astype(np.float64)
    b32 = tb.data.astype(np.float64)
    assert np.allclose(tape.grad(ta), np.ones((3, 2)) @ b32.T, atol=1e-6)
    assert np.allclose(tape.grad(tb), a32.T @ np.ones((3, 2)), atol=1e-6)


def _check_optimizers():
    rng = np.random.default_rng(4)
    problem = _random_problem(rng)
    problem = OptProblem(problem.start, problem.goal, EstimatedWorld(), n_waypoints=8,
                         weights=CostWeights(w_collision=0.0, w_limits=0.0))
    seed = linear_seed(problem.start, problem.goal, problem.n_waypoints)
    seed.values[1:] += rng.normal(0, 0.2, seed.values[1:].shape)
    c0 = total_cost(seed, problem)[0]
    warm = particle_warmup(seed, problem, iterations=8, rng=rng)
    assert total_cost(warm, problem)[0] <= c0, "warm-up increased the cost"
    result = lbfgs_refine(seed, problem, max_iterations=50)
    assert result.cost < 1e-6, f"convex problem ended at cost {result.cost:.3e}"
    assert all(b < a for a, b in zip(result.accepted_costs, result.accepted_costs[1:]))


def _check_bspline_segment():
    start, goal = JointConfig([0.1, -0.4, 1.0]), JointConfig([1.2, 0.3, -0.5])
    spline = bspline_resample(np.stack([start.values, goal.values]), 16)
    assert np.allclose(spline.values, linear_seed(start, goal, 16).values, atol=1e-12)


def _check_euler_exactness():
    c = np.full((4, 3), 0.7)
    x0 = np.random.default_rng(5).standard_normal((4, 3))
    out = euler_integrate(lambda x, t: c - x0, x0, 1)
    assert np.allclose(out, c, atol=1e-12)


def _check_encoder_invariance():
    rng = np.random.default_rng(6)
    model = VelocityFieldModel.initialize(ModelConfig.tiny(), rng)
    pts = rng.uniform(-1, 1, (32, 2))
    labels = rng.integers(0, 2, 32)
    perm = rng.permutation(32)
    a = encode_pointcloud(model, PointCloud(pts, labels))
    b = encode_pointcloud(model, PointCloud(pts[perm], labels[perm]))
    assert np.array_equal(a, b), "point encoder is not permutation invariant"


def _check_aggregate():
    recs = [
        BenchRecord(problem_id=f"p{i}", split="val-seen", family="f", strategy="linear", budget=0,
                    success=s, seed_feasible=[s], init_time=0.0, opt_time=0.0, best_cost=0.0)
        for i, s in enumerate([True, False, True, True])
    ]
    rows = aggregate(recs)
    assert rows[0]["success_rate_pct"] == "75.0" and rows[0]["n_problems"] == "4"


CHECKS: List[tuple] = [
    ("forward kinematics", _check_fk),
    ("segment-circle distance", _check_segment_distance),
    ("cost gradient", _check_cost_gradient),
    ("tape matmul gradient", _check_matmul_gradient),
    ("optimizer guarantees", _check_optimizers),
    ("b-spline of a segment", _check_bspline_segment),
    ("euler exactness", _check_euler_exactness),
    ("point encoder invariance", _check_encoder_invariance),
    ("aggregate arithmetic", _check_aggregate),
]


def run_selftest(logger: Optional[StructuredLogHandler] = None) -> List[CheckResult]:
    results = []
    for i, (name, check) in enumerate(CHECKS):
        try:
            check()
            results.append(CheckResult(name, True))
        except Exception as e:  # every failure is reported, none aborts the suite
            detail = f"{type(e).__name__}: {e}"
            results.append(CheckResult(name, False, detail))
            if logger:
                logger.debug(Stage.SELFTEST, traceback.format_exc())
        if logger:
            r = results[-1]
            logger.info(
                Stage.SELFTEST,
                f"{'PASS' if r.passed else 'FAIL'} {name}" + (f": {r.detail}" if r.detail else ""),
                progress=100.0 * (i + 1) / len(CHECKS),
            )
    return results
