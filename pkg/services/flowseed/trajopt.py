"""
Seed refinement: a particle warm-up with time-smoothed noise and softmin averaging,
an L-BFGS refiner with Armijo backtracking, and a batched solver that runs
warm-up + refinement on many seeds with independent random streams.
"""
from __future__ import annotations

import hashlib
import time
from collections import Counter, deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Deque, List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import convolve1d

from arm import Trajectory, wrap_angle
from costs import CostBreakdown, OptProblem, evaluate_costs, total_cost
from errors import ConfigurationError, FlowSeedError, InputError, NumericalError
from settings import get_settings

NOISE_WINDOW = np.array([1.0, 2.0, 3.0, 2.0, 1.0])
NOISE_WINDOW = NOISE_WINDOW / np.linalg.norm(NOISE_WINDOW)

WARMUP_ITERATIONS = 4
WARMUP_PARTICLES = 32
WARMUP_NOISE = 0.2
WARMUP_TEMPERATURE = 0.5

LBFGS_MEMORY = 10
LBFGS_TOLERANCE = 1e-6
ARMIJO_C = 1e-4
MAX_HALVINGS = 20
CURVATURE_EPS = 1e-10


@dataclass
class SolveResult:
    trajectory: Trajectory
    cost: float
    breakdown: CostBreakdown
    iterations: int = 0
    converged: bool = False
    wall_time: float = 0.0
    accepted_costs: List[float] = field(default_factory=list)
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


# ----------------------------------------------------------------------
# Particle warm-up
# ----------------------------------------------------------------------
def _anchored(values: np.ndarray, problem: OptProblem) -> np.ndarray:
    """Copy of `values` with row 0 set to the problem start."""
    out = np.array(values, dtype=np.float64, copy=True)
    if out.shape[-1] != problem.start.n_joints:
        raise InputError(f"Seed has {out.shape[-1]} joints, the problem has {problem.start.n_joints}")
    out[0] = problem.start.values
    return out


def smoothed_noise(rng: np.random.Generator, n_particles: int, n_waypoints: int, n_joints: int, scale: float) -> np.ndarray:
    """Per-joint white noise convolved along time with a unit-norm triangular window; row 0 is zero."""
    white = rng.standard_normal((n_particles, n_waypoints, n_joints))
    eps = scale * convolve1d(white, NOISE_WINDOW, axis=1, mode="constant", cval=0.0)
    eps[:, 0, :] = 0.0
    return eps


def particle_warmup(
    seed: Trajectory,
    problem: OptProblem,
    iterations: int = WARMUP_ITERATIONS,
    particles: int = WARMUP_PARTICLES,
    noise_scale: float = WARMUP_NOISE,
    temperature: float = WARMUP_TEMPERATURE,
    rng: Optional[np.random.Generator] = None,
) -> Trajectory:
    """
    Softmin-weighted particle refinement with elitism: each iteration keeps the best of
    the current trajectory, all perturbed particles and their weighted mean, so the
    returned cost never exceeds the input cost.
    """
    if iterations < 0:
        raise ConfigurationError(f"Warm-up iterations must be >= 0, got {iterations}")
    if iterations == 0 or noise_scale == 0 or particles < 1:
        return Trajectory(_anchored(seed.values, problem), seed.dt)
    if temperature <= 0:
        raise ConfigurationError(f"Warm-up temperature must be positive, got {temperature}")
    rng = rng if rng is not None else np.random.default_rng()

    current = _anchored(seed.values, problem)
    current_cost = float(evaluate_costs(current[None], problem, need_grad=False, strict=False)[0][0])
    k, j = current.shape
    for _ in range(iterations):
        eps = smoothed_noise(rng, particles, k, j, noise_scale)
        candidates = current[None] + eps
        costs = evaluate_costs(candidates, problem, need_grad=False, strict=False)[0]

        finite = np.isfinite(costs)
        if finite.any():
            shifted = np.where(finite, costs - costs[finite].min(), np.inf)
            weights = np.exp(-shifted / temperature)
            weights /= weights.sum()
            mean = current + np.einsum("p,pkj->kj", weights, eps)
            mean_cost = float(evaluate_costs(mean[None], problem, need_grad=False, strict=False)[0][0])
        else:
            mean, mean_cost = current, np.inf

        best = int(np.argmin(costs))
        if mean_cost < current_cost and mean_cost <= costs[best]:
            current, current_cost = mean, mean_cost
        elif costs[best] < current_cost:
            current, current_cost = candidates[best].copy(), float(costs[best])

    return Trajectory(_anchored(current, problem), seed.dt)


# ----------------------------------------------------------------------
# L-BFGS
# ----------------------------------------------------------------------
def two_loop_direction(grad: np.ndarray, pairs: Sequence[Tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """-H g by the two-loop recursion; H0 = (s.y / y.y) I from the newest pair."""
    q = grad.copy()
    alphas = []
    for s, y in reversed(pairs):
        rho = 1.0 / float(y @ s)
        a = rho * float(s @ q)
        alphas.append((rho, a))
        q -= a * y
    s_last, y_last = pairs[-1]
    r = q * (float(s_last @ y_last) / float(y_last @ y_last))
    for (s, y), (rho, a) in zip(pairs, reversed(alphas)):
        b = rho * float(y @ r)
        r += s * (a - b)
    return -r


def lbfgs_refine(
    seed: Trajectory,
    problem: OptProblem,
    max_iterations: int = 100,
    memory: int = LBFGS_MEMORY,
    tolerance: float = LBFGS_TOLERANCE,
) -> SolveResult:
    """
    Minimize total_cost over rows 1..K-1 (row 0 stays the start). Every accepted iterate
    strictly lowers the cost; a non-finite cost aborts with the best iterate so far.
    """
    if memory < 1:
        raise ConfigurationError(f"L-BFGS memory must be >= 1, got {memory}")
    t0 = time.perf_counter()
    values = seed.values.copy()
    row0 = problem.start.values.copy()
    k, j = values.shape

    def evaluate(x: np.ndarray):
        full = np.concatenate([row0[None], x.reshape(k - 1, j)], axis=0)
        f, g, _ = total_cost(Trajectory(full, seed.dt), problem)
        return f, g[1:].ravel()

    x = values[1:].ravel()
    accepted: List[float] = []
    iterations = 0
    converged = False
    try:
        f, g = evaluate(x)
    except NumericalError:
        return _result(seed.values, problem, seed.dt, 0, False, t0, accepted)
    accepted.append(f)
    pairs: Deque[Tuple[np.ndarray, np.ndarray]] = deque(maxlen=memory)

    while True:
        gnorm = float(np.linalg.norm(g))
        if gnorm < tolerance:
            converged = True
            break
        if iterations >= max_iterations:
            break

        if pairs:
            d = two_loop_direction(g, pairs)
        else:
            d = -g * min(1.0, 1.0 / gnorm)
        slope = float(g @ d)
        if not slope < 0:
            pairs.clear()
            d = -g * min(1.0, 1.0 / gnorm)
            slope = float(g @ d)

        step = 1.0
        accepted_step = False
        aborted = False
        for _ in range(MAX_HALVINGS + 1):
            x_new = x + step * d
            try:
                f_new, g_new = evaluate(x_new)
            except NumericalError:
                aborted = True
                break
            if f_new <= f + ARMIJO_C * step * slope and f_new < f:
                accepted_step = True
                break
            step *= 0.5
        if aborted or not accepted_step:
            break

        s_vec = x_new - x
        y_vec = g_new - g
        if float(s_vec @ y_vec) > CURVATURE_EPS:
            pairs.append((s_vec, y_vec))
        x, f, g = x_new, f_new, g_new
        accepted.append(f)
        iterations += 1

    full = np.concatenate([row0[None], x.reshape(k - 1, j)], axis=0)
    return _result(full, problem, seed.dt, iterations, converged, t0, accepted)


def _result(values, problem, dt, iterations, converged, t0, accepted) -> SolveResult:
    out = _anchored(wrap_angle(values), problem)
    traj = Trajectory(out, dt)
    try:
        cost, _, breakdown = total_cost(traj, problem)
    except NumericalError:
        cost, breakdown = float("inf"), CostBreakdown()
    return SolveResult(
        trajectory=traj,
        cost=cost,
        breakdown=breakdown,
        iterations=iterations,
        converged=converged,
        wall_time=time.perf_counter() - t0,
        accepted_costs=accepted,
    )


# ----------------------------------------------------------------------
# Batched solving
# ----------------------------------------------------------------------
def seed_stream(master_seed: int, seed: Trajectory, occurrence: int) -> np.random.Generator:
    """
    Random stream for one seed, keyed by the seed's contents and how many identical seeds
    precede it, so results follow their seeds under any reordering of the batch.
    """
    digest = hashlib.sha256(np.ascontiguousarray(seed.values, dtype="<f8").tobytes()).digest()
    return np.random.default_rng([master_seed, int.from_bytes(digest[:8], "little"), occurrence])


def refine_seed(
    seed: Trajectory,
    problem: OptProblem,
    budget: int,
    rng: np.random.Generator,
) -> SolveResult:
    """Fixed warm-up followed by `budget` L-BFGS iterations."""
    t0 = time.perf_counter()
    warm = particle_warmup(seed, problem, rng=rng)
    result = lbfgs_refine(warm, problem, max_iterations=budget)
    result.wall_time = time.perf_counter() - t0
    return result


def solve_batch(
    seeds: Sequence[Trajectory],
    problem: OptProblem,
    budget: int,
    rng: Optional[np.random.Generator] = None,
    master_seed: Optional[int] = None,
    max_workers: Optional[int] = None,
) -> List[SolveResult]:
    """
    Refine every seed independently. Output order matches input order and results do not
    depend on the worker count; a failing seed reports its error in its own slot.
    """
    if not seeds:
        raise ConfigurationError("solve_batch needs at least one seed")
    if budget < 0:
        raise ConfigurationError(f"Iteration budget must be >= 0, got {budget}")
    if master_seed is None:
        rng = rng if rng is not None else np.random.default_rng()
        master_seed = int(rng.integers(0, 2**63 - 1))
    workers = max_workers or get_settings().MAX_WORKERS

    seen: Counter = Counter()
    streams = []
    for seed in seeds:
        key = seed.values.tobytes()
        streams.append(seed_stream(master_seed, seed, seen[key]))
        seen[key] += 1

    def run(idx: int) -> SolveResult:
        seed = seeds[idx]
        try:
            return refine_seed(seed, problem, budget, streams[idx])
        except FlowSeedError as e:
            failed = seed.copy()
            if failed.n_joints == problem.start.n_joints:
                failed.values[0] = problem.start.values
            return SolveResult(
                trajectory=failed,
                cost=float("inf"),
                breakdown=CostBreakdown(),
                error=f"{type(e).__name__}: {e}",
            )

    if workers <= 1 or len(seeds) == 1:
        return [run(i) for i in range(len(seeds))]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, range(len(seeds))))
