import math

import numpy as np
import pytest

from arm import JointConfig, Trajectory, angle_diff, config_clearances, joint_positions
from costs import CostWeights, OptProblem, evaluate_costs, linear_seed, total_cost
from errors import ConfigurationError
from scene import EstimatedWorld
from trajopt import (
    lbfgs_refine,
    particle_warmup,
    seed_stream,
    smoothed_noise,
    solve_batch,
    two_loop_direction,
)


def random_problem(rng, n_discs=3, n_waypoints=8, **kwargs) -> OptProblem:
    start = JointConfig(rng.uniform(-2, 2, 3))
    goal = JointConfig(rng.uniform(-2, 2, 3))
    discs = np.column_stack([rng.uniform(-0.6, 0.6, (n_discs, 2)), rng.uniform(0.05, 0.15, n_discs)])
    return OptProblem(start, goal, EstimatedWorld(discs), n_waypoints=n_waypoints, **kwargs)


def perturbed_seed(problem, rng, scale=0.1) -> Trajectory:
    seed = linear_seed(problem.start, problem.goal, problem.n_waypoints, problem.dt)
    seed.values[1:] += rng.normal(0, scale, seed.values[1:].shape)
    return seed


def finite_difference(traj, problem, h=1e-6):
    fd = np.zeros_like(traj.values)
    for idx in np.ndindex(*traj.values.shape):
        plus, minus = traj.copy(), traj.copy()
        plus.values[idx] += h
        minus.values[idx] -= h
        fd[idx] = (total_cost(plus, problem)[0] - total_cost(minus, problem)[0]) / (2 * h)
    return fd


class TestCosts:
    def test_linear_seed_endpoints(self, start_goal):
        start, goal = start_goal
        seed = linear_seed(start, goal, 10)
        assert np.array_equal(seed.values[0], start.values)
        assert np.allclose(seed.values[-1], goal.values)

    def test_linear_seed_crosses_the_seam(self):
        seed = linear_seed(JointConfig([3.0, 0, 0]), JointConfig([-3.0, 0, 0]), 5)
        # Shortest way passes through pi, not through zero
        assert np.all(np.abs(seed.values[:, 0]) >= 3.0 - 1e-12)

    def test_straight_seed_in_empty_world_costs_nothing(self, start_goal):
        start, goal = start_goal
        problem = OptProblem(start, goal, EstimatedWorld())
        cost, grad, breakdown = total_cost(linear_seed(start, goal, 32), problem)
        assert cost == pytest.approx(0.0, abs=1e-18)
        assert np.allclose(grad, 0.0, atol=1e-9)
        assert breakdown.total == pytest.approx(cost)

    def test_gradient_matches_finite_differences(self, rng):
        for _ in range(20):
            problem = random_problem(rng)
            traj = perturbed_seed(problem, rng)
            _, grad, _ = total_cost(traj, problem)
            fd = finite_difference(traj, problem)
            err = np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-12)
            assert err < 1e-4

    def test_limit_terms_have_correct_gradient(self, rng):
        problem = random_problem(rng, n_discs=0)
        traj = perturbed_seed(problem, rng, scale=0.6)
        _, grad, breakdown = total_cost(traj, problem)
        assert breakdown.limits > 0
        fd = finite_difference(traj, problem)
        assert np.linalg.norm(grad - fd) / np.linalg.norm(fd) < 1e-4

    def test_short_trajectory_has_no_jerk_term(self, start_goal):
        start, goal = start_goal
        problem = OptProblem(start, goal, EstimatedWorld(), n_waypoints=3)
        values = np.stack([start.values, start.values + 0.5, goal.values])
        cost, _, _ = total_cost(Trajectory(values), problem)
        assert math.isfinite(cost)

    def test_batch_evaluation_matches_single(self, rng):
        problem = random_problem(rng)
        batch = np.stack([perturbed_seed(problem, rng).values for _ in range(4)])
        costs, grads, _ = evaluate_costs(batch, problem)
        for b in range(4):
            c, g, _ = total_cost(Trajectory(batch[b]), problem)
            assert costs[b] == pytest.approx(c)
            assert np.allclose(grads[b], g)

    def test_negative_weight_is_rejected(self):
        with pytest.raises(ConfigurationError):
            CostWeights(w_goal=-1.0)


class TestWarmup:
    def test_noise_is_smooth_and_pins_the_start(self, rng):
        eps = smoothed_noise(rng, 64, 32, 3, 0.2)
        assert eps.shape == (64, 32, 3)
        assert np.all(eps[:, 0] == 0)
        # Neighbouring samples of smoothed noise are positively correlated
        a, b = eps[:, 5:-5].reshape(-1), eps[:, 6:-4].reshape(-1)
        assert np.corrcoef(a, b)[0, 1] > 0.5

    def test_warmup_never_increases_cost(self, rng):
        for _ in range(10):
            problem = random_problem(rng)
            seed = perturbed_seed(problem, rng, 0.3)
            before = total_cost(seed, problem)[0]
            warm = particle_warmup(seed, problem, rng=rng)
            assert total_cost(warm, problem)[0] <= before
            assert np.array_equal(warm.values[0], seed.values[0])

    def test_warmup_strictly_improves_rough_seeds(self, rng):
        weights = CostWeights(w_collision=0.0, w_limits=0.0)
        improved = 0
        for _ in range(100):
            problem = random_problem(rng, n_discs=0, weights=weights)
            seed = perturbed_seed(problem, rng, 0.1)
            warm = particle_warmup(seed, problem, iterations=8, rng=rng)
            improved += total_cost(warm, problem)[0] < total_cost(seed, problem)[0]
        assert improved >= 95

    @pytest.mark.parametrize("kwargs", [{"iterations": 0}, {"noise_scale": 0.0}])
    def test_disabled_warmup_is_identity(self, rng, kwargs):
        problem = random_problem(rng)
        seed = perturbed_seed(problem, rng)
        assert np.array_equal(particle_warmup(seed, problem, rng=rng, **kwargs).values, seed.values)


class TestLBFGS:
    def test_two_loop_on_isotropic_quadratic(self, rng):
        c = 3.0
        s = rng.normal(size=5)
        g = rng.normal(size=5)
        d = two_loop_direction(g, [(s, c * s)])
        assert np.allclose(d, -g / c)

    def test_convex_problem_converges(self, rng):
        problem = random_problem(rng, n_discs=0, weights=CostWeights(w_collision=0.0, w_limits=0.0))
        seed = perturbed_seed(problem, rng, 0.2)
        result = lbfgs_refine(seed, problem, max_iterations=50)
        assert result.cost < 1e-8

    def test_accepted_costs_strictly_decrease(self, rng):
        for _ in range(5):
            problem = random_problem(rng, n_waypoints=12)
            result = lbfgs_refine(perturbed_seed(problem, rng, 0.3), problem, max_iterations=30)
            costs = result.accepted_costs
            assert all(b < a for a, b in zip(costs, costs[1:]))
            assert result.cost <= costs[0]
            assert result.iterations == len(costs) - 1

    def test_zero_budget_returns_the_seed(self, rng):
        problem = random_problem(rng)
        seed = perturbed_seed(problem, rng)
        result = lbfgs_refine(seed, problem, max_iterations=0)
        assert result.iterations == 0
        assert np.allclose(angle_diff(result.trajectory.values, seed.values), 0.0)

    def test_refinement_pushes_arm_out_of_a_disc(self, start_goal):
        start, goal = start_goal
        seed = linear_seed(start, goal, 16)
        elbow = joint_positions(seed.values[8], OptProblem(start, goal, EstimatedWorld()).robot)[2]
        world = EstimatedWorld(np.array([[elbow[0], elbow[1], 0.05]]))
        problem = OptProblem(start, goal, world, n_waypoints=16)
        result = lbfgs_refine(seed, problem, max_iterations=100)
        assert result.breakdown.collision < total_cost(seed, problem)[2].collision
        assert config_clearances(result.trajectory.values, world.discs, problem.robot).min() > -0.05


class TestSolveBatch:
    def test_results_follow_their_seeds(self, rng):
        problem = random_problem(rng)
        seeds = [perturbed_seed(problem, rng) for _ in range(4)]
        forward = solve_batch(seeds, problem, 5, master_seed=11, max_workers=1)
        backward = solve_batch(seeds[::-1], problem, 5, master_seed=11, max_workers=3)
        for a, b in zip(forward, backward[::-1]):
            assert np.array_equal(a.trajectory.values, b.trajectory.values)
            assert a.cost == b.cost

    def test_identical_seeds_get_distinct_streams(self, rng):
        problem = random_problem(rng)
        seed = perturbed_seed(problem, rng, 0.3)
        a = seed_stream(5, seed, 0).standard_normal(4)
        b = seed_stream(5, seed, 1).standard_normal(4)
        assert not np.array_equal(a, b)

    def test_failing_seed_reports_in_its_slot(self, rng):
        problem = random_problem(rng)
        good = perturbed_seed(problem, rng)
        bad = Trajectory(np.zeros((8, 2)))
        results = solve_batch([good, bad, good], problem, 3, master_seed=1, max_workers=2)
        assert results[0].ok and results[2].ok
        assert not results[1].ok and "InputError" in results[1].error
        assert results[1].cost == math.inf

    def test_empty_batch_and_negative_budget_are_rejected(self, rng):
        problem = random_problem(rng)
        with pytest.raises(ConfigurationError):
            solve_batch([], problem, 5)
        with pytest.raises(ConfigurationError):
            solve_batch([perturbed_seed(problem, rng)], problem, -1)

    def test_row_zero_is_the_start_even_for_an_offset_seed(self, rng):
        problem = random_problem(rng)
        seed = perturbed_seed(problem, rng)
        seed.values[0] += 0.1
        results = [lbfgs_refine(seed, problem, max_iterations=5)]
        results += solve_batch([seed, seed], problem, 3, master_seed=2, max_workers=1)
        for result in results:
            assert np.array_equal(result.trajectory.values[0], problem.start.values)
        warm = particle_warmup(seed, problem, rng=rng)
        assert np.array_equal(warm.values[0], problem.start.values)
