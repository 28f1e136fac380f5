"""
Benchmark harness: seed strategies, per-problem evaluation across iteration budgets,
and aggregation into success-rate / timing tables.
"""
from __future__ import annotations

import concurrent.futures
import csv
import time
import zlib
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import tqdm
from pydantic import BaseModel

from arm import Limits, RobotSpec, Trajectory, check_feasibility
from costs import linear_seed, total_cost
from dataset import DatasetRecord
from errors import ConfigurationError, InputError, NumericalError
from flowmatch import sample_seeds
from fm_model import VelocityFieldModel
from logging_utils import Stage, StructuredLogHandler
from settings import get_settings
from trajopt import solve_batch

DEFAULT_BUDGETS = (0, 5, 25, 100)
CSV_COLUMNS = ["split", "strategy", "budget", "n_problems", "success_rate_pct", "mean_init_s", "mean_opt_s"]


@dataclass(frozen=True)
class Strategy:
    name: str
    source: str  # linear | linear-batch | fm | learned
    n_seeds: int = 1
    fm_steps: int = 0

    def __post_init__(self):
        if self.source not in ("linear", "linear-batch", "fm", "learned"):
            raise ConfigurationError(f"Unknown seed source: {self.source}")
        if self.source == "linear" and self.n_seeds != 1:
            raise ConfigurationError("linear strategy uses exactly one seed")
        if self.n_seeds < 1:
            raise ConfigurationError("Strategies need at least one seed")
        if self.source == "fm" and self.fm_steps not in (1, 2):
            raise ConfigurationError(f"fm strategies integrate in 1 or 2 steps, got {self.fm_steps}")

    @property
    def needs_model(self) -> bool:
        return self.source == "fm"


def make_strategy(name: str, n_seeds: Optional[int] = None) -> Strategy:
    n = n_seeds or get_settings().N_SEEDS
    if name == "linear":
        return Strategy("linear", "linear", 1)
    if name == "linear-batch":
        return Strategy("linear-batch", "linear-batch", n)
    if name == "fm-1step":
        return Strategy("fm-1step", "fm", n, fm_steps=1)
    if name == "fm-2step":
        return Strategy("fm-2step", "fm", n, fm_steps=2)
    if name == "transformer":
        raise ConfigurationError("The deterministic learned initializer is not available in this build")
    raise ConfigurationError(f"Unknown strategy: {name}")


STRATEGY_NAMES = ("linear", "linear-batch", "fm-1step", "fm-2step")


class BenchRecord(BaseModel):
    problem_id: str
    split: str
    family: str
    strategy: str
    budget: int
    success: bool
    seed_feasible: List[bool]
    init_time: float
    opt_time: float
    best_cost: float


# ----------------------------------------------------------------------
# Evaluation
# ----------------------------------------------------------------------
def make_seeds(
    record: DatasetRecord,
    strategy: Strategy,
    rng: np.random.Generator,
    model: Optional[VelocityFieldModel] = None,
) -> List[Trajectory]:
    start, goal = record.start_config(), record.goal_config()
    if strategy.source == "linear":
        return [linear_seed(start, goal, record.n_waypoints, record.dt)]
    if strategy.source == "linear-batch":
        base = linear_seed(start, goal, record.n_waypoints, record.dt)
        return [base.copy() for _ in range(strategy.n_seeds)]
    if strategy.source == "fm":
        return sample_seeds(model, record.condition(), strategy.n_seeds, strategy.fm_steps, rng, dt=record.dt)
    raise ConfigurationError(f"Seed source {strategy.source} has no implementation")


def _feasible(traj: Trajectory, record: DatasetRecord, robot: RobotSpec) -> bool:
    settings = get_settings()
    scene = record.scene()
    report = check_feasibility(
        traj, scene.discs, Limits.default(robot.n_joints), record.goal_config(), robot,
        goal_tol=settings.GOAL_TOL, substeps=settings.COLLISION_SUBSTEPS,
    )
    return report.feasible


def _seed_cost(traj: Trajectory, problem) -> float:
    try:
        return total_cost(traj, problem)[0]
    except NumericalError:
        return float("inf")


def run_strategy(
    record: DatasetRecord,
    strategy: Strategy,
    budgets: Sequence[int],
    rng: np.random.Generator,
    model: Optional[VelocityFieldModel] = None,
    robot: Optional[RobotSpec] = None,
    max_workers: int = 1,
) -> List[BenchRecord]:
    """
    Seeds are produced once; budget 0 scores the raw seeds, every other budget refines
    them with the same master seed. Success means any seed is feasible under ground truth.
    """
    if strategy.needs_model and model is None:
        raise ConfigurationError(f"Strategy {strategy.name} needs a model checkpoint")
    if not budgets:
        raise InputError("No iteration budgets requested")
    robot = robot or RobotSpec()
    problem = record.opt_problem(robot)

    t0 = time.perf_counter()
    seeds = make_seeds(record, strategy, rng, model)
    init_time = time.perf_counter() - t0
    master = int(rng.integers(0, 2**63 - 1))

    out = []
    for budget in budgets:
        if budget == 0:
            trajs = seeds
            costs = [_seed_cost(s, problem) for s in seeds]
            opt_time = 0.0
        else:
            t1 = time.perf_counter()
            results = solve_batch(seeds, problem, budget, master_seed=master, max_workers=max_workers)
            opt_time = time.perf_counter() - t1
            trajs = [r.trajectory for r in results]
            costs = [r.cost for r in results]
        feasible = [_feasible(t, record, robot) for t in trajs]
        out.append(
            BenchRecord(
                problem_id=record.problem_id,
                split=record.split,
                family=record.family,
                strategy=strategy.name,
                budget=int(budget),
                success=any(feasible),
                seed_feasible=feasible,
                init_time=init_time,
                opt_time=opt_time,
                best_cost=float(min(costs)),
            )
        )
    return out


def problem_stream(seed: int, problem_id: str) -> np.random.Generator:
    """
    Stream keyed by the problem id, so results do not depend on evaluation order and every
    strategy on a problem starts from the same stream.
    """
    return np.random.default_rng([seed, zlib.crc32(problem_id.encode())])


def evaluate(
    records: Sequence[DatasetRecord],
    strategies: Sequence[Strategy],
    budgets: Sequence[int],
    seed: int,
    model: Optional[VelocityFieldModel] = None,
    max_workers: Optional[int] = None,
    logger: Optional[StructuredLogHandler] = None,
) -> List[BenchRecord]:
    """Evaluate every (problem, strategy) pair; output sorted by problem, strategy, budget."""
    for s in strategies:
        if s.needs_model and model is None:
            raise ConfigurationError(f"Strategy {s.name} needs a model checkpoint")
    workers = max_workers or get_settings().MAX_WORKERS
    jobs = [(r, s) for r in records for s in strategies]

    def run(job):
        record, strategy = job
        return run_strategy(record, strategy, budgets, problem_stream(seed, record.problem_id), model)

    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as executor:
        nested = list(tqdm.tqdm(executor.map(run, jobs), total=len(jobs), desc="Evaluating", disable=logger is not None))
    results = sorted((r for group in nested for r in group), key=lambda r: (r.problem_id, r.strategy, r.budget))

    if logger:
        for row in aggregate(results):
            logger.info(
                Stage.EVAL,
                f"{row['split']} {row['strategy']} @{row['budget']}: {row['success_rate_pct']}% of {row['n_problems']}",
                details=row,
            )
    return results


# ----------------------------------------------------------------------
# Aggregation
# ----------------------------------------------------------------------
REFERENCE_ROWS = [
    {"split": "reference-seen", "strategy": "fm-2step", "budget": 0, "success_rate_pct": "46.4"},
    {"split": "reference-seen", "strategy": "fm-2step", "budget": 5, "success_rate_pct": "82.8"},
    {"split": "reference-seen", "strategy": "fm-2step", "budget": 100, "success_rate_pct": "93.5"},
    {"split": "reference-seen", "strategy": "fm-2step", "budget": 25, "mean_opt_s": "0.1765"},
    {"split": "reference-seen", "strategy": "linear-batch", "budget": 25, "success_rate_pct": "64.1"},
    {"split": "reference-seen", "strategy": "linear", "budget": 0, "success_rate_pct": "33.9"},
]


def _percent(successes: int, total: int) -> str:
    rate = Fraction(100 * successes, total)
    # Round half up at one decimal using exact arithmetic
    tenths = (rate * 10 + Fraction(1, 2)).__floor__()
    return f"{tenths // 10}.{tenths % 10}"


def _group_key(record: BenchRecord, group_by: str) -> str:
    if group_by == "split":
        return record.split
    if group_by == "family":
        return f"{record.split}/{record.family}"
    raise ConfigurationError(f"Unknown grouping: {group_by}")


def aggregate(
    records: Iterable[BenchRecord],
    group_by: str = "split",
    groups: Optional[Sequence[str]] = None,
    strategies: Optional[Sequence[str]] = None,
    budgets: Optional[Sequence[int]] = None,
    include_reference: bool = False,
) -> List[Dict[str, str]]:
    """
    One row per (group, strategy, budget). Requested combinations with no records still
    produce a row, with n_problems 0 and blank rates.
    """
    records = list(records)
    buckets: Dict[tuple, List[BenchRecord]] = {}
    for r in records:
        buckets.setdefault((_group_key(r, group_by), r.strategy, r.budget), []).append(r)

    groups = list(groups) if groups is not None else sorted({k[0] for k in buckets})
    strategies = list(strategies) if strategies is not None else sorted({k[1] for k in buckets})
    budgets = list(budgets) if budgets is not None else sorted({k[2] for k in buckets})

    rows = []
    for g in groups:
        for s in strategies:
            for b in budgets:
                bucket = buckets.get((g, s, b), [])
                n = len(bucket)
                row = {"split": g, "strategy": s, "budget": str(b), "n_problems": str(n),
                       "success_rate_pct": "", "mean_init_s": "", "mean_opt_s": ""}
                if n:
                    row["success_rate_pct"] = _percent(sum(r.success for r in bucket), n)
                    row["mean_init_s"] = f"{sum(r.init_time for r in bucket) / n:.6f}"
                    row["mean_opt_s"] = f"{sum(r.opt_time for r in bucket) / n:.6f}"
                rows.append(row)
    if include_reference:
        for ref in REFERENCE_ROWS:
            row = {c: "" for c in CSV_COLUMNS}
            row.update({k: str(v) for k, v in ref.items()})
            rows.append(row)
    return rows


def write_csv(rows: Sequence[Dict[str, str]], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({c: row.get(c, "") for c in CSV_COLUMNS})
    return path


def write_records(records: Sequence[BenchRecord], path: Path) -> Path:
    """Per-problem records as JSON lines, next to the CSV."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for r in records:
            f.write(r.model_dump_json() + "\n")
    return path
