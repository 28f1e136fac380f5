"""
Dataset generation and loading.

Each planning problem gets a ground-truth scene, a collision-free start/goal pair and a
refined expert trajectory; each camera view of it becomes one record. Records are written
as one JSON-lines file per split plus a manifest.

Stage 1: Problems (parallel, one rng stream per problem, retried with tenacity)
Stage 2: Writing (single writer, split order, temp files renamed into place)
"""
from __future__ import annotations

import concurrent.futures
import json
import math
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import tqdm
from pydantic import BaseModel, Field, ValidationError
from tenacity import Retrying, retry_if_exception_type, stop_after_attempt

from arm import JointConfig, Limits, RobotSpec, Trajectory, angle_diff, check_feasibility, config_clearances
from costs import CostWeights, OptProblem
from errors import ConfigurationError, DatasetWriteError, ExpertFailure, SchemaError
from expert import ExpertConfig, make_expert
from fm_model import ConditionBundle
from jobs import compute_file_hash
from logging_utils import Stage, StructuredLogHandler
from paths import SPLITS, DatasetPaths
from scene import CameraPose, EstimatedWorld, PointCloud, Scene, estimate_obstacles, render_single_view, sample_camera, sample_scene
from settings import get_settings

SCHEMA_VERSION = 1
SIGNIFICANT_DIGITS = 9
MIN_GOAL_DISTANCE = 1.0
ENDPOINT_TRIES = 200


def quantize(values) -> np.ndarray:
    """Round to 9 significant digits so stored values reload bit-identically."""
    arr = np.asarray(values, dtype=np.float64)
    flat = [float(f"{v:.{SIGNIFICANT_DIGITS}g}") for v in arr.reshape(-1)]
    return np.asarray(flat, dtype=np.float64).reshape(arr.shape)


# ----------------------------------------------------------------------
# Split specification
# ----------------------------------------------------------------------
class FamilySpec(BaseModel):
    name: str
    count_range: Tuple[int, int]
    radius_range: Tuple[float, float]


SEEN_FAMILIES = [
    FamilySpec(name="sparse-small", count_range=(3, 3), radius_range=(0.05, 0.08)),
    FamilySpec(name="sparse-large", count_range=(3, 3), radius_range=(0.09, 0.12)),
    FamilySpec(name="medium-small", count_range=(4, 4), radius_range=(0.05, 0.08)),
    FamilySpec(name="medium-large", count_range=(4, 4), radius_range=(0.09, 0.12)),
    FamilySpec(name="dense-small", count_range=(5, 5), radius_range=(0.05, 0.08)),
    FamilySpec(name="dense-mixed", count_range=(5, 5), radius_range=(0.05, 0.12)),
]
UNSEEN_FAMILIES = [
    FamilySpec(name="crowded-large", count_range=(6, 6), radius_range=(0.10, 0.15)),
]


class SplitSpec(BaseModel):
    """Generator parameters; stored verbatim in the manifest."""

    seen_families: List[FamilySpec] = Field(default_factory=lambda: list(SEEN_FAMILIES))
    unseen_families: List[FamilySpec] = Field(default_factory=lambda: list(UNSEEN_FAMILIES))
    counts: Dict[str, int] = Field(default_factory=lambda: {"train": 500, "val-seen": 60, "val-unseen": 60})
    cameras: Dict[str, int] = Field(default_factory=lambda: {"train": 6, "val-seen": 1, "val-unseen": 1})
    n_points: int = 128
    n_waypoints: int = 32
    dt: float = 0.1

    @classmethod
    def from_total(cls, seen_problems: int, unseen_problems: int, train_fraction: float = 0.8, **kwargs) -> "SplitSpec":
        """Split `seen_problems` into train and val-seen by `train_fraction`."""
        if not 0 < train_fraction < 1:
            raise ConfigurationError(f"train_fraction must be in (0, 1), got {train_fraction}")
        n_train = int(round(train_fraction * seen_problems))
        counts = {"train": n_train, "val-seen": seen_problems - n_train, "val-unseen": unseen_problems}
        return cls(counts=counts, **kwargs)

    def families_for(self, split: str) -> List[FamilySpec]:
        return self.unseen_families if split == "val-unseen" else self.seen_families

    def validate_regimes(self):
        """Unseen families must fall outside every seen family's count and radius ranges."""
        for split in SPLITS:
            if self.counts.get(split, 0) < 0 or self.cameras.get(split, 1) < 1:
                raise ConfigurationError(f"Invalid count/camera setting for split {split}")
        seen_counts = [c for f in self.seen_families for c in f.count_range]
        seen_radii = [r for f in self.seen_families for r in f.radius_range]
        for fam in self.unseen_families:
            outside_counts = fam.count_range[0] > max(seen_counts) or fam.count_range[1] < min(seen_counts)
            outside_radii = fam.radius_range[0] > max(seen_radii) or fam.radius_range[1] < min(seen_radii)
            if not (outside_counts or outside_radii):
                raise ConfigurationError(f"Unseen family {fam.name} overlaps the seen regime")


# ----------------------------------------------------------------------
# Record schema
# ----------------------------------------------------------------------
class DatasetRecord(BaseModel):
    record_id: str
    problem_id: str
    split: str
    family: str
    discs: List[float]
    bounds: List[float]
    camera: Dict[str, Any]
    render_seed: int
    points: List[float]
    labels: List[int]
    sentinel: bool = False
    start: List[float]
    goal: List[float]
    expert: List[float]
    n_waypoints: int
    dt: float

    def scene(self) -> Scene:
        b = self.bounds
        return Scene(np.asarray(self.discs).reshape(-1, 3), bounds=((b[0], b[1]), (b[2], b[3])))

    def camera_pose(self) -> CameraPose:
        c = self.camera
        return CameraPose(
            position=tuple(c["position"]), heading=float(c["heading"]),
            fov=float(c["fov"]), n_rays=int(c["n_rays"]),
        )

    def pointcloud(self) -> PointCloud:
        return PointCloud(np.asarray(self.points).reshape(-1, 2), np.asarray(self.labels), sentinel=self.sentinel)

    def start_config(self) -> JointConfig:
        return JointConfig(np.asarray(self.start))

    def goal_config(self) -> JointConfig:
        return JointConfig(np.asarray(self.goal))

    def expert_trajectory(self) -> Trajectory:
        return Trajectory(np.asarray(self.expert).reshape(self.n_waypoints, -1), self.dt)

    def condition(self) -> ConditionBundle:
        return ConditionBundle(self.start_config(), self.goal_config(), self.pointcloud())

    def estimated_world(self, inflation: float = 0.03) -> EstimatedWorld:
        return estimate_obstacles(self.pointcloud(), inflation=inflation)

    def opt_problem(self, robot: Optional[RobotSpec] = None, weights: Optional[CostWeights] = None) -> OptProblem:
        """The optimizer's view: estimated obstacles only."""
        robot = robot or RobotSpec()
        return OptProblem(
            start=self.start_config(),
            goal=self.goal_config(),
            world=self.estimated_world(),
            robot=robot,
            weights=weights or CostWeights(),
            n_waypoints=self.n_waypoints,
            dt=self.dt,
        )

    def to_line(self) -> str:
        return json.dumps(self.model_dump(), sort_keys=True, separators=(",", ":"))


# ----------------------------------------------------------------------
# Problem generation
# ----------------------------------------------------------------------
def _flat(values) -> List[float]:
    return [float(v) for v in np.asarray(values, dtype=np.float64).reshape(-1)]


def sample_endpoints(scene: Scene, robot: RobotSpec, rng: np.random.Generator) -> Tuple[JointConfig, JointConfig]:
    """Collision-free start and goal at least MIN_GOAL_DISTANCE apart (shortest angular L2)."""
    def free_config() -> JointConfig:
        for _ in range(ENDPOINT_TRIES):
            q = JointConfig(quantize(rng.uniform(-math.pi, math.pi, size=robot.n_joints)))
            if config_clearances(q.values[None], scene.discs, robot)[0] > 0:
                return q
        raise ExpertFailure("No collision-free configuration found")

    start = free_config()
    for _ in range(ENDPOINT_TRIES):
        goal = free_config()
        if np.linalg.norm(angle_diff(goal.values, start.values)) >= MIN_GOAL_DISTANCE:
            return start, goal
    raise ExpertFailure("No goal far enough from the start")


def _build_problem(
    split: str,
    index: int,
    family: FamilySpec,
    spec: SplitSpec,
    rng: np.random.Generator,
    robot: RobotSpec,
    weights: CostWeights,
    limits: Limits,
) -> List[DatasetRecord]:
    scene = sample_scene(rng, family.count_range, family.radius_range)
    scene = Scene(quantize(scene.discs), scene.bounds)
    start, goal = sample_endpoints(scene, robot, rng)

    settings = get_settings()
    expert_cfg = ExpertConfig(
        n_waypoints=spec.n_waypoints, dt=spec.dt,
        goal_tol=settings.GOAL_TOL, substeps=settings.COLLISION_SUBSTEPS,
    )
    expert = make_expert(scene, start, goal, robot, rng, weights=weights, limits=limits, config=expert_cfg)
    expert_values = quantize(expert.values)
    expert_values[0] = start.values
    stored = Trajectory(expert_values, spec.dt)
    report = check_feasibility(stored, scene.discs, limits, goal, robot,
                               goal_tol=settings.GOAL_TOL, substeps=settings.COLLISION_SUBSTEPS)
    if not report.feasible:
        raise ExpertFailure("Expert became infeasible after quantization")

    problem_id = f"{split}-{index:05d}"
    (x0, x1), (y0, y1) = scene.bounds
    records = []
    for view in range(spec.cameras.get(split, 1)):
        cam = sample_camera(rng)
        cam = CameraPose(position=tuple(quantize(cam.position)), heading=float(quantize(cam.heading)),
                         fov=cam.fov, n_rays=cam.n_rays)
        render_seed = int(rng.integers(0, 2**32))
        pc = render_single_view(scene, start, robot, cam, np.random.default_rng(render_seed), spec.n_points)
        records.append(
            DatasetRecord(
                record_id=f"{problem_id}-c{view}",
                problem_id=problem_id,
                split=split,
                family=family.name,
                discs=_flat(scene.discs),
                bounds=[x0, x1, y0, y1],
                camera=cam.to_dict(),
                render_seed=render_seed,
                points=_flat(quantize(pc.points)),
                labels=[int(v) for v in pc.labels],
                sentinel=pc.sentinel,
                start=_flat(start.values),
                goal=_flat(goal.values),
                expert=_flat(expert_values),
                n_waypoints=spec.n_waypoints,
                dt=spec.dt,
            )
        )
    return records


def generate_problem(
    split: str,
    index: int,
    spec: SplitSpec,
    seed: int,
    robot: Optional[RobotSpec] = None,
    weights: Optional[CostWeights] = None,
    attempts: Optional[int] = None,
) -> Optional[List[DatasetRecord]]:
    """
    Records for one problem, or None when every attempt failed. Attempt n draws from the
    stream (seed, split, index, n), so retries never reuse randomness.
    """
    robot = robot or RobotSpec()
    weights = weights or CostWeights()
    limits = Limits.default(robot.n_joints)
    families = spec.families_for(split)
    family = families[index % len(families)]
    split_idx = SPLITS.index(split)

    try:
        for attempt in Retrying(
            stop=stop_after_attempt(attempts or get_settings().EXPERT_ATTEMPTS),
            retry=retry_if_exception_type(ExpertFailure),
            reraise=True,
        ):
            with attempt:
                n = attempt.retry_state.attempt_number
                rng = np.random.default_rng([seed, split_idx, index, n])
                return _build_problem(split, index, family, spec, rng, robot, weights, limits)
    except ExpertFailure:
        return None
    return None


def generate_dataset(
    spec: SplitSpec,
    out_dir: Path,
    seed: int,
    max_workers: Optional[int] = None,
    logger: Optional[StructuredLogHandler] = None,
) -> Dict[str, object]:
    """
    Generate every split and write `<split>.jsonl` plus `manifest.json`. Output bytes
    depend only on (spec, seed).
    """
    spec.validate_regimes()
    if sum(spec.counts.get(s, 0) for s in SPLITS) <= 0:
        raise ConfigurationError("Dataset counts must be positive")
    paths = DatasetPaths(out_dir).ensure()
    workers = max_workers or get_settings().MAX_WORKERS

    generated: Dict[str, List[DatasetRecord]] = {}
    stats: Dict[str, Dict[str, int]] = {}
    for split in SPLITS:
        n = spec.counts.get(split, 0)
        if logger:
            logger.info(Stage.GEN_DATA, f"Generating {n} problems for {split}")

        def build(i: int, split=split):
            return generate_problem(split, i, spec, seed)

        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as executor:
            results = list(
                tqdm.tqdm(executor.map(build, range(n)), total=n, desc=split, disable=logger is not None)
            )
        records = [r for problem in results if problem is not None for r in problem]
        discarded = sum(1 for problem in results if problem is None)
        generated[split] = records
        stats[split] = {
            "problems_requested": n,
            "problems_written": n - discarded,
            "discarded": discarded,
            "records": len(records),
        }
        if logger:
            rate = 100.0 * discarded / n if n else 0.0
            logger.info(
                Stage.EXPERT,
                f"{split}: {n - discarded}/{n} problems kept, discard rate {rate:.1f}%",
                details=stats[split],
            )

    # Single writer: every file goes to a temp path first; nothing is swapped in until all are written
    tmp_paths = {split: paths.split_path(split).with_suffix(".jsonl.tmp") for split in SPLITS}
    manifest_tmp = paths.manifest_path.with_suffix(".json.tmp")
    try:
        for split in SPLITS:
            with open(tmp_paths[split], "w", encoding="utf-8", newline="\n") as f:
                for record in generated[split]:
                    f.write(record.to_line() + "\n")
        manifest = {
            "schema_version": SCHEMA_VERSION,
            "seed": seed,
            "spec": spec.model_dump(),
            "counts": stats,
            "files": {split: compute_file_hash(tmp_paths[split]) for split in SPLITS},
        }
        with open(manifest_tmp, "w", encoding="utf-8", newline="\n") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
        for split in SPLITS:
            os.replace(tmp_paths[split], paths.split_path(split))
        os.replace(manifest_tmp, paths.manifest_path)
    except OSError as e:
        raise DatasetWriteError(f"Failed to write dataset to {paths.root}: {e}") from e
    finally:
        for tmp in [*tmp_paths.values(), manifest_tmp]:
            if tmp.exists():
                tmp.unlink()

    if logger:
        logger.info(Stage.GEN_DATA, "Dataset written", progress=100.0, details={"root": str(paths.root)})
    return manifest


# ----------------------------------------------------------------------
# Loading
# ----------------------------------------------------------------------
def load_manifest(root: Path) -> dict:
    paths = DatasetPaths(root)
    if not paths.manifest_path.exists():
        raise ConfigurationError(f"Dataset manifest not found: {paths.manifest_path}")
    manifest = json.loads(paths.manifest_path.read_text(encoding="utf-8"))
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise SchemaError(
            f"Dataset schema version {manifest.get('schema_version')} != supported {SCHEMA_VERSION}"
        )
    return manifest


def validate_record(record: DatasetRecord, robot: Optional[RobotSpec] = None) -> None:
    """Re-check the stored expert against ground truth and re-render the stored view."""
    robot = robot or RobotSpec()
    settings = get_settings()
    scene = record.scene()
    start = record.start_config()
    report = check_feasibility(
        record.expert_trajectory(), scene.discs, Limits.default(robot.n_joints), record.goal_config(), robot,
        goal_tol=settings.GOAL_TOL, substeps=settings.COLLISION_SUBSTEPS,
    )
    if not report.feasible:
        raise SchemaError(f"Record {record.record_id}: stored expert is infeasible")
    pc = render_single_view(scene, start, robot, record.camera_pose(),
                            np.random.default_rng(record.render_seed), len(record.labels))
    if _flat(quantize(pc.points)) != record.points or [int(v) for v in pc.labels] != record.labels:
        raise SchemaError(f"Record {record.record_id}: point cloud does not re-render from its camera")


def load_split(
    root: Path,
    split: str,
    validate: bool = True,
    robot: Optional[RobotSpec] = None,
) -> List[DatasetRecord]:
    load_manifest(root)
    path = DatasetPaths(root).split_path(split)
    if not path.exists():
        raise ConfigurationError(f"Split file not found: {path}")
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                record = DatasetRecord.model_validate_json(line)
            except ValidationError as e:
                raise SchemaError(f"{path.name}:{lineno}: invalid record: {e}") from e
            if validate:
                validate_record(record, robot)
            records.append(record)
    return records


def unique_problems(records: Sequence[DatasetRecord]) -> List[DatasetRecord]:
    """First view of every problem, in problem-id order."""
    seen: Dict[str, DatasetRecord] = {}
    for r in records:
        seen.setdefault(r.problem_id, r)
    return [seen[k] for k in sorted(seen)]
