import json
import math
import shutil

import numpy as np
import pytest

import dataset
from arm import JointConfig, Limits, check_feasibility, config_clearances, joint_positions
from conftest import small_spec
from costs import linear_seed
from dataset import (
    DatasetRecord,
    FamilySpec,
    SplitSpec,
    generate_dataset,
    load_manifest,
    load_split,
    quantize,
    unique_problems,
)
from errors import ConfigurationError, DatasetWriteError, InputError, SchemaError
from expert import bspline_resample, edge_is_free, make_expert, rrt_connect
from paths import SPLITS
from scene import Scene


@pytest.fixture
def blocked_scene(robot, start_goal):
    """A disc on the elbow of the straight-line midpoint configuration."""
    start, goal = start_goal
    mid = linear_seed(start, goal, 3).values[1]
    elbow = joint_positions(mid, robot)[1]
    return Scene(np.array([[elbow[0], elbow[1], 0.08]]))


class TestRRT:
    def test_identical_endpoints(self, robot, start_goal, rng):
        start, _ = start_goal
        path = rrt_connect(start, start, Scene(np.zeros((0, 3))), robot, rng)
        assert len(path) == 1

    def test_free_straight_edge_is_returned_directly(self, robot, start_goal, rng):
        start, goal = start_goal
        path = rrt_connect(start, goal, Scene(np.zeros((0, 3))), robot, rng)
        assert len(path) == 2
        assert np.array_equal(path[0], start.values) and np.array_equal(path[1], goal.values)

    def test_colliding_endpoint_is_rejected(self, robot, rng):
        start = JointConfig([0.0, 0.0, 0.0])
        scene = Scene(np.array([[0.45, 0.0, 0.05]]))
        with pytest.raises(InputError):
            rrt_connect(start, JointConfig([2.0, 0.0, 0.0]), scene, robot, rng)

    def test_routes_around_an_obstacle(self, robot, start_goal, blocked_scene, rng):
        start, goal = start_goal
        assert not edge_is_free(start.values, goal.values, blocked_scene.discs, robot)
        path = rrt_connect(start, goal, blocked_scene, robot, rng)
        assert path is not None and len(path) > 2
        assert np.array_equal(path[0], start.values)
        assert np.array_equal(path[-1], goal.values)
        for a, b in zip(path, path[1:]):
            assert edge_is_free(a, b, blocked_scene.discs, robot)
        limits = Limits.default()
        nodes = np.stack(path)
        assert np.all((nodes >= limits.pos_lo) & (nodes <= limits.pos_hi))

    def test_exhausted_budget_returns_none(self, robot, start_goal, blocked_scene, rng):
        start, goal = start_goal
        assert rrt_connect(start, goal, blocked_scene, robot, rng, max_nodes=3) is None


class TestBSpline:
    def test_two_waypoints_give_the_straight_line(self, start_goal):
        start, goal = start_goal
        traj = bspline_resample([start.values, goal.values], 10)
        assert np.allclose(traj.values, linear_seed(start, goal, 10).values)

    def test_single_waypoint_is_held(self):
        traj = bspline_resample([[0.1, 0.2, 0.3]], 5)
        assert traj.values.shape == (5, 3)
        assert np.allclose(traj.values, [0.1, 0.2, 0.3])

    def test_cubic_spline_is_clamped_to_the_ends(self, rng):
        ctrl = rng.uniform(-1, 1, (6, 3))
        traj = bspline_resample(ctrl, 20)
        assert traj.values.shape == (20, 3)
        assert np.array_equal(traj.values[0], ctrl[0])
        assert np.allclose(traj.values[-1], ctrl[-1])

    def test_bad_waypoints(self):
        with pytest.raises(InputError):
            bspline_resample(np.zeros(3), 5)


def test_expert_is_feasible_on_ground_truth(robot, start_goal, rng):
    start, goal = start_goal
    scene = Scene(np.array([[0.0, -0.8, 0.05]]))
    traj = make_expert(scene, start, goal, robot, rng)
    assert np.array_equal(traj.values[0], start.values)
    report = check_feasibility(traj, scene.discs, Limits.default(), goal, robot)
    assert report.feasible


@pytest.mark.slow
def test_expert_detours_around_a_blocking_disc(robot, start_goal, blocked_scene, rng):
    start, goal = start_goal
    traj = make_expert(blocked_scene, start, goal, robot, rng)
    assert config_clearances(traj.values, blocked_scene.discs, robot).min() > 0


class TestSplitSpec:
    def test_from_total(self):
        spec = SplitSpec.from_total(100, 20)
        assert spec.counts == {"train": 80, "val-seen": 20, "val-unseen": 20}
        with pytest.raises(ConfigurationError):
            SplitSpec.from_total(100, 20, train_fraction=1.0)

    def test_overlapping_unseen_family_is_rejected(self):
        spec = small_spec(unseen_families=[FamilySpec(name="x", count_range=(2, 2), radius_range=(0.06, 0.06))])
        with pytest.raises(ConfigurationError):
            spec.validate_regimes()

    def test_default_regimes_are_disjoint(self):
        SplitSpec().validate_regimes()

    def test_quantize_survives_json(self):
        q = quantize([math.pi, 1.0 / 3.0])
        assert q[0] == 3.14159265
        assert json.loads(json.dumps(q.tolist())) == q.tolist()


class TestDataset:
    def test_manifest_counts(self, small_dataset):
        root, manifest = small_dataset
        spec = small_spec()
        assert manifest["counts"] == load_manifest(root)["counts"]
        for split in SPLITS:
            stats = manifest["counts"][split]
            assert stats["problems_requested"] == spec.counts[split]
            assert stats["problems_written"] + stats["discarded"] == stats["problems_requested"]
            assert stats["records"] == stats["problems_written"] * spec.cameras[split]

    def test_records_load_and_validate(self, small_dataset):
        root, manifest = small_dataset
        for split in SPLITS:
            records = load_split(root, split)
            assert len(records) == manifest["counts"][split]["records"]
            assert len({r.record_id for r in records}) == len(records)
            for r in records:
                assert r.split == split
                assert r.family == ("crowded" if split == "val-unseen" else "sparse")
                assert len(r.labels) == 32
                assert r.expert_trajectory().values.shape == (12, 3)
                assert r.expert[:3] == r.start

    def test_views_of_a_problem_share_the_problem(self, small_dataset):
        root, _ = small_dataset
        records = load_split(root, "train", validate=False)
        problems = unique_problems(records)
        assert len(problems) == len({r.problem_id for r in records})
        for p in problems:
            views = [r for r in records if r.problem_id == p.problem_id]
            assert all(v.discs == p.discs and v.expert == p.expert for v in views)

    def test_generation_is_deterministic(self, small_dataset, tmp_path):
        root, _ = small_dataset
        generate_dataset(small_spec(), tmp_path, seed=7, max_workers=1)
        for name in ["manifest.json"] + [f"{s}.jsonl" for s in SPLITS]:
            assert (tmp_path / name).read_bytes() == (root / name).read_bytes()

    def test_failed_write_leaves_the_previous_dataset_intact(self, small_dataset, tmp_path, monkeypatch):
        root, _ = small_dataset
        copy = tmp_path / "copy"
        shutil.copytree(root, copy)
        names = ["manifest.json"] + [f"{s}.jsonl" for s in SPLITS]
        before = {name: (copy / name).read_bytes() for name in names}

        def full_disk(path):
            raise OSError(28, "No space left on device")

        monkeypatch.setattr(dataset, "compute_file_hash", full_disk)
        with pytest.raises(DatasetWriteError):
            generate_dataset(small_spec(), copy, seed=8, max_workers=1)
        assert {name: (copy / name).read_bytes() for name in names} == before
        assert not list(copy.glob("*.tmp"))

    def test_tampered_points_fail_validation(self, small_dataset, tmp_path):
        root, _ = small_dataset
        copy = tmp_path / "copy"
        shutil.copytree(root, copy)
        path = copy / "train.jsonl"
        lines = path.read_text().splitlines()
        record = DatasetRecord.model_validate_json(lines[0])
        record.points[0] += 0.01
        lines[0] = record.to_line()
        path.write_text("\n".join(lines) + "\n")
        load_split(copy, "train", validate=False)
        with pytest.raises(SchemaError):
            load_split(copy, "train")

    def test_malformed_line_is_a_schema_error(self, small_dataset, tmp_path):
        root, _ = small_dataset
        copy = tmp_path / "copy"
        shutil.copytree(root, copy)
        with open(copy / "val-seen.jsonl", "a") as f:
            f.write('{"record_id": "broken"}\n')
        with pytest.raises(SchemaError):
            load_split(copy, "val-seen", validate=False)

    def test_schema_version_mismatch(self, small_dataset, tmp_path):
        root, _ = small_dataset
        copy = tmp_path / "copy"
        shutil.copytree(root, copy)
        manifest = json.loads((copy / "manifest.json").read_text())
        manifest["schema_version"] = 0
        (copy / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(SchemaError):
            load_split(copy, "train")

    def test_missing_dataset_and_unknown_split(self, small_dataset, tmp_path):
        root, _ = small_dataset
        with pytest.raises(ConfigurationError):
            load_split(tmp_path, "train")
        with pytest.raises(InputError):
            load_split(root, "test")

    def test_record_problem_uses_the_estimated_world(self, small_dataset):
        root, _ = small_dataset
        record = load_split(root, "val-seen", validate=False)[0]
        problem = record.opt_problem()
        assert problem.n_waypoints == 12
        assert np.array_equal(problem.world.discs, record.estimated_world().discs)
