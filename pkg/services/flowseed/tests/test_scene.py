import math

import numpy as np
import pytest

from arm import JointConfig
from errors import ConfigurationError, InputError
from scene import (
    LABEL_OBSTACLE,
    LABEL_ROBOT,
    CameraPose,
    PointCloud,
    Scene,
    cast_rays,
    cluster_points,
    estimate_obstacles,
    minimal_enclosing_disc,
    render_single_view,
    sample_camera,
    sample_scene,
)

FOLDED_AWAY = JointConfig([math.pi, 0.0, 0.0])


def test_sample_scene_respects_ranges(rng):
    for _ in range(50):
        scene = sample_scene(rng, (3, 5), (0.05, 0.12))
        assert 3 <= scene.n_obstacles <= 5
        r = scene.discs[:, 2]
        assert np.all((r >= 0.05) & (r <= 0.12))
        rho = np.linalg.norm(scene.discs[:, :2], axis=-1)
        assert np.all((rho >= 0.2) & (rho <= 0.9))


def test_scene_rejects_bad_discs():
    with pytest.raises(InputError):
        Scene(np.array([[0.0, 0.0, -0.1]]))
    with pytest.raises(InputError):
        Scene(np.array([[1.15, 0.0, 0.1]]))


def test_sample_scene_rejects_bad_ranges(rng):
    with pytest.raises(ConfigurationError):
        sample_scene(rng, (4, 3))
    with pytest.raises(ConfigurationError):
        sample_scene(rng, (3, 4), (0.0, 0.1))


def test_camera_points_back_at_base(rng):
    for _ in range(20):
        cam = sample_camera(rng, jitter=0.0)
        to_base = -np.asarray(cam.position)
        heading = np.array([math.cos(cam.heading), math.sin(cam.heading)])
        assert np.dot(heading, to_base / np.linalg.norm(to_base)) == pytest.approx(1.0)
        assert np.linalg.norm(cam.position) == pytest.approx(1.5)


def test_single_disc_hits_lie_on_circle(robot):
    scene = Scene(np.array([[0.6, 0.0, 0.1]]))
    cam = CameraPose(position=(1.5, 0.0), heading=math.pi, fov=math.pi / 2, n_rays=256)
    points, labels = cast_rays(scene, FOLDED_AWAY, robot, cam)
    obstacle = points[labels == LABEL_OBSTACLE]
    assert obstacle.shape[0] > 0
    assert np.allclose(np.linalg.norm(obstacle - [0.6, 0.0], axis=-1), 0.1, atol=1e-9)
    # Only the camera-facing half of the disc is visible
    assert np.all(obstacle[:, 0] >= 0.6 - 1e-9)


def test_occluded_disc_is_invisible(robot):
    scene = Scene(np.array([[0.8, 0.0, 0.15], [0.3, 0.0, 0.05]]))
    cam = CameraPose(position=(1.5, 0.0), heading=math.pi, fov=0.1, n_rays=32)
    points, labels = cast_rays(scene, JointConfig([math.pi / 2, 0.0, 0.0]), robot, cam)
    assert np.allclose(np.linalg.norm(points - [0.8, 0.0], axis=-1), 0.15, atol=1e-9)


def test_robot_points_are_labeled(robot):
    scene = Scene(np.zeros((0, 3)))
    cam = CameraPose(position=(0.45, 1.0), heading=-math.pi / 2, fov=0.2, n_rays=32)
    points, labels = cast_rays(scene, JointConfig([0.0, 0.0, 0.0]), robot, cam)
    assert points.shape[0] > 0
    assert np.all(labels == LABEL_ROBOT)
    # Top face of the straight arm's capsule
    assert np.allclose(points[:, 1], robot.link_radius, atol=1e-9)


def test_camera_inside_obstacle_is_an_input_error(robot):
    scene = Scene(np.array([[0.5, 0.5, 0.2]]))
    cam = CameraPose(position=(0.5, 0.5), heading=0.0)
    with pytest.raises(InputError):
        cast_rays(scene, FOLDED_AWAY, robot, cam)


def test_render_resamples_to_fixed_size_deterministically(robot):
    scene = Scene(np.array([[0.6, 0.2, 0.1], [-0.3, 0.5, 0.08]]))
    cam = CameraPose(position=(1.5, 0.0), heading=math.pi)
    a = render_single_view(scene, JointConfig([0.4, 0.2, -0.3]), robot, cam, np.random.default_rng(3), 64)
    b = render_single_view(scene, JointConfig([0.4, 0.2, -0.3]), robot, cam, np.random.default_rng(3), 64)
    assert len(a) == 64
    assert np.array_equal(a.points, b.points) and np.array_equal(a.labels, b.labels)
    assert not a.sentinel


def test_render_with_no_hits_returns_sentinel(robot):
    scene = Scene(np.zeros((0, 3)))
    cam = CameraPose(position=(1.5, 0.0), heading=0.0, fov=0.5)
    pc = render_single_view(scene, JointConfig([0.0, 0.0, 0.0]), robot, cam, np.random.default_rng(0), 16)
    assert pc.sentinel and len(pc) == 16
    assert np.all(pc.labels == LABEL_OBSTACLE)
    assert len(estimate_obstacles(pc)) == 0


def test_minimal_enclosing_disc_contains_all_points(rng):
    for _ in range(100):
        pts = rng.normal(size=(int(rng.integers(1, 40)), 2))
        c, r = minimal_enclosing_disc(pts)
        assert np.all(np.linalg.norm(pts - c, axis=-1) <= r + 1e-12)
        # No smaller disc at the same center fits
        assert r == pytest.approx(np.linalg.norm(pts - c, axis=-1).max())


def test_minimal_enclosing_disc_of_a_diameter():
    c, r = minimal_enclosing_disc(np.array([[-1.0, 0.0], [1.0, 0.0], [0.0, 0.5]]))
    assert np.allclose(c, [0.0, 0.0]) and r == pytest.approx(1.0)


def test_cluster_points_separates_distant_groups():
    pts = np.array([[0.0, 0.0], [0.05, 0.0], [1.0, 1.0], [1.02, 1.0], [0.1, 0.0]])
    clusters = cluster_points(pts, 0.08)
    assert [len(c) for c in clusters] == [3, 2]


def test_estimate_obstacles_ignores_robot_points_and_order(robot, rng):
    scene = Scene(np.array([[0.6, 0.0, 0.1], [-0.2, 0.7, 0.08]]))
    cam = CameraPose(position=(1.0, 1.2), heading=-2.4)
    pc = render_single_view(scene, JointConfig([-1.0, 0.5, 0.5]), robot, cam, rng, 128)
    world = estimate_obstacles(pc)
    perm = rng.permutation(len(pc))
    again = estimate_obstacles(PointCloud(pc.points[perm], pc.labels[perm]))
    assert np.array_equal(world.discs, again.discs)

    robot_only = PointCloud(pc.points[pc.labels == LABEL_ROBOT], pc.labels[pc.labels == LABEL_ROBOT])
    assert len(estimate_obstacles(robot_only)) == 0


def test_estimate_covers_observed_points(robot, rng):
    scene = Scene(np.array([[0.6, 0.0, 0.1]]))
    cam = CameraPose(position=(1.5, 0.0), heading=math.pi)
    pc = render_single_view(scene, FOLDED_AWAY, robot, cam, rng, 128)
    world = estimate_obstacles(pc, inflation=0.0)
    assert len(world) == 1
    obs = pc.obstacle_points()
    cx, cy, r = world.discs[0]
    assert np.all(np.linalg.norm(obs - [cx, cy], axis=-1) <= r + 1e-9)
    # Single-view estimate covers only the visible arc, so it is never larger than the disc
    assert r <= 0.1 + 1e-9

