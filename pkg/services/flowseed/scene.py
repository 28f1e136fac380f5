"""
Scene simulation: random disc worlds, a single 2D ray-cast camera producing a labeled
point cloud, and obstacle estimation from that observation alone.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage

from arm import JointConfig, RobotSpec, joint_positions
from errors import ConfigurationError, InputError

LABEL_OBSTACLE = 0
LABEL_ROBOT = 1

DEFAULT_BOUNDS = ((-1.2, 1.2), (-1.2, 1.2))
ANNULUS = (0.2, 0.9)
HIT_EPS = 1e-12


@dataclass
class Scene:
    discs: np.ndarray  # [M, 3] (cx, cy, r)
    bounds: Tuple[Tuple[float, float], Tuple[float, float]] = DEFAULT_BOUNDS

    def __post_init__(self):
        self.discs = np.asarray(self.discs, dtype=np.float64).reshape(-1, 3)
        (x0, x1), (y0, y1) = self.bounds
        c, r = self.discs[:, :2], self.discs[:, 2]
        if np.any(r <= 0):
            raise InputError("Disc radii must be positive")
        inside = (c[:, 0] - r >= x0) & (c[:, 0] + r <= x1) & (c[:, 1] - r >= y0) & (c[:, 1] + r <= y1)
        if not np.all(inside):
            raise InputError("Every disc must lie inside the workspace bounds")

    @property
    def n_obstacles(self) -> int:
        return int(self.discs.shape[0])


@dataclass(frozen=True)
class CameraPose:
    position: Tuple[float, float]
    heading: float
    fov: float = math.pi / 2
    n_rays: int = 256

    def __post_init__(self):
        if not (0 < self.fov <= math.pi):
            raise ConfigurationError(f"Camera fov must be in (0, pi], got {self.fov}")
        if self.n_rays < 16:
            raise ConfigurationError(f"Camera needs at least 16 rays, got {self.n_rays}")

    def ray_directions(self) -> np.ndarray:
        angles = self.heading + np.linspace(-self.fov / 2, self.fov / 2, self.n_rays)
        return np.stack([np.cos(angles), np.sin(angles)], axis=-1)

    def to_dict(self) -> dict:
        return {
            "position": [float(self.position[0]), float(self.position[1])],
            "heading": float(self.heading),
            "fov": float(self.fov),
            "n_rays": int(self.n_rays),
        }


@dataclass
class PointCloud:
    points: np.ndarray  # [N, 2]
    labels: np.ndarray  # [N] in {0, 1}
    sentinel: bool = False
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.points.shape[0] != self.labels.shape[0]:
            raise InputError("Point and label counts differ")
        if not np.all(np.isin(self.labels, (LABEL_OBSTACLE, LABEL_ROBOT))):
            raise InputError("Point labels must be 0 (obstacle) or 1 (robot)")

    def __len__(self) -> int:
        return int(self.points.shape[0])

    def as_array(self) -> np.ndarray:
        """[N, 3] rows of (x, y, label)."""
        return np.concatenate([self.points, self.labels[:, None].astype(np.float64)], axis=1)

    def obstacle_points(self) -> np.ndarray:
        return self.points[self.labels == LABEL_OBSTACLE]


@dataclass
class EstimatedWorld:
    discs: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        self.discs = np.asarray(self.discs, dtype=np.float64).reshape(-1, 3)

    def __len__(self) -> int:
        return int(self.discs.shape[0])


# ----------------------------------------------------------------------
# Sampling
# ----------------------------------------------------------------------
def sample_scene(
    rng: np.random.Generator,
    count_range: Tuple[int, int] = (3, 5),
    radius_range: Tuple[float, float] = (0.05, 0.15),
    annulus: Tuple[float, float] = ANNULUS,
) -> Scene:
    lo, hi = count_range
    if lo < 0 or hi < lo:
        raise ConfigurationError(f"Invalid obstacle count range {count_range}")
    if radius_range[0] <= 0 or radius_range[1] < radius_range[0]:
        raise ConfigurationError(f"Invalid radius range {radius_range}")
    n = int(rng.integers(lo, hi + 1))
    # Area-uniform radius within the annulus
    rho = np.sqrt(rng.uniform(annulus[0] ** 2, annulus[1] ** 2, size=n))
    theta = rng.uniform(-math.pi, math.pi, size=n)
    radii = rng.uniform(radius_range[0], radius_range[1], size=n)
    discs = np.stack([rho * np.cos(theta), rho * np.sin(theta), radii], axis=-1)
    return Scene(discs)


def sample_camera(
    rng: np.random.Generator,
    distance: float = 1.5,
    jitter: float = 0.3,
    fov: float = math.pi / 2,
    n_rays: int = 256,
    base: Tuple[float, float] = (0.0, 0.0),
) -> CameraPose:
    """Camera on a circle around the base, looking back at the base with heading jitter."""
    angle = rng.uniform(-math.pi, math.pi)
    pos = (base[0] + distance * math.cos(angle), base[1] + distance * math.sin(angle))
    heading = angle + math.pi + rng.uniform(-jitter, jitter)
    return CameraPose(position=pos, heading=float(heading), fov=fov, n_rays=n_rays)


# ----------------------------------------------------------------------
# Ray casting
# ----------------------------------------------------------------------
def ray_circle_hits(origin: np.ndarray, dirs: np.ndarray, centers: np.ndarray, radii: np.ndarray) -> np.ndarray:
    """Entry distance of each ray into each circle, +inf on a miss. [R, 2] x [M] -> [R, M]"""
    f = origin[None, :] - centers  # [M, 2]
    b = dirs @ f.T  # [R, M]
    c = np.sum(f * f, axis=-1) - radii ** 2
    disc = b * b - c[None, :]
    sq = np.sqrt(np.maximum(disc, 0.0))
    t = -b - sq
    return np.where((disc >= 0) & (t > HIT_EPS), t, np.inf)


def ray_box_hits(origin: np.ndarray, dirs: np.ndarray, a: np.ndarray, b: np.ndarray, half_width: float) -> np.ndarray:
    """Entry distance into the rectangle spanned by segments a-b thickened by half_width. [R, L]"""
    axis = b - a
    length = np.linalg.norm(axis, axis=-1)
    u = axis / np.where(length > 0, length, 1.0)[:, None]
    v = np.stack([-u[:, 1], u[:, 0]], axis=-1)
    rel = origin[None, :] - a  # [L, 2]
    ou, ov = np.sum(rel * u, axis=-1), np.sum(rel * v, axis=-1)  # [L]
    du, dv = dirs @ u.T, dirs @ v.T  # [R, L]

    def slab(o, d, lo, hi):
        with np.errstate(divide="ignore", invalid="ignore"):
            t0 = (lo - o) / d
            t1 = (hi - o) / d
        parallel = np.abs(d) < 1e-15
        inside = (o >= lo) & (o <= hi)
        near = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t0, t1))
        far = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t0, t1))
        return near, far

    nu, fu = slab(ou[None, :], du, 0.0, length[None, :])
    nv, fv = slab(ov[None, :], dv, -half_width, half_width)
    entry = np.maximum(nu, nv)
    exit_ = np.minimum(fu, fv)
    ok = (entry <= exit_) & (entry > HIT_EPS) & (length[None, :] > 0)
    return np.where(ok, entry, np.inf)


def cast_rays(
    scene: Scene,
    q: JointConfig,
    robot: RobotSpec,
    cam: CameraPose,
) -> Tuple[np.ndarray, np.ndarray]:
    """First-hit points and labels for every ray that hits something."""
    origin = np.asarray(cam.position, dtype=np.float64)
    dirs = cam.ray_directions()

    if scene.n_obstacles:
        c, r = scene.discs[:, :2], scene.discs[:, 2]
        if np.any(np.linalg.norm(c - origin, axis=-1) <= r):
            raise InputError("Camera lies inside an obstacle")
        t_obs = ray_circle_hits(origin, dirs, c, r).min(axis=1)
    else:
        t_obs = np.full(dirs.shape[0], np.inf)

    pts = joint_positions(q.values, robot)
    rad = robot.link_radius
    t_caps = np.minimum(
        ray_circle_hits(origin, dirs, pts, np.full(pts.shape[0], rad)).min(axis=1),
        ray_box_hits(origin, dirs, pts[:-1], pts[1:], rad).min(axis=1),
    )

    t = np.minimum(t_obs, t_caps)
    hit = np.isfinite(t)
    labels = np.where(t_caps < t_obs, LABEL_ROBOT, LABEL_OBSTACLE)[hit]
    points = origin[None, :] + t[hit, None] * dirs[hit]
    return points, labels


def render_single_view(
    scene: Scene,
    q: JointConfig,
    robot: RobotSpec,
    cam: CameraPose,
    rng: np.random.Generator,
    n_points: int = 128,
) -> PointCloud:
    """Labeled surface points visible from one camera, resampled to exactly `n_points`."""
    points, labels = cast_rays(scene, q, robot, cam)
    n_hits = points.shape[0]
    if n_hits == 0:
        (_, x1), (_, y1) = scene.bounds
        sentinel = np.tile([x1, y1], (n_points, 1))
        return PointCloud(sentinel, np.full(n_points, LABEL_OBSTACLE), sentinel=True,
                          metadata={"hits": 0})
    idx = rng.choice(n_hits, size=n_points, replace=True)
    return PointCloud(points[idx], labels[idx], metadata={"hits": int(n_hits)})


# ----------------------------------------------------------------------
# Obstacle estimation
# ----------------------------------------------------------------------
def _circle_two(p: np.ndarray, q: np.ndarray) -> Tuple[np.ndarray, float]:
    c = (p + q) / 2.0
    return c, float(np.linalg.norm(p - c))


def _circle_three(p: np.ndarray, q: np.ndarray, s: np.ndarray) -> Tuple[np.ndarray, float]:
    ax, ay = p
    bx, by = q
    cx, cy = s
    d = 2.0 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
    if abs(d) < 1e-15:
        # Collinear: the widest pair spans the other point
        pairs = [(p, q), (p, s), (q, s)]
        a, b = max(pairs, key=lambda ab: np.linalg.norm(ab[0] - ab[1]))
        return _circle_two(a, b)
    a2, b2, c2 = ax * ax + ay * ay, bx * bx + by * by, cx * cx + cy * cy
    ux = (a2 * (by - cy) + b2 * (cy - ay) + c2 * (ay - by)) / d
    uy = (a2 * (cx - bx) + b2 * (ax - cx) + c2 * (bx - ax)) / d
    center = np.array([ux, uy])
    return center, float(np.linalg.norm(p - center))


def minimal_enclosing_disc(points: np.ndarray) -> Tuple[np.ndarray, float]:
    """Smallest disc containing every point (incremental Welzl construction, fixed order)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] == 0:
        raise InputError("Cannot enclose an empty point set")

    def inside(c, r, x):
        return np.linalg.norm(x - c) <= r * (1.0 + 1e-12) + 1e-15

    c, r = pts[0].copy(), 0.0
    for i in range(1, len(pts)):
        if inside(c, r, pts[i]):
            continue
        c, r = pts[i].copy(), 0.0
        for j in range(i):
            if inside(c, r, pts[j]):
                continue
            c, r = _circle_two(pts[i], pts[j])
            for k in range(j):
                if not inside(c, r, pts[k]):
                    c, r = _circle_three(pts[i], pts[j], pts[k])
    # Tolerant membership above; make containment exact
    r = max(r, float(np.linalg.norm(pts - c, axis=-1).max()))
    return c, r


def cluster_points(points: np.ndarray, threshold: float) -> List[np.ndarray]:
    """Single-linkage clusters at the given distance, ordered by their lexicographically first point."""
    pts = np.unique(np.asarray(points, dtype=np.float64).reshape(-1, 2), axis=0)
    if pts.shape[0] == 0:
        return []
    if pts.shape[0] == 1:
        return [pts]
    labels = fcluster(linkage(pts, method="single"), t=threshold, criterion="distance")
    clusters = [pts[labels == lab] for lab in np.unique(labels)]
    # np.unique sorted the points, so each cluster's first row is its lexicographic minimum
    clusters.sort(key=lambda c: (c[0, 0], c[0, 1]))
    return clusters


def estimate_obstacles(
    pc: PointCloud,
    inflation: float = 0.03,
    cluster_dist: float = 0.08,
) -> EstimatedWorld:
    """Collision discs from obstacle-labeled points only; robot points are ignored."""
    if pc.sentinel:
        return EstimatedWorld()
    discs = []
    for cluster in cluster_points(pc.obstacle_points(), cluster_dist):
        c, r = minimal_enclosing_disc(cluster)
        discs.append([c[0], c[1], r + inflation])
    return EstimatedWorld(np.asarray(discs, dtype=np.float64).reshape(-1, 3))
