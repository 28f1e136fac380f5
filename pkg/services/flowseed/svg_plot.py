"""
Static SVG case-study plots of a planning problem, drawn with matplotlib.

Every artist carries a gid, which the SVG backend writes as the id of the
group wrapping it:

    workspace, camera-ray-<k>, gt-disc-<i>, est-disc-<i>,
    pointcloud-robot, pointcloud-obstacle,
    trajectory-<i>-ee, trajectory-<i>-pose-<k>[-violation]
"""
from __future__ import annotations

import io
import math
import re
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from matplotlib import rc_context
from matplotlib.figure import Figure
from matplotlib.patches import Circle, Rectangle

from arm import RobotSpec, Trajectory, config_clearances, joint_positions
from dataset import DatasetRecord
from scene import LABEL_ROBOT

FIG_INCHES = 6.0
N_POSES = 6
N_CAMERA_RAYS = 9
VIOLATION_COLOR = "#d62728"
GT_DISC_COLOR = "#999999"
EST_DISC_COLOR = "#ff7f0e"
PALETTE = ["#1f77b4", "#2ca02c", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]

SVG_RC = {
    "svg.fonttype": "none",
    "svg.hashsalt": "flowseed",
    "font.family": "DejaVu Sans",
}
_SVG11_DOCTYPE = re.compile(rb'<!DOCTYPE svg PUBLIC "-//W3C//DTD SVG 1\.1//EN"\s*"[^"]*">')
_SVG10_DOCTYPE = (
    b'<!DOCTYPE svg PUBLIC "-//W3C//DTD SVG 1.0//EN"\n'
    b'  "http://www.w3.org/TR/2001/REC-SVG-20010904/DTD/svg10.dtd">'
)


def pose_indices(n_waypoints: int, n_poses: int = N_POSES) -> list:
    return [int(round(i * (n_waypoints - 1) / (n_poses - 1))) for i in range(n_poses)]


def _as_svg10(data: bytes) -> bytes:
    data = _SVG11_DOCTYPE.sub(_SVG10_DOCTYPE, data, count=1)
    return data.replace(b'version="1.1"', b'version="1.0"', 1)


def _link_width_points(robot: RobotSpec, span: float) -> float:
    # Data units to points, for an axes box roughly 80% of the figure
    return 2.0 * robot.link_radius * (0.8 * FIG_INCHES * 72.0) / span


def plot_problem(
    record: DatasetRecord,
    trajectories: Sequence[Trajectory],
    path_out: Path,
    robot: Optional[RobotSpec] = None,
    labels: Optional[Sequence[str]] = None,
    title: Optional[str] = None,
) -> Path:
    """
    Workspace, ground-truth discs, estimated discs (dashed), camera ray fan, point cloud,
    and arm poses at six evenly spaced indices of each trajectory. Poses in collision with
    the ground truth are drawn in VIOLATION_COLOR.
    """
    robot = robot or RobotSpec()
    scene = record.scene()
    world = record.estimated_world()
    pc = record.pointcloud()
    cam = record.camera_pose()
    (x0, x1), (y0, y1) = scene.bounds
    span = max(x1 - x0, y1 - y0)

    with rc_context(SVG_RC):
        fig = Figure(figsize=(FIG_INCHES, FIG_INCHES))
        ax = fig.add_subplot(1, 1, 1)
        ax.set_xlim(x0, x1)
        ax.set_ylim(y0, y1)
        ax.set_aspect("equal")
        ax.set_title(title or record.problem_id)
        ax.add_patch(Rectangle((x0, y0), x1 - x0, y1 - y0, fill=False, edgecolor="#000000", gid="workspace"))

        cx, cy = cam.position
        reach = 2.0 * span
        fan = np.linspace(cam.heading - cam.fov / 2, cam.heading + cam.fov / 2, N_CAMERA_RAYS)
        for k, a in enumerate(fan):
            ax.plot([cx, cx + reach * math.cos(a)], [cy, cy + reach * math.sin(a)],
                    color="#dddddd", lw=0.8, zorder=0.5, gid=f"camera-ray-{k}")

        for i, (x, y, r) in enumerate(scene.discs):
            ax.add_patch(Circle((x, y), r, facecolor=GT_DISC_COLOR, alpha=0.6, edgecolor="none",
                                zorder=1.0, gid=f"gt-disc-{i}"))
        for i, (x, y, r) in enumerate(world.discs):
            ax.add_patch(Circle((x, y), r, fill=False, edgecolor=EST_DISC_COLOR, linestyle="--",
                                lw=1.2, zorder=1.5, gid=f"est-disc-{i}"))

        robot_mask = pc.labels == LABEL_ROBOT
        for mask, color, gid in ((robot_mask, "#1f77b4", "pointcloud-robot"),
                                 (~robot_mask, "#000000", "pointcloud-obstacle")):
            if mask.any():
                ax.scatter(pc.points[mask, 0], pc.points[mask, 1], s=4, c=color, marker="s",
                           linewidths=0, zorder=2.0, gid=gid)

        labels = list(labels) if labels is not None else [f"trajectory {i}" for i in range(len(trajectories))]
        pose_width = _link_width_points(robot, span)
        for i, traj in enumerate(trajectories):
            color = PALETTE[i % len(PALETTE)]
            tip = joint_positions(traj.values, robot)[:, -1]
            ax.plot(tip[:, 0], tip[:, 1], color=color, alpha=0.5, lw=1.0, zorder=3.0,
                    label=labels[i], gid=f"trajectory-{i}-ee")
            idx = pose_indices(traj.n_waypoints)
            clear = config_clearances(traj.values[idx], scene.discs, robot)
            for k, c in zip(idx, clear):
                pts = joint_positions(traj.values[k], robot)
                violating = bool(c <= 0)
                ax.plot(pts[:, 0], pts[:, 1], color=VIOLATION_COLOR if violating else color,
                        lw=pose_width, solid_capstyle="round", alpha=0.8, zorder=3.5,
                        gid=f"trajectory-{i}-pose-{k}" + ("-violation" if violating else ""))
        if trajectories:
            ax.legend(loc="upper right", fontsize=7)

        buf = io.BytesIO()
        fig.savefig(buf, format="svg", metadata={"Date": None})

    path_out = Path(path_out)
    path_out.write_bytes(_as_svg10(buf.getvalue()))
    return path_out


def expert_plot(record: DatasetRecord, path_out: Path, robot: Optional[RobotSpec] = None) -> Path:
    return plot_problem(record, [record.expert_trajectory()], path_out, robot, labels=["expert"])


def case_study_plot(
    record: DatasetRecord,
    seeds: Sequence[Trajectory],
    optimized: Sequence[Trajectory],
    path_out: Path,
    robot: Optional[RobotSpec] = None,
) -> Path:
    """Raw seeds next to their optimized counterparts in one figure."""
    trajs = list(seeds) + list(optimized)
    labels = [f"seed {i}" for i in range(len(seeds))] + [f"optimized {i}" for i in range(len(optimized))]
    return plot_problem(record, trajs, path_out, robot, labels=labels)
