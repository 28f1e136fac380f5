"""
Velocity-field network for the trajectory initializer.

    point cloud --SA stage--> 64 ┐
    start  --linear--> 16        ├─ condition (128) ──┐ AdaLN modulation
    goal   --linear--> 16        │                    │
    t --sin/cos--> MLP --> 32    ┘                    v
    x_t [K, J] --lift--> tokens [K, D] + pos --> L blocks --skip merge--> head --> u [K, J]
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ValidationError, model_validator

from arm import JointConfig
from autodiff import ParamStore, Tape, Tensor
from checkpoint import load_params, save_params
from errors import ConfigurationError, InputError
from layers import (
    adaln_block,
    dense,
    init_adaln_block,
    init_linear,
    init_mlp,
    mlp,
    sinusoidal_embed,
)
from scene import PointCloud

MODEL_SIDECAR = "model.json"


class ModelConfig(BaseModel):
    """Hyperparameters; a checkpoint only loads into an identical configuration."""

    n_waypoints: int = 32
    n_joints: int = 3
    token_dim: int = 64
    n_layers: int = 4
    n_heads: int = 4
    point_dim: int = 64
    start_dim: int = 16
    goal_dim: int = 16
    time_dim: int = 32
    n_centroids: int = 32
    group_radius: float = 0.15
    group_size: int = 16
    local_hidden: int = 32
    joint_lo: List[float] = [-math.pi, -math.pi, -math.pi]
    joint_hi: List[float] = [math.pi, math.pi, math.pi]

    @model_validator(mode="after")
    def _check(self):
        if self.n_layers < 1:
            raise ConfigurationError("n_layers must be >= 1")
        if self.token_dim % self.n_heads != 0:
            raise ConfigurationError(f"token_dim {self.token_dim} not divisible by {self.n_heads} heads")
        if self.time_dim % 2 != 0:
            raise ConfigurationError("time_dim must be even")
        if len(self.joint_lo) != self.n_joints or len(self.joint_hi) != self.n_joints:
            raise ConfigurationError("joint bounds must have one entry per joint")
        if not all(lo < hi for lo, hi in zip(self.joint_lo, self.joint_hi)):
            raise ConfigurationError("joint bounds need lo < hi")
        return self

    @property
    def cond_dim(self) -> int:
        return self.point_dim + self.start_dim + self.goal_dim + self.time_dim

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """Smallest useful configuration, for gradient checks and smoke runs."""
        base = dict(
            n_waypoints=4, token_dim=8, n_layers=1, n_heads=2, point_dim=8,
            start_dim=4, goal_dim=4, time_dim=4, n_centroids=4, group_size=4, local_hidden=4,
        )
        base.update(overrides)
        return cls(**base)


# ----------------------------------------------------------------------
# Normalization
# ----------------------------------------------------------------------
def normalize(values: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Joint range [lo, hi] -> [-1, 1]."""
    lo = np.asarray(config.joint_lo)
    hi = np.asarray(config.joint_hi)
    return 2.0 * (np.asarray(values, dtype=np.float64) - lo) / (hi - lo) - 1.0


def denormalize(values: np.ndarray, config: ModelConfig) -> np.ndarray:
    lo = np.asarray(config.joint_lo)
    hi = np.asarray(config.joint_hi)
    return lo + (np.asarray(values, dtype=np.float64) + 1.0) * (hi - lo) / 2.0


# ----------------------------------------------------------------------
# Point grouping (numpy, outside the tape)
# ----------------------------------------------------------------------
def canonical_order(points: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Lexicographic order by (x, y, label); identical for any permutation of the input."""
    return np.lexsort((labels, points[:, 1], points[:, 0]))


def farthest_point_sample(points: np.ndarray, n_samples: int) -> np.ndarray:
    """
    Indices of `n_samples` farthest-point centroids. Starts from the point farthest from
    the mean; ties resolve to the lowest index.
    """
    n = points.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    first = int(np.argmax(np.sum((points - points.mean(axis=0)) ** 2, axis=-1)))
    chosen = [first]
    min_dist = np.sum((points - points[first]) ** 2, axis=-1)
    for _ in range(1, n_samples):
        nxt = int(np.argmax(min_dist))
        chosen.append(nxt)
        min_dist = np.minimum(min_dist, np.sum((points - points[nxt]) ** 2, axis=-1))
    return np.asarray(chosen[:n_samples], dtype=np.int64)


def group_pointcloud(pc: PointCloud, config: ModelConfig) -> np.ndarray:
    """
    Local neighborhoods around FPS centroids as (rel x, rel y, label) features.
    Returns [n_centroids, group_size, 3]; short groups are padded with the centroid itself.
    """
    order = canonical_order(pc.points, pc.labels)
    pts = pc.points[order]
    labels = pc.labels[order].astype(np.float64)
    centroids = farthest_point_sample(pts, config.n_centroids)

    out = np.zeros((config.n_centroids, config.group_size, 3))
    for g, ci in enumerate(centroids):
        d = np.linalg.norm(pts - pts[ci], axis=-1)
        ranked = np.argsort(d, kind="stable")
        members = ranked[d[ranked] <= config.group_radius][: config.group_size]
        if members.size < config.group_size:
            members = np.concatenate([members, np.full(config.group_size - members.size, ci)])
        out[g, :, :2] = pts[members] - pts[ci]
        out[g, :, 2] = labels[members]
    return out


@dataclass
class ConditionBundle:
    start: JointConfig
    goal: JointConfig
    pointcloud: PointCloud

    def groups(self, config: ModelConfig) -> np.ndarray:
        key = (config.n_centroids, config.group_size, config.group_radius)
        cache = self.__dict__.setdefault("_group_cache", {})
        if key not in cache:
            cache[key] = group_pointcloud(self.pointcloud, config)
        return cache[key]


# ----------------------------------------------------------------------
# Model
# ----------------------------------------------------------------------
class VelocityFieldModel:
    def __init__(self, config: ModelConfig, store: ParamStore):
        self.config = config
        self.store = store

    @classmethod
    def initialize(cls, config: ModelConfig, rng: np.random.Generator) -> "VelocityFieldModel":
        c = config
        store = ParamStore()
        init_mlp(store, "pc.local", [3, c.local_hidden, c.point_dim], rng)
        init_mlp(store, "pc.global", [c.point_dim, c.point_dim, c.point_dim], rng)
        init_linear(store, "start_embed", c.n_joints, c.start_dim, rng)
        init_linear(store, "goal_embed", c.n_joints, c.goal_dim, rng)
        init_mlp(store, "time_embed", [c.time_dim, c.time_dim, c.time_dim], rng)

        init_linear(store, "lift", c.n_joints, c.token_dim, rng)
        store.add("pos_embed", rng.normal(0.0, 0.02, size=(c.n_waypoints, c.token_dim)))
        for layer in range(c.n_layers):
            init_adaln_block(store, f"blocks.{layer}", c.token_dim, c.cond_dim, rng)
        # Skip merge starts as a pass-through of the main branch
        store.add("merge.w", np.concatenate([np.eye(c.token_dim), np.zeros((c.token_dim, c.token_dim))]))
        store.add("merge.b", np.zeros(c.token_dim))
        init_linear(store, "head", c.token_dim, c.n_joints, rng, zero=True)
        return cls(config, store)

    # ------------------------------------------------------------------
    # Persistence
    # ------------------------------------------------------------------
    def save(self, ckpt_dir: Path) -> Path:
        ckpt_dir = save_params(self.store, Path(ckpt_dir))
        (ckpt_dir / MODEL_SIDECAR).write_text(
            json.dumps(self.config.model_dump(), indent=2, sort_keys=True), encoding="utf-8"
        )
        return ckpt_dir

    @classmethod
    def load(cls, ckpt_dir: Path, expected: Optional[ModelConfig] = None) -> "VelocityFieldModel":
        ckpt_dir = Path(ckpt_dir)
        sidecar = ckpt_dir / MODEL_SIDECAR
        if not sidecar.exists():
            raise ConfigurationError(f"Checkpoint not found or missing {MODEL_SIDECAR}: {ckpt_dir}")
        try:
            config = ModelConfig(**json.loads(sidecar.read_text(encoding="utf-8")))
        except ValidationError as e:
            raise ConfigurationError(f"Invalid model hyperparameters in {sidecar}: {e}") from e
        if expected is not None and expected != config:
            raise ConfigurationError("Checkpoint hyperparameters do not match the requested model")
        store = load_params(ckpt_dir)
        reference = cls.initialize(config, np.random.default_rng(0)).store
        if reference.names() != store.names():
            raise ConfigurationError("Checkpoint parameter set does not match its hyperparameters")
        for name in reference.names():
            if reference.params[name].shape != store.params[name].shape:
                raise ConfigurationError(f"Checkpoint tensor {name} has the wrong shape")
        return cls(config, store)


def encode_points(tape: Tape, groups: Tensor, config: ModelConfig) -> Tensor:
    """[B, G, S, 3] groups -> [B, point_dim]"""
    local = mlp(tape, groups, "pc.local", 2, final_activation=True)
    pooled = tape.max_pool(local, axis=-2)  # [B, G, point_dim]
    glob = mlp(tape, pooled, "pc.global", 2)
    return tape.max_pool(glob, axis=-2)


def condition_graph(
    tape: Tape,
    groups: Tensor,
    starts: Tensor,
    goals: Tensor,
    t: np.ndarray,
    config: ModelConfig,
) -> Tensor:
    """Concatenated [point | start | goal | time] embedding, [B, cond_dim]."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    if np.any(t < 0.0) or np.any(t > 1.0) or not np.all(np.isfinite(t)):
        raise InputError(f"flow time must lie in [0, 1], got {t.min()}..{t.max()}")
    time = mlp(tape, sinusoidal_embed(t, config.time_dim), "time_embed", 2, activation="silu")
    return tape.concat(
        [
            encode_points(tape, groups, config),
            dense(tape, starts, "start_embed"),
            dense(tape, goals, "goal_embed"),
            time,
        ],
        axis=-1,
    )


def velocity_graph(tape: Tape, x: Tensor, cond: Tensor, config: ModelConfig) -> Tensor:
    """x [B, K, J], cond [B, C] -> velocity [B, K, J]"""
    h = tape.add(dense(tape, x, "lift"), tape.param("pos_embed"))
    skip_at = config.n_layers // 2
    skip = h
    for layer in range(config.n_layers):
        if layer == skip_at:
            skip = h
        h = adaln_block(tape, h, cond, f"blocks.{layer}", config.n_heads)
    h = dense(tape, tape.concat([h, skip], axis=-1), "merge")
    return dense(tape, h, "head")


def condition_arrays(conds: Sequence[ConditionBundle], config: ModelConfig):
    """Stacked grouped points and normalized start/goal rows for a batch of conditions."""
    groups = np.stack([c.groups(config) for c in conds])
    starts = normalize(np.stack([c.start.values for c in conds]), config)
    goals = normalize(np.stack([c.goal.values for c in conds]), config)
    return groups, starts, goals


def encode_pointcloud(model: VelocityFieldModel, pc: PointCloud) -> np.ndarray:
    """64-d permutation-invariant feature of one cloud."""
    tape = Tape(store=model.store, record=False)
    groups = Tensor(group_pointcloud(pc, model.config)[None])
    out = tape.forward(lambda tp, g: encode_points(tp, g, model.config), [groups])
    return out.data[0].astype(np.float64)


def encode_condition(model: VelocityFieldModel, cond: ConditionBundle, t: float) -> np.ndarray:
    """Condition embedding for one bundle at flow time t."""
    groups, starts, goals = condition_arrays([cond], model.config)
    tape = Tape(store=model.store, record=False)
    out = tape.forward(
        lambda tp, g, s, q: condition_graph(tp, g, s, q, np.array([t]), model.config),
        [Tensor(groups), Tensor(starts), Tensor(goals)],
    )
    return out.data[0].astype(np.float64)


def velocity_forward(model: VelocityFieldModel, x_t: np.ndarray, cond_embed: np.ndarray) -> np.ndarray:
    """u(x_t | condition) for one [K, J] or a batch [B, K, J] of normalized trajectories."""
    x = np.asarray(x_t, dtype=np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    c = np.asarray(cond_embed, dtype=np.float64).reshape(x.shape[0], -1)
    tape = Tape(store=model.store, record=False)
    out = tape.forward(lambda tp, a, b: velocity_graph(tp, a, b, model.config), [Tensor(x), Tensor(c)])
    u = out.data.astype(np.float64)
    return u[0] if squeeze else u


def predict_velocity(
    model: VelocityFieldModel,
    x_t: np.ndarray,
    t: np.ndarray,
    groups: np.ndarray,
    starts: np.ndarray,
    goals: np.ndarray,
) -> np.ndarray:
    """Batched inference through condition encoding and the velocity net in one tape."""
    tape = Tape(store=model.store, record=False)

    def graph(tp, x, g, s, q):
        cond = condition_graph(tp, g, s, q, t, model.config)
        return velocity_graph(tp, x, cond, model.config)

    out = tape.forward(graph, [Tensor(x_t), Tensor(groups), Tensor(starts), Tensor(goals)])
    return out.data.astype(np.float64)
