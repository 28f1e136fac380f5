"""
Conditional flow matching on normalized trajectories: the straight-line probability
path, the regression training loop, and few-step Euler sampling of seed batches.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from arm import Trajectory, wrap_angle
from autodiff import Tape, Tensor
from errors import ConfigurationError, InputError
from fm_model import (
    ConditionBundle,
    VelocityFieldModel,
    condition_arrays,
    condition_graph,
    denormalize,
    normalize,
    predict_velocity,
    velocity_graph,
)
from logging_utils import Stage, StructuredLogHandler
from optim import adam_step, warmup_cosine_lr

VelocityField = Callable[[np.ndarray, float], np.ndarray]


@dataclass
class TrainingExample:
    cond: ConditionBundle
    target: np.ndarray  # normalized [K, J]

    @classmethod
    def from_trajectory(cls, cond: ConditionBundle, traj: Trajectory, model: VelocityFieldModel) -> "TrainingExample":
        return cls(cond, normalize(wrap_angle(traj.values), model.config))


def interpolate_path(x0: np.ndarray, x1: np.ndarray, t: np.ndarray) -> np.ndarray:
    """x_t = (1 - t) x0 + t x1, with t broadcast over the trailing [K, J] axes."""
    t = np.asarray(t, dtype=np.float64).reshape((-1,) + (1,) * (np.ndim(x0) - 1))
    return (1.0 - t) * x0 + t * x1


def fm_train_step(
    model: VelocityFieldModel,
    batch: Sequence[TrainingExample],
    rng: np.random.Generator,
    lr: float = 3e-4,
) -> float:
    """
    One regression step of u(x_t, t | c) onto x1 - x0. A non-finite loss raises before
    any parameter is touched.
    """
    if not batch:
        raise InputError("Training batch is empty")
    config = model.config
    x1 = np.stack([ex.target for ex in batch])
    t = rng.uniform(0.0, 1.0, size=len(batch))
    x0 = rng.standard_normal(x1.shape)
    xt = interpolate_path(x0, x1, t)
    groups, starts, goals = condition_arrays([ex.cond for ex in batch], config)

    def graph(tp: Tape, x, g, s, q, target):
        cond = condition_graph(tp, g, s, q, t, config)
        return tp.mse(velocity_graph(tp, x, cond, config), target)

    model.store.zero_grad()
    tape = Tape(store=model.store)
    loss = tape.forward(
        graph,
        [Tensor(xt), Tensor(groups), Tensor(starts), Tensor(goals), Tensor(x1 - x0)],
    )
    tape.backward()
    adam_step(model.store, lr)
    return float(loss.data)


def train_model(
    model: VelocityFieldModel,
    examples: Sequence[TrainingExample],
    steps: int,
    batch_size: int,
    lr: float,
    rng: np.random.Generator,
    warmup_fraction: float = 0.1,
    logger: Optional[StructuredLogHandler] = None,
    ckpt_dir: Optional[Path] = None,
    checkpoint_every: int = 0,
    log_every: int = 100,
) -> List[float]:
    """
    Train for `steps` Adam steps on uniformly resampled batches. Writes the checkpoint
    every `checkpoint_every` steps and at the end, plus a loss log next to it.
    """
    if not examples:
        raise ConfigurationError("No training examples")
    if steps < 0 or batch_size < 1:
        raise ConfigurationError(f"Invalid training schedule: steps={steps}, batch_size={batch_size}")

    losses: List[float] = []
    pbar = tqdm(total=steps, desc="Training", unit="step", disable=logger is not None)
    for step in range(steps):
        idx = rng.integers(0, len(examples), size=batch_size)
        lr_now = warmup_cosine_lr(step, steps, lr, warmup_fraction)
        loss = fm_train_step(model, [examples[i] for i in idx], rng, lr_now)
        losses.append(loss)
        pbar.update(1)

        if log_every and (step + 1) % log_every == 0:
            window = losses[-log_every:]
            mean_loss = float(np.mean(window))
            pbar.set_postfix(loss=f"{mean_loss:.4f}")
            if logger:
                logger.info(
                    Stage.TRAIN,
                    f"step {step + 1}/{steps} loss {mean_loss:.5f}",
                    progress=100.0 * (step + 1) / steps,
                    details={"step": step + 1, "loss": mean_loss, "lr": lr_now},
                )
        if ckpt_dir is not None and checkpoint_every and (step + 1) % checkpoint_every == 0:
            model.save(ckpt_dir)
            _write_loss_log(ckpt_dir, losses)
            if logger:
                logger.debug(Stage.TRAIN, f"Checkpoint written at step {step + 1}")
    pbar.close()

    if ckpt_dir is not None:
        model.save(ckpt_dir)
        _write_loss_log(ckpt_dir, losses)
    return losses


def _write_loss_log(ckpt_dir: Path, losses: Sequence[float]):
    with open(Path(ckpt_dir) / "losses.json", "w", encoding="utf-8") as f:
        json.dump({"steps": len(losses), "losses": [float(v) for v in losses]}, f)


# ----------------------------------------------------------------------
# Sampling
# ----------------------------------------------------------------------
def euler_integrate(field: VelocityField, x0: np.ndarray, n_steps: int) -> np.ndarray:
    """x <- x + (1/n) u(x, s/n) for s = 0..n-1."""
    if n_steps < 1:
        raise ConfigurationError(f"Need at least one integration step, got {n_steps}")
    x = np.asarray(x0, dtype=np.float64).copy()
    h = 1.0 / n_steps
    for s in range(n_steps):
        x = x + h * field(x, s * h)
    return x


def sample_seeds(
    model: VelocityFieldModel,
    cond: ConditionBundle,
    n_seeds: int,
    n_steps: int,
    rng: np.random.Generator,
    dt: float = 0.1,
) -> List[Trajectory]:
    """
    Draw `n_seeds` trajectories by integrating the learned field from Gaussian noise.
    Each seed's noise comes from its own stream; row 0 is set to the start configuration.
    """
    if n_seeds < 1:
        raise ConfigurationError(f"Need at least one seed, got {n_seeds}")
    config = model.config
    master = int(rng.integers(0, 2**63 - 1))
    shape = (config.n_waypoints, config.n_joints)
    x0 = np.stack([np.random.default_rng([master, i]).standard_normal(shape) for i in range(n_seeds)])

    groups, starts, goals = condition_arrays([cond], config)
    groups = np.repeat(groups, n_seeds, axis=0)
    starts = np.repeat(starts, n_seeds, axis=0)
    goals = np.repeat(goals, n_seeds, axis=0)

    def field(x: np.ndarray, t: float) -> np.ndarray:
        return predict_velocity(model, x, np.full(n_seeds, t), groups, starts, goals)

    x1 = euler_integrate(field, x0, n_steps)
    seeds = []
    for row in x1:
        values = wrap_angle(denormalize(row, config))
        values[0] = cond.start.values
        seeds.append(Trajectory(values, dt))
    return seeds
