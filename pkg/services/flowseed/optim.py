"""
Adam update and the warm-up + cosine learning-rate schedule.
"""
import math

import numpy as np

from autodiff import ParamStore
from errors import NumericalError


def adam_step(
    store: ParamStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """
    One Adam update over every parameter, then zero the gradients.
    Non-finite gradients abort the step before anything is modified.
    """
    for name, grad in store.grads.items():
        if not np.all(np.isfinite(grad)):
            raise NumericalError(f"adam:{name}", "non-finite gradient, update skipped")

    store.step += 1
    t = store.step
    bias1 = 1.0 - beta1 ** t
    bias2 = 1.0 - beta2 ** t
    for name, param in store.params.items():
        grad = store.grads[name]
        state = store.state.setdefault(
            name, {"m": np.zeros(param.shape), "v": np.zeros(param.shape)}
        )
        state["m"] = beta1 * state["m"] + (1.0 - beta1) * grad
        state["v"] = beta2 * state["v"] + (1.0 - beta2) * grad * grad
        m_hat = state["m"] / bias1
        v_hat = state["v"] / bias2
        update = lr * m_hat / (np.sqrt(v_hat) + eps)
        store.params[name] = (param.astype(np.float64) - update).astype(np.float32)
    store.zero_grad()


def warmup_cosine_lr(step: int, total_steps: int, base_lr: float, warmup_fraction: float = 0.1) -> float:
    """Linear warm-up over the first `warmup_fraction` of steps, then cosine decay to zero."""
    total_steps = max(total_steps, 1)
    warmup = int(round(warmup_fraction * total_steps))
    if warmup > 0 and step < warmup:
        return base_lr * (step + 1) / warmup
    progress = (step - warmup) / max(total_steps - warmup, 1)
    progress = min(max(progress, 0.0), 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
