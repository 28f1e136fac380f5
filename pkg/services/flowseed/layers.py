"""
Network layers built from tape ops: affine maps, self-attention, AdaLN-modulated
transformer blocks and the sinusoidal time embedding.

Parameter naming: a layer called `prefix` owns `prefix.w` (in x out) and `prefix.b` (out).
"""
from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

from autodiff import ParamStore, Tape, Tensor
from errors import ConfigurationError, ShapeError

SubLayer = Callable[[Tape, Tensor], Tensor]


# ----------------------------------------------------------------------
# Initialization
# ----------------------------------------------------------------------
def init_linear(
    store: ParamStore,
    prefix: str,
    fan_in: int,
    fan_out: int,
    rng: np.random.Generator,
    zero: bool = False,
    bias: bool = True,
):
    """Xavier-uniform weight and zero bias, or all zeros when `zero`."""
    if zero:
        w = np.zeros((fan_in, fan_out))
    else:
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
    store.add(f"{prefix}.w", w)
    if bias:
        store.add(f"{prefix}.b", np.zeros(fan_out))


def init_mlp(store: ParamStore, prefix: str, dims: Sequence[int], rng: np.random.Generator):
    for i in range(len(dims) - 1):
        init_linear(store, f"{prefix}.{i}", dims[i], dims[i + 1], rng)


def init_attention(store: ParamStore, prefix: str, dim: int, rng: np.random.Generator):
    init_linear(store, f"{prefix}.qkv", dim, 3 * dim, rng)
    init_linear(store, f"{prefix}.out", dim, dim, rng)


def init_adaln_block(store: ParamStore, prefix: str, dim: int, cond_dim: int, rng: np.random.Generator, ff_mult: int = 4):
    init_attention(store, f"{prefix}.attn", dim, rng)
    init_linear(store, f"{prefix}.ff.0", dim, ff_mult * dim, rng)
    init_linear(store, f"{prefix}.ff.1", ff_mult * dim, dim, rng)
    # AdaLN-zero: the modulation regressor starts at zero so the block is the identity
    init_linear(store, f"{prefix}.ada", cond_dim, 6 * dim, rng, zero=True)


# ----------------------------------------------------------------------
# Layers
# ----------------------------------------------------------------------
def linear(tape: Tape, x: Tensor, weight_name: str, bias_name: Optional[str] = None) -> Tensor:
    """Affine map along the last dimension: x @ W + b."""
    w = tape.param(weight_name)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear:{weight_name}", f"input last dim {x.shape[-1]} != weight input dim {w.shape[0]}")
    squeeze = len(x.shape) == 1
    h = tape.reshape(x, (1, x.shape[0])) if squeeze else x
    out = tape.matmul(h, w)
    if bias_name is not None:
        out = tape.add(out, tape.param(bias_name))
    if squeeze:
        out = tape.reshape(out, (w.shape[1],))
    return out


def dense(tape: Tape, x: Tensor, prefix: str) -> Tensor:
    """`linear` with the `prefix.w` / `prefix.b` naming convention."""
    bias = f"{prefix}.b" if tape.has_param(f"{prefix}.b") else None
    return linear(tape, x, f"{prefix}.w", bias)


def mlp(tape: Tape, x: Tensor, prefix: str, n_layers: int, activation: str = "relu", final_activation: bool = False) -> Tensor:
    act = getattr(tape, activation)
    h = x
    for i in range(n_layers):
        h = dense(tape, h, f"{prefix}.{i}")
        if i < n_layers - 1 or final_activation:
            h = act(h)
    return h


def multi_head_attention(tape: Tape, tokens: Tensor, prefix: str, heads: int) -> Tensor:
    """
    Scaled dot-product self-attention over the token axis (second to last).
    tokens: [..., K, D] -> [..., K, D]
    """
    dim = tokens.shape[-1]
    if heads < 1 or dim % heads != 0:
        raise ConfigurationError(f"{prefix}: token dim {dim} not divisible by {heads} heads")
    head_dim = dim // heads
    qkv = dense(tape, tokens, f"{prefix}.qkv")
    q = tape.slice_last(qkv, 0, dim)
    k = tape.slice_last(qkv, dim, 2 * dim)
    v = tape.slice_last(qkv, 2 * dim, 3 * dim)

    outputs = []
    for h in range(heads):
        lo, hi = h * head_dim, (h + 1) * head_dim
        qh = tape.slice_last(q, lo, hi)
        kh = tape.slice_last(k, lo, hi)
        vh = tape.slice_last(v, lo, hi)
        scores = tape.scale(tape.matmul(qh, tape.transpose(kh)), 1.0 / math.sqrt(head_dim))
        weights = tape.softmax(scores)
        outputs.append(tape.matmul(weights, vh))
    merged = outputs[0] if heads == 1 else tape.concat(outputs, axis=-1)
    return dense(tape, merged, f"{prefix}.out")


def feed_forward(tape: Tape, x: Tensor, prefix: str) -> Tensor:
    return dense(tape, tape.gelu(dense(tape, x, f"{prefix}.0")), f"{prefix}.1")


def adaln_modulate(
    tape: Tape,
    h: Tensor,
    gamma: Tensor,
    beta: Tensor,
    alpha: Tensor,
    sublayer: SubLayer,
) -> Tensor:
    """h + alpha * sublayer(LN(h) * (1 + gamma) + beta)"""
    normed = tape.layer_norm(h)
    modulated = tape.add(tape.mul(normed, tape.add_scalar(gamma, 1.0)), beta)
    return tape.add(h, tape.mul(alpha, sublayer(tape, modulated)))


def modulation_signals(tape: Tape, cond: Tensor, prefix: str, dim: int, token_rank: int) -> list[Tensor]:
    """
    Regress (gamma, beta, alpha) for attention and feed-forward from the condition.
    Returns six tensors broadcastable against tokens of rank `token_rank`.
    """
    w = tape.param(f"{prefix}.ada.w")
    if cond.shape[-1] != w.shape[0]:
        raise ConfigurationError(f"{prefix}: condition dim {cond.shape[-1]} != expected {w.shape[0]}")
    mod = dense(tape, tape.silu(cond), f"{prefix}.ada")
    # [..., 6D] -> [..., 1, 6D] so each signal broadcasts over the token axis
    if token_rank > len(mod.shape):
        mod = tape.reshape(mod, mod.shape[:-1] + (1,) + mod.shape[-1:])
    return [tape.slice_last(mod, i * dim, (i + 1) * dim) for i in range(6)]


def adaln_block(tape: Tape, tokens: Tensor, cond: Tensor, prefix: str, heads: int) -> Tensor:
    """
    Pre-norm transformer block with AdaLN modulation of both sub-layers.
    tokens: [..., K, D], cond: [..., C]
    """
    dim = tokens.shape[-1]
    g1, b1, a1, g2, b2, a2 = modulation_signals(tape, cond, prefix, dim, len(tokens.shape))
    h = adaln_modulate(
        tape, tokens, g1, b1, a1,
        lambda t, x: multi_head_attention(t, x, f"{prefix}.attn", heads),
    )
    return adaln_modulate(
        tape, h, g2, b2, a2,
        lambda t, x: feed_forward(t, x, f"{prefix}.ff"),
    )


def sinusoidal_embed(t, dim: int, max_freq: float = 100.0) -> Tensor:
    """
    [sin(f_i t) ..., cos(f_i t) ...] with frequencies log-spaced from 1 to `max_freq`.
    `t` may be a scalar (-> [dim]) or a 1-D array (-> [len(t), dim]).
    """
    if dim <= 0 or dim % 2 != 0:
        raise ConfigurationError(f"sinusoidal embedding dim must be even and positive, got {dim}")
    half = dim // 2
    if half == 1:
        freqs = np.array([1.0])
    else:
        freqs = max_freq ** (np.arange(half, dtype=np.float64) / (half - 1))
    tv = np.asarray(t, dtype=np.float64)
    angles = tv[..., None] * freqs
    return Tensor(np.concatenate([np.sin(angles), np.cos(angles)], axis=-1))
