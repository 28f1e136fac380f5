"""
Minimal dense-tensor math with a reverse-mode tape.

Values are stored as float32; every op computes in float64 and rounds its output back to
float32, and gradients accumulate in float64. The graph is rebuilt on every forward call.
Inside `float64_values()` tape values keep full precision, for finite-difference checks.
"""
from __future__ import annotations

import contextvars
import copy
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from errors import ConfigurationError, NumericalError, ShapeError, TapeStateError

Backward = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_VALUE_DTYPE: contextvars.ContextVar = contextvars.ContextVar("flowseed_value_dtype", default=np.float32)


@contextmanager
def float64_values() -> Iterator[None]:
    """Keep tensor values in float64 instead of float32 within this context."""
    token = _VALUE_DTYPE.set(np.float64)
    try:
        yield
    finally:
        _VALUE_DTYPE.reset(token)


class Tensor:
    """A float32 (or, under float64_values, float64) array that knows whether gradients must flow into it."""

    __slots__ = ("data", "needs_grad", "param_name", "__weakref__")

    def __init__(self, data, needs_grad: bool = False, param_name: Optional[str] = None):
        self.data = np.asarray(data, dtype=_VALUE_DTYPE.get())
        self.needs_grad = needs_grad
        self.param_name = param_name

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def values(self) -> np.ndarray:
        """Row-major flattened values."""
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        tag = f", param={self.param_name}" if self.param_name else ""
        return f"Tensor(shape={self.shape}{tag})"


class ParamStore:
    """Named float32 parameters with float64 gradients of identical shape."""

    def __init__(self):
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self.step: int = 0
        # Optimizer moments, keyed like params
        self.state: Dict[str, Dict[str, np.ndarray]] = {}

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params:
            raise ConfigurationError(f"Duplicate parameter name: {name}")
        arr = np.array(value, dtype=np.float32)
        self.params[name] = arr
        self.grads[name] = np.zeros(arr.shape, dtype=np.float64)
        return arr

    def get(self, name: str) -> np.ndarray:
        try:
            return self.params[name]
        except KeyError:
            raise ConfigurationError(f"Missing parameter: {name}") from None

    def set(self, name: str, value: np.ndarray):
        current = self.get(name)
        value = np.asarray(value, dtype=np.float32)
        if value.shape != current.shape:
            raise ShapeError(f"param:{name}", f"expected {current.shape}, got {value.shape}")
        self.params[name] = value.copy()

    def names(self) -> List[str]:
        return sorted(self.params)

    def zero_grad(self):
        for name in self.grads:
            self.grads[name].fill(0.0)

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "ParamStore":
        """Deep copy, for running tapes concurrently on disjoint stores."""
        return copy.deepcopy(self)

    def __contains__(self, name: str) -> bool:
        return name in self.params


@dataclass
class _Node:
    op: str
    out: Tensor
    inputs: Tuple[Tensor, ...]
    backward: Backward


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _f64(t: Tensor) -> np.ndarray:
    return t.data.astype(np.float64)


@dataclass
class Tape:
    """
    Dynamic reverse-mode tape.

    Usage: `out = tape.forward(graph, inputs)` where `graph(tape, *inputs)` builds the output
    from tape ops, then `tape.backward()` accumulates dLoss/dParam into the ParamStore.
    With `record=False` nothing is kept for backward (inference).
    """

    store: Optional[ParamStore] = None
    record: bool = True
    _nodes: List[_Node] = field(default_factory=list)
    _output: Optional[Tensor] = None
    _pending: bool = False
    _leaf_grads: Dict[int, np.ndarray] = field(default_factory=dict)
    _params: Dict[str, Tensor] = field(default_factory=dict)

    # ------------------------------------------------------------------
    # Graph lifecycle
    # ------------------------------------------------------------------
    def forward(self, graph: Callable[..., Tensor], inputs: Sequence[Tensor] = ()) -> Tensor:
        self.reset()
        out = graph(self, *inputs)
        if not isinstance(out, Tensor):
            raise ShapeError("forward", f"graph returned {type(out).__name__}, expected Tensor")
        self._output = out
        self._pending = self.record
        return out

    def reset(self):
        self._nodes = []
        self._output = None
        self._pending = False
        self._leaf_grads = {}
        self._params = {}

    def backward(self, grad_output: Optional[np.ndarray] = None) -> None:
        if not self._pending or self._output is None:
            raise TapeStateError("backward called without a new forward pass")
        out = self._output
        if grad_output is None:
            if out.data.size != 1:
                raise ShapeError("backward", f"implicit gradient needs a scalar output, got {out.shape}")
            grad_output = np.ones(out.shape, dtype=np.float64)
        grad_output = np.asarray(grad_output, dtype=np.float64)
        if grad_output.shape != out.shape:
            raise ShapeError("backward", f"gradient shape {grad_output.shape} != output shape {out.shape}")

        grads: Dict[int, np.ndarray] = {id(out): grad_output}
        for node in reversed(self._nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            input_grads = node.backward(g)
            for tensor, tg in zip(node.inputs, input_grads):
                if tg is None or not tensor.needs_grad:
                    continue
                tg = _unbroadcast(tg, tensor.shape)
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + tg
                else:
                    grads[key] = tg

        # Remaining entries are leaves: parameters and inputs that asked for gradients
        for name, leaf in self._params.items():
            g = grads.pop(id(leaf), None)
            if g is not None and self.store is not None:
                self.store.grads[name] += g
        self._leaf_grads = grads
        self._pending = False

    def grad(self, tensor: Tensor) -> np.ndarray:
        """Gradient accumulated into a non-parameter leaf by the last backward pass."""
        g = self._leaf_grads.get(id(tensor))
        if g is None:
            return np.zeros(tensor.shape, dtype=np.float64)
        return g

    # ------------------------------------------------------------------
    # Leaves
    # ------------------------------------------------------------------
    def param(self, name: str) -> Tensor:
        if self.store is None:
            raise ConfigurationError(f"No parameter store attached (requested {name})")
        leaf = self._params.get(name)
        if leaf is None:
            leaf = Tensor(self.store.get(name), needs_grad=self.record, param_name=name)
            self._params[name] = leaf
        return leaf

    def has_param(self, name: str) -> bool:
        return self.store is not None and name in self.store

    @staticmethod
    def constant(value) -> Tensor:
        return Tensor(value, needs_grad=False)

    def variable(self, value) -> Tensor:
        """A leaf input whose gradient can be read back with `grad`."""
        return Tensor(value, needs_grad=self.record)

    def _emit(self, op: str, out: np.ndarray, inputs: Tuple[Tensor, ...], backward: Backward) -> Tensor:
        needs = self.record and any(t.needs_grad for t in inputs)
        with np.errstate(over="ignore"):
            result = Tensor(out, needs_grad=needs)
        # Checked after rounding: float64 values beyond float32 range become inf
        if not np.all(np.isfinite(result.data)):
            raise NumericalError(op)
        if needs:
            self._nodes.append(_Node(op, result, inputs, backward))
        return result

    # ------------------------------------------------------------------
    # Elementwise arithmetic
    # ------------------------------------------------------------------
    def add(self, a: Tensor, b: Tensor) -> Tensor:
        try:
            out = _f64(a) + _f64(b)
        except ValueError:
            raise ShapeError("add", f"cannot broadcast {a.shape} with {b.shape}") from None
        return self._emit("add", out, (a, b), lambda g: (g, g))

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        try:
            out = _f64(a) - _f64(b)
        except ValueError:
            raise ShapeError("sub", f"cannot broadcast {a.shape} with {b.shape}") from None
        return self._emit("sub", out, (a, b), lambda g: (g, -g))

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        av, bv = _f64(a), _f64(b)
        try:
            out = av * bv
        except ValueError:
            raise ShapeError("mul", f"cannot broadcast {a.shape} with {b.shape}") from None
        return self._emit("mul", out, (a, b), lambda g: (g * bv, g * av))

    def scale(self, a: Tensor, factor: float) -> Tensor:
        return self._emit("scale", _f64(a) * factor, (a,), lambda g: (g * factor,))

    def add_scalar(self, a: Tensor, value: float) -> Tensor:
        return self._emit("add_scalar", _f64(a) + value, (a,), lambda g: (g,))

    # ------------------------------------------------------------------
    # Linear algebra and layout
    # ------------------------------------------------------------------
    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        av, bv = _f64(a), _f64(b)
        if av.ndim < 2 or bv.ndim < 2:
            raise ShapeError("matmul", f"needs matrix operands, got {a.shape} @ {b.shape}")
        if av.shape[-1] != bv.shape[-2]:
            raise ShapeError("matmul", f"inner dimensions differ: {a.shape} @ {b.shape}")
        try:
            out = np.matmul(av, bv)
        except ValueError:
            raise ShapeError("matmul", f"batch dimensions differ: {a.shape} @ {b.shape}") from None

        def backward(g):
            ga = np.matmul(g, np.swapaxes(bv, -1, -2))
            gb = np.matmul(np.swapaxes(av, -1, -2), g)
            return ga, gb

        return self._emit("matmul", out, (a, b), backward)

    def transpose(self, a: Tensor) -> Tensor:
        """Swap the last two axes."""
        if a.data.ndim < 2:
            raise ShapeError("transpose", f"needs rank >= 2, got {a.shape}")
        out = np.swapaxes(_f64(a), -1, -2)
        return self._emit("transpose", out, (a,), lambda g: (np.swapaxes(g, -1, -2),))

    def reshape(self, a: Tensor, shape: Sequence[int]) -> Tensor:
        src = a.shape
        try:
            out = _f64(a).reshape(shape)
        except ValueError:
            raise ShapeError("reshape", f"cannot reshape {src} to {tuple(shape)}") from None
        return self._emit("reshape", out, (a,), lambda g: (g.reshape(src),))

    def concat(self, tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
        arrays = [_f64(t) for t in tensors]
        try:
            out = np.concatenate(arrays, axis=axis)
        except ValueError:
            raise ShapeError("concat", f"incompatible shapes {[t.shape for t in tensors]}") from None
        sizes = [arr.shape[axis] for arr in arrays]
        splits = np.cumsum(sizes)[:-1]

        def backward(g):
            return tuple(np.split(g, splits, axis=axis))

        return self._emit("concat", out, tuple(tensors), backward)

    def slice_last(self, a: Tensor, start: int, stop: int) -> Tensor:
        """a[..., start:stop]"""
        size = a.shape[-1]
        if not 0 <= start < stop <= size:
            raise ShapeError("slice_last", f"[{start}:{stop}] out of range for last dim {size}")
        src = a.shape

        def backward(g):
            full = np.zeros(src, dtype=np.float64)
            full[..., start:stop] = g
            return (full,)

        return self._emit("slice_last", _f64(a)[..., start:stop], (a,), backward)

    # ------------------------------------------------------------------
    # Nonlinearities and normalization
    # ------------------------------------------------------------------
    def relu(self, a: Tensor) -> Tensor:
        av = _f64(a)
        mask = av > 0
        return self._emit("relu", np.where(mask, av, 0.0), (a,), lambda g: (g * mask,))

    def silu(self, a: Tensor) -> Tensor:
        av = _f64(a)
        sig = 1.0 / (1.0 + np.exp(-av))
        out = av * sig
        return self._emit("silu", out, (a,), lambda g: (g * (sig * (1.0 + av * (1.0 - sig))),))

    def gelu(self, a: Tensor) -> Tensor:
        """tanh approximation"""
        av = _f64(a)
        c = np.sqrt(2.0 / np.pi)
        inner = c * (av + 0.044715 * av ** 3)
        th = np.tanh(inner)
        out = 0.5 * av * (1.0 + th)

        def backward(g):
            dinner = c * (1.0 + 3 * 0.044715 * av ** 2)
            return (g * (0.5 * (1.0 + th) + 0.5 * av * (1.0 - th ** 2) * dinner),)

        return self._emit("gelu", out, (a,), backward)

    def softmax(self, a: Tensor) -> Tensor:
        """Softmax over the last axis."""
        av = _f64(a)
        shifted = av - av.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        p = e / e.sum(axis=-1, keepdims=True)

        def backward(g):
            return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

        return self._emit("softmax", p, (a,), backward)

    def layer_norm(self, a: Tensor, eps: float = 1e-6) -> Tensor:
        """Normalize over the last axis, no affine parameters."""
        av = _f64(a)
        n = av.shape[-1]
        mu = av.mean(axis=-1, keepdims=True)
        xc = av - mu
        var = (xc ** 2).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv

        def backward(g):
            gsum = g.sum(axis=-1, keepdims=True)
            gx = (g * xhat).sum(axis=-1, keepdims=True)
            return (inv / n * (n * g - gsum - xhat * gx),)

        return self._emit("layer_norm", xhat, (a,), backward)

    # ------------------------------------------------------------------
    # Reductions
    # ------------------------------------------------------------------
    def max_pool(self, a: Tensor, axis: int) -> Tensor:
        """Max over one axis; ties go to the first index."""
        av = _f64(a)
        axis = axis % av.ndim
        idx = np.argmax(av, axis=axis)
        out = np.take_along_axis(av, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
        src = a.shape

        def backward(g):
            full = np.zeros(src, dtype=np.float64)
            np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
            return (full,)

        return self._emit("max_pool", out, (a,), backward)

    def sum(self, a: Tensor) -> Tensor:
        src = a.shape
        out = np.asarray(_f64(a).sum())
        return self._emit("sum", out, (a,), lambda g: (np.broadcast_to(g, src).copy(),))

    def mean(self, a: Tensor) -> Tensor:
        src = a.shape
        n = max(a.data.size, 1)
        out = np.asarray(_f64(a).sum() / n)
        return self._emit("mean", out, (a,), lambda g: (np.broadcast_to(g / n, src).copy(),))

    def mse(self, pred: Tensor, target: Tensor) -> Tensor:
        """Mean squared error over all entries."""
        if pred.shape != target.shape:
            raise ShapeError("mse", f"prediction {pred.shape} vs target {target.shape}")
        diff = _f64(pred) - _f64(target)
        n = max(diff.size, 1)
        out = np.asarray((diff ** 2).sum() / n)

        def backward(g):
            gp = 2.0 * g * diff / n
            return gp, -gp

        return self._emit("mse", out, (pred, target), backward)
