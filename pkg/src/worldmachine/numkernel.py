"""Dense tensors, reverse-mode automatic differentiation, AdamW, and the
warmup-cosine learning-rate schedule.

Tensors wrap numpy arrays. Every primitive records its application on the
implicit computation tape: the produced tensor keeps (op name, parent
tensors, backward closure), so the graph is in topological order by
construction. `backward(loss)` replays the tape once and returns the full
gradient map.

Training runs in float32; verification (finite-difference oracles) runs the
same code in float64 by building float64 leaves. `no_grad()` disables tape
recording for inference passes.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for a primitive."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: non-conforming shapes {self.shapes}")


class GradientNaNError(FloatingPointError):
    """Raised by the optimizer when a gradient contains NaN; carries the
    parameter name so divergence handling can report it."""

    def __init__(self, param_name: str):
        self.param_name = param_name
        super().__init__(f"NaN gradient for parameter '{param_name}'")


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference passes)."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """A numpy array plus its position on the computation tape.

    `_parents` / `_backward` form the tape record of the application that
    produced this tensor (empty for leaves).
    """

    __slots__ = ("data", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype) if dtype else np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float32)
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape}, requires_grad={self.requires_grad})"


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


def _result(data, op: str, parents, backward) -> Tensor:
    """Record one primitive application on the tape (when tracking applies)."""
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy trailing-axis broadcast)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)
    out_data = a.data + b.data

    def backward(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return _result(out_data, "add", (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)
    out_data = a.data - b.data

    def backward(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))

    return _result(out_data, "sub", (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)
    out_data = a.data * b.data

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))

    return _result(out_data, "mul", (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar (not differentiated w.r.t. c)."""
    c = float(c)
    out_data = x.data * c

    def backward(g):
        return (g * c,)

    return _result(out_data, "scale", (x,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """numpy matmul over the last two axes; leading axes broadcast."""
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _result(out_data, "matmul", (a, b), backward)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - y * y),)

    return _result(y, "tanh", (x,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """tanh-form gelu; smooth everywhere so the finite-difference oracle applies."""
    u = _GELU_C * (x.data + _GELU_A * x.data**3)
    t = np.tanh(u)
    y = 0.5 * x.data * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x.data**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)

    return _result(y, "gelu", (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax; -inf entries get exactly zero weight."""
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _result(y, "softmax", (x,), backward)


def layer_norm(x: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean / unit variance along `axis` (no affine)."""
    mu = np.mean(x.data, axis=axis, keepdims=True)
    var = np.var(x.data, axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x.data - mu) * inv

    def backward(g):
        n = x.shape[axis]
        gm = np.mean(g, axis=axis, keepdims=True)
        gy = np.mean(g * y, axis=axis, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _result(y, "layer_norm", (x,), backward)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all elements; returns a scalar tensor."""
    if a.shape != b.shape:
        raise ShapeError("mse", a.shape, b.shape)
    diff = a.data - b.data
    n = diff.size
    out_data = np.asarray((diff * diff).sum() / n, dtype=diff.dtype)

    def backward(g):
        gd = g * 2.0 * diff / n
        return (gd, -gd)

    return _result(out_data, "mse", (a, b), backward)


def concat(xs, axis: int = 0) -> Tensor:
    xs = tuple(xs)
    base = list(xs[0].shape)
    for x in xs[1:]:
        other = list(x.shape)
        if len(other) != len(base) or any(
            i != axis % len(base) and other[i] != base[i] for i in range(len(base))
        ):
            raise ShapeError("concat", xs[0].shape, x.shape)
    out_data = np.concatenate([x.data for x in xs], axis=axis)
    sizes = [x.shape[axis] for x in xs]

    def backward(g):
        splits = np.cumsum(sizes)[:-1]
        return tuple(np.split(g, splits, axis=axis))

    return _result(out_data, "concat", xs, backward)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out_data = x.data[idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return (gx,)

    return _result(out_data, "slice", (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    out_data = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _result(out_data, "reshape", (x,), backward)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out_data = x.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inv),)

    return _result(out_data, "transpose", (x,), backward)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(out_data, "sum", (x,), backward)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod(
        [x.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return scale(tsum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


def scale_shift(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """x * gamma + beta with broadcasting; scale_shift(x, 1, 0) == x exactly."""
    _check_broadcast("scale_shift", x, gamma)
    _check_broadcast("scale_shift", x, beta)
    out_data = x.data * gamma.data + beta.data

    def backward(g):
        return (
            _unbroadcast(g * gamma.data, x.shape),
            _unbroadcast(g * x.data, gamma.shape),
            _unbroadcast(g, beta.shape),
        )

    return _result(out_data, "scale_shift", (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def topo_order(root: Tensor) -> list[Tensor]:
    """Tape nodes reachable from `root`, inputs before consumers."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Run one reverse pass from a scalar loss.

    Returns a gradient map keyed by id(tensor): every tensor reachable on the
    tape that requires gradients gets an entry. Deterministic: identical
    tapes give bit-identical gradients.
    """
    if loss.data.size != 1:
        raise ShapeError("backward", loss.shape)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo_order(loss)):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if not p.requires_grad:
                continue
            acc = grads.get(id(p))
            grads[id(p)] = pg if acc is None else acc + pg
    return grads


def grad_map(loss: Tensor, leaves: dict) -> dict:
    """Gradients for named leaves; leaves unreachable from the loss get zeros."""
    grads = backward(loss)
    return {
        name: grads.get(id(t), np.zeros_like(t.data)) for name, t in leaves.items()
    }


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------


class AdamW:
    """AdamW with decoupled weight decay applied before the moment update."""

    def __init__(self, lr=3e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray], lr=None):
        """One update over named parameters, in place.

        Raises GradientNaNError on the first NaN gradient so training can
        flag the run as divergent.
        """
        lr = self.lr if lr is None else lr
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeError("adamw_step", p.shape, g.shape)
            if np.isnan(g).any():
                raise GradientNaNError(name)
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
                self.t[name] = 0
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            self.t[name] += 1
            t = self.t[name]
            m = self.m[name]
            v = self.v[name]
            m[...] = self.beta1 * m + (1.0 - self.beta1) * g
            v[...] = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            m_hat = m / (1.0 - self.beta1**t)
            v_hat = v / (1.0 - self.beta2**t)
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def cosine_warmup_lr(step, total_steps, warmup_steps, lr_max, lr_min=0.0) -> float:
    """Linear ramp 0 -> lr_max over warmup, then cosine decay lr_max -> lr_min.

    Steps outside [0, total_steps] are clamped.
    """
    if warmup_steps >= total_steps:
        raise ValueError("warmup_steps must be smaller than total_steps")
    step = min(max(step, 0), total_steps)
    if step < warmup_steps:
        return lr_max * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * progress))
