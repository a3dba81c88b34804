"""Minimal dense tensor engine with reverse-mode differentiation.

Only the operations the model needs are provided. Tensors wrap numpy arrays
(float32 by default). Every differentiable op records a node holding its
inputs and a closure mapping the output gradient to input gradients; nodes
carry a global sequence number, so sorting the reachable nodes by that number
and walking them backwards replays the forward pass in exact reverse order.

A graph may be differentiated once. Gradient checks upcast the checked leaves
to float64 for the duration of the check ("shadow mode"); numpy promotion
then carries float64 through every op that touches them.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from tipformer.errors import ConfigError, DimensionError, UsageError

_seq = itertools.count()
_local = threading.local()


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    """Skip graph recording on the current thread (inference)."""
    prev = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class _Node:
    __slots__ = ("seq", "inputs", "backward", "consumed", "op")

    def __init__(self, inputs, backward, op):
        self.seq = next(_seq)
        self.inputs = inputs
        self.backward = backward
        self.consumed = False
        self.op = op


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=np.float32):
        arr = np.asarray(data)
        if dtype is not None and arr.dtype != dtype:
            arr = arr.astype(dtype)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self.name = name

    @classmethod
    def _result(cls, data: np.ndarray, inputs: tuple["Tensor", ...], backward, op: str) -> "Tensor":
        out = cls(data, dtype=None)
        if _grad_enabled() and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out._node = _Node(inputs, backward, op)
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _not_scalar(t: Tensor):
    raise UsageError(f"item() needs a single-element tensor, got shape {t.shape}")


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype), dtype=None)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- backward


class Tape:
    """Ordered record of the ops that produced ``loss``.

    ``entries`` lists every recorded tensor reachable from the loss in forward
    execution order; :meth:`backward` walks it in reverse.
    """

    def __init__(self, loss: Tensor):
        if loss.data.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise UsageError("loss does not depend on any tensor that requires grad")
        self.loss = loss
        seen: set[int] = set()
        entries: list[Tensor] = []
        stack = [loss]
        while stack:
            t = stack.pop()
            if id(t) in seen or t._node is None:
                continue
            seen.add(id(t))
            if t._node.consumed:
                raise UsageError("graph already differentiated; run a new forward pass before backward")
            entries.append(t)
            stack.extend(t._node.inputs)
        entries.sort(key=lambda t: t._node.seq)
        self.entries = entries

    def backward(self) -> None:
        loss = self.loss
        seed = np.ones_like(loss.data)
        if loss._node is None:
            loss.grad = seed if loss.grad is None else loss.grad + seed
            return
        pending: dict[int, np.ndarray] = {id(loss): seed}
        for t in reversed(self.entries):
            node = t._node
            g = pending.pop(id(t), None)
            if g is not None:
                in_grads = node.backward(g)
                for src, gi in zip(node.inputs, in_grads):
                    if gi is None or not src.requires_grad:
                        continue
                    if src._node is None:
                        src.grad = gi.copy() if src.grad is None else src.grad + gi
                    else:
                        key = id(src)
                        pending[key] = gi if key not in pending else pending[key] + gi
            node.consumed = True
            node.backward = None


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    Tape(loss).backward()


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(out, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(out, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = b
        out = a.data * c

        def bw_scalar(g):
            return (g * c,)

        return Tensor._result(out, (a,), bw_scalar, "scale")
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._result(out, (a, b), bw, "mul")


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def bw(g):
        return (g * s * (1 - s),)

    return Tensor._result(s, (x,), bw, "sigmoid")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


# ---------------------------------------------------------------- shape ops


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)

    def bw(g):
        return (np.transpose(g, inv),)

    return Tensor._result(out, (x,), bw, "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    out = x.data.reshape(shape)

    def bw(g):
        return (g.reshape(src),)

    return Tensor._result(out, (x,), bw, "reshape")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor._result(out, tensors, bw, "concat")


def take_rows(table: Tensor, indices) -> Tensor:
    """Gather rows of a 2-D table (embedding lookup)."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError("take_rows expects a 1-D index list")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise DimensionError(f"index out of range for table with {table.shape[0]} rows")
    out = table.data[idx]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return Tensor._result(out, (table,), bw, "take_rows")


# ---------------------------------------------------------------- reductions


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis)
    src = x.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, src).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return Tensor._result(np.asarray(out), (x,), bw, "sum")


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


def row_l2_norm(x: Tensor) -> Tensor:
    """Euclidean norm of each row (last axis). Zero rows get zero gradient."""
    norm = np.sqrt(np.sum(x.data * x.data, axis=-1))

    def bw(g):
        safe = np.where(norm > 0, norm, 1.0)
        scale = np.where(norm > 0, g / safe, 0.0)
        return (x.data * scale[..., None],)

    return Tensor._result(norm, (x,), bw, "row_l2_norm")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D operands, or batched 3-D operands with equal batch size."""
    if a.ndim not in (2, 3) or b.ndim != a.ndim:
        raise DimensionError(f"matmul needs two 2-D or two 3-D tensors, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return Tensor._result(out, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with weight stored as (in, out)."""
    y = matmul(x, weight)
    return add(y, bias) if bias is not None else y


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Cross-correlation along the sequence axis with zero 'same' padding.

    x is (L, C_in), kernel (k, C_in, C_out), bias (C_out,). Output is (L, C_out).
    """
    k, c_in, c_out = kernel.shape
    if k % 2 == 0:
        raise ConfigError(f"conv1d kernel width must be odd, got {k}")
    if x.ndim != 2 or x.shape[1] != c_in:
        raise DimensionError(f"conv1d input {x.shape} does not match kernel {kernel.shape}")
    if bias.shape != (c_out,):
        raise DimensionError(f"conv1d bias {bias.shape} does not match {c_out} output channels")
    length = x.shape[0]
    pad = k // 2
    xp = np.pad(x.data, ((pad, pad), (0, 0)))
    windows = np.stack([xp[j:j + length] for j in range(k)], axis=1).reshape(length, k * c_in)
    kmat = kernel.data.reshape(k * c_in, c_out)
    out = windows @ kmat + bias.data

    def bw(g):
        gx = gk = None
        if x.requires_grad:
            gwin = (g @ kmat.T).reshape(length, k, c_in)
            gxp = np.zeros_like(xp, dtype=gwin.dtype)
            for j in range(k):
                gxp[j:j + length] += gwin[:, j]
            gx = gxp[pad:pad + length]
        if kernel.requires_grad:
            gk = (windows.T @ g).reshape(k, c_in, c_out)
        return gx, gk, g.sum(axis=0)

    return Tensor._result(out, (x, kernel, bias), bw, "conv1d")


# ---------------------------------------------------------------- activations / norms


def glu(x: Tensor) -> Tensor:
    """First half of the last axis is the value, second half the gate."""
    n = x.shape[-1]
    if n % 2:
        raise DimensionError(f"glu needs an even last dimension, got {n}")
    half = n // 2
    a = x.data[..., :half]
    s = _sigmoid(x.data[..., half:])
    out = a * s

    def bw(g):
        return (np.concatenate([g * s, g * a * s * (1 - s)], axis=-1),)

    return Tensor._result(out, (x,), bw, "glu")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis using the population variance."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm affine params must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        g2 = g.reshape(-1, d)
        return gx, (g2 * xhat.reshape(-1, d)).sum(axis=0), g2.sum(axis=0)

    return Tensor._result(out, (x, gamma, beta), bw, "layer_norm")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._result(s, (x,), bw, "softmax")


def dropout(x: Tensor, rate: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; eval mode (or rate 0) returns ``x`` itself."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise UsageError("train-mode dropout needs a random generator")
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / x.data.dtype.type(1.0 - rate)
    out = x.data * keep

    def bw(g):
        return (g * keep,)

    return Tensor._result(out, (x,), bw, "dropout")


def bce(p: Tensor, y, eps: float = 1e-7) -> Tensor:
    """Summed binary cross-entropy on clamped probabilities."""
    y = np.asarray(y, dtype=p.data.dtype).reshape(p.shape)
    pc = np.clip(p.data, eps, 1.0 - eps)
    loss = -(y * np.log(pc) + (1 - y) * np.log(1 - pc)).sum()
    inside = (p.data >= eps) & (p.data <= 1.0 - eps)

    def bw(g):
        return (g * np.where(inside, (pc - y) / (pc * (1 - pc)), 0.0),)

    return Tensor._result(np.asarray(loss), (p,), bw, "bce")


# ---------------------------------------------------------------- gradient check


_REL_FLOOR = 1e-6


@dataclass
class GradCheckResult:
    passed: bool
    max_rel_error: float
    worst: tuple[int, tuple[int, ...]] | None = None
    checked: int = 0


def grad_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    h: float = 1e-3,
    tol: float = 1e-3,
    shadow: bool = True,
    max_per_tensor: int | None = None,
    seed: int = 0,
) -> GradCheckResult:
    """Compare analytic gradients with central differences.

    ``f`` is called as ``f(*xs)`` and must return a deterministic scalar.
    With ``shadow`` the checked tensors are upcast to float64 for the
    duration of the check and restored afterwards. ``max_per_tensor`` limits
    the number of randomly chosen entries probed per tensor.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    saved = [(t.data, t.grad, t.requires_grad) for t in xs]
    try:
        for t in xs:
            if shadow:
                t.data = t.data.astype(np.float64)
            t.grad = None
            t.requires_grad = True
        out = f(*xs)
        with no_grad():
            again = f(*xs)
        if out.data.size != 1:
            raise UsageError("grad_check needs a scalar-valued function")
        if out.data.tobytes() != again.data.tobytes():
            raise UsageError("grad_check needs a deterministic function (dropout must be in eval mode)")
        backward(out)

        rng = np.random.default_rng(seed)
        worst_err, worst_at, checked = 0.0, None, 0
        for ti, t in enumerate(xs):
            analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            positions = np.arange(flat.size)
            if max_per_tensor is not None and flat.size > max_per_tensor:
                positions = np.sort(rng.choice(flat.size, max_per_tensor, replace=False))
            for pos in positions:
                orig = flat[pos]
                flat[pos] = orig + h
                with no_grad():
                    up = float(f(*xs).data)
                flat[pos] = orig - h
                with no_grad():
                    down = float(f(*xs).data)
                flat[pos] = orig
                numeric = (up - down) / (2 * h)
                a = float(analytic.reshape(-1)[pos])
                # the floor keeps round-off on true zeros from reading as relative error
                err = abs(a - numeric) / max(_REL_FLOOR, abs(a) + abs(numeric))
                checked += 1
                if worst_at is None or err > worst_err:
                    worst_err = err
                    worst_at = (ti, tuple(int(i) for i in np.unravel_index(pos, t.shape)))
        return GradCheckResult(worst_err <= tol, worst_err, worst_at, checked)
    finally:
        for t, (data, grad, req) in zip(xs, saved):
            t.data, t.grad, t.requires_grad = data, grad, req
