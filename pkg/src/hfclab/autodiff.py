"""Dense float64 tensors with reverse-mode automatic differentiation.

Every forward operation records its parents and a backward closure on the
output tensor; ``backward(loss)`` topologically sorts the reachable graph and
accumulates gradients in reverse. The graph is rebuilt from scratch on every
forward pass (dynamic graph), so one training step owns exactly one record.

``finite_diff_check`` is the independent oracle used by the test suite and the
``gradcheck`` command: central differences per coordinate against the recorded
gradient.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_CLAMP = 1e-12
LAYER_NORM_EPS = 1e-5

# gelu tanh approximation constants
_GELU_C = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy an operation's contract."""


class Tensor:
    """A dense float64 array plus its slot in the active computation record.

    Leaf tensors (inputs, parameters) have no parents. Non-leaf tensors carry
    a backward closure that scatters the output gradient into their parents.
    """

    __slots__ = ("data", "_grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self._grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def grad(self) -> np.ndarray:
        """Accumulated gradient; zeros for nodes backward never reached."""
        if self._grad is None:
            return np.zeros_like(self.data)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self._grad is None:
            self._grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self._grad += g  # safe: _grad is always an owned copy

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    # Operator sugar used throughout the model code.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add(self, scale(other, -1.0))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents), op=op)
    out._parents = tuple(parents)
    out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def constant(data) -> Tensor:
    """A leaf that never receives gradient (detached target, mask, weight)."""
    return Tensor(data, requires_grad=False, op="const")


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64, copy=True), requires_grad=True, op="param")


# ---------------------------------------------------------------------------
# elementwise suite


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g: np.ndarray) -> None:
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return _result(data, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g: np.ndarray) -> None:
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(data, (a, b), backward, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data / b.data
    except ValueError:
        raise ShapeError(f"div: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g: np.ndarray) -> None:
        a._accumulate(_unbroadcast(g / b.data, a.shape))
        b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _result(data, (a, b), backward, "div")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g: np.ndarray) -> None:
        a._accumulate(g * c)

    return _result(a.data * c, (a,), backward, "scale")


def add_const(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g: np.ndarray) -> None:
        a._accumulate(g)

    return _result(a.data + c, (a,), backward, "add_const")


def log(a: Tensor) -> Tensor:
    """Natural log with the input clamped below at LOG_CLAMP."""
    clamped = np.maximum(a.data, LOG_CLAMP)
    active = a.data > LOG_CLAMP

    def backward(g: np.ndarray) -> None:
        a._accumulate(np.where(active, g / clamped, 0.0))

    return _result(np.log(clamped), (a,), backward, "log")


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward(g: np.ndarray) -> None:
        a._accumulate(g * data)

    return _result(data, (a,), backward, "exp")


def power(a: Tensor, p: float) -> Tensor:
    """a**p for a constant exponent; base clamped at LOG_CLAMP for p < 1."""
    p = float(p)
    base = np.maximum(a.data, LOG_CLAMP) if p < 1.0 else a.data
    data = base**p

    def backward(g: np.ndarray) -> None:
        a._accumulate(g * p * base ** (p - 1.0))

    return _result(data, (a,), backward, "power")


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated gelu: 0.5x(1 + tanh(c(x + 0.044715x^3)))."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    data = 0.5 * x * (1.0 + t)

    def backward(g: np.ndarray) -> None:
        dinner = _GELU_C * (1.0 + 3.0 * 0.044715 * x2)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        a._accumulate(g * local)

    return _result(data, (a,), backward, "gelu")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    parts = list(tensors)
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: incompatible shapes {[p.shape for p in parts]} along axis {axis}"
        )
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g: np.ndarray) -> None:
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            part._accumulate(g[tuple(idx)])

    return _result(data, parts, backward, "concat")


def split(a: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    """Partition along an axis into consecutive chunks of the given sizes."""
    if sum(sizes) != a.data.shape[axis]:
        raise ShapeError(
            f"split: sizes {list(sizes)} do not cover extent {a.data.shape[axis]} on axis {axis}"
        )
    outs: list[Tensor] = []
    lo = 0
    for size in sizes:
        hi = lo + size
        idx = [slice(None)] * a.data.ndim
        idx[axis] = slice(lo, hi)
        idx_t = tuple(idx)

        def backward(g: np.ndarray, idx_t=idx_t) -> None:
            full = np.zeros_like(a.data)
            full[idx_t] = g
            a._accumulate(full)

        outs.append(_result(a.data[idx_t].copy(), (a,), backward, "split"))
        lo = hi
    return outs


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")

    def backward(g: np.ndarray) -> None:
        a._accumulate(g.T)

    return _result(a.data.T.copy(), (a,), backward, "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    new_shape = tuple(shape)
    if int(np.prod(new_shape)) != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {new_shape}")

    def backward(g: np.ndarray) -> None:
        a._accumulate(g.reshape(a.shape))

    return _result(a.data.reshape(new_shape).copy(), (a,), backward, "reshape")


def tile_rows(a: Tensor, reps: int) -> Tensor:
    """Stack `reps` copies of a matrix vertically; backward sums the copies."""
    if a.data.ndim != 2:
        raise ShapeError(f"tile_rows: expected a matrix, got shape {a.shape}")

    def backward(g: np.ndarray) -> None:
        a._accumulate(g.reshape(reps, *a.shape).sum(axis=0))

    return _result(np.tile(a.data, (reps, 1)), (a,), backward, "tile_rows")


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    data = a.data.sum(axis=axis)

    def backward(g: np.ndarray) -> None:
        if axis is None:
            a._accumulate(np.full_like(a.data, float(g)))
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    return _result(data, (a,), backward, "sum")


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    count = a.data.size if axis is None else a.data.shape[axis]
    return scale(sum_(a, axis=axis), 1.0 / count)


# ---------------------------------------------------------------------------
# structured ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not chain")
    data = a.data @ b.data

    def backward(g: np.ndarray) -> None:
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    return _result(data, (a, b), backward, "matmul")


def attention(q: Tensor, k: Tensor, v: Tensor, batch: int) -> tuple[Tensor, np.ndarray]:
    """Sample-local softmax(q kᵀ) v over `batch` consecutive row blocks.

    q is (batch*m, d); k and v are (batch*n, d). Scores are formed per sample
    (no cross-sample attention), softmaxed with max-subtraction along the key
    axis, and applied to v. Returns the output rows plus the detached
    (batch, m, n) probability tensor for diagnostics.
    """
    bm, d = q.data.shape
    bn, dk = k.data.shape
    if dk != d or v.data.shape[0] != bn:
        raise ShapeError(f"attention: shapes {q.shape}/{k.shape}/{v.shape} do not agree")
    if bm % batch or bn % batch:
        raise ShapeError(f"attention: rows {bm}/{bn} not divisible by batch {batch}")
    m, n = bm // batch, bn // batch
    q3 = q.data.reshape(batch, m, d)
    k3 = k.data.reshape(batch, n, d)
    v3 = v.data.reshape(batch, n, -1)
    scores = q3 @ k3.transpose(0, 2, 1)
    if not np.all(np.isfinite(scores)):
        raise ValueError("attention: scores contain non-finite values")
    scores -= scores.max(axis=2, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=2, keepdims=True)
    probs = scores  # (batch, m, n), rows sum to 1
    out_data = (probs @ v3).reshape(bm, v3.shape[2])

    def backward(g: np.ndarray) -> None:
        g3 = g.reshape(batch, m, -1)
        dv = probs.transpose(0, 2, 1) @ g3
        da = g3 @ v3.transpose(0, 2, 1)
        ds = probs * (da - (da * probs).sum(axis=2, keepdims=True))
        q._accumulate((ds @ k3).reshape(bm, d))
        k._accumulate((ds.transpose(0, 2, 1) @ q3).reshape(bn, d))
        v._accumulate(dv.reshape(v.shape))

    return _result(out_data, (q, k, v), backward, "attention"), probs


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along one axis; rejects non-finite input."""
    if not np.all(np.isfinite(a.data)):
        raise ValueError("softmax: input contains non-finite values")
    ax = axis if axis >= 0 else a.data.ndim + axis
    if ax < 0 or ax >= a.data.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for shape {a.shape}")
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=ax, keepdims=True)

    def backward(g: np.ndarray) -> None:
        # d/dx softmax: s * (g - sum(g * s)) along the axis
        dot = (g * data).sum(axis=ax, keepdims=True)
        a._accumulate(data * (g - dot))

    return _result(data, (a,), backward, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize each row over the last axis, then apply the affine map."""
    d = x.data.shape[-1]
    if d == 0:
        raise ShapeError("layer_norm: last extent must be positive")
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias shapes {gain.shape}/{bias.shape} must be ({d},)"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    data = xhat * gain.data + bias.data

    def backward(g: np.ndarray) -> None:
        gy = g * gain.data
        # classic per-row layer-norm gradient
        dx = inv_std * (gy - gy.mean(axis=-1, keepdims=True) - xhat * (gy * xhat).mean(axis=-1, keepdims=True))
        x._accumulate(dx)
        reduce_axes = tuple(range(g.ndim - 1))
        gain._accumulate((g * xhat).sum(axis=reduce_axes))
        bias._accumulate(g.sum(axis=reduce_axes))

    return _result(data, (x, gain, bias), backward, "layer_norm")


# ---------------------------------------------------------------------------
# reverse pass


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Reverse-accumulate gradients of a scalar loss into all reachable nodes."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    order = _topo_order(loss)
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


def zero_all(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_diff_check(
    f: Callable[[Tensor], Tensor], x: np.ndarray, step: float = 1e-5
) -> float:
    """Max relative error between the recorded gradient of f and central differences.

    f must be a pure map from one tensor to a scalar tensor. Relative error per
    coordinate uses denominator max(|analytic|, |numeric|, 1e-8).
    """
    if step <= 0:
        raise ValueError("finite_diff_check: step must be positive")
    x0 = np.asarray(x, dtype=np.float64)

    probe = Tensor(x0.copy(), requires_grad=True)
    out = f(probe)
    backward(out)
    analytic = probe.grad.reshape(-1)

    numeric = np.empty(x0.size)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + step
        f_plus = f(Tensor(bumped.reshape(x0.shape))).item()
        bumped[i] = flat[i] - step
        f_minus = f(Tensor(bumped.reshape(x0.shape))).item()
        numeric[i] = (f_plus - f_minus) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
