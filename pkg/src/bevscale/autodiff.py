"""Reverse-mode differentiation over float64 numpy arrays.

Every learnable piece of the perception stack is written against the small
op set in this module. Values are stored as ``float64`` and each op records a
closure that maps the output gradient to input gradients. ``backward`` walks
the recorded graph once in reverse topological order.

gelu uses the tanh approximation. ``max_over_set`` routes the gradient of
each (segment, channel) to the lowest input index among tied maxima.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit as _expit

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """Dense float64 array with an optional gradient and graph record."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = "leaf",
                 _backward: Callable | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn: Callable) -> Tensor:
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), op=op, _backward=backward_fn)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), "add", bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), "sub", bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), "mul", bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _make(out, (a, b), "div", bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), "neg", lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** exponent

    def bw(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _make(out, (a,), "pow", bw)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), "relu", lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """gelu(x) = 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), "gelu", bw)


def sigmoid_array(x: np.ndarray) -> np.ndarray:
    """Logistic function on a plain array, split by sign so exp never overflows."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = sigmoid_array(a.data)
    return _make(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), "exp", lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), "abs", lambda g: (g * sign,))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is zero where the clamp is active."""
    a = as_tensor(a)
    inside = (a.data > lo) & (a.data < hi)
    return _make(np.clip(a.data, lo, hi), (a,), "clip", lambda g: (g * inside,))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), "softmax", bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    prob = np.exp(out)

    def bw(g):
        return (g - prob * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), "log_softmax", bw)


def log_sigmoid(a) -> Tensor:
    """log(sigmoid(x)) computed without overflow for large |x|."""
    a = as_tensor(a)
    x = a.data
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    return _make(out, (a,), "log_sigmoid", lambda g: (g * _expit(-x),))


def layernorm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by gamma and shift by beta."""
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    n = a.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ValueError(f"layernorm: gamma/beta shapes {gamma.shape}/{beta.shape} do not match width {n}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        gx = g * gamma.data
        dx = rstd * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return _make(out, (a, gamma, beta), "layernorm", bw)


# ------------------------------------------------------------------ reshaping


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), "sum", bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / max(count, 1))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return _make(out, (a,), "reshape", lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, (a,), "transpose", lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, ts, "concat", bw)


# -------------------------------------------------------------------- linear


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul: operands must be at least 2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError:
        raise ValueError(f"matmul: batch shape mismatch {a.shape} @ {b.shape}") from None

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), "matmul", bw)


def conv2d_3x3(x, weight, bias=None) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1, channels-last.

    x: (B, H, W, Cin); weight: (3, 3, Cin, Cout); bias: (Cout,) or None.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4:
        raise ValueError(f"conv2d_3x3: input must be (B, H, W, C), got {x.shape}")
    if weight.shape[:2] != (3, 3) or weight.ndim != 4 or weight.shape[2] != x.shape[3]:
        raise ValueError(f"conv2d_3x3: weight {weight.shape} incompatible with input {x.shape}")
    B, H, W, C = x.shape
    cout = weight.shape[3]
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.stack([xp[:, i:i + H, j:j + W, :] for i in range(3) for j in range(3)], axis=3)
    cols = cols.reshape(B * H * W, 9 * C)
    wmat = weight.data.reshape(9 * C, cout)
    out = (cols @ wmat).reshape(B, H, W, cout)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ValueError(f"conv2d_3x3: bias {bias.shape} does not match {cout} output channels")
        out = out + bias.data
        parents.append(bias)

    def bw(g):
        g2 = g.reshape(B * H * W, cout)
        dw = (cols.T @ g2).reshape(weight.shape)
        dcols = (g2 @ wmat.T).reshape(B, H, W, 9, C)
        dxp = np.zeros_like(xp)
        k = 0
        for i in range(3):
            for j in range(3):
                dxp[:, i:i + H, j:j + W, :] += dcols[:, :, :, k, :]
                k += 1
        grads = [dxp[:, 1:H + 1, 1:W + 1, :], dw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _make(out, parents, "conv2d_3x3", bw)


# ------------------------------------------------------------- index / sets


def _check_index(op: str, index: np.ndarray, size: int) -> np.ndarray:
    index = np.asarray(index)
    if index.size and not np.issubdtype(index.dtype, np.integer):
        raise TypeError(f"{op}: indices must be integers, got {index.dtype}")
    index = index.astype(np.int64, copy=False)
    if index.size:
        bad = (index < 0) | (index >= size)
        if bad.any():
            raise IndexError(f"{op}: indices {np.unique(index[bad])[:8].tolist()} out of range for size {size}")
    return index


def gather(a, index) -> Tensor:
    """Rows of ``a`` selected by ``index`` (any shape) along axis 0."""
    a = as_tensor(a)
    index = _check_index("gather", index, a.shape[0])
    out = a.data[index]

    def bw(g):
        ga = np.zeros(a.shape)
        np.add.at(ga, index.reshape(-1), g.reshape((-1,) + a.shape[1:]))
        return (ga,)

    return _make(out, (a,), "gather", bw)


def scatter_add(values, index, size: int) -> Tensor:
    """Sum rows of ``values`` into ``size`` output rows: out[index[i]] += values[i]."""
    values = as_tensor(values)
    index = _check_index("scatter_add", index, size)
    if index.shape != values.shape[:1]:
        raise ValueError(f"scatter_add: index shape {index.shape} does not match values {values.shape}")
    out = np.zeros((size,) + values.shape[1:])
    np.add.at(out, index, values.data)
    return _make(out, (values,), "scatter_add", lambda g: (g[index],))


def _segment_layout(op: str, segments, num_segments: int, n: int):
    segments = _check_index(op, segments, num_segments)
    if segments.shape != (n,):
        raise ValueError(f"{op}: segment ids shape {segments.shape} does not match {n} rows")
    counts = np.bincount(segments, minlength=num_segments)
    return segments, counts


def max_over_set(values, segments, num_segments: int) -> Tensor:
    """Per-segment, per-channel maximum of rows of ``values``.

    Every segment must be non-empty. Among tied maxima the gradient goes to
    the row with the lowest index.
    """
    values = as_tensor(values)
    n = values.shape[0]
    segments, counts = _segment_layout("max_over_set", segments, num_segments, n)
    if num_segments and (counts == 0).any():
        raise ValueError(f"max_over_set: empty segments {np.flatnonzero(counts == 0)[:8].tolist()}")
    tail = values.shape[1:]
    if num_segments == 0:
        return _make(np.zeros((0,) + tail), (values,), "max_over_set", lambda g: (np.zeros(values.shape),))
    flat = values.data.reshape(n, -1)
    order = np.argsort(segments, kind="stable")
    svals = flat[order]
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    mx = np.maximum.reduceat(svals, starts, axis=0)
    pos = np.where(svals == mx[segments[order]], np.arange(n)[:, None], n)
    first = np.minimum.reduceat(pos, starts, axis=0)
    arg = order[first]  # (M, C) original row index of the winner
    cols = np.broadcast_to(np.arange(flat.shape[1]), arg.shape)

    def bw(g):
        ga = np.zeros_like(flat)
        ga[arg, cols] = g.reshape(arg.shape)
        return (ga.reshape(values.shape),)

    return _make(mx.reshape((num_segments,) + tail), (values,), "max_over_set", bw)


def mean_over_set(values, segments, num_segments: int) -> Tensor:
    """Per-segment mean of rows; empty segments yield zeros."""
    values = as_tensor(values)
    n = values.shape[0]
    segments, counts = _segment_layout("mean_over_set", segments, num_segments, n)
    inv = 1.0 / np.maximum(counts, 1)
    total = np.zeros((num_segments,) + values.shape[1:])
    np.add.at(total, segments, values.data)
    shape = (-1,) + (1,) * (values.ndim - 1)
    out = total * inv.reshape(shape)

    def bw(g):
        return ((g * inv.reshape(shape))[segments],)

    return _make(out, (values,), "mean_over_set", bw)


# ------------------------------------------------------------------ dispatch

OPS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "relu": relu,
    "gelu": gelu,
    "sigmoid": sigmoid,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "log_sigmoid": log_sigmoid,
    "log": log,
    "layernorm": layernorm,
    "conv2d_3x3": conv2d_3x3,
    "gather": gather,
    "scatter_add": scatter_add,
    "max_over_set": max_over_set,
    "mean_over_set": mean_over_set,
}


def forward_op(op: str, *inputs, **kwargs) -> Tensor:
    """Apply a named op from the core set, e.g. ``forward_op("relu", x)``."""
    try:
        fn = OPS[op]
    except KeyError:
        raise ValueError(f"unknown op {op!r}; expected one of {sorted(OPS)}") from None
    return fn(*inputs, **kwargs)


# ------------------------------------------------------------------ backward


@dataclass
class Graph:
    """Recorded computation reachable from one output, in topological order."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    @property
    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf]


def backward(loss: Tensor, graph: Graph | None = None) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every recorded leaf.

    Returns a mapping from leaf tensors to the gradient contributed by this
    call.
    """
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    graph = graph or Graph.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    result: dict[Tensor, np.ndarray] = {}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            result[node] = g
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if not p.requires_grad or pg is None:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return result


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    return math.sqrt(total)


def numeric_grad(fn: Callable[[], Tensor], param: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` with respect to ``param``."""
    grad = np.zeros(param.shape)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = fn().item()
            flat[i] = orig - step
            fm = fn().item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> float:
    """Norm-wise relative error; gradients with norm below ``floor`` are compared absolutely.

    The floor keeps finite-difference roundoff (about 1e-11 per entry at the
    default step) from dominating when the true gradient is exactly zero.
    """
    num = float(np.linalg.norm(analytic - numeric))
    den = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), floor)
    return num / den


def gradcheck(fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5) -> float:
    """Worst relative error between backward and central differences over ``params``."""
    for p in params:
        p.grad = None
    loss = fn()
    backward(loss)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros(p.shape)
        worst = max(worst, relative_error(analytic, numeric_grad(fn, p, step)))
    return worst
