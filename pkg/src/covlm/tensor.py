"""Reverse-mode autodiff over numpy arrays.

Tensors store float32 by default (float64 is supported so gradient checks
can run above float32 noise). Each op records a backward closure on the
output node; `backward()` walks the recorded graph once and then frees it.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

DEFAULT_DTYPE = np.float32

# Module-level switches. CHECK_FINITE guards every op output; GRAD_ENABLED
# is toggled by no_grad() for inference paths.
CHECK_FINITE = True
GRAD_ENABLED = True


class TensorError(Exception):
    pass


class ShapeError(TensorError):
    pass


class NonFiniteError(TensorError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global GRAD_ENABLED
    prev = GRAD_ENABLED
    GRAD_ENABLED = False
    try:
        yield
    finally:
        GRAD_ENABLED = prev


def _as_array(data, dtype=None):
    # constructor dtype is explicit-or-default; op outputs keep their own
    return np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)


def _check(arr, op: str):
    if CHECK_FINITE and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by op '{op}'")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_is_leaf")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        if CHECK_FINITE and not np.all(np.isfinite(self.data)):
            raise NonFiniteError("non-finite values in tensor constructor")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._is_leaf = True

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __neg__(self):
        return mul(self, _lift(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, a: int, b: int):
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DEFAULT_DTYPE))


def _make(data, op: str, parents, bwd) -> Tensor:
    _check(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    track = GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._is_leaf = False
    if track:
        out._parents = tuple(parents)
        out._backward = bwd
    else:
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        t.grad = t.grad + g


def _unbroadcast(g, shape):
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(data, "add", (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(data, "sub", (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(data, "mul", (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    with np.errstate(all="ignore"):  # the finiteness check raises instead
        data = a.data / b.data

    def bwd(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(data, "div", (a, b), bwd)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    data = np.maximum(a.data, b.data)

    def bwd(g):
        take_a = a.data >= b.data
        _accum(a, _unbroadcast(g * take_a, a.shape))
        _accum(b, _unbroadcast(g * ~take_a, b.shape))

    return _make(data, "maximum", (a, b), bwd)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    data = np.minimum(a.data, b.data)

    def bwd(g):
        take_a = a.data <= b.data
        _accum(a, _unbroadcast(g * take_a, a.shape))
        _accum(b, _unbroadcast(g * ~take_a, b.shape))

    return _make(data, "minimum", (a, b), bwd)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)

    def bwd(g):
        _accum(a, g * (a.data > 0))

    return _make(data, "relu", (a,), bwd)


# -- transcendental -----------------------------------------------------------


def exp(a: Tensor) -> Tensor:
    with np.errstate(all="ignore"):
        data = np.exp(a.data)

    def bwd(g):
        _accum(a, g * data)

    return _make(data, "exp", (a,), bwd)


def log(a: Tensor) -> Tensor:
    with np.errstate(all="ignore"):
        data = np.log(a.data)

    def bwd(g):
        _accum(a, g / a.data)

    return _make(data, "log", (a,), bwd)


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(all="ignore"):
        data = np.sqrt(a.data)

    def bwd(g):
        _accum(a, g * 0.5 / data)

    return _make(data, "sqrt", (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def bwd(g):
        _accum(a, g * (1.0 - data * data))

    return _make(data, "tanh", (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    # exp of -|x| never overflows
    data = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                    np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
    data = data.astype(a.dtype, copy=False)

    def bwd(g):
        _accum(a, g * data * (1.0 - data))

    return _make(data, "sigmoid", (a,), bwd)


def softplus(a: Tensor) -> Tensor:
    data = np.logaddexp(0.0, a.data).astype(a.dtype, copy=False)

    def bwd(g):
        sig = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                       np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
        _accum(a, g * sig)

    return _make(data, "softplus", (a,), bwd)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximate GELU; smooth everywhere, so finite-difference friendly."""
    x = a.data
    u = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    data = (0.5 * x * (1.0 + t)).astype(a.dtype, copy=False)

    def bwd(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        _accum(a, g * local)

    return _make(data, "gelu", (a,), bwd)


# -- linear algebra / shape ---------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def bwd(g):
        _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(data, "matmul", (a, b), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def bwd(g):
        _accum(a, g.reshape(a.shape))

    return _make(data, "reshape", (a,), bwd)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    data = np.swapaxes(a.data, ax1, ax2)

    def bwd(g):
        _accum(a, np.swapaxes(g, ax1, ax2))

    return _make(data, "swapaxes", (a,), bwd)


def concat(parts, axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat of zero tensors")
    data = np.concatenate([p.data for p in parts], axis=axis)

    def bwd(g):
        offs = 0
        for p in parts:
            n = p.shape[axis]
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offs, offs + n)
            _accum(p, g[tuple(idx)])
            offs += n

    return _make(data, "concat", tuple(parts), bwd)


def stack(parts, axis: int = 0) -> Tensor:
    parts = list(parts)
    data = np.stack([p.data for p in parts], axis=axis)

    def bwd(g):
        for i, p in enumerate(parts):
            _accum(p, np.take(g, i, axis=axis))

    return _make(data, "stack", tuple(parts), bwd)


def slice_(a: Tensor, key) -> Tensor:
    """Basic (non-duplicating) indexing with ints, slices, tuples thereof."""
    data = a.data[key]

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[key] += g
            _accum(a, full)

    return _make(data, "slice", (a,), bwd)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(gg, a.shape).copy())

    return _make(np.asarray(data), "sum", (a,), bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    data = a.data.mean(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            _accum(a, np.broadcast_to(g / n, a.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(gg / n, a.shape).copy())

    return _make(np.asarray(data), "mean", (a,), bwd)


# -- structured ops -----------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        _accum(a, data * (g - dot))

    return _make(data.astype(a.dtype, copy=False), "softmax", (a,), bwd)


def layernorm(a: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean / unit variance along `axis`. No affine part;
    apply gain and bias with mul/add outside."""
    x = a.data
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    data = (xc * inv).astype(a.dtype, copy=False)

    def bwd(g):
        n = x.shape[axis]
        gm = g.mean(axis=axis, keepdims=True)
        gxc = (g * data).mean(axis=axis, keepdims=True)
        _accum(a, inv * (g - gm - data * gxc))

    return _make(data, "layernorm", (a,), bwd)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup: table (V, D), ids int array -> (..., D)."""
    ids = np.asarray(ids, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding ids out of range [0, {table.shape[0]})")
    data = table.data[ids]

    def bwd(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, ids, g)
            _accum(table, full)

    return _make(data, "embedding", (table,), bwd)


def gather_nd(a: Tensor, idx0, idx1) -> Tensor:
    """Select rows a[idx0[k], idx1[k]] from a (B, S, D) tensor -> (K, D)."""
    idx0 = np.asarray(idx0, dtype=np.intp)
    idx1 = np.asarray(idx1, dtype=np.intp)
    data = a.data[idx0, idx1]

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, (idx0, idx1), g)
            _accum(a, full)

    return _make(data, "gather_nd", (a,), bwd)


def scatter_rows(values: Tensor, rows, length: int) -> Tensor:
    """Place values (K, D) at unique row indices into a zero (length, D) tensor."""
    rows = np.asarray(rows, dtype=np.intp)
    if len(set(rows.tolist())) != len(rows):
        raise ShapeError("scatter_rows requires unique row indices")
    data = np.zeros((length,) + values.shape[1:], dtype=values.dtype)
    data[rows] = values.data

    def bwd(g):
        _accum(values, g[rows])

    return _make(data, "scatter_rows", (values,), bwd)


def zeros(shape, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or DEFAULT_DTYPE))


def masked_nll(logits: Tensor, targets, mask) -> Tensor:
    """Mean negative log-likelihood of `targets` under softmax(logits) over
    positions where mask is true. logits (..., V), targets/mask (...)."""
    targets = np.asarray(targets, dtype=np.intp)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != logits.shape[:-1] or targets.shape != mask.shape:
        raise ShapeError(
            f"masked_nll shapes: logits {logits.shape}, targets {targets.shape}, mask {mask.shape}")
    count = int(mask.sum())
    if count == 0:
        raise ValueError("masked_nll with zero included positions")
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))
    logp = x - lse
    tgt = np.clip(targets, 0, logits.shape[-1] - 1)
    picked = np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0]
    data = np.asarray(-(picked * mask).sum() / count, dtype=logits.dtype)

    def bwd(g):
        if logits.requires_grad:
            p = np.exp(logp)
            onehot = np.zeros_like(p)
            np.put_along_axis(onehot, tgt[..., None], 1.0, axis=-1)
            gl = (p - onehot) * mask[..., None] * (g / count)
            _accum(logits, gl.astype(logits.dtype, copy=False))

    return _make(data, "masked_nll", (logits,), bwd)


def log_probs(logits: np.ndarray) -> np.ndarray:
    """Plain-numpy stable log-softmax over the last axis (scoring helper)."""
    m = logits.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))
    return logits - lse


# -- engine -------------------------------------------------------------------


def backward(loss: Tensor):
    """Populate .grad on every reachable requires_grad leaf, then free the graph."""
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._backward is None and loss._is_leaf:
        raise TensorError("backward on a leaf with no recorded computation")

    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    # clear the tape: keep gradients only on leaves
    for node in topo:
        node._backward = None
        node._parents = ()
        if not node._is_leaf:
            node.grad = None
