"""Dense tensors with reverse-mode automatic differentiation.

Every op takes :class:`Tensor` (or array-like constants) and returns a new
:class:`Tensor`. When any input requires gradients the op records a closure
that maps the output gradient to input gradients; :func:`backward` walks the
recorded graph in reverse topological order.

Values are float64 unless :func:`set_default_dtype` says otherwise.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

NEG_LARGE = -1e9

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when op inputs do not conform to the op's shape rule."""


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


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


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


_SELECTIONS: list | None = None


@contextlib.contextmanager
def selection_log():
    """Collect the discrete choices (argmax / argmin indices) made inside the block.

    Piecewise-smooth functions are differentiable only where these choices
    are locally constant; gradient checking uses the log to spot stencils
    that straddle a switch.
    """
    global _SELECTIONS
    prev = _SELECTIONS
    _SELECTIONS = []
    try:
        yield _SELECTIONS
    finally:
        _SELECTIONS = prev


def record_selection(index: np.ndarray) -> None:
    if _SELECTIONS is not None:
        _SELECTIONS.append(np.array(index, copy=True))


class Tensor:
    """An n-d array of reals plus (optionally) a gradient accumulator.

    ``grad`` is allocated for tensors created with ``requires_grad=True``;
    tensors produced by ops carry ``requires_grad`` as a flag only and receive
    their gradients transiently during :func:`backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=dtype or _DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
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
        return float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return len(self.data)

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
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by scalars")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=-1, keepdims=False):
        return max_(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: produced non-finite values")


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap an op result, recording ``backward_fn`` if any parent needs grads.

    ``backward_fn(g)`` receives the output gradient and returns one gradient
    array (or ``None``) per parent.
    """
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(op: str, *shapes) -> tuple:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {' and '.join(map(str, shapes))}") from None


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return make_node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return make_node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return make_node(ad * bd, (a, b), bw, "mul")


def gelu(x) -> Tensor:
    """Tanh-approximated GELU."""
    x = as_tensor(x)
    xd = x.data
    c = np.sqrt(2.0 / np.pi)
    inner = c * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = c * (1.0 + 3 * 0.044715 * xd**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return make_node(out, (x,), bw, "gelu")


# ---------------------------------------------------------------- shape ops


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} into {tuple(shape)}") from None
    return make_node(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    return make_node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(x, a1: int, a2: int) -> Tensor:
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, axes)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) if t.requires_grad else None
            for i, t in enumerate(ts)
        )

    return make_node(out, ts, bw, "concat")


def split(x, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    """Cut ``x`` along ``axis`` into consecutive pieces of the given sizes."""
    x = as_tensor(x)
    ax = axis % x.ndim
    if sum(sizes) != x.shape[ax]:
        raise ShapeError(f"split: sizes {list(sizes)} do not sum to extent {x.shape[ax]} of {x.shape}")
    out = []
    start = 0
    for n in sizes:
        out.append(_slice(x, ax, start, start + n))
        start += n
    return out


def _slice(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return make_node(x.data[index], (x,), bw, "split")


def gather_rows(x, index) -> Tensor:
    """Select rows of ``x`` (along axis 0) with an integer array of any shape.

    Output shape is ``index.shape + x.shape[1:]``.
    """
    x = as_tensor(x)
    idx = np.asarray(index, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {x.shape[0]} rows")
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx.reshape(-1), g.reshape((-1,) + shape[1:]))
        return (full,)

    return make_node(x.data[idx], (x,), bw, "gather_rows")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    _broadcast_shape("matmul", a.shape[:-2], b.shape[:-2])
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_node(ad @ bd, (a, b), bw, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` over the last axis; weight is (in, out)."""
    x, w = as_tensor(x), as_tensor(weight)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    parents = [x, w]
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (w.shape[1],):
            raise ShapeError(f"linear: bias {bias.shape} does not match weight {w.shape}")
        out = out + bias.data
        parents.append(bias)
    out_shape = x.shape[:-1] + (w.shape[1],)

    def bw(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_node(out.reshape(out_shape), parents, bw, "linear")


def conv2d_3x3_s2(x, weight, bias=None) -> Tensor:
    """3x3 convolution, stride 2, zero padding 1, channels-last.

    ``x`` is (B, H, W, Cin) or (H, W, Cin); ``weight`` is (3, 3, Cin, Cout).
    Output spatial extent is ``(H - 1) // 2 + 1``.
    """
    x, w = as_tensor(x), as_tensor(weight)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or w.shape[:2] != (3, 3) or w.ndim != 4 or xd.shape[-1] != w.shape[2]:
        raise ShapeError(f"conv2d_3x3_s2: input {x.shape} does not match weight {w.shape}")
    B, H, W, _ = xd.shape
    Ho, Wo = (H - 1) // 2 + 1, (W - 1) // 2 + 1
    xp = np.pad(xd, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.zeros((B, Ho, Wo, w.shape[3]), dtype=xd.dtype)
    taps = [(dy, dx) for dy in range(3) for dx in range(3)]
    for dy, dx in taps:
        out += xp[:, dy : dy + 2 * Ho : 2, dx : dx + 2 * Wo : 2, :] @ w.data[dy, dx]
    parents = [x, w]
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data
        parents.append(bias)

    def bw(g):
        g4 = g[None] if squeeze else g
        gxp = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(w.data) if w.requires_grad else None
        for dy, dx in taps:
            sl = (slice(None), slice(dy, dy + 2 * Ho, 2), slice(dx, dx + 2 * Wo, 2))
            if gw is not None:
                patch = xp[sl]
                gw[dy, dx] = patch.reshape(-1, patch.shape[-1]).T @ g4.reshape(-1, g4.shape[-1])
            if gxp is not None:
                gxp[sl] += g4 @ w.data[dy, dx].T
        gx = None
        if gxp is not None:
            gx = gxp[:, 1:-1, 1:-1, :]
            gx = gx[0] if squeeze else gx
        grads = [gx, gw]
        if bias is not None:
            grads.append(g4.reshape(-1, g4.shape[-1]).sum(axis=0))
        return tuple(grads)

    return make_node(out[0] if squeeze else out, parents, bw, "conv2d_3x3_s2")


# ---------------------------------------------------------------- normalization


def additive_mask(valid: np.ndarray) -> np.ndarray:
    """Turn a boolean validity array into an additive mask (0 / -1e9)."""
    return np.where(np.asarray(valid, dtype=bool), 0.0, NEG_LARGE)


def masked_softmax(x, mask=None) -> Tensor:
    """Softmax over the last axis with an additive mask.

    ``mask`` broadcasts against ``x``; entries below zero mark invalid
    positions, which are zeroed exactly after normalization. Rows with no
    valid entry come out all-zero.
    """
    x = as_tensor(x)
    z = x.data
    invalid = None
    if mask is not None:
        mask = np.asarray(mask, dtype=z.dtype)
        _broadcast_shape("masked_softmax", x.shape, mask.shape)
        z = z + mask
        invalid = np.broadcast_to(mask < 0, z.shape)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    if invalid is not None:
        y = np.where(invalid, 0.0, y)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_node(y, (x,), bw, "masked_softmax")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"layer_norm: input {x.shape} with gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        red = tuple(range(g.ndim - 1))
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = inv * (
                dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return make_node(out, (x, gamma, beta), bw, "layer_norm")


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make_node(np.asarray(x.data.sum(axis=axes, keepdims=keepdims)), (x,), bw, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    shape = x.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, shape).copy(),)

    return make_node(np.asarray(x.data.mean(axis=axes, keepdims=keepdims)), (x,), bw, "mean")


def max_(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Max over one axis; the gradient goes to the first maximal entry."""
    x = as_tensor(x)
    ax = axis % x.ndim
    idx = np.expand_dims(np.argmax(x.data, axis=ax), ax)
    record_selection(idx)
    out = np.take_along_axis(x.data, idx, axis=ax)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        gk = g if keepdims else np.expand_dims(g, ax)
        np.put_along_axis(full, idx, gk, axis=ax)
        return (full,)

    return make_node(out if keepdims else np.squeeze(out, ax), (x,), bw, "max")


def squared_error(pred, target) -> Tensor:
    """Mean of elementwise squared differences (a scalar)."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"squared_error: shapes {pred.shape} and {target.shape} differ")
    diff = pred.data - target.data
    n = diff.size

    def bw(g):
        gd = g * 2.0 * diff / n
        return gd if pred.requires_grad else None, -gd if target.requires_grad else None

    return make_node(np.asarray(np.mean(diff * diff)), (pred, target), bw, "squared_error")
