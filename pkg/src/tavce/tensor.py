"""Dense row-major tensors with a reverse-mode gradient tape.

Every differentiable op records its parents and a closure mapping the output
gradient to per-parent gradients. ``backward`` orders the recorded nodes
topologically, visits each exactly once, accumulates gradients on leaves and
then releases the graph.

Any op whose forward or backward result is not finite raises
:class:`~tavce.errors.NonFiniteError` naming the op.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from tavce.errors import DTypeError, GraphError, NonFiniteError, ShapeError

_FLOAT_TYPES = (np.float32, np.float64)
# per thread, so concurrent evaluation workers cannot leave grad mode switched off
_mode = threading.local()

# name -> callable; the gradient suite iterates over this
REGISTERED_OPS: dict[str, Callable] = {}


def register(name: str):
    def deco(fn):
        REGISTERED_OPS[name] = fn
        return fn

    return deco


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording anything on the tape."""
    prev = grad_enabled()
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = prev


def grad_enabled() -> bool:
    return getattr(_mode, "enabled", True)


def _check_finite(arr: np.ndarray, op: str, where: str = "forward") -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(op, where)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if arr.dtype not in _FLOAT_TYPES:
                arr = arr.astype(np.float64)
        else:
            if np.dtype(dtype) not in _FLOAT_TYPES:
                raise DTypeError(f"unsupported dtype {dtype}; use float32 or float64")
            arr = np.asarray(data, dtype=dtype)
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"every dimension must be positive, got {arr.shape}")
        _check_finite(arr, "tensor")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # ---- introspection
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, op={self.op})"

    def __len__(self) -> int:
        return self.shape[0]

    # ---- operator sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, o): return matmul(self, o)
    def __getitem__(self, idx): return take(self, idx)

    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)
    def sum(self, axis=None, keepdims=False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)


def _raise_not_scalar(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = _as_tensor(b, a)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = _as_tensor(a, b)
    else:
        a, b = _as_tensor(a), _as_tensor(b)
    if a.dtype != b.dtype:
        raise DTypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    return a, b


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(data)
    out.grad = None
    out.op = op
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------- elementwise
@register("add")
def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    with np.errstate(all="ignore"):
        data = a.data + b.data
    return _result(data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


@register("sub")
def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    with np.errstate(all="ignore"):
        data = a.data - b.data
    return _result(data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


@register("mul")
def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    with np.errstate(all="ignore"):
        data = ad * bd
    return _result(
        data,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


@register("div")
def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    with np.errstate(all="ignore"):
        data = ad / bd

    def bw(g):
        ga = g / bd
        gb = -g * ad / (bd * bd)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result(data, (a, b), bw, "div")


@register("neg")
def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


@register("scale")
def scale(a: Tensor, factor: float) -> Tensor:
    f = a.dtype.type(factor)
    with np.errstate(all="ignore"):
        data = a.data * f
    return _result(data, (a,), lambda g: (g * f,), "scale")


@register("relu")
def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, a.dtype.type(0)), (a,), lambda g: (g * mask,), "relu")


@register("sigmoid")
def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(a.dtype, copy=False)
    return _result(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


@register("tanh")
def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _result(t, (a,), lambda g: (g * (1 - t * t),), "tanh")


@register("sqrt")
def sqrt(a: Tensor) -> Tensor:
    with np.errstate(all="ignore"):
        r = np.sqrt(a.data)
    return _result(r, (a,), lambda g: (g / (2 * r),), "sqrt")


@register("square")
def square(a: Tensor) -> Tensor:
    x = a.data
    return _result(x * x, (a,), lambda g: (2 * g * x,), "square")


# --------------------------------------------------------------------- linear
@register("matmul")
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., M, K) @ (..., K, N) with batch broadcasting; 1-D operands not promoted."""
    a, b = _coerce(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data
    data = ad @ bd

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result(data, (a, b), bw, "matmul")


def _batched_image(x: Tensor, op: str) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"{op}: expected C x H x W or N x C x H x W, got {x.shape}")


@register("conv2d")
def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (N,)C_in,H,W maps with a C_out x C_in x kh x kw kernel."""
    x, squeeze = _batched_image(x, "conv2d")
    x, w = _coerce(x, w)
    if w.ndim != 4:
        raise ShapeError(f"conv2d kernel must be 4-D, got {w.shape}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernel expects {ci}")
    s, p = stride, padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    hp, wp = xp.shape[2], xp.shape[3]
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho, wo = (hp - kh) // s + 1, (wp - kw) // s + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(o, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    parents: tuple[Tensor, ...] = (x, w)
    if b is not None:
        b = _as_tensor(b, x)
        if b.shape != (o,):
            raise ShapeError(f"conv2d bias must have shape ({o},), got {b.shape}")
        out = out + b.data.reshape(1, o, 1, 1)
        parents = (x, w, b)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (g2.T @ cols).reshape(w.shape)
        dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, p:p + h, p:p + wd] if p else gxp
        grads = (gx, gw)
        if b is not None:
            grads += (g.sum(axis=(0, 2, 3)),)
        return grads

    res = _result(out, parents, bw, "conv2d")
    return reshape(res, res.shape[1:]) if squeeze else res


@register("conv1x1")
def conv1x1(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Pointwise convolution with a C_out x C_in weight, expressed as a matmul."""
    x, squeeze = _batched_image(x, "conv1x1")
    if w.ndim != 2:
        raise ShapeError(f"conv1x1 weight must be C_out x C_in, got {w.shape}")
    n, c, h, wd = x.shape
    if w.shape[1] != c:
        raise ShapeError(f"conv1x1 channel mismatch: input has {c}, weight expects {w.shape[1]}")
    y = matmul(w, reshape(x, (n, c, h * wd)))
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ShapeError(f"conv1x1 bias must have shape ({w.shape[0]},), got {b.shape}")
        y = add(y, reshape(b, (w.shape[0], 1)))
    y = reshape(y, (n, w.shape[0], h, wd))
    return reshape(y, y.shape[1:]) if squeeze else y


@register("upsample2x")
def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling."""
    x4, squeeze = _batched_image(x, "upsample2x")
    data = x4.data.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = x4.shape

    def bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    res = _result(data, (x4,), bw, "upsample2x")
    return reshape(res, res.shape[1:]) if squeeze else res


def upsample_conv3x3(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """2x nearest upsample followed by a same-padding 3x3 convolution."""
    return conv2d(upsample2x(x), w, b, stride=1, padding=1)


# --------------------------------------------------------------------- reduce
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


@register("sum")
def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape
    data = x.data.sum(axis=axes, keepdims=keepdims)
    kept = tuple(1 if i in axes else d for i, d in enumerate(shape))

    def bw(g):
        return (np.broadcast_to(g.reshape(kept), shape).copy(),)

    return _result(np.asarray(data, dtype=x.dtype), (x,), bw, "sum")


@register("mean")
def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum_(x, axes, keepdims), 1.0 / count)


@register("norm")
def norm(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """L2 norm over ``axis`` (all axes gives the Frobenius norm).

    The gradient at an exactly-zero norm is taken as zero (a subgradient).
    """
    axes = _norm_axis(axis, x.ndim)
    xd = x.data
    r = np.sqrt((xd * xd).sum(axis=axes, keepdims=True))
    kept_shape = r.shape
    out = r if keepdims else r.reshape([d for i, d in enumerate(xd.shape) if i not in axes])

    def bw(g):
        g = g.reshape(kept_shape)
        with np.errstate(all="ignore"):
            q = np.where(r > 0, xd / np.where(r > 0, r, 1), 0)
        return (g * q,)

    return _result(np.asarray(out, dtype=x.dtype), (x,), bw, "norm")


sum = sum_  # noqa: A001  (public name for the reduction op)


def frobenius_norm(x: Tensor) -> Tensor:
    return norm(x, None)


# -------------------------------------------------------------------- shaping
@register("reshape")
def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {old} into {shape}") from None
    return _result(data, (x,), lambda g: (g.reshape(old),), "reshape")


@register("transpose")
def transpose(x: Tensor, axes=None) -> Tensor:
    """Permute axes; default swaps the last two."""
    if axes is None:
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


@register("take")
def take(x: Tensor, idx) -> Tensor:
    """Basic or integer-array indexing; gradients scatter-add back."""
    if isinstance(idx, Tensor):
        raise TypeError("index with ints, slices or integer arrays, not tensors")
    shape = x.shape
    data = x.data[idx]

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(gx, idx, g)
        return (gx,)

    return _result(np.asarray(data), (x,), bw, "take")


@register("concat")
def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of an empty list")
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise DTypeError(f"concat dtype mismatch: {dtypes}")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(data, tensors, bw, "concat")


@register("stack")
def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("stack of an empty list")
    shapes = {t.shape for t in tensors}
    if len(shapes) > 1:
        raise ShapeError(f"stack needs equal shapes, got {sorted(shapes)}")
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis=axis)


@register("expand")
def expand(x: Tensor, shape) -> Tensor:
    """Broadcast ``x`` to ``shape``; gradients are summed back."""
    shape = tuple(shape)
    old = x.shape
    try:
        data = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeError(f"cannot expand {old} to {shape}") from None
    return _result(data, (x,), lambda g: (_unbroadcast(g, old),), "expand")


# ------------------------------------------------------------------- backward
class ComputationTape:
    """Topologically ordered view of the graph that produced ``root``."""

    def __init__(self, root: Tensor):
        self.nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

    def run(self, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(self.nodes[-1]): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=parent.dtype)
                _check_finite(pg, node.op, "backward")
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    def release(self) -> None:
        for node in self.nodes:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
        self.nodes = []


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` buffers; the graph is
    released afterwards so a second call on the same loss is an error.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is detached: no requires_grad leaf contributed to it")
    if loss.is_leaf:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
        return
    tape = ComputationTape(loss)
    tape.run(np.ones_like(loss.data))
    tape.release()


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
