"""Dense tensors with define-by-run reverse-mode differentiation.

Every operation produces a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients. ``backward`` orders the
recorded graph topologically (the tape) and visits each node once.

Broadcasting is deliberately narrow: a 0-d operand against anything, or two
operands of equal rank whose dimensions either match or are 1 on one side. That
covers per-channel gates ``[C,1,1]``, per-pixel masks ``[1,H,W]`` and per-key
biases ``[1,M]`` without admitting silent rank promotion.
"""
from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, NumericError, UsageError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """n-dimensional array plus an optional gradient slot and graph linkage."""

    def __init__(self, data, requires_grad: bool = False, dtype=None, _parents=(), _op: str = ""):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: BackwardFn | None = None
        self._op = _op

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

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        op = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{op})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mean_all(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Skip graph recording in this thread (inference only)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _result(data: np.ndarray, parents: tuple[Tensor, ...], op: str, fn: BackwardFn) -> Tensor:
    if grad_enabled() and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True, _parents=parents, _op=op)
        out._backward = fn
        return out
    return Tensor(data, _op=op)


# ---------------------------------------------------------------------------
# tape and backward
# ---------------------------------------------------------------------------


def build_tape(root: Tensor) -> list[Tensor]:
    """Return the differentiable ancestors of ``root`` in topological order."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every ``requires_grad`` ancestor of a scalar ``loss``.

    Gradients add into existing ``grad`` buffers, so callers reset them between
    optimisation steps.
    """
    if loss.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor that requires grad")
    tape = build_tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g if node.grad is None else node.grad + g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def _broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    if a == b:
        return a
    if len(a) == 0:
        return b
    if len(b) == 0:
        return a
    if len(a) != len(b):
        raise DimensionError(f"cannot broadcast shapes {a} and {b}")
    out = []
    for x, y in zip(a, b):
        if x != y and x != 1 and y != 1:
            raise DimensionError(f"cannot broadcast shapes {a} and {b}")
        out.append(max(x, y))
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    axes = tuple(i for i, (s, t) in enumerate(zip(shape, g.shape)) if s == 1 and t != 1)
    return g.sum(axis=axes, keepdims=True)


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), "add", lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), "sub", lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    return _result(
        ad * bd,
        (a, b),
        "mul",
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd

    def fn(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return _result(out, (a, b), "div", fn)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(x.data * x.dtype.type(c), (x,), "scale", lambda g: (g * g.dtype.type(c),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), "relu", lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    half = x.dtype.type(0.5)
    out = half * (1 + np.tanh(half * x.data))
    return _result(out, (x,), "sigmoid", lambda g: (g * out * (1 - out),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), "exp", lambda g: (g * out,))


def absolute(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return _result(np.abs(x.data), (x,), "abs", lambda g: (g * sign,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _result(xd * xd, (x,), "square", lambda g: (2 * g * xd,))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), "sum", lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    shape = x.shape
    return _result(
        np.asarray(x.data.mean(), dtype=x.dtype),
        (x,),
        "mean",
        lambda g: (np.full(shape, g / n, dtype=g.dtype),),
    )


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: ``[C,H,W] -> [C,1,1]``."""
    if x.ndim != 3:
        raise DimensionError(f"global_avg_pool expects [C,H,W], got {x.shape}")
    c, h, w = x.shape
    inv = x.dtype.type(1.0 / (h * w))
    out = x.data.mean(axis=(1, 2), keepdims=True)
    return _result(out, (x,), "gap", lambda g: (np.broadcast_to(g * inv, (c, h, w)).copy(),))


# ---------------------------------------------------------------------------
# linear algebra and layout
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b), "matmul", lambda g: (g @ bd.T, ad.T @ g))


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose expects a 2-d tensor, got {x.shape}")
    return _result(x.data.T, (x,), "transpose", lambda g: (g.T,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size or any(s < 0 for s in shape):
        raise DimensionError(f"cannot reshape {x.shape} into {shape}")
    old = x.shape
    return _result(x.data.reshape(shape), (x,), "reshape", lambda g: (g.reshape(old),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"invalid permutation {axes} for rank {x.ndim}")
    inverse = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), "permute", lambda g: (g.transpose(inverse),))


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Stack ``[C_i,H,W]`` tensors along the channel axis in argument order."""
    xs = list(xs)
    if not xs:
        raise DimensionError("concat_channels needs at least one tensor")
    spatial = xs[0].shape[1:]
    for t in xs:
        if t.ndim != 3 or t.shape[1:] != spatial:
            raise DimensionError(f"concat_channels spatial mismatch: {[t.shape for t in xs]}")
    bounds = np.cumsum([0] + [t.shape[0] for t in xs])
    out = np.concatenate([t.data for t in xs], axis=0)
    return _result(
        out,
        tuple(xs),
        "concat",
        lambda g: tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(xs))),
    )


def softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects [m,n], got {x.shape}")
    if np.isnan(x.data).any():
        raise NumericError("softmax_rows received NaN input")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)
    return _result(out, (x,), "softmax", lambda g: (out * (g - (g * out).sum(axis=1, keepdims=True)),))


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _windows(x: np.ndarray, k: int, padding: int) -> np.ndarray:
    if padding:
        c, h, w = x.shape
        padded = np.zeros((c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
        padded[:, padding : padding + h, padding : padding + w] = x
        x = padded
    return sliding_window_view(x, (k, k), axis=(1, 2))  # [C, Ho, Wo, k, k]


def _fold(cols: np.ndarray, h: int, w: int, k: int, padding: int) -> np.ndarray:
    """Scatter-add ``[C,k,k,Ho,Wo]`` patches back onto a ``[C,H,W]`` grid."""
    c, _, _, ho, wo = cols.shape
    out = np.zeros((c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, i : i + ho, j : j + wo] += cols[:, i, j]
    if padding:
        out = out[:, padding : padding + h, padding : padding + w]
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int | None = None) -> Tensor:
    """Zero-padded cross-correlation of ``[C_in,H,W]`` with ``[C_out,C_in,k,k]``."""
    if x.ndim != 3 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects [C,H,W] input and 4-d weight, got {x.shape}, {weight.shape}")
    c_out, c_in, k, k2 = weight.shape
    if k != k2:
        raise DimensionError(f"conv2d needs square kernels, got {weight.shape}")
    if c_in != x.shape[0]:
        raise DimensionError(f"conv2d weight expects {c_in} input channels, input has {x.shape[0]}")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"conv2d bias shape {bias.shape} != ({c_out},)")
    if padding is None:
        padding = (k - 1) // 2
    _, h, w = x.shape
    w2 = weight.data.reshape(c_out, -1)
    if k == 1 and padding == 0:
        cols = x.data.reshape(c_in, h * w)
        ho, wo = h, w
    else:
        win = _windows(x.data, k, padding)
        ho, wo = win.shape[1], win.shape[2]
        cols = win.transpose(0, 3, 4, 1, 2).reshape(c_in * k * k, ho * wo)
    out = w2 @ cols
    if bias is not None:
        out = out + bias.data[:, None]
    out = out.reshape(c_out, ho, wo)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def fn(g):
        g2 = g.reshape(c_out, ho * wo)
        gx = None
        if x.requires_grad:
            gcols = w2.T @ g2
            if k == 1 and padding == 0:
                gx = gcols.reshape(c_in, h, w)
            else:
                gx = _fold(gcols.reshape(c_in, k, k, ho, wo), h, w, k, padding)
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=1)

    return _result(out, parents, "conv2d", fn)


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int | None = None) -> Tensor:
    """Per-channel spatial filtering with ``[C,1,k,k]`` weights; no channel mixing."""
    if x.ndim != 3 or weight.ndim != 4 or weight.shape[1] != 1:
        raise DimensionError(f"depthwise_conv2d expects [C,H,W] and [C,1,k,k], got {x.shape}, {weight.shape}")
    c, _, k, k2 = weight.shape
    if k != k2:
        raise DimensionError(f"depthwise_conv2d needs square kernels, got {weight.shape}")
    if c != x.shape[0]:
        raise DimensionError(f"depthwise weight has {c} channels, input has {x.shape[0]}")
    if bias is not None and bias.shape != (c,):
        raise DimensionError(f"depthwise bias shape {bias.shape} != ({c},)")
    if padding is None:
        padding = (k - 1) // 2
    _, h, w = x.shape
    kern = weight.data[:, 0]
    win = _windows(x.data, k, padding)
    ho, wo = win.shape[1], win.shape[2]
    out = np.einsum("chwij,cij->chw", win, kern)
    if bias is not None:
        out = out + bias.data[:, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def fn(g):
        gx = None
        if x.requires_grad:
            gx = np.zeros((c, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gx[:, i : i + ho, j : j + wo] += kern[:, i, j, None, None] * g
            if padding:
                gx = gx[:, padding : padding + h, padding : padding + w]
        gw = np.einsum("chwij,chw->cij", win, g)[:, None] if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(1, 2))

    return _result(out, parents, "depthwise_conv2d", fn)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float | Sequence[float] = 1e-6,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    tol: float | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` rebuilds the scalar loss from the current values of ``params``. The
    relative error for one coordinate is ``|a-n| / max(|a|, |n|, 1e-8)``.

    ``h`` may be a sequence of step sizes; each coordinate then keeps the best
    agreement over the steps, trying them in order and stopping once the error
    drops below ``tol``. Small steps suit kinks, large ones suit coordinates
    whose true gradient is near the roundoff floor. With ``max_coords`` set,
    each parameter is probed at that many random coordinates.
    """
    steps = [float(h)] if np.isscalar(h) else [float(s) for s in h]
    params = list(params)
    for p in params:
        p.grad = None
    loss = f()
    if loss.requires_grad:
        backward(loss)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, size=max_coords, replace=False)
        a_flat = analytic.reshape(-1)
        for i in idx:
            a = float(a_flat[i])
            orig = flat[i]
            best = math.inf
            for step in steps:
                with no_grad():
                    flat[i] = orig + step
                    fp = float(f().data)
                    flat[i] = orig - step
                    fm = float(f().data)
                flat[i] = orig
                numeric = (fp - fm) / (2 * step)
                best = min(best, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
                if tol is not None and best < tol:
                    break
            worst = max(worst, best)
    return worst
