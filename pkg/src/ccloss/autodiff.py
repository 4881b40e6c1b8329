"""Dense tensors with reverse-mode automatic differentiation.

The op set is intentionally small: matrix product, elementwise arithmetic
with row-vector broadcasting, reductions, 3x3 same-padding convolution and
2x2 max-pooling (exactly what the small CNN backbone needs), plus reshape
and transpose plumbing. The graph is rebuilt on every forward pass
(define-by-run); `backward` linearizes it into a `GradientTape` and replays
it in reverse.

Tensors are value-like: safe to share read-only between threads, but a
single forward/backward pass is single-threaded.

Every forward result is checked for NaN/Inf and rejected with
`NumericError`; shape problems raise `ShapeError` at op time.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32
_REAL_DTYPES = (np.float32, np.float64)


class AutodiffError(Exception):
    """Base class for tensor-core failures."""


class ShapeError(AutodiffError):
    """Operand shapes (or dtypes) are incompatible with the op."""


class NumericError(AutodiffError):
    """An op produced NaN/Inf, or was asked to divide by zero."""


class TapeError(AutodiffError):
    """Backward called on a non-scalar, or on an already-replayed tape."""


# Recording can be switched off wholesale (evaluation paths), and kink
# proximity can be watched (gradient checking). Both are process-global;
# a forward pass is single-threaded by contract.
_grad_enabled = True
_kink_watch: Optional[dict] = None


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextmanager
def watch_kinks():
    """Track how close relu/max inputs come to their nondifferentiable points.

    Yields a dict whose "margin" entry is the smallest distance to a kink
    seen by any relu (|x|) or max/max-pool (gap between the two largest
    candidates) evaluated inside the block.
    """
    global _kink_watch
    prev = _kink_watch
    _kink_watch = {"margin": np.inf}
    try:
        yield _kink_watch
    finally:
        _kink_watch = prev


def _note_kink_margin(margin: float) -> None:
    if _kink_watch is not None and margin < _kink_watch["margin"]:
        _kink_watch["margin"] = float(margin)


def _ensure_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {op}")


class Tensor:
    """A dense float array plus an optional position in the autodiff graph.

    `data` is always a contiguous-enough numpy array of float32/float64;
    `grad` is populated (same shape) by a backward pass when
    `requires_grad` is set.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_replayed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _REAL_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        _ensure_finite(arr, "tensor creation")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = "leaf"
        self._replayed = False

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, op={self._op})"

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_lift(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_lift(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self.dtype), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def square(self):
        return square(self)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def max(self, axis=None):
        return reduce_max(self, axis)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self):
        return transpose(self)

    def backward(self) -> None:
        backward(self)


def _lift(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def apply_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap an op result, recording it on the graph when grads are live.

    `backward_fn(out_grad)` must return one gradient array per parent, in
    order (None for parents that need none).
    """
    _ensure_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._replayed = False
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _check_same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: mixed dtypes {a.dtype.name} vs {b.dtype.name}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary(a, b, op: str, fwd: Callable, bwd: Callable) -> Tensor:
    if not isinstance(a, Tensor):
        a = _lift(a, b.dtype)
    if not isinstance(b, Tensor):
        b = _lift(b, a.dtype)
    _check_same_dtype(a, b, op)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} vs {b.shape}") from exc
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        data = fwd(a.data, b.data)  # non-finite results rejected in apply_op

    def backward_fn(g, a=a, b=b):
        ga, gb = bwd(g, a.data, b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return apply_op(data, (a, b), backward_fn, op)


# -- elementwise ops ----------------------------------------------------------


def add(a, b) -> Tensor:
    return _binary(a, b, "add", lambda x, y: x + y, lambda g, x, y: (g, g))


def sub(a, b) -> Tensor:
    return _binary(a, b, "sub", lambda x, y: x - y, lambda g, x, y: (g, -g))


def mul(a, b) -> Tensor:
    return _binary(a, b, "mul", lambda x, y: x * y, lambda g, x, y: (g * y, g * x))


def div(a, b) -> Tensor:
    def fwd(x, y):
        if np.any(y == 0):
            raise NumericError("div: division by zero")
        return x / y

    return _binary(a, b, "div", fwd, lambda g, x, y: (g / y, -g * x / (y * y)))


def relu(a: Tensor) -> Tensor:
    if _kink_watch is not None and a.size:
        _note_kink_margin(np.min(np.abs(a.data)))
    data = np.maximum(a.data, 0)

    def backward_fn(g, a=a):
        return ((a.data > 0).astype(a.dtype) * g,)

    return apply_op(data, (a,), backward_fn, "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])  # stable branch: exp of negatives only
    out[~pos] = ex / (1.0 + ex)
    # keep the open-interval contract: saturated values are nudged to the
    # nearest representable number strictly inside (0, 1)
    one = a.dtype.type(1)
    np.clip(out, np.finfo(a.dtype).tiny, np.nextafter(one, a.dtype.type(0)), out=out)

    def backward_fn(g, out=out):
        return (g * out * (1.0 - out),)

    return apply_op(out, (a,), backward_fn, "sigmoid")


def square(a: Tensor) -> Tensor:
    def backward_fn(g, a=a):
        return (2.0 * a.data * g,)

    return apply_op(a.data * a.data, (a,), backward_fn, "square")


# -- reductions ---------------------------------------------------------------


def _norm_axis(a: Tensor, axis) -> Optional[int]:
    if axis is None:
        return None
    axis = int(axis)
    if axis < 0:
        axis += a.ndim
    if not 0 <= axis < a.ndim:
        raise ShapeError(f"axis {axis} invalid for shape {a.shape}")
    return axis


def reduce_sum(a: Tensor, axis=None) -> Tensor:
    axis = _norm_axis(a, axis)
    data = np.sum(a.data, axis=axis)

    def backward_fn(g, a=a, axis=axis):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).astype(a.dtype, copy=True),)

    return apply_op(np.asarray(data), (a,), backward_fn, "sum")


def reduce_mean(a: Tensor, axis=None) -> Tensor:
    axis = _norm_axis(a, axis)
    count = a.size if axis is None else a.shape[axis]
    if count == 0:
        raise ShapeError("mean over empty extent")
    data = np.mean(a.data, axis=axis)

    def backward_fn(g, a=a, axis=axis, count=count):
        g = g / count
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).astype(a.dtype, copy=True),)

    return apply_op(np.asarray(data), (a,), backward_fn, "mean")


def reduce_max(a: Tensor, axis=None) -> Tensor:
    axis = _norm_axis(a, axis)
    if a.size == 0 or (axis is not None and a.shape[axis] == 0):
        raise ShapeError("max over empty extent")
    if axis is None:
        flat = a.data.reshape(-1)
        idx = int(np.argmax(flat))
        if _kink_watch is not None and flat.size > 1:
            top2 = np.partition(flat, -2)[-2:]
            _note_kink_margin(top2[1] - top2[0])
        data = flat[idx]

        def backward_fn(g, a=a, idx=idx):
            out = np.zeros_like(a.data)
            out.reshape(-1)[idx] = g
            return (out,)

        return apply_op(np.asarray(data), (a,), backward_fn, "max")

    moved = np.moveaxis(a.data, axis, -1)
    idx = np.argmax(moved, axis=-1)
    if _kink_watch is not None and moved.shape[-1] > 1:
        top2 = np.partition(moved, -2, axis=-1)
        _note_kink_margin(np.min(top2[..., -1] - top2[..., -2]))
    data = np.take_along_axis(moved, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g, a=a, axis=axis, idx=idx):
        gm = np.zeros_like(np.moveaxis(a.data, axis, -1))
        np.put_along_axis(gm, idx[..., None], g[..., None], axis=-1)
        return (np.moveaxis(gm, -1, axis),)

    return apply_op(data, (a,), backward_fn, "max")


# -- linear algebra and layout -------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise ShapeError("matmul requires two tensors")
    _check_same_dtype(a, b, "matmul")
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    data = a.data @ b.data

    def backward_fn(g, a=a, b=b):
        return g @ b.data.T, a.data.T @ g

    return apply_op(data, (a, b), backward_fn, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError("transpose expects a 2-D tensor")

    def backward_fn(g):
        return (g.T.copy(),)

    return apply_op(a.data.T.copy(), (a,), backward_fn, "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")

    def backward_fn(g, a=a):
        return (g.reshape(a.shape),)

    return apply_op(a.data.reshape(shape), (a,), backward_fn, "reshape")


# -- convolution kernels (3x3 same-padding, stride 1) ---------------------------


def conv2d_3x3(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3 stride-1 same-padding convolution with bias, via im2col."""
    _check_same_dtype(x, w, "conv2d")
    _check_same_dtype(x, b, "conv2d")
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be N x C x H x W, got {x.shape}")
    n, ci, h, wd = x.shape
    if w.ndim != 4 or w.shape[1] != ci or w.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d kernel must be Cout x {ci} x 3 x 3, got {w.shape}")
    co = w.shape[0]
    if b.shape != (co,):
        raise ShapeError(f"conv2d bias must have shape ({co},), got {b.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # (N, Ci, H, W, 3, 3)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * h * wd, ci * 9)
    wmat = w.data.reshape(co, ci * 9)
    out2 = cols @ wmat.T + b.data
    out = np.ascontiguousarray(out2.reshape(n, h, wd, co).transpose(0, 3, 1, 2))

    def backward_fn(g, x=x, w=w, cols=cols, wmat=wmat, n=n, ci=ci, h=h, wd=wd, co=co):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * h * wd, co)
        dw = (g2.T @ cols).reshape(co, ci, 3, 3)
        db = g2.sum(axis=0)
        dwin = (g2 @ wmat).reshape(n, h, wd, ci, 3, 3).transpose(0, 3, 1, 2, 4, 5)
        dxp = np.zeros((n, ci, h + 2, wd + 2), dtype=x.dtype)
        for dy in range(3):
            for dx in range(3):
                dxp[:, :, dy : dy + h, dx : dx + wd] += dwin[..., dy, dx]
        return dxp[:, :, 1 : h + 1, 1 : wd + 1], dw, db

    return apply_op(out, (x, w, b), backward_fn, "conv2d")


def maxpool_2x2(x: Tensor) -> Tensor:
    """2x2 max-pooling with stride 2; spatial dims must be even."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool input must be N x C x H x W, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool needs even spatial dims, got {h} x {w}")
    ho, wo = h // 2, w // 2
    xr = x.data.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    idx = np.argmax(xr, axis=-1)
    if _kink_watch is not None:
        # A window whose max is exactly 0 is saturated relu output and
        # locally constant; its ties are benign (the relu watcher already
        # guards the underlying pre-activations). Only active windows count.
        top2 = np.partition(xr, -2, axis=-1)
        gaps = top2[..., -1] - top2[..., -2]
        active = top2[..., -1] != 0
        if np.any(active):
            _note_kink_margin(np.min(gaps[active]))
    out = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g, x=x, idx=idx, n=n, c=c, ho=ho, wo=wo):
        dxr = np.zeros((n, c, ho, wo, 4), dtype=x.dtype)
        np.put_along_axis(dxr, idx[..., None], g[..., None], axis=-1)
        return (dxr.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo),)

    return apply_op(out, (x,), backward_fn, "maxpool")


# -- backward pass --------------------------------------------------------------


class GradientTape:
    """The ops reaching a root tensor, linearized in forward execution order.

    Replaying the entries in reverse accumulates gradients into every
    reachable tensor with `requires_grad`. A tape can be replayed once;
    rebuild the forward pass for another gradient.
    """

    def __init__(self, root: Tensor):
        if root.size != 1:
            raise TapeError(f"backward requires a scalar loss, got shape {root.shape}")
        if root._replayed:
            raise TapeError("tape already replayed; rerun the forward pass first")
        self.root = root
        self.order: list[Tensor] = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self._spent = False

    def __len__(self):
        return sum(1 for t in self.order if t._backward is not None)

    def backward(self) -> None:
        if self._spent:
            raise TapeError("tape already replayed; rerun the forward pass first")
        self._spent = True
        self.root._replayed = True
        self.root.grad = np.ones_like(self.root.data)
        for node in reversed(self.order):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                g = np.asarray(g, dtype=parent.dtype)
                if g.shape != parent.data.shape:
                    raise TapeError(
                        f"backward rule of {node._op} produced shape {g.shape} "
                        f"for input of shape {parent.data.shape}"
                    )
                _ensure_finite(g, f"backward of {node._op}")
                if parent.grad is None:
                    parent.grad = g.copy() if g.base is not None else g
                else:
                    parent.grad = parent.grad + g
            if node is not self.root and node._parents:
                node.grad = None  # free intermediate grads as we go


def backward(loss: Tensor) -> None:
    """Populate `grad` on every requires-grad tensor reachable from `loss`."""
    GradientTape(loss).backward()
