"""Dense tensors with define-by-run reverse-mode differentiation.

Every op computes its numpy result eagerly, checks it for NaN/Inf, and (when
gradients are enabled and an input requires them) links the output to its
inputs with a backward rule. ``Tensor.backward`` topologically sorts the
recorded graph and runs the rules in reverse.

Layout is row-major, channels-first for images: ``(C, H, W)`` or
``(B, C, H, W)``.
"""
from __future__ import annotations

import contextlib
import functools
import math

import numpy as np

from . import kernels
from .errors import DimensionError, NumericalError

_state = {"dtype": np.dtype(np.float32), "grad": True, "record": False}

# Test hook: op names whose backward rule is deliberately scaled by 1.5.
CORRUPT_BACKWARD: set[str] = set()


def get_default_dtype() -> np.dtype:
    return _state["dtype"]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise TypeError(f"unsupported dtype {dtype}")
    _state["dtype"] = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype used for newly created tensors."""
    old = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    old = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = old


def is_grad_enabled() -> bool:
    return _state["grad"]


@contextlib.contextmanager
def recording():
    """Store each op's call on its output so the graph can be replayed (see :func:`replay`)."""
    old = _state["record"]
    _state["record"] = True
    try:
        yield
    finally:
        _state["record"] = old


def recorded(fn):
    """Mark an op whose output node can be recomputed from its call arguments."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        out = fn(*args, **kwargs)
        if _state["record"] and out.requires_grad:
            out._replay = (fn, args, kwargs)
        return out

    return wrapper


def replay(order: list, changed, kinks: list | None = None) -> "Tensor":
    """Recompute only the nodes of a recorded graph downstream of ``changed`` leaves.

    ``order`` is a forward topological order ending at the root (as returned by
    :func:`topological_order`); the changed leaves must have been modified in
    place. Returns the new root value. Runs without graph recording.

    If ``kinks`` is a list, every recomputed ReLU whose on/off pattern differs
    from the recorded pass is appended to it.
    """
    dirty = {id(t) for t in changed}
    fresh = {}

    def sub(a):
        if isinstance(a, Tensor):
            return fresh.get(id(a), a)
        if isinstance(a, (list, tuple)) and a and isinstance(a[0], Tensor):
            return type(a)(fresh.get(id(t), t) for t in a)
        return a

    with no_grad():
        for node in order:
            if not node._parents or not any(id(p) in dirty for p in node._parents):
                continue
            dirty.add(id(node))
            if node._replay is not None:
                fn, args, kwargs = node._replay
                out = fn(*[sub(a) for a in args], **{k: sub(v) for k, v in kwargs.items()})
                fresh[id(node)] = out
                if kinks is not None and node.op == "relu" and not np.array_equal(out.data > 0, node.data > 0):
                    kinks.append(node)
    root = order[-1]
    return fresh.get(id(root), root)


class FlopCounter:
    """Cumulative multiply-accumulate count for matmul and convolution ops."""

    def __init__(self):
        self.macs = 0
        self.enabled = False

    def add(self, n: int) -> None:
        if self.enabled:
            self.macs += int(n)

    def reset(self) -> None:
        self.macs = 0


FLOPS = FlopCounter()


@contextlib.contextmanager
def count_flops():
    """Reset and enable the global counter for the duration of the block."""
    old = FLOPS.enabled
    FLOPS.reset()
    FLOPS.enabled = True
    try:
        yield FLOPS
    finally:
        FLOPS.enabled = old


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "_replay")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_state["dtype"])
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None
        self._replay = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __len__(self):
        return self.data.shape[0]

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            corrupt = node.op in CORRUPT_BACKWARD
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if corrupt:
                    pg = pg * 1.5
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def topological_order(root: Tensor) -> list:
    """Nodes that require grad and reach ``root``, inputs before outputs."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or _state["dtype"]))


def _result(data: np.ndarray, parents: tuple, backward, op: str, check: bool = True) -> Tensor:
    # data-movement ops pass check=False: their outputs are finite iff their inputs are
    if check and not np.isfinite(data).all():
        raise NumericalError(f"{op} produced non-finite values (shape {data.shape})")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._replay = None
    out.op = op
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ----------------------------------------------------------------------------
# elementwise


def _scalar(v) -> bool:
    return isinstance(v, (int, float))


@recorded
def add(a, b) -> Tensor:
    if _scalar(b) and isinstance(a, Tensor):
        return _result(a.data + b, (a,), lambda g: (g,), "add")
    if _scalar(a) and isinstance(b, Tensor):
        return _result(b.data + a, (b,), lambda g: (g,), "add")
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


@recorded
def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


@recorded
def mul(a, b) -> Tensor:
    if _scalar(a) and isinstance(b, Tensor):
        a, b = b, a
    if _scalar(b) and isinstance(a, Tensor):
        return _result(a.data * b, (a,), lambda g: (g * b,), "mul")
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)), "mul")


@recorded
def div(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return unbroadcast(g / bd, ad.shape), unbroadcast(-g * out / bd, bd.shape)

    return _result(out, (a, b), backward, "div")


@recorded
def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


@recorded
def log(x: Tensor) -> Tensor:
    xd = x.data
    return _result(np.log(xd), (x,), lambda g: (g / xd,), "log")


@recorded
def square(x: Tensor) -> Tensor:
    xd = x.data
    return _result(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


@recorded
def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


@recorded
def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _result(out.astype(x.dtype, copy=False), (x,), backward, "gelu")


# ----------------------------------------------------------------------------
# shape ops


@recorded
def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape", False)


@recorded
def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = [0] * len(axes)
    for i, a in enumerate(axes):
        inv[a] = i
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose", False)


@recorded
def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _result(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)), "concat", False)


@recorded
def take(x: Tensor, index: np.ndarray, axis: int) -> Tensor:
    """Gather ``x`` along ``axis`` with an integer index array of any shape."""
    index = np.asarray(index)
    axis = axis % x.ndim
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        # move gathered axes to the front so add.at indexes one axis
        gm = np.moveaxis(g, tuple(range(axis, axis + index.ndim)), tuple(range(index.ndim)))
        gm = gm.reshape((index.size,) + gm.shape[index.ndim:])
        gxm = np.moveaxis(gx, axis, 0)
        np.add.at(gxm, index.reshape(-1), gm)
        return (gx,)

    return _result(np.take(x.data, index, axis=axis), (x,), backward, "take", False)


@recorded
def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Repeat each of the last two axes ``factor`` times."""
    if factor == 1:
        return x
    out = x.data.repeat(factor, axis=-2).repeat(factor, axis=-1)
    lead = x.shape[:-2]
    h, w = x.shape[-2:]

    def backward(g):
        return (g.reshape(lead + (h, factor, w, factor)).sum(axis=(-3, -1)),)

    return _result(out, (x,), backward, "upsample_nearest", False)


# ----------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


@recorded
def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axes, keepdims), 1.0 / n)


@recorded
def tmax(x: Tensor, axis: int) -> Tensor:
    """Maximum along one axis; gradient goes to the first maximal entry."""
    axis = axis % x.ndim
    idx = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _result(out, (x,), backward, "max", False)


# ----------------------------------------------------------------------------
# linear algebra and neural operators


@recorded
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    if not isinstance(a, Tensor):
        a = as_tensor(a)
    if not isinstance(b, Tensor):
        b = as_tensor(b, a)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = ad @ bd
    if FLOPS.enabled:
        FLOPS.add(out.size * ad.shape[-1])

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _result(out, (a, b), backward, "matmul")


@recorded
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``."""
    if x.shape[axis] < 1:
        raise DimensionError(f"softmax over empty axis {axis} of shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), backward, "softmax")


def softmax_lastdim(x: Tensor) -> Tensor:
    return softmax(x, -1)


@recorded
def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def backward(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), backward, "log_softmax")


@recorded
def standardize(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero mean, unit variance over the last axis (biased variance, eps inside sqrt)."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _result(xhat.astype(x.dtype, copy=False), (x,), backward, "standardize")


def _affine_normalize(x: Tensor, xs: np.ndarray, axes: tuple, gamma: Tensor, beta: Tensor,
                      pshape: tuple, eps: float, op: str) -> Tensor:
    """Standardize ``xs`` (a view of x) over ``axes``, then per-channel gamma/beta of shape ``pshape``."""
    mu = xs.mean(axis=axes, keepdims=True)
    xc = xs - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(x.shape)
    g = gamma.data.reshape(pshape)
    out = xhat * g + beta.data.reshape(pshape)
    red = tuple(i for i, n in enumerate(pshape) if n == 1)

    def backward(grad):
        gxhat = (grad * g).reshape(xs.shape)
        xh = xhat.reshape(xs.shape)
        gx = inv * (gxhat - gxhat.mean(axis=axes, keepdims=True)
                    - xh * (gxhat * xh).mean(axis=axes, keepdims=True))
        return (gx.reshape(x.shape),
                (grad * xhat).sum(axis=red).reshape(gamma.shape),
                grad.sum(axis=red).reshape(beta.shape))

    return _result(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, op)


@recorded
def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each token over its last (channel) axis, then scale and shift."""
    c = x.shape[-1]
    if c < 1 or gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layer_norm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    pshape = (1,) * (x.ndim - 1) + (c,)
    return _affine_normalize(x, x.data, (-1,), gamma, beta, pshape, eps, "layer_norm")


@recorded
def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample normalization of (B, C, H, W) over channel groups."""
    b, c, h, w = x.shape
    if c % groups or gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"group_norm: {c} channels, {groups} groups, gamma {gamma.shape}")
    xs = x.data.reshape(b, groups, (c // groups) * h * w)
    return _affine_normalize(x, xs, (-1,), gamma, beta, (1, c, 1, 1), eps, "group_norm")


def _batched(x: Tensor):
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"expected (C,H,W) or (B,C,H,W), got {x.shape}")


def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _pad2d(x: np.ndarray, pad: int) -> np.ndarray:
    """Zero-pad the last two axes; always returns a C-contiguous array."""
    if not pad:
        return np.ascontiguousarray(x)
    b, c, h, w = x.shape
    out = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    out[:, :, pad:pad + h, pad:pad + w] = x
    return out


def _batch_outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """sum_b a[b] @ b[b].T without materialising transposed copies."""
    out = a[0] @ b[0].T
    for i in range(1, a.shape[0]):
        out += a[i] @ b[i].T
    return out


@recorded
def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of (B?, C_in, H, W) with (C_out, C_in, k, k)."""
    xb, squeeze = _batched(x)
    bsz, cin, h, w = xb.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin or kh != kw:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    k = kh
    oh, ow = conv_output_size(h, k, stride, pad), conv_output_size(w, k, stride, pad)
    if oh < 1 or ow < 1:
        raise DimensionError(f"conv2d: output extent {oh}x{ow} < 1 for input {x.shape}, k={k}, stride={stride}, pad={pad}")
    xp = _pad2d(xb.data, pad)
    hp, wp = xp.shape[2:]
    cols = kernels.im2col(xp, k, stride, oh, ow)  # (B, Cin*k*k, oh*ow)
    wmat = kernel.data.reshape(cout, cin * k * k)
    out = np.matmul(wmat, cols)
    FLOPS.add(bsz * cout * cin * k * k * oh * ow)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(bsz, cout, oh, ow)

    def backward(g):
        g2 = g.reshape(bsz, cout, oh * ow)
        gx = gk = gb = None
        if xb.requires_grad:
            gcols = np.matmul(wmat.T, g2)
            gxp = kernels.col2im(gcols, cin, hp, wp, k, stride)
            gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
        if kernel.requires_grad:
            gk = _batch_outer(g2, cols).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=(0, 2))
        return gx, gk, gb

    parents = (xb, kernel) if bias is None else (xb, kernel, bias)
    res = _result(out, parents, backward, "conv2d")
    return reshape(res, res.shape[1:]) if squeeze else res


@recorded
def conv_transpose2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 2,
                     pad: int | None = None) -> Tensor:
    """Adjoint of :func:`conv2d` with the same kernel, stride and padding.

    ``kernel`` has the conv2d layout (C_out_conv, C_in_conv, k, k); this op maps
    C_out_conv channels to C_in_conv channels. The default padding
    ``(k - stride) / 2`` makes the output exactly ``stride`` times the input.
    """
    xb, squeeze = _batched(x)
    bsz, cin, h, w = xb.shape
    kout, kin, kh, kw = kernel.shape
    if kout != cin or kh != kw or stride < 1:
        raise DimensionError(f"conv_transpose2d: input {x.shape} incompatible with kernel {kernel.shape}, stride {stride}")
    k = kh
    if pad is None:
        if (k - stride) < 0 or (k - stride) % 2:
            raise DimensionError(f"conv_transpose2d: kernel {k} and stride {stride} cannot give exact {stride}x scaling")
        pad = (k - stride) // 2
    oh = (h - 1) * stride - 2 * pad + k
    ow = (w - 1) * stride - 2 * pad + k
    if oh < 1 or ow < 1 or conv_output_size(oh, k, stride, pad) != h:
        raise DimensionError(f"conv_transpose2d: inconsistent geometry for input {x.shape}, k={k}, stride={stride}, pad={pad}")
    hp, wp = oh + 2 * pad, ow + 2 * pad
    wmat = kernel.data.reshape(kout, kin * k * k)
    xflat = xb.data.reshape(bsz, cin, h * w)
    cols = np.matmul(wmat.T, xflat)  # (B, kin*k*k, h*w)
    FLOPS.add(bsz * kout * kin * k * k * h * w)
    outp = kernels.col2im(cols, kin, hp, wp, k, stride)
    out = outp[:, :, pad : pad + oh, pad : pad + ow] if pad else outp
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data[:, None, None]

    def backward(g):
        gcols = kernels.im2col(_pad2d(g, pad), k, stride, h, w)  # (B, kin*k*k, h*w)
        gx = gk = gb = None
        if xb.requires_grad:
            gx = np.matmul(wmat, gcols).reshape(bsz, cin, h, w)
        if kernel.requires_grad:
            gk = _batch_outer(xflat, gcols).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gk, gb

    parents = (xb, kernel) if bias is None else (xb, kernel, bias)
    res = _result(out, parents, backward, "conv_transpose2d")
    return reshape(res, res.shape[1:]) if squeeze else res
