"""Dense float64 tensors with a reverse-mode gradient tape.

Operations only record onto a tape while one is active::

    with GradientTape() as tape:
        loss = (x * x).sum()
    grads = backward(tape, loss)

Outside a tape every operation is a plain numpy computation, which is what
inference and rollouts use.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradientTape",
    "TapeError",
    "ShapeError",
    "backward",
    "custom_op",
    "is_recording",
    "as_tensor",
    "zeros",
    "ones",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sqrt",
    "tanh",
    "sigmoid",
    "softplus",
    "silu",
    "gelu",
    "matmul",
    "linear",
    "concat",
    "stack",
    "softmax",
    "layer_norm",
    "causal_depthwise_conv",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand extents do not line up."""


class TapeError(RuntimeError):
    """Misuse of a gradient tape (double backward, non-scalar loss, ...)."""


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def is_recording() -> bool:
    stack = _tape_stack()
    return bool(stack) and stack[-1].active


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")
    # make ndarray <op> Tensor dispatch to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

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
    def tape_id(self) -> int:
        return id(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar
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
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(*shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(*shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


class _Node:
    __slots__ = ("outputs", "inputs", "backward")

    def __init__(self, outputs, inputs, backward):
        self.outputs = outputs
        self.inputs = inputs
        self.backward = backward


class GradientTape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, which is already a topological
    order. A tape supports exactly one backward pass.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.active = False
        self.consumed = False

    def __enter__(self) -> "GradientTape":
        if self.consumed:
            raise TapeError("tape has already been consumed by a backward pass")
        self.active = True
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        self.active = False
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def gradient(self, loss: Tensor, sources: Sequence[Tensor] | None = None):
        grads = backward(self, loss)
        if sources is None:
            return grads
        return [grads.get(s) for s in sources]


def _record(outputs: tuple[Tensor, ...], inputs: tuple[Tensor, ...], bw) -> None:
    stack = _tape_stack()
    if not stack or not stack[-1].active:
        return
    if not any(t.requires_grad for t in inputs):
        return
    for o in outputs:
        o.requires_grad = True
    stack[-1].nodes.append(_Node(outputs, inputs, bw))


def custom_op(outputs, inputs: Sequence[Tensor], bw: Callable) -> Tensor | tuple[Tensor, ...]:
    """Wrap precomputed output arrays as tape-recorded tensors.

    ``bw`` receives one upstream gradient per output (zeros where unused) and
    returns one gradient (or ``None``) per input.
    """
    single = isinstance(outputs, np.ndarray)
    outs = tuple(Tensor(o) for o in ((outputs,) if single else outputs))
    _record(outs, tuple(inputs), bw)
    return outs[0] if single else outs


def _op(out: np.ndarray, inputs: tuple[Tensor, ...], bw) -> Tensor:
    t = Tensor(out)
    _record((t,), inputs, bw)
    return t


def backward(tape: GradientTape, loss: Tensor) -> dict:
    """Propagate d(loss)/d(.) through ``tape``.

    Every leaf with ``requires_grad`` gets its gradient added to ``.grad``;
    the returned dict maps each such leaf to d(loss)/d(leaf).
    """
    if tape.consumed:
        raise TapeError("double backward on one tape")
    if loss.size != 1:
        raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
    tape.consumed = True
    tape.active = False

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced: set[int] = set()
    leaves: dict[int, Tensor] = {}
    for node in tape.nodes:
        for o in node.outputs:
            produced.add(id(o))
        for i in node.inputs:
            if i.requires_grad and id(i) not in produced:
                leaves[id(i)] = i

    for node in reversed(tape.nodes):
        gouts = [grads.get(id(o)) for o in node.outputs]
        if all(g is None for g in gouts):
            continue
        gouts = [np.zeros_like(o.data) if g is None else g for o, g in zip(node.outputs, gouts)]
        gins = node.backward(*gouts)
        if not isinstance(gins, tuple):
            gins = (gins,)
        for inp, g in zip(node.inputs, gins):
            if g is None or not inp.requires_grad:
                continue
            key = id(inp)
            prev = grads.get(key)
            grads[key] = g if prev is None else prev + g
    tape.nodes = []

    result = {}
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(leaf.data)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        result[leaf] = g
    return result


# ---------------------------------------------------------------- helpers

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-|x|) never overflows; both branches keep full relative accuracy
    e = np.exp(-np.abs(x))
    r = 1.0 / (1.0 + e)
    return np.where(x >= 0, r, e * r)


# ---------------------------------------------------------- elementwise ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _op(ad * bd, (a, b),
               lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _op(out, (a, b),
               lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _op(-a.data, (a,), lambda g: -g)


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _op(ad ** p, (a,), lambda g: g * p * ad ** (p - 1))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _op(out, (a,), lambda g: g * out)


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _op(np.log(ad), (a,), lambda g: g / ad)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _op(out, (a,), lambda g: g * 0.5 / out)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _op(out, (a,), lambda g: g * (1.0 - out * out))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _stable_sigmoid(a.data)
    return _op(s, (a,), lambda g: g * s * (1.0 - s))


def softplus(a) -> Tensor:
    """ln(1 + e^x) in the overflow-safe form max(x, 0) + ln(1 + e^-|x|)."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    s = _stable_sigmoid(x)
    return _op(out, (a,), lambda g: g * s)


def silu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    s = _stable_sigmoid(x)
    return _op(x * s, (a,), lambda g: g * (s + x * s * (1.0 - s)))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """tanh approximation of GELU."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner)

    return _op(out, (a,), bw)


# ------------------------------------------------------- shape and reduce

def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return _op(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return reduce_sum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _op(a.data.reshape(shape), (a,), lambda g: g.reshape(old))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _op(np.ascontiguousarray(a.data.transpose(axes)), (a,),
               lambda g: np.ascontiguousarray(g.transpose(inv)))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(p, (slice, int, np.integer)) or p is Ellipsis or p is None
                for p in parts)

    def bw(g):
        out = np.zeros(shape)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return out

    return _op(np.array(a.data[idx]), (a,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    return _op(np.concatenate([t.data for t in ts], axis=axis), ts,
               lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    n = len(ts)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _op(np.stack([t.data for t in ts], axis=axis), ts, bw)


# ----------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if bd.ndim > 1 else np.multiply.outer(g, bd)
        gb = np.swapaxes(ad, -1, -2) @ g if ad.ndim > 1 else np.multiply.outer(ad, g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _op(ad @ bd, (a, b), bw)


def linear(x, W, b=None) -> Tensor:
    """y[..., j] = sum_i x[..., i] W[i, j] (+ b[j])."""
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2:
        raise ShapeError(f"linear weight must be 2-D, got shape {W.shape}")
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(
            f"linear: trailing extent of x is {x.shape[-1]} but weight expects D_in={W.shape[0]}")
    xd, Wd = x.data, W.data
    out = xd @ Wd
    inputs: tuple[Tensor, ...] = (x, W)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise ShapeError(f"linear: bias shape {b.shape} does not match D_out={W.shape[1]}")
        out = out + b.data
        inputs = (x, W, b)
    d_in, d_out = Wd.shape

    def bw(g):
        gx = g @ Wd.T
        gW = xd.reshape(-1, d_in).T @ g.reshape(-1, d_out)
        if b is None:
            return gx, gW
        return gx, gW, g.reshape(-1, d_out).sum(axis=0)

    return _op(out, inputs, bw)


def softmax(x, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is False get exactly zero weight."""
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return s * (g - (g * s).sum(axis=axis, keepdims=True))

    return _op(s, (x,), bw)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Per trailing slice (x - mean) / sqrt(var + eps) * gamma + beta, population variance."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if eps <= 0:
        raise ValueError("eps must be positive")
    xd = x.data
    d = xd.shape[-1]
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data

    def bw(g):
        dxhat = g * gd
        gx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).reshape(-1, d).sum(axis=0)
        gb = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gb

    return _op(xhat * gd + beta.data, (x, gamma, beta), bw)


def causal_depthwise_conv(x, kernels, bias) -> Tensor:
    """y[l, d] = sum_w kernels[w, d] * x[l - W + 1 + w, d] + bias[d], zero left padding.

    ``x`` may carry leading batch axes: shape (..., L, D).
    """
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    W, D = kernels.shape
    if W < 1:
        raise ShapeError("convolution width must be at least 1")
    if x.shape[-1] != D:
        raise ShapeError(f"conv: channel extent {x.shape[-1]} does not match kernels {D}")
    L = x.shape[-2]
    pad = [(0, 0)] * (x.ndim - 2) + [(W - 1, 0), (0, 0)]
    xp = np.pad(x.data, pad)
    kd = kernels.data
    out = np.zeros(x.shape)
    for w in range(W):
        out += kd[w] * xp[..., w:w + L, :]
    out += bias.data

    def bw(g):
        gxp = np.zeros_like(xp)
        gk = np.empty_like(kd)
        g2 = g.reshape(-1, D)
        for w in range(W):
            gxp[..., w:w + L, :] += g * kd[w]
            gk[w] = (xp[..., w:w + L, :].reshape(-1, D) * g2).sum(axis=0)
        return gxp[..., W - 1:, :], gk, g2.sum(axis=0)

    return _op(out, (x, kernels, bias), bw)


# ------------------------------------------------------------ grad check

def grad_check(f: Callable[[Tensor], Tensor], point, h: float = 1e-5,
               coords: Iterable[int] | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    Error per coordinate is |analytic - numeric| / (|analytic| + 1e-8).
    ``coords`` restricts the comparison to a subset of flat indices.
    """
    base = np.array(as_tensor(point).data, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    with GradientTape() as tape:
        y = f(x)
    if y.size != 1:
        raise TapeError("grad_check needs a scalar-valued function")
    if not np.all(np.isfinite(y.data)):
        raise FloatingPointError("function is not finite at the check point")
    analytic = backward(tape, y)[x].reshape(-1)

    flat = base.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        vals = []
        for step in (h, -h):
            probe = flat.copy()
            probe[i] += step
            v = f(Tensor(probe.reshape(base.shape))).data
            if not np.all(np.isfinite(v)):
                raise FloatingPointError(f"non-finite evaluation at coordinate {i}")
            vals.append(float(v.reshape(-1)[0]))
        numeric = (vals[0] - vals[1]) / (2 * h)
        err = abs(analytic[i] - numeric) / (abs(analytic[i]) + 1e-8)
        worst = max(worst, err)
    return worst
