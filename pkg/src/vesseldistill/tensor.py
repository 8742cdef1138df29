"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tensor` wraps an ``ndarray`` and, when it was produced by a
differentiable operation, a reference to the node that produced it. Calling
:func:`backward` on a scalar walks the recorded graph in reverse topological
order and accumulates ``.grad`` on every tensor that requires gradients.

Only the operator set used by the segmentation networks is provided:
elementwise arithmetic (with numpy broadcasting), reductions, ``matmul``,
reshapes/transposes, 3D convolution, group normalisation, leaky ReLU,
nearest-neighbour upsampling, softmax and a single-head self-attention block.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError

__all__ = [
    "Tensor",
    "Graph",
    "GraphEntry",
    "backward",
    "no_grad",
    "is_grad_enabled",
    "set_debug",
    "stop_gradient",
    "straight_through",
    "conv3",
    "group_norm",
    "leaky_relu",
    "upsample_nearest",
    "softmax",
    "sigmoid",
    "self_attention",
    "matmul",
    "concatenate",
]

_state = threading.local()
_DEBUG = False


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def set_debug(flag: bool) -> None:
    """Toggle finite-value assertions after every forward op."""
    global _DEBUG
    _DEBUG = bool(flag)


class _Node:
    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    """An n-dimensional float64 array that can take part in a computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_node", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._node: Optional[_Node] = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar ---------------------------------------------------
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def abs(self):
        return tabs(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: Sequence[Tensor], op: str, backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _DEBUG and not np.all(np.isfinite(out.data)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            raise FloatingPointError(f"{op} produced non-finite values from finite inputs")
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = _Node(op, tuple(inputs), backward_fn)
    return out


def stop_gradient(x) -> Tensor:
    """Return a graph-free copy: gradients never flow through the result."""
    return Tensor(_as_tensor(x).data)


def straight_through(value, surrogate) -> Tensor:
    """Forward ``value`` exactly; route the backward pass into ``surrogate`` unchanged."""
    surrogate = _as_tensor(surrogate)
    value = np.asarray(value, dtype=np.float64)
    if value.shape != surrogate.shape:
        raise DimensionError(
            f"straight_through: value shape {value.shape} != surrogate shape {surrogate.shape}"
        )
    return _make(value.copy(), (surrogate,), "straight_through", lambda g: (g,))


# ---------------------------------------------------------------------------
# graph bookkeeping and backward
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class GraphEntry:
    op: str
    input_ids: tuple
    output_id: int


class Graph:
    """Recorded operations reachable from ``output``, in topological order."""

    def __init__(self, output: Tensor):
        self.output = output
        self.order: list = []  # tensors with a producing node, inputs first
        seen = set()
        stack = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                self.order.append(t)
                continue
            if id(t) in seen or t._node is None:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for inp in t._node.inputs:
                if inp._node is not None and id(inp) not in seen:
                    stack.append((inp, False))
        self.entries = [
            GraphEntry(t._node.op, tuple(id(i) for i in t._node.inputs), id(t)) for t in self.order
        ]

    def __len__(self) -> int:
        return len(self.entries)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor."""
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = Graph(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for t in reversed(graph.order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        _accumulate(t, g)
        node = t._node
        in_grads = node.backward_fn(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if inp._node is None:
                _accumulate(inp, ig)
            else:
                prev = grads.get(id(inp))
                grads[id(inp)] = ig if prev is None else prev + ig
    if loss._node is None:
        _accumulate(loss, np.ones_like(loss.data))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.data.shape:
        g = np.broadcast_to(g, t.data.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------
def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), "add",
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), "sub",
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make(ad * bd, (a, b), "mul", bw)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), "div", bw)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), "neg", lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = _as_tensor(a)
    p = float(exponent)
    ad = a.data
    if p == 2.0:
        return _make(ad * ad, (a,), "square", lambda g: (2.0 * ad * g,))
    return _make(ad ** p, (a,), "pow", lambda g: (p * ad ** (p - 1.0) * g,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), "exp", lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), "log", lambda g: (g / ad,))


def tabs(a) -> Tensor:
    """Absolute value; the subgradient at 0 is 0."""
    a = _as_tensor(a)
    ad = a.data
    return _make(np.abs(ad), (a,), "abs", lambda g: (g * np.sign(ad),))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def leaky_relu(x, slope: float = 0.01) -> Tensor:
    """``x`` for ``x >= 0``, ``slope * x`` otherwise.

    At exactly zero the backward pass uses ``slope`` as the subgradient.
    """
    x = _as_tensor(x)
    xd = x.data
    pos = xd > 0
    out = np.where(xd >= 0, xd, slope * xd)
    return _make(out, (x,), "leaky_relu", lambda g: (np.where(pos, g, slope * g),))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------
def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _make(out, (a,), "sum", bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axis=axes, keepdims=keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    orig = a.shape
    return _make(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(orig),))


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _make(out, (a,), "transpose", lambda g: (g.transpose(inv),))


def concatenate(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in ts], axis=axis)
    return _make(out, tuple(ts), "concat", lambda g: tuple(np.split(g, splits, axis=axis)))


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy semantics (both operands >= 2-D)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul: contraction axis mismatch, {a.shape[-1]} (axis -1 of left) "
            f"vs {b.shape[-2]} (axis -2 of right)"
        )
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), "matmul", bw)


def softmax(x, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtracted) along ``axis``."""
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), "softmax", bw)


# ---------------------------------------------------------------------------
# volumetric ops
# ---------------------------------------------------------------------------
_AXIS_NAMES = ("batch", "channel", "depth", "height", "width")


def _check_5d(name: str, t: Tensor) -> None:
    if t.ndim != 5:
        raise DimensionError(f"{name} must be 5-D [B,C,D,H,W], got {t.ndim}-D shape {t.shape}")


def conv3(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """3D cross-correlation of ``x[B,C,D,H,W]`` with ``kernel[C',C,k,k,k]``.

    Output extent per spatial axis is ``(n + 2*padding - k) // stride + 1``.
    Implemented as an im2col gather followed by one matrix product.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    _check_5d("conv3 input", x)
    if kernel.ndim != 5:
        raise DimensionError(f"conv3 kernel must be 5-D [C',C,k,k,k], got shape {kernel.shape}")
    cout, cin, k, k1, k2 = kernel.shape
    if not (k == k1 == k2):
        raise DimensionError(f"conv3 kernel must be cubic, got spatial extents {kernel.shape[2:]}")
    if k % 2 == 0:
        raise ConfigurationError(f"conv3 kernel size must be odd, got {k}")
    if stride not in (1, 2):
        raise ConfigurationError(f"conv3 stride must be 1 or 2, got {stride}")
    B, C, D, H, W = x.shape
    if C != cin:
        raise DimensionError(f"conv3 axis 1 (channel): input has {C}, kernel expects {cin}")
    for ax, n in zip(range(2, 5), (D, H, W)):
        if n < k - 2 * padding:
            raise DimensionError(
                f"conv3 axis {ax} ({_AXIS_NAMES[ax]}): extent {n} smaller than kernel {k} "
                f"with padding {padding}"
            )
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (cout,):
            raise DimensionError(f"conv3 bias must have shape ({cout},), got {bias.shape}")

    Do = (D + 2 * padding - k) // stride + 1
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    N = Do * Ho * Wo
    s = stride
    w2 = kernel.data.reshape(cout, cin * k ** 3)
    track = is_grad_enabled() and (x.requires_grad or kernel.requires_grad
                                   or (bias is not None and bias.requires_grad))

    if k == 1 and padding == 0:
        xs = x.data[:, :, ::s, ::s, ::s] if s > 1 else x.data
        cols = np.ascontiguousarray(xs).reshape(B, cin, N)
    else:
        xp = x.data
        if padding:
            p = padding
            xp = np.pad(xp, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
        cols = np.empty((B, cin, k ** 3, Do, Ho, Wo))
        t = 0
        for a in range(k):
            for b in range(k):
                for c in range(k):
                    cols[:, :, t] = xp[:, :, a:a + s * (Do - 1) + 1:s,
                                       b:b + s * (Ho - 1) + 1:s,
                                       c:c + s * (Wo - 1) + 1:s]
                    t += 1
        cols = cols.reshape(B, cin * k ** 3, N)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(B, cout, Do, Ho, Wo)

    if not track:
        return _make(out, (), "conv3", None)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        g2 = g.reshape(B, cout, N)
        gx = gk = gb = None
        if kernel.requires_grad:
            gw = np.zeros((cout, cin * k ** 3))
            for i in range(B):
                gw += g2[i] @ cols[i].T
            gk = gw.reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=(0, 2))
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2)
            if k == 1 and padding == 0:
                dc = dcols.reshape(B, cin, Do, Ho, Wo)
                if s > 1:
                    gx = np.zeros(x.shape)
                    gx[:, :, ::s, ::s, ::s] = dc
                else:
                    gx = dc
            else:
                p = padding
                dcols = dcols.reshape(B, cin, k ** 3, Do, Ho, Wo)
                dxp = np.zeros((B, cin, D + 2 * p, H + 2 * p, W + 2 * p))
                t = 0
                for a in range(k):
                    for b in range(k):
                        for c in range(k):
                            dxp[:, :, a:a + s * (Do - 1) + 1:s,
                                b:b + s * (Ho - 1) + 1:s,
                                c:c + s * (Wo - 1) + 1:s] += dcols[:, :, t]
                            t += 1
                gx = dxp[:, :, p:p + D, p:p + H, p:p + W] if p else dxp
        return (gx, gk) if bias is None else (gx, gk, gb)

    return _make(out, inputs, "conv3", bw)


def group_norm(x, groups: int, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise each (sample, channel-group) to zero mean and unit variance, then scale/shift."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.ndim < 2:
        raise DimensionError("group_norm input needs a channel axis")
    B, C = x.shape[:2]
    if groups < 1 or C % groups:
        raise ConfigurationError(f"group_norm: {C} channels not divisible into {groups} groups")
    if eps <= 0:
        raise ConfigurationError("group_norm eps must be positive")
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"group_norm affine parameters must have shape ({C},)")
    shape = x.shape
    xg = x.data.reshape(B, groups, -1)
    n = xg.shape[2]
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = np.einsum("bgn,bgn->bg", xc, xc)[..., None] / n
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(shape)
    bshape = (1, C) + (1,) * (x.ndim - 2)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    red = (0,) + tuple(range(2, x.ndim))

    def bw(g):
        gg = gb = gx = None
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=red)
        if beta.requires_grad:
            gb = g.sum(axis=red)
        if x.requires_grad:
            dxh = (g * gamma.data.reshape(bshape)).reshape(B, groups, n)
            xh = xhat.reshape(B, groups, n)
            s1 = dxh.sum(axis=2, keepdims=True)
            s2 = np.einsum("bgn,bgn->bg", dxh, xh)[..., None]
            gx = (inv * (dxh - s1 / n - xh * (s2 / n))).reshape(shape)
        return gx, gg, gb

    return _make(out, (x, gamma, beta), "group_norm", bw)


def upsample_nearest(x, factor: int) -> Tensor:
    """Replicate every voxel into a ``factor``-sized cube."""
    x = _as_tensor(x)
    _check_5d("upsample input", x)
    if factor < 1:
        raise ConfigurationError("upsample factor must be >= 1")
    if factor == 1:
        return _make(x.data.copy(), (x,), "upsample", lambda g: (g,))
    B, C, D, H, W = x.shape
    f = factor
    out = np.broadcast_to(
        x.data[:, :, :, None, :, None, :, None], (B, C, D, f, H, f, W, f)
    ).reshape(B, C, D * f, H * f, W * f)

    def bw(g):
        return (g.reshape(B, C, D, f, H, f, W, f).sum(axis=(3, 5, 7)),)

    return _make(out, (x,), "upsample", bw)


def self_attention(tokens, wq, wk, wv, wo, return_weights: bool = False):
    """Single-head scaled dot-product attention over ``tokens[B,T,d]``.

    Projections act on column vectors (``q = Wq @ token``), so for one token the
    result is ``Wo @ Wv @ token``. The residual connection is left to the caller.
    """
    tokens = _as_tensor(tokens)
    if tokens.ndim != 3:
        raise DimensionError(f"self_attention tokens must be [B,T,d], got shape {tokens.shape}")
    d = tokens.shape[2]
    for name, w in (("Wq", wq), ("Wk", wk), ("Wv", wv), ("Wo", wo)):
        if _as_tensor(w).shape != (d, d):
            raise DimensionError(
                f"self_attention {name} must be square ({d},{d}), got {_as_tensor(w).shape}"
            )
    q = matmul(tokens, transpose(wq))
    k = matmul(tokens, transpose(wk))
    v = matmul(tokens, transpose(wv))
    scores = matmul(q, transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(d))
    attn = softmax(scores, axis=-1)
    out = matmul(matmul(attn, v), transpose(wo))
    if return_weights:
        return out, attn
    return out
