"""Minimal reverse-mode autodiff on float64 numpy arrays.

Operations are recorded onto the active :class:`Graph` (entered with ``with
Graph() as g:``) in call order; :meth:`Graph.backward` replays them in exact
reverse order.  Outside a graph nothing is recorded, which is how inference
runs.

Gradients accumulate additively into ``Tensor.grad`` of leaf tensors with
``requires_grad=True``.  Calling ``backward`` twice without
:func:`zero_grad` therefore doubles them.

Convolution is cross-correlation (no kernel flip).  Layout is channels-last:
images are ``(H, W, C)`` or batched ``(N, H, W, C)``.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels

__all__ = [
    "Tensor", "Graph", "ShapeError", "ContractError", "tensor", "zeros",
    "add", "sub", "mul", "div", "neg", "scale", "matmul", "linear", "transpose", "reshape",
    "concat", "sum", "mean", "exp", "log", "sigmoid", "softplus", "gelu",
    "softmax_rows", "log_softmax", "layernorm", "conv2d", "resample",
    "square", "abs", "zero_grad", "finite_diff_check", "current_graph",
]


class ShapeError(ValueError):
    """Operand extents are incompatible."""


class ContractError(RuntimeError):
    """An autodiff call violated its preconditions."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "is_leaf", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.is_leaf = True
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("op", "inputs", "out", "backward")

    def __init__(self, op, inputs, out, backward):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward = backward


_state = threading.local()

# every op name passed to _make; the gradient checker covers each one
PRIMITIVES = (
    "add", "sub", "mul", "div", "neg", "scale", "square", "abs", "exp", "log",
    "sigmoid", "softplus", "gelu", "matmul", "linear", "transpose", "reshape",
    "concat", "sum", "softmax", "log_softmax", "layernorm", "conv2d", "resample",
)

# op name -> backward wrapper; tests swap entries in to inject faults
_BACKWARD_HOOKS: dict[str, Callable] = {}


def current_graph() -> "Graph | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Graph:
    """Tape of recorded operations for one forward/backward session."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Graph":
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: tuple[Tensor, ...], out: Tensor, backward) -> None:
        self.nodes.append(_Node(op, inputs, out, backward))

    def backward(self, loss: Tensor) -> list[Tensor]:
        """Propagate d(loss)/d(.) to every requires_grad leaf; return those leaves."""
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        touched: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            bw = _BACKWARD_HOOKS.get(node.op)
            in_grads = bw(node, g) if bw is not None else node.backward(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.is_leaf:
                    if inp.grad is None:
                        inp.grad = np.zeros_like(inp.data)
                    inp.grad += gi
                    touched[id(inp)] = inp
                else:
                    key = id(inp)
                    if key in grads:
                        grads[key] = grads[key] + gi
                    else:
                        grads[key] = gi
        if loss.is_leaf and loss.requires_grad:
            loss.grad = (loss.grad if loss.grad is not None else 0.0) + np.ones_like(loss.data)
            touched[id(loss)] = loss
        return list(touched.values())


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def _make(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.is_leaf = True
    out.requires_grad = False
    g = current_graph()
    if needs and g is not None:
        out.requires_grad = True
        out.is_leaf = False
        g.record(op, inputs, out, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    q = a.data / b.data
    return _make("div", q, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * q / b.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def square(a: Tensor) -> Tensor:
    return _make("square", a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _make("abs", np.abs(a.data), (a,), lambda g: (np.sign(a.data) * g,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make("exp", y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _make("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), stable for large |x|."""
    x = a.data
    y = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _make("softplus", y, (a,), lambda g: (g * _sigmoid(x),))


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU (fused kernel, compiled when available)."""
    x = a.data
    y, t = kernels.gelu_forward(x)

    def bw(g):
        return (kernels.gelu_backward(x, t, g),)

    return _make("gelu", y, (a,), bw)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    # (..., m, k) @ (k, n): fold leading axes into rows so BLAS sees one GEMM
    fold = a.ndim > 2 and b.ndim == 2
    if fold:
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[1],))
    else:
        out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if fold:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                ga = (g2 @ b.data.T).reshape(a.shape)
            if b.requires_grad:
                gb = a2.T @ g2
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make("matmul", out, (a, b), bw)


def linear(x, w, b) -> Tensor:
    """``x @ w + b`` for ``x`` of shape ``(..., n_in)``, ``w`` ``(n_in, n_out)``, ``b`` ``(n_out,)``."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"linear: cannot apply weight {w.shape}, bias {b.shape} to {x.shape}")
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    out += b.data
    out = out.reshape(x.shape[:-1] + (w.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _make("linear", out, (x, w, b), bw)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = tuple(_as_tensor(p) for p in parts)
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make("concat", out, parts, bw)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", np.asarray(out, dtype=np.float64), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------- fused ops

def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make("softmax", y, (x,), bw)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _make("log_softmax", y, (x,),
                 lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


LAYERNORM_EPS = 1e-9


def layernorm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
              eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    y = xhat
    if gamma is not None:
        y = y * gamma.data
    if beta is not None:
        y = y + beta.data
    inputs = tuple(t for t in (x, gamma, beta) if t is not None)
    n = x.shape[-1]

    def bw(g):
        gg = g * gamma.data if gamma is not None else g
        dx = rstd * (gg - gg.mean(axis=-1, keepdims=True)
                     - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        out = [dx]
        if gamma is not None:
            out.append((g * xhat).reshape(-1, n).sum(axis=0).reshape(gamma.shape))
        if beta is not None:
            out.append(g.reshape(-1, n).sum(axis=0).reshape(beta.shape))
        return tuple(out)

    return _make("layernorm", y, inputs, bw)


def conv2d(x: Tensor, k: Tensor, pad: str = "same") -> Tensor:
    """Channels-last cross-correlation.

    ``x`` is ``(H, W, Cin)`` or ``(N, H, W, Cin)``; ``k`` is
    ``(kh, kw, Cin, Cout)``.  ``same`` zero-pads by half the (odd) kernel size.
    """
    x, k = _as_tensor(x), _as_tensor(k)
    batched = x.ndim == 4
    if x.ndim not in (3, 4) or k.ndim != 4:
        raise ShapeError(f"conv2d: bad ranks x{x.shape} k{k.shape}")
    kh, kw, cin, cout = k.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"conv2d: input channels {x.shape} do not match kernel {k.shape}")
    xd = x.data if batched else x.data[None]
    if pad == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"conv2d: same padding needs odd kernel extents, got {k.shape}")
        ph, pw = kh // 2, kw // 2
        xp = np.pad(xd, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    elif pad == "valid":
        xp = xd
    else:
        raise ValueError(f"conv2d: unknown padding {pad!r}")
    n, hp, wp, _ = xp.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {k.shape} larger than input {x.shape}")
    # (n, ho, wo, cin, kh, kw) -> (n, ho, wo, kh, kw, cin)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, kh * kw * cin)
    kmat = k.data.reshape(kh * kw * cin, cout)
    out = (cols @ kmat).reshape(n, ho, wo, cout)
    if not batched:
        out = out[0]

    def bw(g):
        gb = g if batched else g[None]
        g2 = gb.reshape(n * ho * wo, cout)
        gx = gk = None
        if k.requires_grad:
            gk = (cols.T @ g2).reshape(k.shape)
        if x.requires_grad:
            gcols = (g2 @ kmat.T).reshape(n, ho, wo, kh, kw, cin)
            gp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gp[:, i:i + ho, j:j + wo, :] += gcols[:, :, :, i, j, :]
            if pad == "same":
                gp = gp[:, ph:ph + xd.shape[1], pw:pw + xd.shape[2], :]
            gx = gp if batched else gp[0]
        return gx, gk

    return _make("conv2d", out, (x, k), bw)


def resample(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Separable linear resampling of a channels-last map.

    ``out[..., i, j, c] = sum_pq rows[i, p] * cols[j, q] * x[..., p, q, c]``.
    ``rows``/``cols`` are constant matrices, e.g. from :func:`resample_matrix`.
    """
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    if x.shape[-3] != rows.shape[1] or x.shape[-2] != cols.shape[1]:
        raise ShapeError(f"resample: map {x.shape} vs matrices {rows.shape}, {cols.shape}")
    out = np.einsum("ip,...pqc,jq->...ijc", rows, x.data, cols, optimize=True)
    return _make("resample", out, (x,),
                 lambda g: (np.einsum("ip,...ijc,jq->...pqc", rows, g, cols, optimize=True),))


def resample_matrix(src: int, dst: int) -> np.ndarray:
    """Row-stochastic ``dst x src`` matrix mapping a 1-D signal of length src to dst.

    Integer-factor shrinks use box averaging; everything else is bilinear
    with half-pixel centres (align-corners=false), edges clamped.
    """
    if src < 1 or dst < 1:
        raise ValueError(f"resample_matrix: bad sizes {src} -> {dst}")
    m = np.zeros((dst, src))
    if src == dst:
        return np.eye(src)
    if src > dst and src % dst == 0:
        f = src // dst
        for i in range(dst):
            m[i, i * f:(i + 1) * f] = 1.0 / f
        return m
    s = src / dst
    for i in range(dst):
        pos = (i + 0.5) * s - 0.5
        pos = min(max(pos, 0.0), src - 1.0)
        lo = int(np.floor(pos))
        hi = min(lo + 1, src - 1)
        w = pos - lo
        m[i, lo] += 1.0 - w
        m[i, hi] += w
    return m


# ---------------------------------------------------------------- gradient checking

def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
                      coords: Iterable[tuple[int, ...]] | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps ``x`` to a scalar tensor.  Error per coordinate is
    ``|a - n| / max(1e-12, |a| + |n|)``.  ``coords`` restricts the check to a
    subset of flat-index tuples (for large tensors).
    """
    saved_grad = x.grad
    saved_flag = x.requires_grad
    x.requires_grad = True
    x.grad = None
    with Graph() as g:
        y = f(x)
    if y.requires_grad:
        g.backward(y)
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)
    x.grad = saved_grad
    x.requires_grad = False
    try:
        if coords is None:
            coords = list(np.ndindex(*x.shape))
        worst = 0.0
        for c in coords:
            orig = x.data[c]
            x.data[c] = orig + h
            fp = float(f(x).data)
            x.data[c] = orig - h
            fm = float(f(x).data)
            x.data[c] = orig
            num = (fp - fm) / (2.0 * h)
            an = float(analytic[c])
            err = np.abs(an - num) / max(1e-12, np.abs(an) + np.abs(num))
            worst = max(worst, float(err))
    finally:
        x.requires_grad = saved_flag
    return worst
