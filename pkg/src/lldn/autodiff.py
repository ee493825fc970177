"""Tape-based reverse-mode automatic differentiation over dense numpy arrays.

Operations executed while a :class:`Tape` is active are recorded in execution
order; :func:`backward` walks the tape in reverse and accumulates adjoints.
Outside a tape the same functions run as plain forward computations, which is
what inference uses.

Layout convention for images is channel-last: ``(batch, rows, cols, channels)``.
"""
from __future__ import annotations

import itertools
import math
import os
from typing import Callable, Optional, Sequence

import numpy as np

DEBUG = bool(os.environ.get("LLDN_DEBUG"))

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


class ShapeError(ValueError):
    """Raised when operand shapes are invalid for an op."""

    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


class TapeError(RuntimeError):
    pass


_node_ids = itertools.count()


class Tensor:
    """A dense array that can take part in a recorded computation."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


class Tape:
    """Execution-ordered record of differentiable operations.

    One tape per training step; use it as a context manager to make it the
    active recording target.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self.records: list[tuple[str, tuple, Tensor, Callable]] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def reset(self) -> None:
        self.records.clear()

    def backward(self, loss: Tensor) -> None:
        backward(loss, tape=self)


def active_tape() -> Optional[Tape]:
    return Tape._stack[-1] if Tape._stack else None


def _emit(op: str, inputs: Sequence[Tensor], out: np.ndarray, vjp: Callable) -> Tensor:
    if DEBUG and np.issubdtype(out.dtype, np.floating):
        if all(np.isfinite(t.data).all() for t in inputs) and not np.isfinite(out).all():
            raise FloatingPointError(f"{op} produced non-finite output from finite inputs")
    result = Tensor(out)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        tape.records.append((op, tuple(inputs), result, vjp))
    return result


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Populate ``grad`` on every tensor recorded on ``tape`` that feeds ``loss``.

    Leaf gradients accumulate across calls; the intended use is a single
    backward per tape followed by an optimizer step that clears them.
    """
    tape = tape if tape is not None else active_tape()
    if tape is None or not tape.records:
        raise TapeError("backward called with an empty tape")
    if loss.data.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")

    adjoint: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for _, inputs, out, vjp in reversed(tape.records):
        g = adjoint.get(out.node_id)
        if g is None:
            continue
        for t, gi in zip(inputs, vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            prev = adjoint.get(t.node_id)
            adjoint[t.node_id] = gi if prev is None else prev + gi

    seen = set()
    for _, inputs, out, _ in tape.records:
        for t in (*inputs, out):
            if t.node_id in seen or not t.requires_grad:
                continue
            seen.add(t.node_id)
            g = adjoint.get(t.node_id)
            if g is None:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
            elif t.grad is None:
                t.grad = g.astype(t.data.dtype, copy=False).reshape(t.shape)
            else:
                t.grad = t.grad + g
    if loss.requires_grad:
        loss.grad = np.ones_like(loss.data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    if b.ndim > a.ndim:
        raise ShapeError(op, f"second operand rank {b.ndim} exceeds first {a.ndim}")
    for da, db in zip(a.shape[::-1], b.shape[::-1]):
        if db != da and db != 1:
            raise ShapeError(op, f"shapes {a.shape} and {b.shape} do not align")


# -- elementwise -------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """``a + b``; ``b`` may broadcast into ``a`` (bias style), not vice versa."""
    _check_broadcast("add", a, b)
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (g, _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (g, -_unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)
    return _emit("mul", (a, b), a.data * b.data,
                 lambda g: (g * b.data, _unbroadcast(g * a.data, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("div", a, b)
    out = a.data / b.data
    return _emit("div", (a, b), out,
                 lambda g: (g / b.data, _unbroadcast(-g * out / b.data, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def square(a: Tensor) -> Tensor:
    return _emit("square", (a,), a.data * a.data, lambda g: (2.0 * g * a.data,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit("relu", (a,), np.where(mask, a.data, 0.0).astype(a.dtype),
                 lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign to avoid overflow in exp
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype)
    return _emit("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation with cubic coefficient 0.044715."""
    x = a.data
    u = _GELU_C * (x + _GELU_K * x ** 3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_K * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _emit("gelu", (a,), out, vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError("softmax", f"axis {axis} out of range for rank {a.ndim}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", (a,), out, vjp)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError("log_softmax", f"axis {axis} out of range for rank {a.ndim}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _emit("log_softmax", (a,), out,
                 lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    axis = axis % x.ndim
    n = x.shape[axis]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError("layer_norm", f"gain/bias must be ({n},), got {gain.shape}/{bias.shape}")
    bshape = [1] * x.ndim
    bshape[axis] = n
    gb = gain.data.reshape(bshape)
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gb + bias.data.reshape(bshape)
    other = tuple(i for i in range(x.ndim) if i != axis)

    def vjp(g):
        gx_hat = g * gb
        gx = rstd * (gx_hat - gx_hat.mean(axis=axis, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=axis, keepdims=True))
        return gx, (g * xhat).sum(axis=other), g.sum(axis=other)

    return _emit("layer_norm", (x, gain, bias), out, vjp)


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched ``a @ b``; ``b`` is either a matrix or has ``a``'s batch dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", f"operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"inner dims differ: {a.shape[-1]} vs {b.shape[-2]}")
    if b.ndim != 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError("matmul", f"batch dims differ: {a.shape[:-2]} vs {b.shape[:-2]}")
    out = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _emit("matmul", (a, b), out, vjp)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Pointwise (shared-weight) linear map over the last axis: ``x @ w + b``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError("linear", f"input channels {x.shape[-1]} vs weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError("linear", f"bias {b.shape} vs output channels {w.shape[1]}")
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if b is not None:
        out = out + b.data
    out = out.reshape(*x.shape[:-1], w.shape[1])
    inputs = (x, w) if b is None else (x, w, b)

    def vjp(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape)
        gw = x2.T @ g2
        return (gx, gw) if b is None else (gx, gw, g2.sum(axis=0))

    return _emit("linear", inputs, out, vjp)


# -- shape -------------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError("reshape", f"cannot reshape {a.shape} to {tuple(shape)}") from exc
    return _emit("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", f"axes {axes} are not a permutation of rank {a.ndim}")
    inv = tuple(np.argsort(axes))
    return _emit("transpose", (a,), np.transpose(a.data, axes),
                 lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
                n != m for i, (n, m) in enumerate(zip(t.shape, ref.shape)) if i != axis):
            raise ShapeError("concat", f"shapes {ref.shape} and {t.shape} differ off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit("concat", tensors, out, lambda g: tuple(np.split(g, splits, axis=axis)))


def select(a: Tensor, index: int, axis: int = 0) -> Tensor:
    """The slice ``index`` along ``axis`` (that axis is dropped)."""
    if not 0 <= index < a.shape[axis]:
        raise ShapeError("select", f"index {index} out of range for axis of size {a.shape[axis]}")
    out = np.take(a.data, index, axis=axis)

    def vjp(g):
        ga = np.zeros_like(a.data)
        sl = [slice(None)] * a.ndim
        sl[axis] = index
        ga[tuple(sl)] = g
        return (ga,)

    return _emit("select", (a,), out, vjp)


# -- reductions --------------------------------------------------------------

def sum_reduce(a: Tensor, axis=None) -> Tensor:
    out = a.data.sum(axis=axis)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("sum", (a,), np.asarray(out), vjp)


def mean_reduce(a: Tensor, axis=None) -> Tensor:
    out = a.data.mean(axis=axis)
    n = a.data.size // max(np.asarray(out).size, 1)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _emit("mean", (a,), np.asarray(out), vjp)


def max_reduce(a: Tensor, axis: int) -> Tensor:
    """Max along ``axis``; the adjoint goes to the first maximal entry."""
    idx = np.expand_dims(a.data.argmax(axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, idx, np.expand_dims(g, axis), axis=axis)
        return (ga,)

    return _emit("max", (a,), out, vjp)


# -- spatial (NHWC) ----------------------------------------------------------

def conv_output_size(n: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation. ``x``: (B, H, W, Cin); ``w``: (kh, kw, Cin, Cout)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d", f"expected 4-D input and kernel, got {x.shape}, {w.shape}")
    B, H, W, C = x.shape
    kh, kw, cin, cout = w.shape
    if cin != C:
        raise ShapeError("conv2d", f"input channels {C} vs kernel channels {cin}")
    if b is not None and b.shape != (cout,):
        raise ShapeError("conv2d", f"bias {b.shape} vs output channels {cout}")
    Ho = conv_output_size(H, kh, stride, padding, dilation)
    Wo = conv_output_size(W, kw, stride, padding, dilation)
    if Ho < 1 or Wo < 1:
        raise ShapeError("conv2d", f"kernel {kh}x{kw} (dilation {dilation}) larger than padded input {H}x{W}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    cols = np.empty((B, Ho, Wo, kh, kw, C), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            r0, c0 = i * dilation, j * dilation
            cols[:, :, :, i, j, :] = xp[:, r0:r0 + stride * (Ho - 1) + 1:stride,
                                        c0:c0 + stride * (Wo - 1) + 1:stride, :]
    cols2 = cols.reshape(B * Ho * Wo, kh * kw * C)
    w2 = w.data.reshape(kh * kw * C, cout)
    out = cols2 @ w2
    if b is not None:
        out = out + b.data
    out = out.reshape(B, Ho, Wo, cout)
    inputs = (x, w) if b is None else (x, w, b)

    def vjp(g):
        g2 = g.reshape(-1, cout)
        gw = (cols2.T @ g2).reshape(w.shape)
        gcols = (g2 @ w2.T).reshape(B, Ho, Wo, kh, kw, C)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                r0, c0 = i * dilation, j * dilation
                gxp[:, r0:r0 + stride * (Ho - 1) + 1:stride,
                    c0:c0 + stride * (Wo - 1) + 1:stride, :] += gcols[:, :, :, i, j, :]
        gx = gxp[:, padding:padding + H, padding:padding + W, :] if padding else gxp
        return (gx, gw) if b is None else (gx, gw, g2.sum(axis=0))

    return _emit("conv2d", inputs, out, vjp)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour ×2 upsampling of axes 1 and 2."""
    if x.ndim != 4:
        raise ShapeError("upsample2x", f"expected (B, H, W, C), got {x.shape}")
    out = x.data.repeat(2, axis=1).repeat(2, axis=2)
    B, H, W, C = x.shape
    return _emit("upsample2x", (x,), out,
                 lambda g: (g.reshape(B, H, 2, W, 2, C).sum(axis=(2, 4)),))


def maxpool2x2(x: Tensor) -> Tensor:
    if x.ndim != 4 or x.shape[1] % 2 or x.shape[2] % 2:
        raise ShapeError("maxpool2x2", f"needs (B, even H, even W, C), got {x.shape}")
    B, H, W, C = x.shape
    win = x.data.reshape(B, H // 2, 2, W // 2, 2, C).transpose(0, 1, 3, 5, 2, 4).reshape(B, H // 2, W // 2, C, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(B, H // 2, W // 2, C, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(B, H, W, C)
        return (gx,)

    return _emit("maxpool2x2", (x,), out, vjp)


OPS: dict[str, Callable[..., Tensor]] = {
    "add": add, "sub": sub, "mul": mul, "div": div, "scale": scale, "square": square,
    "relu": relu, "sigmoid": sigmoid, "gelu": gelu, "softmax": softmax,
    "log_softmax": log_softmax, "layer_norm": layer_norm, "matmul": matmul,
    "linear": linear, "reshape": reshape, "transpose": transpose, "concat": concat,
    "select": select,
    "sum": sum_reduce, "mean": mean_reduce, "max": max_reduce, "conv2d": conv2d,
    "upsample2x": upsample2x, "maxpool2x2": maxpool2x2,
}


def forward_op(op: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Apply a catalog op by name."""
    fn = OPS.get(op)
    if fn is None:
        raise KeyError(f"unknown op {op!r}")
    if op == "concat":
        return fn(inputs, **attrs)
    return fn(*inputs, **attrs)


# -- RNG, init ---------------------------------------------------------------

def make_rng(seed: int) -> np.random.Generator:
    """The single counter-based generator every random draw goes through."""
    return np.random.Generator(np.random.Philox(int(seed) & (2 ** 64 - 1)))


def glorot(rng: np.random.Generator, shape: Sequence[int], fan_in: int, fan_out: int,
           dtype=np.float32) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=tuple(shape)).astype(dtype)


# -- optimizer ---------------------------------------------------------------

class AdamState:
    """Moment estimates and step count for a named parameter set."""

    def __init__(self, lr: float = 2e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params: dict[str, Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update; clears the gradients afterwards."""
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
        if name in state.m and state.m[name].shape != p.shape:
            raise ShapeError("adam", f"{name} changed shape {state.m[name].shape} -> {p.shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name in sorted(params):
        p = params[name]
        g = p.grad
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m.astype(p.dtype, copy=False)
        state.v[name] = v.astype(p.dtype, copy=False)
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - step).astype(p.dtype, copy=False)
        p.grad = None


# -- gradient checking -------------------------------------------------------

def _relerr(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


_KINKED = ("relu", "max", "maxpool2x2")


def _stencil_steps(h: float) -> list[float]:
    """Largest first: big steps beat roundoff on small slopes, small ones dodge kinks."""
    return [min(h * m, 1e-3) for m in (100, 30, 10, 3, 1)]


def grad_check_fn(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], seed: int = 0,
                  h: float = 1e-6, elementwise: bool = True, directions: int = 2,
                  retries: int = 0) -> float:
    """Compare reverse-mode gradients of ``sum(fn(*inputs) * R)`` to central differences.

    ``elementwise`` perturbs every input entry; otherwise each input is
    checked along ``directions`` random unit directions (for large models).
    With ``retries``, the step shrinks from ``100 h`` towards ``h`` until both
    stencil points route gradients through the same ReLU/max branches; a
    direction that never gets there is redrawn, up to ``retries`` times.
    Returns the maximum relative error.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"step {h} outside [1e-7, 1e-3]")
    rng = make_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    with np.errstate(all="ignore"):
        probe = fn(*[Tensor(a) for a in arrays])
    weights = rng.standard_normal(probe.shape)

    def f(arrs) -> float:
        return float((fn(*[Tensor(a) for a in arrs]).data * weights).sum())

    def routed(arrs):
        """Value plus the gradient routing masks of every ReLU and max op."""
        ts = [Tensor(a, requires_grad=True) for a in arrs]
        with Tape() as t:
            value = float((fn(*ts).data * weights).sum())
        masks = [vjp(np.ones_like(out.data))[0] != 0 for op, _, out, vjp in t.records
                 if op in _KINKED]
        return value, masks

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*leaves)
        loss = sum_reduce(mul(out, Tensor(weights)))
        backward(loss, tape)

    worst = 0.0
    for k, leaf in enumerate(leaves):
        g = leaf.grad if leaf.grad is not None else np.zeros_like(arrays[k])
        if elementwise:
            for idx in np.ndindex(*arrays[k].shape):
                plus = [a.copy() for a in arrays]
                minus = [a.copy() for a in arrays]
                plus[k][idx] += h
                minus[k][idx] -= h
                num = (f(plus) - f(minus)) / (2 * h)
                worst = max(worst, _relerr(float(g[idx]), num))
        else:
            for _ in range(directions):
                err = float("inf")
                for _attempt in range(retries + 1):
                    d = rng.standard_normal(arrays[k].shape)
                    d /= np.linalg.norm(d) or 1.0
                    slope = float((g * d).sum())
                    kinked = True
                    for step in (_stencil_steps(h) if retries else (h,)):
                        plus = [a.copy() for a in arrays]
                        minus = [a.copy() for a in arrays]
                        plus[k] += step * d
                        minus[k] -= step * d
                        if retries:
                            (fp, rp), (fm, rm) = routed(plus), routed(minus)
                            kinked = not all(np.array_equal(a, b) for a, b in zip(rp, rm))
                        else:
                            fp, fm, kinked = f(plus), f(minus), False
                        err = _relerr(slope, (fp - fm) / (2 * step))
                        if not kinked:
                            break
                    if not kinked:
                        break
                worst = max(worst, err)
    return worst


def _op_inputs(op: str, shapes, rng: np.random.Generator) -> list[np.ndarray]:
    arrays = [rng.standard_normal(s) for s in shapes]
    if op in ("max", "maxpool2x2"):
        # distinct, well-separated values keep finite differences away from ties
        flat = rng.permutation(arrays[0].size).astype(np.float64) * 0.1
        arrays[0] = flat.reshape(shapes[0])
    if op == "div":
        arrays[1] = np.sign(arrays[1]) * (np.abs(arrays[1]) + 0.5)
    if op == "relu":
        arrays[0] = np.where(np.abs(arrays[0]) < 1e-3, 0.5, arrays[0])
    return arrays


def grad_check(op: str, shapes: Sequence[Sequence[int]], seed: int, h: float = 1e-6,
               **attrs) -> float:
    """Maximum relative error between adjoint and central differences for one op."""
    rng = make_rng(seed)
    arrays = _op_inputs(op, shapes, rng)
    if op == "concat":
        return grad_check_fn(lambda *ts: concat(ts, **attrs), arrays, seed, h)
    return grad_check_fn(lambda *ts: forward_op(op, ts, **attrs), arrays, seed, h)
