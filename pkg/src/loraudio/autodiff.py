"""A small dense-tensor engine with reverse-mode differentiation and Adam.

Tensors wrap numpy arrays. Every operator records a backprop node when at
least one input requires a gradient; :func:`backward` walks the graph in
reverse topological order. Only two broadcasting patterns exist: bias-add
along one axis and per-channel scaling of NCHW maps.

Precision is chosen per process with ``LORAUDIO_PRECISION`` (``f32`` or
``f64``) or temporarily with :func:`precision`.
"""

from __future__ import annotations

import contextlib
import os
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import expit

from .errors import MissingGrad, NonScalarLoss, ShapeMismatch, ValidationError

_PRECISIONS = {"f32": np.float32, "f64": np.float64}
_dtype = _PRECISIONS.get(os.environ.get("LORAUDIO_PRECISION", "f32"), np.float32)
_grad_enabled = True


def get_dtype():
    return _dtype


def set_precision(mode: str) -> None:
    global _dtype
    if mode not in _PRECISIONS:
        raise ValidationError(f"precision must be one of {sorted(_PRECISIONS)}, got {mode!r}")
    _dtype = _PRECISIONS[mode]


@contextlib.contextmanager
def precision(mode: str) -> Iterator[None]:
    """Temporarily switch the engine precision, e.g. ``with precision("f64"):``."""
    global _dtype
    saved = _dtype
    set_precision(mode)
    try:
        yield
    finally:
        _dtype = saved


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording backprop nodes."""
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], op: str, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _shape_error(op: str, a, b) -> ShapeMismatch:
    return ShapeMismatch(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


# -- operators -------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape)
    av, bv = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def backward(g):
        return (g @ bv.T if need_a else None), (av.T @ g if need_b else None)

    return _node(av @ bv, (a, b), "matmul", backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise _shape_error("add", a.shape, b.shape)
    return _node(a.data + b.data, (a, b), "add", lambda g: (g, g))


def add_bias(x: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Add a 1-D bias along ``axis`` (last axis for linear layers, 1 for NCHW maps)."""
    x, b = as_tensor(x), as_tensor(b)
    axis = axis % max(x.data.ndim, 1)
    if b.data.ndim != 1 or x.data.ndim <= axis or x.shape[axis] != b.shape[0]:
        raise _shape_error("add_bias", x.shape, b.shape)
    view = [1] * x.data.ndim
    view[axis] = b.shape[0]
    others = tuple(i for i in range(x.data.ndim) if i != axis)
    return _node(x.data + b.data.reshape(view), (x, b), "add_bias", lambda g: (g, g.sum(axis=others)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise _shape_error("mul", a.shape, b.shape)
    av, bv = a.data, b.data
    return _node(av * bv, (a, b), "mul", lambda g: (g * bv, g * av))


def scale(a: Tensor, s: float) -> Tensor:
    a = as_tensor(a)
    s = a.data.dtype.type(s)
    return _node(a.data * s, (a,), "scale", lambda g: (g * s,))


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _node(np.where(mask, x.data, x.data.dtype.type(0)), (x,), "relu", lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    one = x.data.dtype.type(1)
    y = expit(x.data)
    return _node(y, (x,), "sigmoid", lambda g: (g * y * (one - y),))


def sum_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _node(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), "sum", lambda g: (np.broadcast_to(g, shape).copy(),))


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise _shape_error("reshape", old, shape) from None
    return _node(y, (x,), "reshape", lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; the result is made contiguous so downstream BLAS calls see one layout."""
    x = as_tensor(x)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.data.ndim)))
    inv = tuple(np.argsort(axes))
    y = np.ascontiguousarray(x.data.transpose(axes))
    return _node(y, (x,), "transpose", lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def flatten(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return reshape(x, (x.shape[0], -1))


def global_avg_pool(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeMismatch(f"global_avg_pool expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    inv = x.data.dtype.type(1.0 / (h * w))

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] * inv, (n, c, h, w)).copy(),)

    return _node(x.data.mean(axis=(2, 3)), (x,), "global_avg_pool", backward)


def channel_scale(x: Tensor, gate: Tensor) -> Tensor:
    x, gate = as_tensor(x), as_tensor(gate)
    if x.data.ndim != 4 or gate.shape != x.shape[:2]:
        raise _shape_error("channel_scale", x.shape, gate.shape)
    xv, gv = x.data, gate.data

    def backward(g):
        return g * gv[:, :, None, None], (g * xv).sum(axis=(2, 3))

    return _node(xv * gv[:, :, None, None], (x, gate), "channel_scale", backward)


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def im2col(x: Tensor, kh: int, kw: int, stride: int = 1, pad: int = 0) -> Tensor:
    """Unfold NCHW input into a (C*kh*kw) x (N*Ho*Wo) patch matrix.

    Each column is one output position, ordered (n, oh, ow); rows are
    ordered (c, i, j), matching a row-major reshape of a
    ``C_out x C_in x kh x kw`` kernel, so ``W_mat @ cols`` is the convolution.
    """
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeMismatch(f"im2col expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    ho, wo = conv_output_size(h, kh, stride, pad), conv_output_size(w, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeMismatch(f"im2col: kernel {(kh, kw)} larger than padded input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    xp = xp.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]

    def backward(g):
        g6 = g.reshape(c, kh, kw, n, ho, wo)
        dxp = np.zeros((c, n, h + 2 * pad, w + 2 * pad), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g6[:, i, j]
        dx = dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp
        return (np.ascontiguousarray(dx.transpose(1, 0, 2, 3)),)

    return _node(cols.reshape(c * kh * kw, n * ho * wo), (x,), "im2col", backward)


def cols_to_nchw(y: Tensor, n: int, ho: int, wo: int) -> Tensor:
    """Fold a C_out x (N*Ho*Wo) matrix back into an NCHW map."""
    return transpose(reshape(y, (y.shape[0], n, ho, wo)), (1, 0, 2, 3))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise _shape_error("conv2d", x.shape, w.shape)
    c_out, _, kh, kw = w.shape
    n, _, h, wd = x.shape
    ho, wo = conv_output_size(h, kh, stride, pad), conv_output_size(wd, kw, stride, pad)
    y = cols_to_nchw(matmul(reshape(w, (c_out, -1)), im2col(x, kh, kw, stride, pad)), n, ho, wo)
    return y if b is None else add_bias(y, b, axis=1)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(np.asarray(logits)))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise _shape_error("softmax_cross_entropy", logits.shape, labels.shape)
    n = logits.shape[0]
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    loss = np.asarray(-logp[rows, labels].mean(), dtype=logits.data.dtype)

    def backward(g):
        d = np.exp(logp)
        d[rows, labels] -= 1
        return (d * (g / n),)

    return _node(loss, (logits,), "softmax_cross_entropy", backward)


# -- differentiation -------------------------------------------------------


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for p in t._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Sequence[Tensor] = ()) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss`` that requires it.

    Leaves listed in ``params`` that do not take part in the graph receive a
    zero gradient.
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise NonScalarLoss(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(_topo(loss)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.is_leaf:
            if t.requires_grad:
                t.grad = g if t.grad is None else t.grad + g
            continue
        for p, pg in zip(t._parents, t._backward(g)):
            if not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg
    for p in params:
        if p.requires_grad and p.grad is None:
            p.grad = np.zeros_like(p.data)


# -- optimisation ----------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], state: AdamState) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``."""
    for i, p in enumerate(params):
        if p.grad is None:
            raise MissingGrad(f"parameter {i} with shape {p.shape} has no gradient")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        step = (state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(p.data.dtype)
        p.data -= step
    return state


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max gradient error of ``f`` w.r.t. ``params``, central differences vs backward.

    The error is the infinity-norm of the difference divided by the larger
    infinity-norm of the two gradients. Run this in f64 mode.
    """
    for p in params:
        p.grad = None
    backward(f(), params)
    analytic = [p.grad.copy() for p in params]
    numeric = []
    for p in params:
        flat = p.data.reshape(-1)
        est = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f().item()
            flat[i] = orig - eps
            down = f().item()
            flat[i] = orig
            est[i] = (up - down) / (2 * eps)
        numeric.append(est.reshape(p.shape))
    diff = max(float(np.max(np.abs(a - n), initial=0.0)) for a, n in zip(analytic, numeric))
    scale_ = max(max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(n), initial=0.0))) for a, n in zip(analytic, numeric))
    return 0.0 if scale_ == 0.0 else diff / scale_
