"""Dense float64 tensors with reverse-mode gradient accumulation and SGD.

The compute graph is built eagerly: every op returns a new Tensor recording
its parents and a closure that maps the output gradient to parent gradients.
``backward`` walks the recorded graph once in reverse topological order and
accumulates into each node's grad slot, so repeated calls without zeroing
add up. Desk-scale by design: no views into shared storage, no dtype zoo,
no graph rewriting.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, NumericError, StateError

# Probability clamp applied before any log; avoids -inf when a class
# probability saturates at 0.
EPS_PROB = 1e-12

# Finiteness is an invariant of every forward/backward pass; the checks are
# cheap at desk scale and catch divergence at the op that produced it.
FINITE_CHECKS = True


def _check_finite(arr: np.ndarray, op: str) -> None:
    if FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by op '{op}'")


class Tensor:
    """A dense float64 array with an optional gradient slot.

    Non-leaf tensors remember the op kind and parent tensors that produced
    them; that record is the compute graph consumed by ``backward``.
    """

    __slots__ = ("data", "grad", "op", "parents", "_backward")

    def __init__(self, data, parents=(), op="leaf", backward_fn=None):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, op)
        self.data = arr
        self.grad = None
        self.op = op
        self.parents = tuple(parents)
        self._backward = backward_fn

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __float__(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape})"

    # -- operator sugar -------------------------------------------------
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

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor) or not np.isscalar(other):
            raise ConfigurationError("tensor division only supports scalar divisors")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, seed=1.0):
        backward(self, seed=seed)


def as_tensor(x) -> Tensor:
    """Wrap arrays/scalars as constant leaf tensors; pass Tensors through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x, op="const")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum the broadcast axes of ``grad`` so it matches ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _make(data, parents, op, backward_fn) -> Tensor:
    return Tensor(data, parents=parents, op=op, backward_fn=backward_fn)


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(a.data + b.data, (a, b), "add", back)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(a.data - b.data, (a, b), "sub", back)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), "neg", lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _make(a.data * b.data, (a, b), "mul", back)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ConfigurationError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ConfigurationError(
            f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}"
        )

    def back(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), "matmul", back)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def back(g):
        return (g * mask,)

    return _make(np.maximum(a.data, 0.0), (a,), "relu", back)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def back(g):
        return (g * s * (1.0 - s),)

    return _make(s, (a,), "sigmoid", back)


def log(a, lo=EPS_PROB, hi=None) -> Tensor:
    """Natural log with the input clamped to [lo, hi] before evaluation."""
    a = as_tensor(a)
    clamped = np.clip(a.data, lo, hi)

    def back(g):
        return (g / clamped,)

    return _make(np.log(clamped), (a,), "log", back)


def tensor_sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    in_shape = a.data.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, in_shape),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, in_shape),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum", back)


def tensor_mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.data.shape[i] for i in axes]))
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    in_shape = a.data.shape

    def back(g):
        return (g.reshape(in_shape),)

    return _make(a.data.reshape(shape), (a,), "reshape", back)


def concat(tensors, axis=0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ConfigurationError("concat of an empty sequence")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ConfigurationError(f"concat shape mismatch: {exc}") from exc
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _make(out, tuple(ts), "concat", back)


# ---------------------------------------------------------------------------
# neural-net forward ops
# ---------------------------------------------------------------------------

def dense(x, w, b=None) -> Tensor:
    """Affine layer: x @ w (+ b)."""
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


def conv2d(x, w, b=None, stride=1, padding="same") -> Tensor:
    """2-D convolution, NCHW layout, stride 1 and zero 'same' padding only.

    ``x`` is [B, C, H, W]; ``w`` is [F, C, kh, kw] with odd kernel extents.
    """
    x, w = as_tensor(x), as_tensor(w)
    if stride != 1:
        raise ConfigurationError("conv2d supports stride 1 only")
    if padding != "same":
        raise ConfigurationError("conv2d supports 'same' padding only")
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ConfigurationError("conv2d expects 4-D input and kernel")
    bsz, cin, h, wd = x.data.shape
    f, cker, kh, kw = w.data.shape
    if cker != cin:
        raise ConfigurationError(
            f"conv2d channel mismatch: input has {cin}, kernel expects {cker}"
        )
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigurationError("conv2d 'same' padding requires odd kernel extents")
    bt = as_tensor(b) if b is not None else None
    if bt is not None and bt.data.shape != (f,):
        raise ConfigurationError("conv2d bias must have one entry per filter")

    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out = np.zeros((bsz, f, h, wd))
    for u in range(kh):
        for v in range(kw):
            patch = xp[:, :, u : u + h, v : v + wd]
            out += np.tensordot(patch, w.data[:, :, u, v], axes=([1], [1])).transpose(0, 3, 1, 2)
    if bt is not None:
        out += bt.data[None, :, None, None]

    parents = (x, w) if bt is None else (x, w, bt)

    def back(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for u in range(kh):
            for v in range(kw):
                patch = xp[:, :, u : u + h, v : v + wd]
                gw[:, :, u, v] = np.tensordot(g, patch, axes=([0, 2, 3], [0, 2, 3]))
                gxp[:, :, u : u + h, v : v + wd] += np.tensordot(
                    g, w.data[:, :, u, v], axes=([1], [0])
                ).transpose(0, 3, 1, 2)
        gx = gxp[:, :, ph : ph + h, pw : pw + wd]
        if bt is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make(out, parents, "conv2d", back)


def maxpool2x2(x) -> Tensor:
    """2x2 max pooling with stride 2; ties route the gradient to the first max."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ConfigurationError("maxpool2x2 expects a 4-D input")
    bsz, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ConfigurationError("maxpool2x2 requires even spatial extents")
    h2, w2 = h // 2, w // 2
    windows = x.data.reshape(bsz, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, h2, w2, 4)
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def back(g):
        gwin = np.zeros_like(windows)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(bsz, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, h, w)
        return (gx,)

    return _make(out, (x,), "maxpool2x2", back)


def softmax(x, axis=-1) -> Tensor:
    """Max-subtracted softmax along ``axis``; rows sum to 1 within 1e-9."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        inner = (g * p).sum(axis=axis, keepdims=True)
        return (p * (g - inner),)

    return _make(p, (x,), "softmax", back)


# ---------------------------------------------------------------------------
# losses on probability vectors
# ---------------------------------------------------------------------------

def cross_entropy_onehot(p, target) -> Tensor:
    """-log p[t] for one-hot ``target``, with p clamped to [EPS_PROB, 1].

    Works on [..., C] batches; the class axis is reduced away.
    """
    p = as_tensor(p)
    t = np.asarray(target, dtype=np.float64)
    if p.data.shape[-1] != t.shape[-1]:
        raise ConfigurationError(
            f"cross_entropy_onehot length mismatch: {p.data.shape[-1]} vs {t.shape[-1]}"
        )
    lp = log(p, lo=EPS_PROB, hi=1.0)
    return neg(tensor_sum(mul(lp, t), axis=-1))


def kl_to_onehot(target, p) -> Tensor:
    """KL(one-hot || p); analytically identical to cross_entropy_onehot(p, target)."""
    return cross_entropy_onehot(p, target)


def kl_uniform_to(p) -> Tensor:
    """KL(uniform || p) over the last axis, with p clamped at EPS_PROB."""
    p = as_tensor(p)
    c = p.data.shape[-1] if p.data.ndim else 0
    if c == 0:
        raise ConfigurationError("kl_uniform_to of an empty probability vector")
    mean_neglog = neg(tensor_mean(log(p, lo=EPS_PROB, hi=1.0), axis=-1))
    return add(mean_neglog, -math.log(c))


def softmax_cross_entropy(logits, target) -> Tensor:
    """Fused softmax + cross-entropy on logits via log-sum-exp.

    Gradient w.r.t. the logits is softmax(logits) - target.
    """
    x = as_tensor(logits)
    t = np.asarray(target, dtype=np.float64)
    if x.data.shape[-1] != t.shape[-1]:
        raise ConfigurationError("softmax_cross_entropy length mismatch")
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    z = e.sum(axis=-1, keepdims=True)
    lse = (m + np.log(z))[..., 0]
    ce = lse - (x.data * t).sum(axis=-1)
    p = e / z

    def back(g):
        return ((p - t) * g[..., None],)

    return _make(ce, (x,), "softmax_cross_entropy", back)


# ---------------------------------------------------------------------------
# graph walk
# ---------------------------------------------------------------------------

def topo_order(root: Tensor) -> list[Tensor]:
    """Nodes of the graph below ``root``, every parent before its consumers."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, pi = stack.pop()
        if pi == 0:
            if id(node) in visited:
                continue
            visited.add(id(node))
        if pi < len(node.parents):
            stack.append((node, pi + 1))
            stack.append((node.parents[pi], 0))
        else:
            order.append(node)
    return order


def backward(loss: Tensor, seed=1.0) -> None:
    """Accumulate d(loss)/d(node) into every node's grad slot.

    The pass propagates pass-local gradients, so calling backward twice
    without zeroing doubles every grad exactly.
    """
    if loss.data.size != 1:
        raise StateError("backward requires a scalar loss node")
    order = topo_order(loss)
    local: dict[int, np.ndarray] = {
        id(loss): np.full_like(loss.data, float(seed))
    }
    for node in reversed(order):
        g = local.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        contribs = node._backward(g)
        for parent, contrib in zip(node.parents, contribs):
            _check_finite(contrib, f"{node.op}.backward")
            prev = local.get(id(parent))
            local[id(parent)] = contrib if prev is None else prev + contrib


# ---------------------------------------------------------------------------
# SGD
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be non-negative")


def sgd_step(params, grads, cfg: SgdConfig, buffers=None):
    """One SGD update: p <- p - lr * buf, buf <- momentum * buf + grad + wd * p.

    Returns the (updated) momentum buffers so callers can thread them
    through successive steps.
    """
    params = list(params)
    grads = list(grads)
    if buffers is None:
        buffers = [None] * len(params)
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            raise StateError("sgd_step with a missing gradient; run backward first")
        d = g + cfg.weight_decay * p.data if cfg.weight_decay else g
        buf = d if buffers[i] is None else cfg.momentum * buffers[i] + d
        buffers[i] = buf
        p.data = p.data - cfg.learning_rate * buf
    return buffers


class SgdOptimizer:
    """Holds momentum buffers for a fixed parameter list."""

    def __init__(self, params, cfg: SgdConfig):
        self.params = list(params)
        self.cfg = cfg
        self.buffers = [None] * len(self.params)

    def step(self):
        self.buffers = sgd_step(
            self.params, [p.grad for p in self.params], self.cfg, self.buffers
        )

    def zero_grad(self):
        for p in self.params:
            p.grad = None
