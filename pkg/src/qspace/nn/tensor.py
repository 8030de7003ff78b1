"""Reverse-mode automatic differentiation over numpy arrays.

Every operation returns a :class:`Tensor` that remembers its inputs and a
closure computing the input gradients. ``Tensor.backward`` walks the recorded
graph in reverse topological order. The operation set is the one needed by
all-convolutional classifiers: elementwise arithmetic, 1x1 and 3x3
convolutions, ReLU, 2x2 max pooling, global average pooling, dropout, softmax
and a fused softmax cross-entropy.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import ShapeMismatch, UsageError

_DEBUG = False
_PATTERNS: Optional[list] = None


def set_debug(flag: bool):
    """Check every forward result for NaN/inf when enabled."""
    global _DEBUG
    _DEBUG = bool(flag)


@contextlib.contextmanager
def record_patterns():
    """Collect the activation patterns (ReLU signs, pooling argmaxes) of a forward pass.

    Used by finite-difference checks to detect stencils that straddle a kink.
    """
    global _PATTERNS
    prev, _PATTERNS = _PATTERNS, []
    try:
        yield _PATTERNS
    finally:
        _PATTERNS = prev


def _log_pattern(arr):
    if _PATTERNS is not None:
        _PATTERNS.append(arr)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Optional[Callable] = None, op: str = "leaf"):
        self.data = np.asarray(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None
        self.op = op
        if _DEBUG and op != "leaf" and not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite output from {op}")

    # -- basic properties -------------------------------------------------
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
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring gradients.

        The recorded graph is released afterwards; a second call raises.
        """
        if self._backward is None:
            if self.requires_grad and self.op == "leaf":
                raise UsageError("backward called on a leaf tensor; run a forward pass first")
            raise UsageError("no recorded forward graph (already released or never built)")
        if grad is None:
            if self.data.size != 1:
                raise UsageError("backward without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in order:
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
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
            node._backward = None
            node._parents = ()

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order[::-1]


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def parameter(data) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True)


# ---------------------------------------------------------------------------
# elementwise and shape operations


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape
    return Tensor(a.data + b.data, _parents=(a, b), op="add",
                  _backward=lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return Tensor(-a.data, _parents=(a,), op="neg", _backward=lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data
    return Tensor(ad * bd, _parents=(a, b), op="mul",
                  _backward=lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    return Tensor(ad ** exponent, _parents=(a,), op="pow",
                  _backward=lambda g: (g * exponent * ad ** (exponent - 1),))


def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, dtype=np.float64).astype(a.dtype)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(a.dtype),)
    return Tensor(out, _parents=(a,), op="sum", _backward=backward)


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    return Tensor(np.asarray(a.data.mean(dtype=np.float64), dtype=a.dtype), _parents=(a,), op="mean",
                  _backward=lambda g: (np.full(a.shape, g / n, dtype=a.dtype),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return Tensor(a.data.reshape(shape), _parents=(a,), op="reshape",
                  _backward=lambda g: (g.reshape(old),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul of {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return Tensor(ad @ bd, _parents=(a, b), op="matmul",
                  _backward=lambda g: (g @ bd.T, ad.T @ g))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    _log_pattern(pos)
    return Tensor(x.data * pos, _parents=(x,), op="relu",
                  _backward=lambda g: (g * pos,))


# ---------------------------------------------------------------------------
# convolution and pooling


def _conv3x3(x: np.ndarray, weight: np.ndarray, bias, with_input_grad: bool):
    """3x3 same convolution on a flattened, zero-padded (C, N*(H+2)*(W+2)) layout.

    A kernel tap is a constant offset in that layout, so every tap is one GEMM on
    a strided view and no im2col buffer is built.
    """
    n, c, h, w = x.shape
    o = weight.shape[0]
    hp, wp = h + 2, w + 2
    xp = np.zeros((c, n, hp, wp), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x.transpose(1, 0, 2, 3)
    xf = xp.reshape(c, n * hp * wp)
    base = wp + 1
    m = n * hp * wp - 2 * base
    offsets = [di * wp + dj for di in (-1, 0, 1) for dj in (-1, 0, 1)]
    taps = [np.ascontiguousarray(weight[:, :, i, j]) for i in range(3) for j in range(3)]
    of = np.zeros((o, n * hp * wp), dtype=x.dtype)
    acc = of[:, base:base + m]
    for tap, off in zip(taps, offsets):
        acc += tap @ xf[:, base + off:base + off + m]
    out = of.reshape(o, n, hp, wp)[:, :, 1:-1, 1:-1].transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias[None, :, None, None]
    else:
        out = np.ascontiguousarray(out)

    def backward(g):
        gf = np.zeros((o, n, hp, wp), dtype=g.dtype)
        gf[:, :, 1:-1, 1:-1] = g.transpose(1, 0, 2, 3)
        gf = gf.reshape(o, n * hp * wp)
        gc = gf[:, base:base + m]
        gw = np.empty_like(weight)
        for k, off in enumerate(offsets):
            gw[:, :, k // 3, k % 3] = gc @ xf[:, base + off:base + off + m].T
        gx = None
        if with_input_grad:
            gxf = np.zeros((c, n * hp * wp), dtype=g.dtype)
            for tap, off in zip(taps, offsets):
                gxf[:, base + off:base + off + m] += tap.T @ gc
            gx = gxf.reshape(c, n, hp, wp)[:, :, 1:-1, 1:-1].transpose(1, 0, 2, 3)
            gx = np.ascontiguousarray(gx)
        return gx, gw
    return out, backward


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor]) -> Tensor:
    """Same-padded cross-correlation with a 1x1 or 3x3 kernel.

    ``x`` is ``(N, C, H, W)``, ``weight`` is ``(O, C, k, k)``.
    """
    if x.ndim != 4:
        raise ShapeMismatch(f"conv2d input must be (N, C, H, W), got {x.shape}")
    o, c, k, k2 = weight.shape
    if k != k2 or k not in (1, 3):
        raise ShapeMismatch(f"unsupported kernel {weight.shape}")
    n, cin, h, w = x.shape
    if cin != c:
        raise ShapeMismatch(f"conv2d expects {c} input channels, got {cin}")
    bdata = bias.data if bias is not None else None

    if k == 3:
        out, back3 = _conv3x3(x.data, weight.data, bdata, x.requires_grad)

        def backward(g):
            gx, gw = back3(g)
            gb = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(g.dtype) if bias is not None else None
            return gx, gw, gb
    else:
        cols = x.data.reshape(n, c, h * w)
        wmat = weight.data.reshape(o, c)
        out = np.matmul(wmat, cols)
        if bdata is not None:
            out += bdata[None, :, None]
        out = out.reshape(n, o, h, w)

        def backward(g):
            g2 = g.reshape(n, o, h * w)
            gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
            gx = np.matmul(wmat.T, g2).reshape(n, c, h, w) if x.requires_grad else None
            gb = g2.sum(axis=(0, 2), dtype=np.float64).astype(g.dtype) if bias is not None else None
            return gx, gw, gb

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor(out, _parents=parents, op=f"conv{k}x{k}", _backward=backward)


def maxpool2x2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeMismatch(f"maxpool2x2 needs even spatial dims, got {h}x{w}; pad first")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    _log_pattern(arg)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(n, c, h, w),)
    return Tensor(out, _parents=(x,), op="maxpool2x2", _backward=backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean of each feature map; output ``(N, C, 1, 1)`` for any spatial size."""
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), dtype=np.float64, keepdims=True).astype(x.dtype)
    scale = 1.0 / (h * w)
    return Tensor(out, _parents=(x,), op="global_avg_pool",
                  _backward=lambda g: (np.broadcast_to(g * scale, x.shape).astype(x.dtype),))


def dropout(x: Tensor, p: float, train: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; the identity outside training or for ``p == 0``."""
    if not train or p == 0.0:
        return x
    if rng is None:
        raise UsageError("dropout in training mode needs an rng")
    keep = rng.random(x.shape, dtype=np.float32) >= p
    scale = np.asarray(1.0 / (1.0 - p), dtype=x.dtype)
    factor = keep * scale
    return Tensor(x.data * factor, _parents=(x,), op="dropout", _backward=lambda g: (g * factor,))


# ---------------------------------------------------------------------------
# classification outputs


def _flatten_logits(x: np.ndarray) -> np.ndarray:
    return x.reshape(x.shape[0], -1)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the channel axis; accepts ``(N, K)`` or ``(N, K, 1, 1)``."""
    z = _flatten_logits(x.data).astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    shape = x.shape

    def backward(g):
        g2 = _flatten_logits(g).astype(np.float64)
        gx = y * (g2 - np.sum(g2 * y, axis=1, keepdims=True))
        return (gx.reshape(shape).astype(x.dtype),)
    return Tensor(y.reshape(shape).astype(x.dtype), _parents=(x,), op="softmax", _backward=backward)


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean categorical cross-entropy of integer ``targets`` under ``softmax(logits)``."""
    z = _flatten_logits(logits.data).astype(np.float64)
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != (z.shape[0],):
        raise ShapeMismatch(f"{t.shape} targets for {z.shape[0]} samples")
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp = z - logsum[:, None]
    n = z.shape[0]
    loss = -logp[np.arange(n), t].mean()
    shape = logits.shape

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), t] -= 1.0
        return ((p * (float(g) / n)).reshape(shape).astype(logits.dtype),)
    return Tensor(np.asarray(loss), _parents=(logits,), op="softmax_xent", _backward=backward)
