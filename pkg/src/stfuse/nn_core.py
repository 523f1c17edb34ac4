"""Minimal differentiable numeric kernel.

A reverse-mode autodiff tape over numpy arrays, plus the handful of named
operations the rest of the engine is built from: linear maps, row softmax,
layer normalization, scaled dot-product attention, a 2-layer GELU MLP, and
a finite-difference gradient checker.

Tensors are value-like wrappers around ndarrays. Graphs are single-threaded;
distinct graphs may run on parallel workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteInput, ShapeMismatch

GELU_C0 = 0.7978845608  # sqrt(2/pi), tanh-approximation constant
GELU_C1 = 0.044715


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] > 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """ND array with an optional gradient buffer and a backward tape."""

    __slots__ = ("data", "grad", "requires_grad", "_pgrads")

    def __init__(self, data, requires_grad=False, _pgrads=()):
        if isinstance(data, np.ndarray):
            self.data = data
        elif isinstance(data, np.generic):
            self.data = np.asarray(data)
        else:
            self.data = np.asarray(data, dtype=np.float32)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p, _ in _pgrads)
        self._pgrads = _pgrads

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    # -- graph construction helpers --

    def backward(self):
        """Accumulate gradients of this (scalar or any-shape, seeded with ones)
        tensor into every reachable tensor with requires_grad."""
        topo, seen = [], set()

        def visit(node):
            if id(node) in seen or not node.requires_grad:
                return
            seen.add(id(node))
            for p, _ in node._pgrads:
                visit(p)
            topo.append(node)

        visit(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            g = node.grad
            for parent, fn in node._pgrads:
                if not parent.requires_grad:
                    continue
                contrib = fn(g)
                if parent.grad is None:
                    parent.grad = contrib.copy() if contrib is g else contrib
                else:
                    parent.grad = parent.grad + contrib

    def zero_grad(self):
        self.grad = None

    # -- arithmetic --

    def __add__(self, other):
        if isinstance(other, (int, float)):
            return Tensor(self.data + other, _pgrads=((self, lambda g: g),))
        return Tensor(self.data + other.data, _pgrads=(
            (self, lambda g: _unbroadcast(g, self.data.shape)),
            (other, lambda g: _unbroadcast(g, other.data.shape)),
        ))

    __radd__ = __add__

    def __neg__(self):
        return Tensor(-self.data, _pgrads=((self, lambda g: -g),))

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return Tensor(self.data * other, _pgrads=((self, lambda g: g * other),))
        return Tensor(self.data * other.data, _pgrads=(
            (self, lambda g: _unbroadcast(g * other.data, self.data.shape)),
            (other, lambda g: _unbroadcast(g * self.data, other.data.shape)),
        ))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return self * (1.0 / other)
        return Tensor(self.data / other.data, _pgrads=(
            (self, lambda g: _unbroadcast(g / other.data, self.data.shape)),
            (other, lambda g: _unbroadcast(-g * self.data / (other.data * other.data),
                                           other.data.shape)),
        ))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        out = self.data[idx]

        def back(g):
            full = np.zeros_like(self.data)
            np.add.at(full, idx, g)
            return full

        return Tensor(out, _pgrads=((self, back),))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        return Tensor(self.data.reshape(shape),
                      _pgrads=((self, lambda g: g.reshape(old)),))

    def sum(self, axis=None, keepdims=False):
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def back(g):
            if axis is None:
                return np.broadcast_to(g, self.data.shape).copy()
            if not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, self.data.shape).copy()

        return Tensor(out, _pgrads=((self, back),))

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


def _wrap(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x))


def constant(data, dtype=np.float32):
    return Tensor(np.asarray(data, dtype=dtype))


def parameter(data):
    return Tensor(np.asarray(data), requires_grad=True)


# -- primitive ops --

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else -1]:
        raise ShapeMismatch(f"matmul: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def back_a(g):
        return _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)

    def back_b(g):
        return _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)

    return Tensor(out, _pgrads=((a, back_a), (b, back_b)))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor(out, _pgrads=((x, lambda g: g * out),))


def log(x: Tensor) -> Tensor:
    return Tensor(np.log(x.data), _pgrads=((x, lambda g: g / x.data),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor(out, _pgrads=((x, lambda g: g * (1.0 - out * out)),))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return Tensor(out, _pgrads=((x, lambda g: g * 0.5 / out),))


def sigmoid(x: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-x.data))
    return Tensor(out, _pgrads=((x, lambda g: g * out * (1.0 - out)),))


def maximum(a, b) -> Tensor:
    if isinstance(a, (int, float)):
        a = Tensor(np.full_like(_wrap(b).data, a))
    if isinstance(b, (int, float)):
        b = Tensor(np.full_like(a.data, b))
    a, b = _wrap(a), _wrap(b)
    mask = (a.data >= b.data).astype(a.data.dtype if a.data.dtype.kind == "f" else np.float64)
    return Tensor(np.maximum(a.data, b.data), _pgrads=(
        (a, lambda g: _unbroadcast(g * mask, a.data.shape)),
        (b, lambda g: _unbroadcast(g * (1.0 - mask), b.data.shape)),
    ))


def minimum(a, b) -> Tensor:
    if isinstance(a, (int, float)):
        a = Tensor(np.full_like(_wrap(b).data, a))
    if isinstance(b, (int, float)):
        b = Tensor(np.full_like(a.data, b))
    a, b = _wrap(a), _wrap(b)
    mask = (a.data <= b.data).astype(a.data.dtype if a.data.dtype.kind == "f" else np.float64)
    return Tensor(np.minimum(a.data, b.data), _pgrads=(
        (a, lambda g: _unbroadcast(g * mask, a.data.shape)),
        (b, lambda g: _unbroadcast(g * (1.0 - mask), b.data.shape)),
    ))


def absolute(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return Tensor(np.abs(x.data), _pgrads=((x, lambda g: g * sign),))


def concat(tensors, axis=0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_back(i):
        lo, hi = offsets[i], offsets[i + 1]

        def back(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            return g[tuple(sl)]

        return back

    return Tensor(out, _pgrads=tuple((t, make_back(i)) for i, t in enumerate(tensors)))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along one axis (max subtraction)."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return out * (g - dot)

    return Tensor(out, _pgrads=((x, back),))


# -- contract-level ops --

def linear(x: Tensor, w: Tensor) -> Tensor:
    """y[i, j] = sum_k x[i, k] * w[k, j]; supports stacked batch dims on x."""
    return matmul(x, w)


def softmax_rows(x: Tensor) -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteInput("softmax_rows: input contains non-finite entries")
    return softmax(x, axis=-1)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the last axis with population variance."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch(f"layer_norm: features {d}, gamma {gamma.shape}, beta {beta.shape}")
    m = x.mean(axis=-1, keepdims=True)
    centered = x - m
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / sqrt(var + eps) * gamma + beta


def sdp_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d)) v with matching head dimension d."""
    d = q.shape[-1]
    if k.shape[-1] != d or v.shape[-2] != k.shape[-2]:
        raise ShapeMismatch(f"sdp_attention: q {q.shape}, k {k.shape}, v {v.shape}")
    scores = matmul(q, transpose_last(k)) * (1.0 / math.sqrt(d))
    return matmul(softmax(scores, axis=-1), v)


def transpose_last(x: Tensor) -> Tensor:
    out = np.swapaxes(x.data, -1, -2)
    return Tensor(out, _pgrads=((x, lambda g: np.swapaxes(g, -1, -2)),))


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU with fixed constants."""
    inner = (x * GELU_C0) + (x * x * x) * (GELU_C0 * GELU_C1)
    return x * 0.5 * (tanh(inner) + 1.0)


def mlp2(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """linear -> GELU -> linear; biases broadcast over rows."""
    if x.shape[-1] != w1.shape[0] or w1.shape[1] != w2.shape[0]:
        raise ShapeMismatch(f"mlp2: x {x.shape}, w1 {w1.shape}, w2 {w2.shape}")
    return matmul(gelu(matmul(x, w1) + b1), w2) + b2


# -- seeded initialization --

class XorShift64Star:
    """Deterministic 64-bit xorshift* generator for parameter init and
    data generation; identical streams across platforms."""

    MASK = (1 << 64) - 1

    def __init__(self, seed: int):
        self._s = (seed & self.MASK) or 0x9E3779B97F4A7C15

    def next_u64(self) -> int:
        s = self._s
        s ^= (s >> 12)
        s = (s ^ (s << 25)) & self.MASK
        s ^= (s >> 27)
        self._s = s
        return (s * 0x2545F4914F6CDD1D) & self.MASK

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        return lo + (hi - lo) * (self.next_u64() / 2.0 ** 64)

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi)."""
        return lo + self.next_u64() % (hi - lo)

    def matrix(self, d_in: int, d_out: int, dtype=np.float32) -> np.ndarray:
        bound = 1.0 / math.sqrt(d_in)
        flat = np.array([self.uniform(-bound, bound) for _ in range(d_in * d_out)],
                        dtype=dtype)
        return flat.reshape(d_in, d_out)

    def vector(self, n: int, lo: float, hi: float, dtype=np.float32) -> np.ndarray:
        return np.array([self.uniform(lo, hi) for _ in range(n)], dtype=dtype)

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(0, i + 1)
            items[i], items[j] = items[j], items[i]


# -- gradient checking --

@dataclass
class GradCheckReport:
    name: str
    max_rel_err: float
    tol: float
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = self.max_rel_err < self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<24} max_rel_err={self.max_rel_err:.3e}  tol={self.tol:.1e}"


def grad_check(f, inputs, h=None, tol=None, name="op") -> GradCheckReport:
    """Compare analytic gradients of the scalar f(*inputs) against central
    finite differences; h defaults to 1e-3 (32-bit) / 1e-6 (64-bit)."""
    bits64 = all(t.data.dtype == np.float64 for t in inputs)
    if h is None:
        h = 1e-6 if bits64 else 1e-3
    if tol is None:
        tol = 1e-5 if bits64 else 1e-3

    for t in inputs:
        t.zero_grad()
        t.requires_grad = True
    out = f(*inputs)
    if out.data.size != 1:
        raise ShapeMismatch("grad_check: f must be scalar-valued")
    out.backward()

    # Numeric differences run at the widest hardware float so the oracle's
    # own roundoff stays far below tol even for near-zero gradient elements;
    # the analytic gradient keeps the input dtype.
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]
    saved = [t.data for t in inputs]
    for t in inputs:
        t.data = t.data.astype(np.longdouble)

    max_err = 0.0
    try:
        for t, ga_arr in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = np.longdouble(f(*inputs).data)
                flat[i] = orig - h
                fm = np.longdouble(f(*inputs).data)
                flat[i] = orig
                numeric = float((fp - fm) / np.longdouble(2.0 * h))
                ga = float(ga_arr.reshape(-1)[i])
                err = abs(ga - numeric) / (abs(ga) + abs(numeric) + 1e-8)
                max_err = max(max_err, err)
    finally:
        for t, d in zip(inputs, saved):
            t.data = d
    return GradCheckReport(name=name, max_rel_err=max_err, tol=tol)
