"""Dense float64 tensors with reverse-mode autodiff on an explicit tape.

Every value in the package flows through `Tensor`: a row-major float64
ndarray plus an optional gradient buffer. Operations record a backward
rule on a global `Tape` whenever an input participates in gradient
tracking; `backward()` replays the tape in reverse.

All differentiable ops here are verified against `finite_diff_grad`,
the central-difference oracle used by the gradcheck suite.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, ShapeError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """N-dimensional float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, copy=True)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; heavy lifting lives in the free functions below
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, _as_tensor(1.0 / other))
        raise TypeError("tensor division only supports scalars")

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape machinery


class TapeOp:
    __slots__ = ("name", "inputs", "output", "backward_fn")

    def __init__(self, name, inputs, output, backward_fn):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of differentiable operations.

    Append order is creation order, so the list is always topologically
    sorted; backward walks it once in reverse.
    """

    def __init__(self):
        self.ops: list[TapeOp] = []

    def __len__(self):
        return len(self.ops)

    def reset(self):
        self.ops.clear()


_TAPE = Tape()
_GRAD_ENABLED = True
_CORRUPTED: set[str] = set()


def get_tape() -> Tape:
    return _TAPE


def reset_tape():
    _TAPE.reset()


@contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextmanager
def corrupt_backward(name: str):
    """Test hook: scale the named op's upstream gradient by 1.01.

    Used by the gradcheck mutation test to prove the suite catches a
    broken backward rule.
    """
    _CORRUPTED.add(name)
    try:
        yield
    finally:
        _CORRUPTED.discard(name)


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _record(name: str, out: Tensor, inputs: tuple, backward_fn: Callable) -> Tensor:
    if not _GRAD_ENABLED:
        return out
    if not any(t.requires_grad for t in inputs):
        return out
    out.requires_grad = True
    if name in _CORRUPTED:
        inner = backward_fn
        backward_fn = lambda g: inner(g * 1.01)  # noqa: E731
    _TAPE.ops.append(TapeOp(name, inputs, out, backward_fn))
    return out


def backward(loss: Tensor):
    """Populate grads of every tracked leaf reachable from `loss`.

    Repeated calls without zeroing accumulate.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any tracked tensor")
    if len(_TAPE) == 0:
        raise ContractError("tape is empty")
    # intermediate grads are scratch space per call; only leaves (tensors
    # that are never an op output) accumulate across repeated calls
    for op in _TAPE.ops:
        op.output.grad = None
    loss.grad = np.ones_like(loss.data)
    for op in reversed(_TAPE.ops):
        g = op.output.grad
        if g is None:
            continue
        op.backward_fn(g)


def zero_grads(tensors: Sequence[Tensor]):
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# element-wise and structural ops


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _record("add", out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _record("mul", out, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return _record("neg", out, (a,), lambda g: _accum(a, -g))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != a.data.size and -1 not in shape:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    out = Tensor(a.data.reshape(shape))
    return _record("reshape", out, (a,), lambda g: _accum(a, g.reshape(a.data.shape)))


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = np.argsort(axes)
    out = Tensor(a.data.transpose(axes))
    return _record("permute", out, (a,), lambda g: _accum(a, g.transpose(inv)))


def transpose2d(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose2d expects a matrix, got {a.shape}")
    return permute(a, (1, 0))


def getitem(a: Tensor, key) -> Tensor:
    out = Tensor(a.data[key])

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, key, g)
            _accum(a, full)

    return _record("getitem", out, (a,), bwd)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for p, piece in zip(parts, np.split(g, splits, axis=axis)):
            _accum(p, piece)

    return _record("concat", out, tuple(parts), bwd)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())
    return _record("sum", out, (a,), lambda g: _accum(a, np.broadcast_to(g, a.data.shape).copy()))


def mean_axes(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = Tensor(a.data.mean(axis=axes))
    count = int(np.prod([a.data.shape[ax] for ax in axes]))

    def bwd(g):
        gexp = np.expand_dims(g, axes)
        _accum(a, np.broadcast_to(gexp / count, a.data.shape).copy())

    return _record("mean", out, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = Tensor(a.data * mask)
    return _record("relu", out, (a,), lambda g: _accum(a, g * mask))


def gelu(a: Tensor) -> Tensor:
    """Exact GELU: 0.5 x (1 + erf(x / sqrt 2))."""
    x = a.data
    e = erf(x * _INV_SQRT2)
    out = Tensor(0.5 * x * (1.0 + e))

    def bwd(g):
        d = 0.5 * (1.0 + e) + x * np.exp(-0.5 * x * x) * _INV_SQRT2PI
        _accum(a, g * d)

    return _record("gelu", out, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    out = Tensor(s)
    return _record("sigmoid", out, (a,), lambda g: _accum(a, g * s * (1.0 - s)))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def maximum_left(a: Tensor, b: Tensor) -> Tensor:
    """Element-wise max; on exact ties the gradient routes to `a`."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"maximum: shapes {a.shape} and {b.shape} differ")
    take_a = a.data >= b.data
    out = Tensor(np.where(take_a, a.data, b.data))

    def bwd(g):
        _accum(a, g * take_a)
        _accum(b, g * ~take_a)

    return _record("maximum", out, (a, b), bwd)


# ---------------------------------------------------------------------------
# linear algebra / conv


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _record("matmul", out, (a, b), bwd)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2D convolution, channels-first single image: [Cin,H,W] * [Cout,Cin,k,k]."""
    xv, wv = x.data, w.data
    if xv.ndim != 3 or wv.ndim != 4:
        raise ShapeError(f"conv2d: expected [C,H,W] and [O,C,k,k], got {x.shape} and {w.shape}")
    cin, h, wd = xv.shape
    cout, cin2, kh, kw = wv.shape
    if cin != cin2:
        raise ShapeError(f"conv2d: input channels {cin} != kernel channels {cin2}")
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {kh}x{kw}")
    k = kh
    if h + 2 * pad < k or wd + 2 * pad < k:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {h + 2 * pad}x{wd + 2 * pad}")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    xp = np.pad(xv, ((0, 0), (pad, pad), (pad, pad))) if pad else xv
    out = np.zeros((cout, ho, wo))
    for i in range(k):
        for j in range(k):
            sl = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride]
            out += np.einsum("oc,chw->ohw", wv[:, :, i, j], sl, optimize=True)
    res = Tensor(out)

    def bwd(g):
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += np.einsum(
                        "oc,ohw->chw", wv[:, :, i, j], g, optimize=True
                    )
            _accum(x, dxp[:, pad : pad + h, pad : pad + wd] if pad else dxp)
        if w.requires_grad:
            dw = np.zeros_like(wv)
            for i in range(k):
                for j in range(k):
                    sl = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride]
                    dw[:, :, i, j] = np.einsum("ohw,chw->oc", g, sl, optimize=True)
            _accum(w, dw)

    return _record("conv2d", res, (x, w), bwd)


def depthwise_conv2d(x: Tensor, w: Tensor, pad: Optional[int] = None) -> Tensor:
    """Per-channel convolution: [C,H,W] * [C,k,k] -> [C,H,W] (size-preserving pad)."""
    xv, wv = x.data, w.data
    if xv.ndim != 3 or wv.ndim != 3:
        raise ShapeError(f"depthwise_conv2d: expected [C,H,W] and [C,k,k], got {x.shape} and {w.shape}")
    if xv.shape[0] != wv.shape[0]:
        raise ShapeError(f"depthwise_conv2d: channel mismatch {xv.shape[0]} vs {wv.shape[0]}")
    c, h, wd = xv.shape
    k = wv.shape[1]
    if wv.shape[2] != k or k % 2 == 0:
        raise ShapeError(f"depthwise_conv2d: kernel must be square and odd, got {wv.shape[1:]}")
    if pad is None:
        pad = (k - 1) // 2
    xp = np.pad(xv, ((0, 0), (pad, pad), (pad, pad))) if pad else xv
    ho = h + 2 * pad - k + 1
    wo = wd + 2 * pad - k + 1
    out = np.zeros((c, ho, wo))
    for i in range(k):
        for j in range(k):
            out += wv[:, i, j][:, None, None] * xp[:, i : i + ho, j : j + wo]
    res = Tensor(out)

    def bwd(g):
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[:, i : i + ho, j : j + wo] += wv[:, i, j][:, None, None] * g
            _accum(x, dxp[:, pad : pad + h, pad : pad + wd] if pad else dxp)
        if w.requires_grad:
            dw = np.zeros_like(wv)
            for i in range(k):
                for j in range(k):
                    dw[:, i, j] = (g * xp[:, i : i + ho, j : j + wo]).sum(axis=(1, 2))
            _accum(w, dw)

    return _record("depthwise_conv2d", res, (x, w), bwd)


# ---------------------------------------------------------------------------
# normalization / softmax / losses


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    if not np.all(np.isfinite(s)):
        raise ContractError("softmax produced non-finite values (non-finite input?)")
    out = Tensor(s)

    def bwd(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        _accum(x, s * (g - inner))

    return _record("softmax", out, (x,), bwd)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ContractError("layernorm eps must be positive")
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(f"layernorm: gamma/beta must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data)

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=lead))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=lead))
        if x.requires_grad:
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accum(x, (dxhat - m1 - xhat * m2) * inv)

    return _record("layernorm", out, (x, gamma, beta), bwd)


def cross_entropy_mean(logits: Tensor, labels: Sequence[Optional[int]]) -> Tensor:
    """Mean softmax cross-entropy over rows with a non-None label.

    Returns a detached zero when no row is labeled, so an absent term
    contributes exactly nothing to the loss or the gradients.
    """
    z = logits.data
    if z.ndim != 2 or len(labels) != z.shape[0]:
        raise ShapeError(f"cross_entropy_mean: logits {logits.shape} vs {len(labels)} labels")
    rows = [i for i, y in enumerate(labels) if y is not None]
    if not rows:
        return Tensor(0.0)
    ys = np.array([labels[i] for i in rows], dtype=np.int64)
    if ys.min() < 0 or ys.max() >= z.shape[1]:
        raise ContractError("class label out of range")
    zr = z[rows]
    zmax = zr.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(zr - zmax).sum(axis=1))
    losses = lse - zr[np.arange(len(rows)), ys]
    out = Tensor(losses.mean())

    def bwd(g):
        if logits.requires_grad:
            p = np.exp(zr - zmax)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(len(rows)), ys] -= 1.0
            full = np.zeros_like(z)
            full[rows] = p * (float(g) / len(rows))
            _accum(logits, full)

    return _record("cross_entropy", out, (logits,), bwd)


def bce_with_logits_mean(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean binary cross-entropy over entries where mask is nonzero.

    Stable formulation: max(z,0) - z*t + log(1 + exp(-|z|)).
    Returns a detached zero when the mask is empty.
    """
    z = logits.data
    t = np.asarray(targets, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    if z.shape != t.shape or z.shape != m.shape:
        raise ShapeError(f"bce: shapes differ: {z.shape}, {t.shape}, {m.shape}")
    n = m.sum()
    if n == 0:
        return Tensor(0.0)
    per = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = Tensor((per * m).sum() / n)

    def bwd(g):
        if logits.requires_grad:
            _accum(logits, (_sigmoid(z) - t) * m * (float(g) / n))

    return _record("bce", out, (logits,), bwd)


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_diff_grad(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar-valued function at `x`.

    Kept deliberately independent of the tape: evaluation happens under
    `no_grad` and perturbs `x.data` in place element by element.
    """
    base = x.data
    g = np.zeros_like(base)
    flat = base.reshape(-1)
    gf = g.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            fp = _as_tensor(f(x)).item()
            flat[i] = old - eps
            fm = _as_tensor(f(x)).item()
            flat[i] = old
            gf[i] = (fp - fm) / (2.0 * eps)
    return Tensor(g)


def rel_grad_error(analytic: np.ndarray, fd: np.ndarray) -> float:
    """max|a - fd| / max(1, max|fd|), the acceptance-gate metric."""
    diff = np.max(np.abs(np.asarray(analytic) - np.asarray(fd)), initial=0.0)
    scale = max(1.0, np.max(np.abs(np.asarray(fd)), initial=0.0))
    return float(diff / scale)


# ---------------------------------------------------------------------------
# binary tensor container

MAGIC = b"AUCVT1\x00"


def write_tensor(fh, arr: np.ndarray) -> int:
    """Append one tensor record; returns the record's start offset."""
    offset = fh.tell()
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    fh.write(MAGIC)
    fh.write(struct.pack("<B", arr.ndim))
    for n in arr.shape:
        fh.write(struct.pack("<Q", n))
    fh.write(arr.astype("<f8").tobytes())
    return offset


def read_tensor(fh) -> np.ndarray:
    magic = fh.read(len(MAGIC))
    if magic != MAGIC:
        raise ContractError(f"bad tensor container magic: {magic!r}")
    (rank,) = struct.unpack("<B", fh.read(1))
    shape = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(rank))
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    payload = fh.read(8 * count)
    if len(payload) != 8 * count:
        raise ContractError("truncated tensor container")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)


def save_tensor(path, arr: np.ndarray):
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)
