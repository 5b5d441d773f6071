"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable operation records a node carrying a monotonically
increasing sequence number.  ``backward`` gathers the nodes reachable from
the loss and replays them in exact reverse of the recording order, so
gradient accumulation is deterministic.

Array arithmetic is delegated to numpy.  GELU uses the tanh approximation

    gelu(x) = 0.5 * x * (1 + tanh(GELU_C * (x + GELU_K * x**3)))

with ``GELU_C = sqrt(2 / pi)`` and ``GELU_K = 0.044715``.
"""
from __future__ import annotations

import contextlib
import itertools
import math
import struct
from typing import Callable, Sequence

import numpy as np

GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_CHECK_FINITE = True
_SEQ = itertools.count()


class DimensionError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


class StaleGraphError(RuntimeError):
    pass


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class _Node:
    __slots__ = ("seq", "parents", "backward", "name")

    def __init__(self, parents, backward, name):
        self.seq = next(_SEQ)
        self.parents = parents
        self.backward = backward
        self.name = name


_CONSUMED = object()


class Tensor:
    """An n-dimensional array that optionally records its history."""

    __slots__ = ("data", "grad", "requires_grad", "_node", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        dtype = dtype or _DEFAULT_DTYPE
        self.data = np.array(data, dtype=dtype, copy=True) if not isinstance(data, np.ndarray) or data.dtype != dtype else data
        self.grad = None
        self.requires_grad = requires_grad
        self._node = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, o): return matmul(self, o)
    def __pow__(self, p): return power(self, p)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
    def transpose(self, *axes): return transpose(self, axes if axes else None)

    @property
    def T(self): return transpose(self, None)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = _DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _check_finite(arr: np.ndarray, name: str) -> None:
    if _CHECK_FINITE and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {name}")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, name: str) -> Tensor:
    _check_finite(data, name)
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _Node(tuple(parents), backward_fn, name)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    nd = g.ndim - len(shape)
    if nd > 0:
        g = g.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype), dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype), dtype=b.dtype)
    elif not isinstance(a, Tensor):
        a, b = as_tensor(a), as_tensor(b)
    return a, b


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)
    return _make(out, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python scalar (no gradient w.r.t. the scalar)."""
    c = a.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return _make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def gelu(a: Tensor) -> Tensor:
    x = a.data
    c = x.dtype.type(GELU_C)
    k = x.dtype.type(GELU_K)
    x2 = x * x
    t = np.tanh(c * x * (1.0 + k * x2))
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        du = c * (1.0 + 3.0 * k * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)
    return _make(out, (a,), bw, "gelu")


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)
    return _make(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return scale(tsum(a, axis, keepdims), 1.0 / count)


# ---------------------------------------------------------------- shape ops

def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return _make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),), "swapaxes")


def getitem(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.dtype
    parts = idx if isinstance(idx, tuple) else (idx,)
    fancy = any(isinstance(p, (list, np.ndarray)) for p in parts)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] += g
        return (full,)
    return _make(np.array(a.data[idx]), (a,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)
    return _make(np.stack([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)), "stack")


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Per-batch gather along axis 1: ``out[b, j] = a[b, index[b, j]]``."""
    index = np.asarray(index)
    if index.ndim != 2 or index.shape[0] != a.shape[0]:
        raise DimensionError(f"gather index shape {index.shape} incompatible with {a.shape}")
    shape, dtype = a.shape, a.dtype
    rows = np.arange(shape[0])[:, None]
    out = a.data[rows, index]

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, (rows, index), g)
        return (full,)
    return _make(out, (a,), bw, "gather_rows")


def broadcast_to(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g: (_unbroadcast(g, old),), "broadcast_to")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Matrix product (batched over leading axes, numpy broadcasting rules)."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # fold leading axes into one GEMM
        lead = ad.shape[:-1]
        a2 = ad.reshape(-1, ad.shape[-1])

        def bw2(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2
        return _make((a2 @ bd).reshape(lead + (bd.shape[-1],)), (a, b), bw2, "matmul")

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)
    return _make(ad @ bd, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``w`` stored as (in, out)."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------- fused layers

def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    if eps <= 0:
        raise ValueError("eps must be positive")
    xd = x.data
    d = xd.shape[-1]
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * rstd
    gd, bd = gain.data, bias.data
    out = xhat * gd + bd

    def bw(g):
        gx_hat = g * gd
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        gbias = g.reshape(-1, d).sum(axis=0)
        return gx, ggain, gbias
    return _make(out, (x, gain, bias), bw, "layernorm")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    z = np.exp(xd - xd.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return _make(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    s = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(s).sum(axis=axis, keepdims=True))
    out = s - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)
    return _make(out, (x,), bw, "log_softmax")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy over rows of a 2-D logit matrix."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape}, labels {labels.shape}")
    lp = log_softmax(logits, axis=-1)
    picked = gather_rows(reshape(lp, (lp.shape[0], lp.shape[1])), labels[:, None])
    return neg(mean(picked))


# ---------------------------------------------------------------- backward

def _reachable(root: Tensor) -> list:
    seen = set()
    out = []
    stack_ = [root]
    while stack_:
        t = stack_.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        out.append(t)
        node = t._node
        if node is _CONSUMED:
            raise StaleGraphError("graph already consumed by a previous backward; re-run forward")
        if node is not None:
            stack_.extend(node.parents)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf.

    Leaf gradients are reset to zero at the start of each call.  The graph
    is released afterwards; a second call without a new forward pass raises
    ``StaleGraphError``.
    """
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._node is _CONSUMED:
        raise StaleGraphError("graph already consumed by a previous backward; re-run forward")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tracked tensor")
    tensors = _reachable(loss)
    interior = sorted((t for t in tensors if t._node is not None), key=lambda t: t._node.seq, reverse=True)
    leaves = [t for t in tensors if t._node is None and t.requires_grad]
    for leaf in leaves:
        leaf.grad = np.zeros_like(leaf.data)

    grads = {id(loss): np.ones_like(loss.data)}
    for t in interior:
        g = grads.pop(id(t), None)
        node = t._node
        if g is not None:
            pgrads = node.backward(g)
            for p, pg in zip(node.parents, pgrads):
                if not p.requires_grad or pg is None:
                    continue
                if p._node is None:
                    p.grad += pg
                elif id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
        t._node = _CONSUMED
    if loss._node is None:
        loss.grad = np.ones_like(loss.data)


# ---------------------------------------------------------------- grad check

def grad_check(f: Callable[[], Tensor], theta: Tensor, h: float = 1e-5, tol: float = 1e-6,
               max_coords: int = 256, probes: int = 16, seed: int = 0) -> dict:
    """Compare backward gradients of ``f`` w.r.t. ``theta`` against central differences.

    ``f`` takes no arguments and must read ``theta`` (mutated in place).  Up
    to ``max_coords`` coordinates are checked individually; larger tensors use
    ``probes`` random unit directions.  The relative error is
    ``max|a - n| / max(max|a|, max|n|)``.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("objective is not finite")
    backward(loss)
    analytic_full = theta.grad.copy()
    base = theta.data.copy()

    def fval(delta):
        theta.data[...] = base + delta
        with no_grad():
            v = f().data
        if not np.isfinite(v).all():
            raise NonFiniteError("objective is not finite")
        return float(v.reshape(-1)[0])

    try:
        if theta.size <= max_coords:
            numeric = np.zeros(theta.size)
            for i in range(theta.size):
                e = np.zeros(theta.size, dtype=base.dtype)
                e[i] = h
                e = e.reshape(base.shape)
                numeric[i] = (fval(e) - fval(-e)) / (2 * h)
            analytic = analytic_full.reshape(-1).astype(np.float64)
        else:
            rng = np.random.default_rng(seed)
            numeric = np.zeros(probes)
            analytic = np.zeros(probes)
            for i in range(probes):
                v = rng.standard_normal(base.shape)
                v /= np.linalg.norm(v)
                numeric[i] = (fval(h * v) - fval(-h * v)) / (2 * h)
                analytic[i] = float((analytic_full * v).sum())
    finally:
        theta.data[...] = base
    denom = max(np.abs(analytic).max(), np.abs(numeric).max())
    err = float(np.abs(analytic - numeric).max() / denom) if denom > 0 else 0.0
    return {"max_rel_error": err, "passed": err < tol, "analytic": analytic, "numeric": numeric}


# ---------------------------------------------------------------- snapshot IO

_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def encode_tensor(arr) -> bytes:
    """Serialize to the DSTN record: magic, u32 rank, u32 extents, u8 dtype tag, raw LE data."""
    arr = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
    tag = _DTYPE_TAGS.get(arr.dtype)
    if tag is None:
        raise ValueError(f"unsupported dtype {arr.dtype}")
    head = b"DSTN" + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape) + struct.pack("<B", tag)
    return head + np.ascontiguousarray(arr, dtype=_TAG_DTYPES[tag]).tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Inverse of :func:`encode_tensor`; returns (array, next offset)."""
    if buf[offset:offset + 4] != b"DSTN":
        raise ValueError("bad tensor magic")
    offset += 4
    (rank,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    shape = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    (tag,) = struct.unpack_from("<B", buf, offset)
    offset += 1
    if tag not in _TAG_DTYPES:
        raise ValueError(f"unknown dtype tag {tag}")
    dt = _TAG_DTYPES[tag]
    count = int(np.prod(shape, dtype=np.int64))
    nbytes = count * dt.itemsize
    if offset + nbytes > len(buf):
        raise ValueError("truncated tensor record")
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=offset).reshape(shape).astype(dt.newbyteorder("="))
    return arr, offset + nbytes


def save_tensor(path, arr) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_tensor(arr))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        arr, _ = decode_tensor(fh.read())
    return arr


# ---------------------------------------------------------------- rng

def make_rng(seed: int) -> np.random.Generator:
    """PCG64 stream; identical seed and draw order give identical bits."""
    return np.random.Generator(np.random.PCG64(seed))


def split_rng(seed: int, n: int) -> list:
    return [np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(seed).spawn(n)]
