"""Pre-norm transformer sub-blocks joined by (decayed) identity shortcuts.

A layer of the token network is two shortcut steps, attention then MLP:

    x <- a * x + b * f(x)

where the pair ``(a, b)`` depends on the shortcut variant:

    decayed          (alpha_l, 1)
    baseline         (1, 1)
    residual_scaled  (1, sqrt(0.5))
    both_scaled      (sqrt(0.5), sqrt(0.5))

The same ``alpha_l`` is used by both shortcuts of layer ``l`` unless the
decay target restricts it to one of them.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .schedules import AlphaSchedule
from .tensor import Tensor

VARIANTS = ("decayed", "baseline", "residual_scaled", "both_scaled")
DECAY_TARGETS = ("both", "attention_only", "mlp_only")
NORM_LIMIT = 1e4
SQRT_HALF = math.sqrt(0.5)


class NormExplosionError(RuntimeError):
    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class Module:
    """Minimal parameter container: named tensors plus named child modules."""

    def __init__(self):
        self._params = OrderedDict()
        self._children = OrderedDict()

    def param(self, name: str, value) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, c in self._children.items():
            yield from c.named_parameters(prefix + name + ".")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.data) for k, p in self.named_parameters())

    def load_state_dict(self, state) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in own.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype).copy()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def uniform_init(rng, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng, zero: bool = False, bias: bool = True):
        super().__init__()
        w = np.zeros((d_in, d_out)) if zero else uniform_init(rng, d_in, (d_in, d_out))
        self.weight = self.param("weight", w)
        self.bias = self.param("bias", np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.gain = self.param("gain", np.ones(d))
        self.bias = self.param("bias", np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.gain, self.bias, self.eps)


class Attention(Module):
    """Pre-norm multi-head self-attention; ``proj`` is the zero-init target."""

    kind = "attention"

    def __init__(self, dim: int, heads: int, rng, zero_init: bool = True):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim, self.heads, self.zero_init = dim, heads, zero_init
        self.norm = self.child("norm", LayerNorm(dim))
        self.qkv = self.child("qkv", Linear(dim, 3 * dim, rng))
        self.proj = self.child("proj", Linear(dim, dim, rng, zero=zero_init))

    def __call__(self, x: Tensor) -> Tensor:
        return attention_forward(x, self)


class MLP(Module):
    """Pre-norm two-layer perceptron; ``fc2`` is the zero-init target."""

    kind = "mlp"

    def __init__(self, dim: int, ratio: int, rng, zero_init: bool = True):
        super().__init__()
        self.dim, self.zero_init = dim, zero_init
        self.norm = self.child("norm", LayerNorm(dim))
        self.fc1 = self.child("fc1", Linear(dim, ratio * dim, rng))
        self.fc2 = self.child("fc2", Linear(ratio * dim, dim, rng, zero=zero_init))

    def __call__(self, x: Tensor) -> Tensor:
        return mlp_forward(x, self)


def attention_forward(x: Tensor, block: Attention) -> Tensor:
    squeeze = x.ndim == 2
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    B, n, d = x.shape
    H = block.heads
    dh = d // H
    h = block.norm(x)
    qkv = T.reshape(block.qkv(h), (B, n, 3, H, dh))
    qkv = T.transpose(qkv, (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = T.scale(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / math.sqrt(dh))
    att = T.softmax(scores, axis=-1)
    out = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (B, n, d))
    out = block.proj(out)
    if squeeze:
        out = T.reshape(out, (n, d))
    return out


def mlp_forward(x: Tensor, block: MLP) -> Tensor:
    return block.fc2(T.gelu(block.fc1(block.norm(x))))


@dataclass(frozen=True)
class ShortcutVariant:
    tag: str = "decayed"
    decay_target: str = "both"

    def __post_init__(self):
        if self.tag not in VARIANTS:
            raise ValueError(f"unknown shortcut variant {self.tag!r}")
        if self.decay_target not in DECAY_TARGETS:
            raise ValueError(f"unknown decay target {self.decay_target!r}")

    def coefficients(self, kind: str, alpha):
        """(shortcut scale, branch scale) for a block of the given kind."""
        if self.tag == "baseline":
            return 1.0, 1.0
        if self.tag == "residual_scaled":
            return 1.0, SQRT_HALF
        if self.tag == "both_scaled":
            return SQRT_HALF, SQRT_HALF
        if self.decay_target == "attention_only" and kind != "attention":
            return 1.0, 1.0
        if self.decay_target == "mlp_only" and kind != "mlp":
            return 1.0, 1.0
        return alpha, 1.0


def _scaled(x: Tensor, c) -> Tensor:
    if isinstance(c, Tensor):
        return T.mul(x, c)
    if c == 1.0:
        return x
    return T.scale(x, c)


def combine(x: Tensor, fx: Tensor, skip, branch, layer=None) -> Tensor:
    out = T.add(_scaled(x, skip), _scaled(fx, branch))
    rms = float(np.sqrt(np.mean(np.square(out.data, dtype=np.float64))))
    if rms > NORM_LIMIT:
        raise NormExplosionError(f"activation RMS {rms:.3g} exceeds {NORM_LIMIT:g} at layer {layer}", layer)
    return out


def shortcut_apply(x: Tensor, block, alpha_l, variant: ShortcutVariant = ShortcutVariant(), layer=None) -> Tensor:
    if not isinstance(alpha_l, Tensor) and not 0.0 < alpha_l <= 1.0:
        raise ValueError(f"alpha_l={alpha_l} outside (0, 1]")
    try:
        fx = block(x)
        skip, branch = variant.coefficients(block.kind, alpha_l)
        return combine(x, fx, skip, branch, layer)
    except T.NonFiniteError as exc:
        raise NormExplosionError(f"non-finite activation at layer {layer}: {exc}", layer) from exc


class DecayedStack(Module):
    """``depth`` transformer layers whose shortcuts follow ``schedule``.

    With ``schedule.kind == 'learnable'`` the factors are trainable and stored
    as a (2, depth) parameter ``alphas`` (attention row, mlp row).
    """

    def __init__(self, dim, depth, heads, mlp_ratio, schedule: AlphaSchedule, rng,
                 variant: ShortcutVariant = ShortcutVariant(), zero_init: bool = True):
        super().__init__()
        if schedule.depth != depth:
            raise ValueError(f"schedule depth {schedule.depth} != stack depth {depth}")
        self.dim, self.depth = dim, depth
        self.schedule = schedule
        self.variant = variant
        self.attn = []
        self.mlp = []
        for l in range(depth):
            self.attn.append(self.child(f"layer{l + 1}.attn", Attention(dim, heads, rng, zero_init)))
            self.mlp.append(self.child(f"layer{l + 1}.mlp", MLP(dim, mlp_ratio, rng, zero_init)))
        self.alphas = None
        if schedule.kind == "learnable":
            self.alphas = self.param("alphas", np.ones((2, depth)))
        self.trace = None

    def alpha(self, l: int, which: int):
        """Factor for layer ``l`` (1-based); ``which`` 0 = attention, 1 = mlp."""
        if self.alphas is not None:
            return self.alphas[which, l - 1]
        return self.schedule[l]

    def shortcut_coefficients(self) -> list:
        """Numeric (skip, branch) pairs for every shortcut in execution order."""
        out = []
        for l in range(1, self.depth + 1):
            for which, blk in enumerate((self.attn[l - 1], self.mlp[l - 1])):
                a = self.alpha(l, which)
                a = float(a.data) if isinstance(a, Tensor) else a
                s, b = self.variant.coefficients(blk.kind, a)
                out.append((float(s), float(b)))
        return out

    def echo_factor(self) -> float:
        """Product of all shortcut scales: the weight of the input in the output."""
        prod = 1.0
        for s, _ in self.shortcut_coefficients():
            prod *= s
        return prod

    def __call__(self, x: Tensor, taps=(), record: bool = False):
        """Run all layers.  Returns (output, {layer: activation}) for ``taps``."""
        captured = {}
        trace = [] if record else None
        for l in range(1, self.depth + 1):
            for which, blk in enumerate((self.attn[l - 1], self.mlp[l - 1])):
                a = self.alpha(l, which)
                try:
                    fx = blk(x)
                    skip, branch = self.variant.coefficients(blk.kind, a)
                    if record:
                        trace.append((skip, branch, fx))
                    x = combine(x, fx, skip, branch, l)
                except T.NonFiniteError as exc:
                    raise NormExplosionError(f"non-finite activation at layer {l}: {exc}", l) from exc
            if l in taps:
                captured[l] = x
        if record:
            self.trace = trace
        return x, captured


class LinearSurrogate(Module):
    """Single dense map without nonlinearity; a stand-in for f in algebraic checks."""

    kind = "mlp"

    def __init__(self, dim: int, rng):
        super().__init__()
        self.weight = self.param("weight", uniform_init(rng, dim, (dim, dim)))

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.weight)


def run_blocks(x: Tensor, blocks, alphas, variant: ShortcutVariant = ShortcutVariant()):
    """Apply ``blocks`` in sequence, block ``k`` using shortcut factor ``alphas[k]``.

    Returns (output, trace) where the trace feeds :func:`expand_contributions`.
    """
    if len(alphas) != len(blocks):
        raise ValueError(f"{len(alphas)} factors for {len(blocks)} blocks")
    trace = []
    for k, (blk, a) in enumerate(zip(blocks, alphas), start=1):
        fx = blk(x)
        skip, branch = variant.coefficients(blk.kind, a)
        trace.append((skip, branch, fx))
        x = combine(x, fx, skip, branch, k)
    return x, trace


def expand_terms(x0: np.ndarray, coefficients, branch_outputs) -> list:
    """Unrolled contributions of ``x_{k+1} = s_k x_k + b_k f_k``.

    Returns ``[(prod s) x0, (prod_{i>k} s_i) b_k f_k for each k]``; the terms
    sum to the final state.
    """
    n = len(coefficients)
    suffix = [1.0] * (n + 1)
    for k in range(n - 1, -1, -1):
        suffix[k] = suffix[k + 1] * float(coefficients[k][0])
    terms = [suffix[0] * np.asarray(x0, dtype=np.float64)]
    for k in range(n):
        terms.append(suffix[k + 1] * float(coefficients[k][1]) * np.asarray(branch_outputs[k], dtype=np.float64))
    return terms


def expand_contributions(source, x0) -> list:
    """Contribution terms of a recorded forward pass.

    ``source`` is a :class:`DecayedStack` called with ``record=True`` or a
    trace returned by :func:`run_blocks`.
    """
    trace = source.trace if isinstance(source, DecayedStack) else source
    if trace is None:
        raise RuntimeError("no recorded forward pass; call the stack with record=True first")
    x0 = x0.data if isinstance(x0, Tensor) else x0
    coeffs = []
    outs = []
    for s, b, fx in trace:
        s = float(s.data) if isinstance(s, Tensor) else s
        b = float(b.data) if isinstance(b, Tensor) else b
        coeffs.append((s, b))
        outs.append(fx.data)
    return expand_terms(x0, coeffs, outs)
