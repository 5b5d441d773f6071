"""Pixel-space DDPM with a token backbone whose shortcuts decay through the decoder.

The backbone has ``depth`` layers split into an input half and an output
half.  Output layer ``i`` concatenates the activation of input layer
``depth + 1 - i`` and projects it back to width ``dim``.  One shortcut
schedule spans all layers, so decay continues to the last decoder layer.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .blocks import DecayedStack, LayerNorm, Linear, Module, NormExplosionError, ShortcutVariant, combine
from .models import PatchGrid, patchify, sincos_2d, unpatchify
from .schedules import AlphaSchedule, make_schedule
from .tensor import Tensor


@dataclass
class DiffusionConfig:
    timesteps: int = 200
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    image_size: int = 8
    channels: int = 3
    patch_size: int = 2
    dim: int = 64
    depth: int = 6
    heads: int = 4
    mlp_ratio: int = 4
    schedule: str = "linear"
    alpha_min: float = 0.7
    variant: str = "decayed"
    decay_target: str = "both"
    zero_init: bool = True
    conditioning: str = "none"
    num_classes: int = 0

    def __post_init__(self):
        if self.timesteps < 1:
            raise ValueError("timesteps must be >= 1")
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {self.beta_start}, {self.beta_end}")
        if self.depth < 2 or self.depth % 2:
            raise ValueError(f"backbone depth must be even and >= 2, got {self.depth}")
        if self.image_size % self.patch_size:
            raise ValueError("image size not divisible by patch size")
        if self.conditioning not in ("none", "class"):
            raise ValueError(f"unknown conditioning {self.conditioning!r}")
        if self.conditioning == "class" and self.num_classes < 1:
            raise ValueError("class conditioning needs num_classes >= 1")
        make_schedule(self.schedule, self.depth, self.alpha_min)
        ShortcutVariant(self.variant, self.decay_target)

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 2 * self.channels

    def betas(self) -> np.ndarray:
        if self.timesteps == 1:
            return np.array([self.beta_start])
        return np.linspace(self.beta_start, self.beta_end, self.timesteps)

    def make_schedule(self) -> AlphaSchedule:
        return make_schedule(self.schedule, self.depth, self.alpha_min)

    def to_dict(self) -> dict:
        return asdict(self)


class NoiseSchedule:
    """beta_t, alpha_t = 1 - beta_t and alpha_bar_t for t = 1..T (1-based accessors)."""

    def __init__(self, betas):
        self.betas = np.asarray(betas, dtype=np.float64)
        if np.any(self.betas <= 0) or np.any(self.betas >= 1) or np.any(np.diff(self.betas) < 0):
            raise ValueError("betas must be ascending inside (0, 1)")
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)
        self.T = len(self.betas)

    @classmethod
    def from_config(cls, cfg: DiffusionConfig) -> "NoiseSchedule":
        return cls(cfg.betas())

    def _check(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep outside 1..{self.T}")
        return t - 1

    def beta(self, t): return self.betas[self._check(t)]
    def alpha(self, t): return self.alphas[self._check(t)]
    def alpha_bar(self, t): return self.alpha_bars[self._check(t)]


@dataclass
class NoisePair:
    x0: np.ndarray
    eps: np.ndarray
    t: np.ndarray
    xt: np.ndarray


def mix(x0, eps, alpha_bar) -> np.ndarray:
    ab = np.asarray(alpha_bar, dtype=np.float64).reshape((-1,) + (1,) * (np.ndim(x0) - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def q_sample(x0, t, rng, sched: NoiseSchedule) -> NoisePair:
    """Forward noising ``x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``."""
    x0 = np.asarray(x0, dtype=np.float64)
    t = np.broadcast_to(np.asarray(t), (x0.shape[0],))
    ab = sched.alpha_bar(t)
    eps = rng.standard_normal(x0.shape)
    return NoisePair(x0, eps, t, mix(x0, eps, ab))


def timestep_embedding(t, dim: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


class DenoiserBackbone(Module):
    """Token network predicting the added noise."""

    def __init__(self, cfg: DiffusionConfig, rng):
        super().__init__()
        self.cfg = cfg
        d = cfg.dim
        self.patch_embed = self.child("patch_embed", Linear(cfg.patch_dim, d, rng))
        self.pos = sincos_2d(d, cfg.grid).astype(T.get_default_dtype())
        self.time1 = self.child("time1", Linear(d, d, rng))
        self.time2 = self.child("time2", Linear(d, d, rng))
        if cfg.conditioning == "class":
            self.label_embed = self.param("label_embed", rng.normal(0.0, 0.02, size=(cfg.num_classes, d)))
        self.stack = self.child("stack", DecayedStack(
            d, cfg.depth, cfg.heads, cfg.mlp_ratio, cfg.make_schedule(), rng,
            ShortcutVariant(cfg.variant, cfg.decay_target), cfg.zero_init))
        half = cfg.depth // 2
        self.fuse = [self.child(f"fuse{i}", Linear(2 * d, d, rng)) for i in range(half + 1, cfg.depth + 1)]
        self.norm = self.child("norm", LayerNorm(d))
        self.head = self.child("head", Linear(d, cfg.patch_dim, rng))
        self.trace = None

    def __call__(self, xt, t, cond=None, record: bool = False, return_features: bool = False):
        return backbone_forward(xt, t, cond, self, record, return_features)


def backbone_forward(xt, t, cond, model: DenoiserBackbone, record=False, return_features=False):
    cfg = model.cfg
    stack = model.stack
    if stack.depth != cfg.depth or stack.schedule.depth != cfg.depth:
        raise ValueError("schedule length does not match backbone depth")
    xt = np.asarray(xt, dtype=T.get_default_dtype())
    B = xt.shape[0]
    grid = patchify(xt, cfg.patch_size)
    tok = T.add(model.patch_embed(Tensor(grid.patches)), Tensor(model.pos))
    temb = Tensor(timestep_embedding(np.broadcast_to(np.asarray(t), (B,)), cfg.dim))
    temb = model.time2(T.gelu(model.time1(temb)))
    x = T.add(tok, T.reshape(temb, (B, 1, cfg.dim)))
    extra = 0
    if cfg.conditioning == "class":
        if cond is None:
            raise ValueError("class-conditional backbone needs labels")
        lab = T.getitem(model.label_embed, np.asarray(cond, dtype=np.int64))
        x = T.concat([T.reshape(lab, (B, 1, cfg.dim)), x], axis=1)
        extra = 1
    half = cfg.depth // 2
    saved = {}
    trace = [] if record else None
    x_in = x
    for l in range(1, cfg.depth + 1):
        if l > half:
            x = model.fuse[l - half - 1](T.concat([x, saved[cfg.depth + 1 - l]], axis=-1))
            if record:
                trace.append(("fuse", l, x))
        for which, blk in enumerate((stack.attn[l - 1], stack.mlp[l - 1])):
            a = stack.alpha(l, which)
            try:
                fx = blk(x)
                skip, branch = stack.variant.coefficients(blk.kind, a)
                if record:
                    trace.append((skip, branch, fx))
                x = combine(x, fx, skip, branch, l)
            except T.NonFiniteError as exc:
                raise NormExplosionError(f"non-finite activation at layer {l}: {exc}", l) from exc
        if l <= half:
            saved[l] = x
    if record:
        model.trace = (x_in, trace)
    feats = x
    out = model.head(model.norm(x))
    if extra:
        out = out[:, extra:, :]
    out = T.reshape(out, grid.patches.shape)
    eps_hat = _unpatchify_tensor(out, cfg)
    if return_features:
        return eps_hat, feats
    return eps_hat


def _unpatchify_tensor(x: Tensor, cfg: DiffusionConfig) -> Tensor:
    B = x.shape[0]
    g, p, C = cfg.grid, cfg.patch_size, cfg.channels
    x = T.reshape(x, (B, g, g, p, p, C))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (B, g * p, g * p, C))


def eps_loss(x0, model, rng, sched: NoiseSchedule, labels=None) -> Tensor:
    """Mean over the batch of the squared error between predicted and drawn noise."""
    x0 = np.asarray(x0, dtype=np.float64)
    B = x0.shape[0]
    t = rng.integers(1, sched.T + 1, size=B)
    pair = q_sample(x0, t, rng, sched)
    pred = model(pair.xt.astype(T.get_default_dtype()), t, labels)
    if not isinstance(pred, Tensor):
        pred = Tensor(np.asarray(pred, dtype=T.get_default_dtype()))
    diff = T.sub(pred, Tensor(pair.eps.astype(pred.dtype)))
    return T.scale(T.tsum(T.mul(diff, diff)), 1.0 / B)


def ddpm_sample(model, n: int, rng, sched: NoiseSchedule, shape, labels=None, return_trajectory=False):
    """Ancestral sampling from ``x_T ~ N(0, I)`` down to ``x_0``."""
    x = rng.standard_normal((n,) + tuple(shape))
    for t in range(sched.T, 0, -1):
        with T.no_grad():
            eps = model(x.astype(T.get_default_dtype()), np.full(n, t), labels)
        eps = eps.data if isinstance(eps, Tensor) else np.asarray(eps)
        beta, alpha, ab = sched.beta(t), sched.alpha(t), sched.alpha_bar(t)
        mean = (x - beta / math.sqrt(1.0 - ab) * eps) / math.sqrt(alpha)
        if t > 1:
            x = mean + math.sqrt(beta) * rng.standard_normal(x.shape)
        else:
            x = mean
        if not np.all(np.isfinite(x)):
            raise T.NonFiniteError(f"sampler state became non-finite at step t={t}")
    return x


# ---------------------------------------------------------------- quality proxy

def rbf_mmd(x, y, bandwidth=None) -> float:
    """Squared MMD (unbiased) with a Gaussian kernel; bandwidth defaults to the median pairwise distance."""
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    y = np.asarray(y, dtype=np.float64).reshape(len(y), -1)
    z = np.concatenate([x, y])
    sq = (z * z).sum(1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * z @ z.T, 0.0)
    if bandwidth is None:
        iu = np.triu_indices(len(z), 1)
        bandwidth = float(np.median(np.sqrt(d2[iu])))
        if bandwidth <= 0:
            bandwidth = 1.0
    K = np.exp(-d2 / (2.0 * bandwidth ** 2))
    n, m = len(x), len(y)
    kxx = (K[:n, :n].sum() - np.trace(K[:n, :n])) / (n * (n - 1))
    kyy = (K[n:, n:].sum() - np.trace(K[n:, n:])) / (m * (m - 1))
    kxy = K[:n, n:].mean()
    return float(kxx + kyy - 2.0 * kxy)
