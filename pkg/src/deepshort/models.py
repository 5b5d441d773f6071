"""Masked autoencoder with a decayed-shortcut encoder, and the matching classifier.

Images are channels-last float arrays ``(B, H, W, C)``.  Patches are taken in
row-major grid order; each patch vector is laid out as ``(p, p, C)``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .blocks import DecayedStack, LayerNorm, Linear, Module, ShortcutVariant
from .schedules import AlphaSchedule, make_schedule
from .tensor import Tensor


@dataclass
class ModelConfig:
    image_size: int = 32
    channels: int = 3
    patch_size: int = 4
    dim: int = 128
    depth: int = 6
    heads: int = 4
    mlp_ratio: int = 4
    mask_ratio: float = 0.75
    schedule: str = "linear"
    alpha_min: float = 0.6
    variant: str = "decayed"
    decay_target: str = "both"
    skip_period: int = 2
    use_skips: bool = True
    cls_token: bool = True
    zero_init: bool = True
    num_classes: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if self.skip_period < 1 or self.depth % self.skip_period:
            raise ValueError(f"encoder depth {self.depth} must be a multiple of skip_period {self.skip_period}")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio={self.mask_ratio} outside [0, 1)")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if not self.cls_token:
            raise ValueError("cls_token=false is not supported; the CLS token is the image feature")
        make_schedule(self.schedule, self.depth, self.alpha_min)
        ShortcutVariant(self.variant, self.decay_target)

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 2 * self.channels

    @property
    def decoder_depth(self) -> int:
        return self.depth // self.skip_period

    @property
    def tap_layers(self) -> tuple:
        return tuple(range(self.skip_period, self.depth + 1, self.skip_period))

    def make_schedule(self) -> AlphaSchedule:
        return make_schedule(self.schedule, self.depth, self.alpha_min)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- patches

@dataclass
class PatchGrid:
    patches: np.ndarray  # (B, N, p*p*C)
    image_size: int
    patch_size: int
    channels: int
    _stats: tuple = field(default=None, repr=False)

    def stats(self, eps: float = 1e-6):
        """Per-patch (mean, std) over the pixel axis, eps inside the root."""
        if self._stats is None:
            mu = self.patches.mean(axis=-1, keepdims=True)
            var = self.patches.var(axis=-1, keepdims=True)
            self._stats = (mu, np.sqrt(var + eps))
        return self._stats

    def normalized(self) -> np.ndarray:
        mu, sd = self.stats()
        return (self.patches - mu) / sd


def patchify(images: np.ndarray, p: int) -> PatchGrid:
    images = np.asarray(images)
    squeeze = images.ndim == 3
    if squeeze:
        images = images[None]
    B, H, W, C = images.shape
    if H != W or H % p:
        raise ValueError(f"image {H}x{W} not divisible into {p}x{p} patches")
    g = H // p
    x = images.reshape(B, g, p, g, p, C).transpose(0, 1, 3, 2, 4, 5).reshape(B, g * g, p * p * C)
    return PatchGrid(x, H, p, C)


def unpatchify(grid: PatchGrid) -> np.ndarray:
    B, N, _ = grid.patches.shape
    p, C = grid.patch_size, grid.channels
    g = grid.image_size // p
    if g * g != N:
        raise ValueError(f"{N} patches do not tile a {grid.image_size}px image")
    x = grid.patches.reshape(B, g, g, p, p, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, g * p, g * p, C)


# ---------------------------------------------------------------- masking

class DegenerateMaskError(ValueError):
    pass


@dataclass
class MaskSpec:
    kept: np.ndarray    # (B, K) ascending patch indices
    masked: np.ndarray  # (B, M) ascending patch indices
    ratio: float

    @property
    def num_patches(self) -> int:
        return self.kept.shape[1] + self.masked.shape[1]

    def restore_index(self) -> np.ndarray:
        """Index into ``concat(kept, masked)`` that restores patch order."""
        order = np.concatenate([self.kept, self.masked], axis=1)
        return np.argsort(order, axis=1, kind="stable")

    def masked_indicator(self) -> np.ndarray:
        ind = np.zeros((self.kept.shape[0], self.num_patches), dtype=bool)
        np.put_along_axis(ind, self.masked, True, axis=1)
        return ind


def masked_count(n: int, ratio: float) -> int:
    return int(np.floor(ratio * n + 0.5))


def random_mask(n: int, ratio: float, rng, batch: int = 1) -> MaskSpec:
    if not 0.0 < ratio < 1.0:
        raise DegenerateMaskError(f"mask ratio {ratio} must lie strictly between 0 and 1")
    m = masked_count(n, ratio)
    if m in (0, n):
        raise DegenerateMaskError(f"ratio {ratio} masks {m} of {n} patches")
    perm = np.argsort(rng.random((batch, n)), axis=1, kind="stable")
    return MaskSpec(np.sort(perm[:, m:], axis=1), np.sort(perm[:, :m], axis=1), ratio)


def full_view(n: int, batch: int) -> MaskSpec:
    """Every patch kept (evaluation / classification)."""
    return MaskSpec(np.tile(np.arange(n), (batch, 1)), np.zeros((batch, 0), dtype=np.int64), 0.0)


# ---------------------------------------------------------------- embeddings

def sincos_1d(dim: int, pos: np.ndarray) -> np.ndarray:
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    out = np.outer(pos.reshape(-1), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_2d(dim: int, grid: int) -> np.ndarray:
    """Fixed 2-D sine/cosine table of shape (grid*grid, dim), row-major."""
    if dim % 4:
        raise ValueError("embedding dim must be a multiple of 4")
    gy, gx = np.meshgrid(np.arange(grid, dtype=np.float64), np.arange(grid, dtype=np.float64), indexing="ij")
    return np.concatenate([sincos_1d(dim // 2, gy), sincos_1d(dim // 2, gx)], axis=1)


# ---------------------------------------------------------------- encoder

@dataclass
class EncoderOutput:
    cls: Tensor        # (B, d) after the final norm
    tokens: Tensor     # (B, K, d) kept-token features after the final norm
    taps: list         # SkipBundle: pre-norm (B, K, d) activations, shallow to deep
    prenorm: Tensor    # (B, 1+K, d) stack output before the final norm
    x0: Tensor         # (B, 1+K, d) stack input
    layer_cls: dict    # layer index -> (B, d) pre-norm CLS (when requested)


class TokenEncoder(Module):
    """Patch embedding, CLS token and a decayed-shortcut stack."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.cfg = cfg
        d = cfg.dim
        self.patch_embed = self.child("patch_embed", Linear(cfg.patch_dim, d, rng))
        self.cls = self.param("cls", rng.normal(0.0, 0.02, size=d))
        self.pos = sincos_2d(d, cfg.grid).astype(T.get_default_dtype())
        self.stack = self.child("stack", DecayedStack(
            d, cfg.depth, cfg.heads, cfg.mlp_ratio, cfg.make_schedule(), rng,
            ShortcutVariant(cfg.variant, cfg.decay_target), cfg.zero_init))
        self.norm = self.child("norm", LayerNorm(d))

    def __call__(self, patches: np.ndarray, mask: MaskSpec, cls_layers=(), record=False) -> EncoderOutput:
        cfg = self.cfg
        B = patches.shape[0]
        rows = np.arange(B)[:, None]
        kept_patches = Tensor(patches[rows, mask.kept])
        pos = Tensor(self.pos[mask.kept])
        tokens = T.add(self.patch_embed(kept_patches), pos)
        cls = T.broadcast_to(T.reshape(self.cls, (1, 1, cfg.dim)), (B, 1, cfg.dim))
        x0 = T.concat([cls, tokens], axis=1)
        layers = set(cfg.tap_layers) | set(cls_layers)
        out, captured = self.stack(x0, taps=layers, record=record)
        taps = [captured[l][:, 1:, :] for l in cfg.tap_layers]
        layer_cls = {l: captured[l][:, 0, :] for l in cls_layers}
        normed = self.norm(out)
        return EncoderOutput(normed[:, 0, :], normed[:, 1:, :], taps, out, x0, layer_cls)


def encode(images, mask: MaskSpec, model) -> EncoderOutput:
    enc = model.encoder if hasattr(model, "encoder") else model
    grid = patchify(images, enc.cfg.patch_size)
    return enc(grid.patches, mask)


# ---------------------------------------------------------------- MAE

class MaskedAutoencoder(Module):
    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.cfg = cfg
        d = cfg.dim
        self.encoder = self.child("encoder", TokenEncoder(cfg, rng))
        self.decoder_embed = self.child("decoder_embed", Linear(d, d, rng))
        self.mask_token = self.param("mask_token", rng.normal(0.0, 0.02, size=d))
        self.dec_pos = sincos_2d(d, cfg.grid).astype(T.get_default_dtype())
        self.fuse = []
        if cfg.use_skips:
            for j in range(cfg.decoder_depth):
                self.fuse.append(self.child(f"fuse{j + 1}", Linear(2 * d, d, rng)))
        # decoder shortcuts are never decayed
        self.decoder = self.child("decoder", DecayedStack(
            d, cfg.decoder_depth, cfg.heads, cfg.mlp_ratio,
            make_schedule("constant", cfg.decoder_depth, 1.0), rng,
            ShortcutVariant("baseline"), cfg.zero_init))
        self.dec_norm = self.child("dec_norm", LayerNorm(d))
        self.head = self.child("head", Linear(d, cfg.patch_dim, rng))

    def _fill(self, kept: Tensor, mask: MaskSpec) -> Tensor:
        """Scatter kept-token rows into an N-token sequence, mask token elsewhere."""
        B, K, d = kept.shape
        M = mask.masked.shape[1]
        if M == 0:
            return kept
        fill = T.broadcast_to(T.reshape(self.mask_token, (1, 1, d)), (B, M, d))
        return T.gather_rows(T.concat([kept, fill], axis=1), mask.restore_index())

    def decode(self, tokens: Tensor, taps: list, mask: MaskSpec) -> Tensor:
        cfg = self.cfg
        if cfg.use_skips and len(taps) != cfg.decoder_depth:
            raise ValueError(f"skip bundle has {len(taps)} taps for decoder depth {cfg.decoder_depth}")
        x = T.add(self._fill(self.decoder_embed(tokens), mask), Tensor(self.dec_pos))
        dec = self.decoder
        for j in range(cfg.decoder_depth):
            if cfg.use_skips:
                # mirrored pairing: first decoder layer sees the deepest tap
                tap = self._fill(taps[cfg.decoder_depth - 1 - j], mask)
                x = self.fuse[j](T.concat([x, tap], axis=-1))
            for which, blk in enumerate((dec.attn[j], dec.mlp[j])):
                x = T.add(x, blk(x))
        return self.head(self.dec_norm(x))

    def __call__(self, patches: np.ndarray, mask: MaskSpec):
        enc = self.encoder(patches, mask)
        return self.decode(enc.tokens, enc.taps, mask), enc


def mae_loss(pred: Tensor, target, mask: MaskSpec, eps: float = 1e-6) -> Tensor:
    """Mean squared error against per-patch normalized targets, masked patches only."""
    if not isinstance(target, PatchGrid):
        raise TypeError("target must be a PatchGrid")
    if pred.shape != target.patches.shape:
        raise ValueError(f"prediction {pred.shape} vs target {target.patches.shape}")
    t = target.patches
    norm = (t - t.mean(axis=-1, keepdims=True)) / np.sqrt(t.var(axis=-1, keepdims=True) + eps)
    ind = mask.masked_indicator()
    count = ind.sum()
    if count == 0:
        raise ValueError("no masked patches")
    w = (ind[..., None] / (count * pred.shape[-1])).astype(pred.dtype)
    diff = T.sub(pred, Tensor(norm.astype(pred.dtype)))
    return T.tsum(T.mul(T.mul(diff, diff), Tensor(w)))


def mae_step_loss(model: MaskedAutoencoder, images: np.ndarray, rng) -> Tensor:
    cfg = model.cfg
    grid = patchify(images, cfg.patch_size)
    mask = random_mask(cfg.num_patches, cfg.mask_ratio, rng, batch=images.shape[0])
    pred, _ = model(grid.patches, mask)
    return mae_loss(pred, grid, mask)


# ---------------------------------------------------------------- classifier

class Classifier(Module):
    """Decayed-shortcut token encoder with a linear head on the CLS feature."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        if cfg.num_classes < 2:
            raise ValueError("classifier needs num_classes >= 2")
        self.cfg = cfg
        self.encoder = self.child("encoder", TokenEncoder(cfg, rng))
        self.head = self.child("head", Linear(cfg.dim, cfg.num_classes, rng))

    def __call__(self, images: np.ndarray) -> Tensor:
        return classifier_forward(images, self)


def classifier_forward(images: np.ndarray, model: Classifier) -> Tensor:
    grid = patchify(images, model.cfg.patch_size)
    enc = model.encoder(grid.patches, full_view(model.cfg.num_patches, grid.patches.shape[0]))
    return model.head(enc.cls)


# ---------------------------------------------------------------- features

def cls_features(model, images: np.ndarray, batch: int = 256, layers=()) -> dict:
    """Unmasked CLS features: key ``'final'`` (post-norm) plus pre-norm per requested layer."""
    enc = model.encoder
    out = {"final": []}
    for l in layers:
        out[l] = []
    with T.no_grad():
        for i in range(0, len(images), batch):
            grid = patchify(images[i:i + batch], enc.cfg.patch_size)
            res = enc(grid.patches, full_view(enc.cfg.num_patches, grid.patches.shape[0]), cls_layers=tuple(layers))
            out["final"].append(res.cls.data.astype(np.float64))
            for l in layers:
                out[l].append(res.layer_cls[l].data.astype(np.float64))
    return {k: np.concatenate(v, axis=0) for k, v in out.items()}


# ---------------------------------------------------------------- reconstruction

def reconstruct_patches(model: MaskedAutoencoder, images: np.ndarray, mask: MaskSpec) -> np.ndarray:
    """Predicted images with predictions mapped back through target patch statistics."""
    grid = patchify(images, model.cfg.patch_size)
    with T.no_grad():
        pred, _ = model(grid.patches, mask)
    mu, sd = grid.stats()
    return unpatchify(PatchGrid(pred.data * sd + mu, grid.image_size, grid.patch_size, grid.channels))


def masked_view(images: np.ndarray, mask: MaskSpec, p: int, gray: float = 0.5) -> np.ndarray:
    grid = patchify(images, p)
    patches = grid.patches.copy()
    np.put_along_axis(patches, mask.masked[..., None], gray, axis=1)
    return unpatchify(PatchGrid(patches, grid.image_size, p, grid.channels))


def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6 pixmap from an (H, W, 3) array in [0, 1] (or (H, W, 1) gray)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    if img.shape[-1] == 1:
        img = np.repeat(img, 3, axis=-1)
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError("not a binary PPM")
    w, h, mx = int(parts[1]), int(parts[2]), int(parts[3])
    data = np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return data.astype(np.float64) / mx


def tile_rows(rows: list, pad: int = 1) -> np.ndarray:
    """Arrange ``rows`` (each (n, H, W, C) in [0, 1]) into one image grid."""
    n = max(r.shape[0] for r in rows)
    H, W, C = rows[0].shape[1:]
    out = np.ones((len(rows) * (H + pad) + pad, n * (W + pad) + pad, C))
    for i, r in enumerate(rows):
        for j in range(r.shape[0]):
            y, x = pad + i * (H + pad), pad + j * (W + pad)
            out[y:y + H, x:x + W] = r[j]
    return out
