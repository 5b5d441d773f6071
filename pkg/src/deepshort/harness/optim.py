"""Decoupled-weight-decay Adam and the warmup + cosine learning-rate curve."""
from __future__ import annotations

import math

import numpy as np


def lr_at(step: int, total: int, peak: float, warmup: int) -> float:
    """Linear warmup from 0 over ``warmup`` steps, then cosine decay to 0 at ``total``."""
    if total <= 0:
        return 0.0
    if warmup > 0 and step < warmup:
        return peak * step / warmup
    span = max(total - warmup, 1)
    progress = min(max(step - warmup, 0) / span, 1.0)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def scaled_lr(batch_size: int, base: float = 6e-4, base_batch: int = 1024) -> float:
    """Keep the per-sample learning rate of ``base`` at ``base_batch``."""
    return base * batch_size / base_batch


class AdamW:
    """Adam with decoupled weight decay.

    Parameters named in ``no_decay`` (by default 1-D gains/biases and fixed
    embeddings) skip weight decay.
    """

    def __init__(self, named_params, lr=1e-3, betas=(0.9, 0.95), eps=1e-8, weight_decay=0.05,
                 decay_filter=None):
        self.params = list(named_params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        decay_filter = decay_filter or default_decay_filter
        self.decay = [decay_filter(name, p) for name, p in self.params]
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]
        self.t = 0

    def step(self, lr=None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for (name, p), m, v, dec in zip(self.params, self.m, self.v, self.decay):
            g = p.grad
            if g is None:
                continue
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if dec and self.weight_decay:
                p.data *= p.data.dtype.type(1.0 - lr * self.weight_decay)
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def state(self) -> dict:
        out = {"optim.t": np.array([float(self.t)])}
        for (name, _), m, v in zip(self.params, self.m, self.v):
            out[f"optim.m.{name}"] = m
            out[f"optim.v.{name}"] = v
        return out

    def load_state(self, state: dict) -> None:
        self.t = int(state["optim.t"][0])
        for i, (name, _) in enumerate(self.params):
            self.m[i] = np.array(state[f"optim.m.{name}"], dtype=self.m[i].dtype)
            self.v[i] = np.array(state[f"optim.v.{name}"], dtype=self.v[i].dtype)


def default_decay_filter(name: str, p) -> bool:
    if name.endswith("alphas"):
        return True
    return p.data.ndim >= 2 and not name.endswith("label_embed")
