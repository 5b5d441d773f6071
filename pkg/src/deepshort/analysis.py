"""Representation analysis: covariance spectra, effective rank, KNN and linear probes."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T


# ---------------------------------------------------------------- covariance

def feature_covariance(F) -> np.ndarray:
    """Sample-by-sample covariance ``A = Fc Fc^T / (d - 1)``.

    Each feature dimension is centered across samples first, so ``A[i, j]``
    is the covariance between the feature vectors of samples ``i`` and ``j``.
    """
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 2 or F.shape[0] < 2:
        raise ValueError(f"need at least two samples, got shape {F.shape}")
    if F.shape[1] < 2:
        raise ValueError("need at least two feature dimensions")
    if not np.all(np.isfinite(F)):
        raise ValueError("features contain non-finite values")
    Fc = F - F.mean(axis=0, keepdims=True)
    A = Fc @ Fc.T / (F.shape[1] - 1)
    return (A + A.T) / 2.0


# ---------------------------------------------------------------- Jacobi

def _round_robin(n: int):
    """Pairings for one sweep: every (p, q) appears exactly once, pairs in a round are disjoint."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        rounds.append([(min(p, q), max(p, q)) for p, q in pairs if p < n and q < n])
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def jacobi_eigh(A, tol: float = 1e-12, max_sweeps: int = 60):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Each sweep visits every off-diagonal pair once, in round-robin order so
    that the pairs of a round are disjoint and can be rotated together.
    Iteration stops when the off-diagonal Frobenius norm falls below
    ``tol * max(1, ||A||_F)``.  Returns (eigenvalues, eigenvectors, sweeps)
    with ``A = V diag(w) V^T``.
    """
    A = np.array(A, dtype=np.float64)
    n = A.shape[0]
    if A.ndim != 2 or A.shape[1] != n:
        raise ValueError(f"matrix must be square, got {A.shape}")
    V = np.eye(n)
    if n == 1:
        return A.diagonal().copy(), V, 0
    scale = max(1.0, np.linalg.norm(A))
    rounds = [(np.array([p for p, _ in r]), np.array([q for _, q in r])) for r in _round_robin(n)]
    sweeps = 0

    offdiag = ~np.eye(n, dtype=bool)

    def off(M):
        return float(np.linalg.norm(M[offdiag]))

    while off(A) > tol * scale:
        if sweeps >= max_sweeps:
            raise RuntimeError(f"Jacobi did not converge in {max_sweeps} sweeps")
        sweeps += 1
        for P, Q in rounds:
            apq = A[P, Q]
            active = np.abs(apq) > 1e-300
            if not active.any():
                continue
            P, Q, apq = P[active], Q[active], apq[active]
            theta = (A[Q, Q] - A[P, P]) / (2.0 * apq)
            # for huge theta, t ~ 1 / (2 theta) avoids overflow in theta**2
            big = np.abs(theta) > 1e150
            th = np.where(big, 1.0, theta)
            t = np.where(big, 0.5 / np.where(big, theta, 1.0), np.sign(th) / (np.abs(th) + np.sqrt(th * th + 1.0)))
            t[theta == 0] = 1.0
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            ap, aq = A[:, P].copy(), A[:, Q].copy()
            A[:, P] = ap * c - aq * s
            A[:, Q] = ap * s + aq * c
            ap, aq = A[P, :].copy(), A[Q, :].copy()
            A[P, :] = c[:, None] * ap - s[:, None] * aq
            A[Q, :] = s[:, None] * ap + c[:, None] * aq
            A[P, Q] = 0.0
            A[Q, P] = 0.0
            vp, vq = V[:, P].copy(), V[:, Q].copy()
            V[:, P] = vp * c - vq * s
            V[:, Q] = vp * s + vq * c
    return A.diagonal().copy(), V, sweeps


def singular_values(A, sym_tol: float = 1e-8) -> np.ndarray:
    """Descending singular values of a symmetric PSD matrix (its clamped eigenvalues)."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"matrix must be square, got {A.shape}")
    asym = float(np.abs(A - A.T).max()) if A.size else 0.0
    if asym > sym_tol:
        raise ValueError(f"matrix not symmetric: max |A - A^T| = {asym:.3g}")
    w, _, _ = jacobi_eigh((A + A.T) / 2.0)
    return np.sort(np.clip(w, 0.0, None))[::-1]


def effective_rank(sigma) -> float:
    """Shannon entropy (natural log) of the normalized spectrum."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < 0):
        raise ValueError("singular values must be non-negative")
    total = sigma.sum()
    if total <= 0:
        raise ValueError("spectrum is all zero")
    p = sigma / total
    p = p[p > 0]
    return float(-(p * np.log(p)).sum()) + 0.0  # no negative zero for a single mass


@dataclass
class RankReport:
    sigma: np.ndarray
    normalized: np.ndarray
    rho: float
    epoch: int = -1
    alpha_min: float = float("nan")
    meta: dict = field(default_factory=dict)


def rank_report(F, epoch: int = -1, alpha_min: float = float("nan")) -> RankReport:
    """Effective rank of the sample covariance of ``F``.

    When samples outnumber dimensions the spectrum is taken from the d x d
    dual Gram matrix, whose nonzero eigenvalues coincide with those of the
    n x n sample covariance; zero eigenvalues do not change the entropy.
    """
    F = np.asarray(F, dtype=np.float64)
    n, d = F.shape
    if n > d:
        if n < 2 or d < 2:
            raise ValueError(f"need at least two samples and dimensions, got {F.shape}")
        Fc = F - F.mean(axis=0, keepdims=True)
        G = Fc.T @ Fc / (d - 1)
        sigma = singular_values((G + G.T) / 2.0)
    else:
        sigma = singular_values(feature_covariance(F))
    rho = effective_rank(sigma)
    return RankReport(sigma, sigma / sigma.sum(), rho, epoch, alpha_min)


# ---------------------------------------------------------------- KNN

def knn_classify(train_x, train_y, query_x, k: int = 20, query_y=None, chunk: int = 512):
    """Cosine-similarity K-nearest-neighbour vote.

    Ties in the vote are broken by summed similarity, then by the lowest
    label.  Returns (predictions, accuracy or None).
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    query_x = np.asarray(query_x, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.int64)
    if len(train_x) == 0:
        raise ValueError("empty training set")
    if not 1 <= k <= len(train_x):
        raise ValueError(f"K={k} must lie in 1..{len(train_x)}")
    nc = int(train_y.max()) + 1

    def unit(x):
        norm = np.linalg.norm(x, axis=1, keepdims=True)
        return x / np.where(norm > 0, norm, 1.0)
    tr, q = unit(train_x), unit(query_x)
    preds = np.empty(len(q), dtype=np.int64)
    for s in range(0, len(q), chunk):
        sim = q[s:s + chunk] @ tr.T
        idx = np.argsort(-sim, axis=1, kind="stable")[:, :k]
        top = np.take_along_axis(sim, idx, axis=1)
        labels = train_y[idx]
        votes = np.zeros((len(idx), nc))
        weight = np.zeros((len(idx), nc))
        rows = np.arange(len(idx))[:, None]
        np.add.at(votes, (rows, labels), 1.0)
        np.add.at(weight, (rows, labels), top)
        for i in range(len(idx)):
            best = np.flatnonzero(votes[i] == votes[i].max())
            if len(best) > 1:
                w = weight[i, best]
                best = best[w == w.max()]
            preds[s + i] = best[0]
    acc = None if query_y is None else float(np.mean(preds == np.asarray(query_y)))
    return preds, acc


# ---------------------------------------------------------------- linear probe

@dataclass
class ProbeConfig:
    k: int = 20
    epochs: int = 200
    batch_size: int = 1024
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("K must be >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


def linear_probe(train_x, train_y, test_x, test_y, cfg: ProbeConfig = ProbeConfig(), num_classes=None):
    """Train a softmax linear classifier on frozen features; return test accuracy.

    Features are standardized with training-set statistics.  SGD with
    momentum, cosine learning-rate decay to zero per step, zero-initialized
    weights, seed-determined shuffling.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    test_x = np.asarray(test_x, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.int64)
    test_y = np.asarray(test_y, dtype=np.int64)
    if len(train_x) != len(train_y) or len(test_x) != len(test_y):
        raise ValueError("label/feature count mismatch")
    nc = num_classes or int(max(train_y.max(), test_y.max())) + 1
    mu = train_x.mean(axis=0)
    sd = train_x.std(axis=0)
    sd = np.where(sd > 1e-8, sd, 1.0)
    xtr = (train_x - mu) / sd
    xte = (test_x - mu) / sd
    n, d = xtr.shape
    bs = min(cfg.batch_size, n)
    steps_per_epoch = math.ceil(n / bs)
    total = cfg.epochs * steps_per_epoch
    rng = T.make_rng(cfg.seed)
    with T.default_dtype(np.float64):
        W = T.Tensor(np.zeros((d, nc)), requires_grad=True)
        b = T.Tensor(np.zeros(nc), requires_grad=True)
        vel = [np.zeros_like(W.data), np.zeros_like(b.data)]
        step = 0
        for _ in range(cfg.epochs):
            order = rng.permutation(n)
            for s in range(0, n, bs):
                idx = order[s:s + bs]
                loss = T.cross_entropy(T.linear(T.Tensor(xtr[idx]), W, b), train_y[idx])
                T.backward(loss)
                lr = cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / total))
                for p, v in zip((W, b), vel):
                    g = p.grad + cfg.weight_decay * p.data
                    v *= cfg.momentum
                    v += g
                    p.data -= lr * v
                step += 1
    logits = xte @ W.data + b.data
    return float(np.mean(np.argmax(logits, axis=1) == test_y))
