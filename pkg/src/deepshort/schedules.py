"""Per-layer decay factors for identity shortcuts.

Layer ``l`` (1-based, ``l = 1..L``) scales its incoming shortcut by
``alpha_l``.  The linear schema is ``alpha_l = 1 - l * (1 - alpha_min) / L``;
the cosine schema interpolates between 1 and ``alpha_min`` along a half
cosine.  The cumulative product over all layers measures how much of the
network input survives into the last layer.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

KINDS = ("linear", "cosine", "constant", "learnable")
DEFAULT_GRID = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
DEFAULT_TARGET = (1e-3, 1e-2)


def _validate(l: int, depth: int, alpha_min: float) -> None:
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    if not 1 <= l <= depth:
        raise ValueError(f"layer index {l} outside 1..{depth}")
    if not 0.0 < alpha_min <= 1.0:
        raise ValueError(f"alpha_min={alpha_min} outside (0, 1]")


def alpha_linear(l: int, depth: int, alpha_min: float) -> float:
    _validate(l, depth, alpha_min)
    if l == depth:
        return float(alpha_min)
    return 1.0 - l * (1.0 - alpha_min) / depth


def alpha_cosine(l: int, depth: int, alpha_min: float) -> float:
    _validate(l, depth, alpha_min)
    if l == depth:
        return float(alpha_min)
    return alpha_min + (1.0 - alpha_min) * (1.0 + math.cos(math.pi * l / depth)) / 2.0


@dataclass
class AlphaSchedule:
    kind: str
    alpha_min: float
    depth: int
    values: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}; expected one of {KINDS}")
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if not 0.0 < self.alpha_min <= 1.0:
            raise ValueError(f"alpha_min={self.alpha_min} outside (0, 1]")
        if not self.values:
            self.values = _build_values(self.kind, self.depth, self.alpha_min)
        elif len(self.values) != self.depth:
            raise ValueError(f"schedule has {len(self.values)} values for depth {self.depth}")

    @property
    def delta(self) -> float:
        return (1.0 - self.alpha_min) / self.depth

    def __getitem__(self, l: int) -> float:
        """1-based layer lookup."""
        if not 1 <= l <= self.depth:
            raise IndexError(f"layer index {l} outside 1..{self.depth}")
        return self.values[l - 1]

    def __len__(self) -> int:
        return self.depth

    def table(self) -> list:
        """Rows of (l, alpha_l, running product, log10 running product)."""
        rows = []
        prod = 1.0
        for l, a in enumerate(self.values, start=1):
            prod *= a
            rows.append((l, a, prod, math.log10(prod)))
        return rows


def _build_values(kind: str, depth: int, alpha_min: float) -> list:
    if kind == "linear":
        return [alpha_linear(l, depth, alpha_min) for l in range(1, depth + 1)]
    if kind == "cosine":
        return [alpha_cosine(l, depth, alpha_min) for l in range(1, depth + 1)]
    if kind == "constant":
        return [float(alpha_min)] * depth
    return [1.0] * depth  # learnable: initial values


def make_schedule(kind: str, depth: int, alpha_min: float) -> AlphaSchedule:
    return AlphaSchedule(kind=kind, alpha_min=alpha_min, depth=depth)


@dataclass(frozen=True)
class EffectiveDecay:
    value: float
    log10_value: float


def effective_alpha(schedule: AlphaSchedule) -> EffectiveDecay:
    prod = 1.0
    for a in schedule.values:
        prod *= float(a)
    return EffectiveDecay(prod, math.log10(prod) if prod > 0 else -math.inf)


@dataclass
class Advice:
    recommended: float
    rows: list  # (alpha_min, effective value, inside target)
    feasible: bool


def advise_alpha_min(depth: int, target=DEFAULT_TARGET, grid=DEFAULT_GRID, kind: str = "linear") -> Advice:
    """Pick alpha_min so the cumulative decay lands in ``[target[0], target[1])``.

    Among candidates inside the interval the largest alpha_min wins.  When
    none qualify, the candidate closest in log10 distance to the interval is
    returned with ``feasible=False``.
    """
    lo, hi = target
    if not grid:
        raise ValueError("candidate grid is empty")
    if not lo < hi:
        raise ValueError(f"target lower bound {lo} must be below upper bound {hi}")
    rows = []
    for a in grid:
        eff = effective_alpha(make_schedule(kind, depth, a)).value
        rows.append((float(a), eff, lo <= eff < hi))
    inside = [r for r in rows if r[2]]
    if inside:
        return Advice(max(r[0] for r in inside), rows, True)

    def dist(r):
        e = math.log10(r[1])
        return max(math.log10(lo) - e, e - math.log10(hi), 0.0)
    best = min(rows, key=lambda r: (dist(r), -r[0]))
    return Advice(best[0], rows, False)


def learnable_alpha_init(depth: int) -> np.ndarray:
    """Initial per-shortcut factors, rows (attention, mlp) by layer."""
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    return np.ones((2, depth))


def learnable_alpha_table(values) -> str:
    """Render learned factors as a layer-indexed table with Attention/FFN rows."""
    values = np.asarray(values, dtype=np.float64).reshape(2, -1)
    depth = values.shape[1]
    lines = ["Layer Index," + ",".join(str(l) for l in range(1, depth + 1))]
    for label, row in zip(("Attention", "FFN"), values):
        lines.append(label + "," + ",".join(f"{v:.3f}" for v in row))
    return "\n".join(lines) + "\n"
