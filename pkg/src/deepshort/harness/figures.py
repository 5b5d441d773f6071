"""PNG figures rendered next to the CSV artifacts."""
from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed metadata keeps PNG bytes reproducible
_META = {"Software": None}


def _num(v) -> float:
    try:
        return float(v)
    except (TypeError, ValueError):
        return math.nan


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def plot_training(metrics: list, path, title: str = "") -> None:
    """Loss curve plus the evaluated epochs of rank, probe and KNN accuracy."""
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.4))
    ep = [int(r["epoch"]) for r in metrics]
    loss = [_num(r["loss"]) for r in metrics]
    axes[0].plot(ep, loss, marker=".")
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("training loss")
    for key, ax, label in (("eff_rank", axes[1], "effective rank (nats)"),):
        pts = [(e, _num(r[key])) for e, r in zip(ep, metrics) if not math.isnan(_num(r[key]))]
        if pts:
            ax.plot(*zip(*pts), marker="o")
        ax.set_xlabel("epoch")
        ax.set_ylabel(label)
    for key, label in (("probe_acc", "probe"), ("knn_acc", "knn")):
        pts = [(e, _num(r[key])) for e, r in zip(ep, metrics) if not math.isnan(_num(r[key]))]
        if pts:
            axes[2].plot(*zip(*pts), marker="o", label=label)
    axes[2].set_xlabel("epoch")
    axes[2].set_ylabel("accuracy")
    if axes[2].get_legend_handles_labels()[0]:
        axes[2].legend(loc="best")
    if title:
        fig.suptitle(title)
    _save(fig, path)


def plot_rank_dynamics(rows: list, path) -> None:
    """Effective rank against epoch, one line per alpha_min (final layer rows only)."""
    fig, ax = plt.subplots(figsize=(5, 3.6))
    series = {}
    for r in rows:
        if r.get("status") != "ok" or str(r.get("layer")) != "final":
            continue
        series.setdefault(float(r["alpha_min"]), []).append((int(r["epoch"]), float(r["eff_rank"])))
    for a in sorted(series):
        pts = sorted(series[a])
        ax.plot(*zip(*pts), marker="o", label=f"alpha_min={a:g}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("effective rank (nats)")
    if series:
        ax.legend(loc="best")
    _save(fig, path)


def plot_rank_by_layer(rows: list, path) -> None:
    """Effective rank against layer index at the latest epoch of each alpha_min."""
    fig, ax = plt.subplots(figsize=(5, 3.6))
    latest = {}
    for r in rows:
        if r.get("status") != "ok" or str(r.get("layer")) == "final":
            continue
        a, e = float(r["alpha_min"]), int(r["epoch"])
        if e >= latest.get(a, (-1, None))[0]:
            if e > latest.get(a, (-1, None))[0]:
                latest[a] = (e, [])
            latest[a][1].append((int(r["layer"]), float(r["eff_rank"])))
    for a in sorted(latest):
        ax.plot(*zip(*sorted(latest[a][1])), marker="o", label=f"alpha_min={a:g}")
    ax.set_xlabel("layer")
    ax.set_ylabel("effective rank (nats)")
    if latest:
        ax.legend(loc="best")
    _save(fig, path)


def plot_schedule(table: list, path, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(5, 3.6))
    ls = [r[0] for r in table]
    ax.plot(ls, [r[1] for r in table], marker="o", label="alpha_l")
    ax.plot(ls, [r[2] for r in table], marker="s", label="running product")
    ax.set_xlabel("layer")
    ax.set_ylim(0, 1.05)
    ax.legend(loc="best")
    if title:
        ax.set_title(title)
    _save(fig, path)
