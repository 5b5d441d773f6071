"""Checkpoint-level evaluation: rank dynamics, probe and KNN summaries, audit checks."""
from __future__ import annotations

import csv
import os

import numpy as np

from ..analysis import ProbeConfig, knn_classify, linear_probe
from ..blocks import ShortcutVariant
from ..models import cls_features
from .checkpoint import Checkpoint, load_checkpoint
from .train import build_model, feature_rank, fmt, load_data

RANK_HEADER = ["checkpoint", "epoch", "alpha_min", "layer", "eff_rank", "probe_acc", "knn_acc", "status"]


class AuditError(RuntimeError):
    pass


def _stack_key(ck: Checkpoint) -> str:
    return "stack" if ck.config.run.kind == "ddpm" else "encoder.stack"


def expected_skips(kind: str, depth: int, alpha_min: float, variant: str, target: str) -> list:
    from ..schedules import make_schedule
    sched = make_schedule(kind, depth, alpha_min)
    var = ShortcutVariant(variant, target)
    out = []
    for l in range(1, depth + 1):
        for blk in ("attention", "mlp"):
            out.append(float(var.coefficients(blk, sched[l])[0]))
    return out


def check_audit(ck: Checkpoint, alpha_min=None, schedule=None, variant=None, path="") -> None:
    """Refuse a checkpoint whose recorded shortcut factors disagree with the requested settings.

    Requested values default to the checkpoint's own config, so this also
    catches a config blob that does not match the weights it ships with.
    """
    sec = ck.config.diffusion if ck.config.run.kind == "ddpm" else ck.config.model
    a = sec.alpha_min if alpha_min is None else alpha_min
    kind = sec.schedule if schedule is None else schedule
    var = sec.variant if variant is None else variant
    recorded = ck.audit.get(_stack_key(ck))
    if recorded is None:
        raise AuditError(f"{path}: checkpoint carries no schedule audit")
    if kind == "learnable":
        if alpha_min is not None or schedule not in (None, "learnable"):
            raise AuditError(f"{path}: learnable schedule cannot be checked against fixed flags")
        return
    want = expected_skips(kind, sec.depth, a, var, sec.decay_target)
    if len(want) != len(recorded) or np.max(np.abs(np.subtract(want, recorded))) > 1e-12:
        raise AuditError(f"{path}: schedule audit {recorded} conflicts with requested "
                         f"schedule={kind} alpha_min={a} variant={var}")


class _DataCache:
    def __init__(self):
        self._cache = {}

    def get(self, cfg):
        key = (repr(cfg.data), cfg.model.image_size)
        if key not in self._cache:
            self._cache[key] = load_data(cfg)
        return self._cache[key]


def feature_metrics(model, train, evals, cfg, layers=(), probe: bool = True, knn: bool = True,
                    rank_samples: int | None = None) -> dict:
    """{layer: (rho, probe_acc, knn_acc)} for 'final' and each requested layer."""
    ftr = cls_features(model, train.images, layers=layers) if (probe or knn) else None
    fev = cls_features(model, evals.images, layers=layers)
    n = min(rank_samples or cfg.eval.rank_samples, len(evals))
    k = min(cfg.eval.knn_k, len(train))
    pc = ProbeConfig(k=k, epochs=cfg.eval.probe_epochs, batch_size=cfg.eval.probe_batch,
                     lr=cfg.eval.probe_lr, seed=cfg.run.seed)
    out = {}
    for key in ["final", *layers]:
        rho = feature_rank(fev[key][:n])
        p = linear_probe(ftr[key], train.labels, fev[key], evals.labels, pc, train.num_classes) if probe else float("nan")
        kn = knn_classify(ftr[key], train.labels, fev[key], k=k, query_y=evals.labels)[1] if knn else float("nan")
        out[key] = (rho, p, kn)
    return out


def rank_dynamics(paths, per_layer: bool = False, probe: bool = True, knn: bool = True,
                  alpha_min=None, log=None) -> list:
    """One row per checkpoint (per layer with ``per_layer``), sorted by (alpha_min, epoch).

    Unreadable checkpoints produce a row with status ``skipped: <reason>``.
    """
    log = log or (lambda m: None)
    cache = _DataCache()
    rows, good = [], []
    for p in paths:
        name = os.path.basename(p)
        try:
            ck = load_checkpoint(p)
            if ck.config.run.kind == "ddpm":
                raise ValueError("diffusion checkpoints have no CLS features")
            check_audit(ck, alpha_min=alpha_min, path=name)
        except (OSError, ValueError, AuditError) as exc:
            if isinstance(exc, AuditError):
                raise
            log(f"warning: skipping {name}: {exc}")
            rows.append({"checkpoint": name, "epoch": -1, "alpha_min": float("nan"), "layer": "final",
                         "status": f"skipped: {exc}"})
            continue
        good.append((ck.config.model.alpha_min, ck.epoch, name, ck))
    good.sort(key=lambda g: (g[0], g[1], g[2]))
    for a, epoch, name, ck in good:
        model = build_model(ck.config)
        model.load_state_dict(ck.params())
        train, evals = cache.get(ck.config)
        layers = tuple(range(1, ck.config.model.depth + 1)) if per_layer else ()
        res = feature_metrics(model, train, evals, ck.config, layers, probe, knn)
        for key, (rho, pa, ka) in res.items():
            rows.append({"checkpoint": name, "epoch": epoch, "alpha_min": a, "layer": key,
                         "eff_rank": rho, "probe_acc": pa, "knn_acc": ka, "status": "ok"})
        log(f"{name}: epoch {epoch} alpha_min {a} rho {res['final'][0]:.4f}")
    return rows


def write_rows(path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([r.get(h) if isinstance(r.get(h), str) else fmt(r.get(h)) for h in header])
