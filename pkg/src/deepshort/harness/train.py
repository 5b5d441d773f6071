"""Training loops for the MAE, the classifier and the diffusion model."""
from __future__ import annotations

import csv
import io
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .. import tensor as T
from ..analysis import knn_classify, linear_probe, ProbeConfig, rank_report
from ..blocks import NormExplosionError
from ..diffusion import DenoiserBackbone, NoiseSchedule, ddpm_sample, eps_loss, rbf_mmd
from ..models import Classifier, MaskedAutoencoder, cls_features, mae_step_loss
from .checkpoint import load_checkpoint, save_checkpoint, schedule_audit
from .config import RunConfig
from .data import LabeledImages, load_splits, two_mode_assign
from .optim import AdamW, lr_at

METRICS_HEADER = ["epoch", "step", "loss", "eff_rank", "probe_acc", "knn_acc", "alpha_min", "seconds"]
QUALITY_HEADER = ["epoch", "mmd", "mode0_frac", "samples"]


class TrainingError(RuntimeError):
    pass


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, epoch])))


def fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    return "nan" if math.isnan(x) else format(x, ".8g")


def build_model(cfg: RunConfig):
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.run.seed, 7919])))
    kind = cfg.run.kind
    if kind == "mae":
        return MaskedAutoencoder(cfg.model, rng)
    if kind == "cls":
        return Classifier(cfg.model, rng)
    return DenoiserBackbone(cfg.diffusion, rng)


def image_size(cfg: RunConfig) -> int:
    return cfg.diffusion.image_size if cfg.run.kind == "ddpm" else cfg.model.image_size


def load_data(cfg: RunConfig):
    tr, ev = load_splits(cfg.data, image_size(cfg))
    if cfg.run.kind == "cls":
        nc = cfg.model.num_classes
        if nc < 2 or nc < tr.num_classes:
            raise TrainingError(f"[model] num_classes={nc} must cover the {tr.num_classes} dataset classes")
    return tr, ev


def model_from_checkpoint(path):
    ck = load_checkpoint(path)
    model = build_model(ck.config)
    model.load_state_dict(ck.params())
    return model, ck


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalResult:
    eff_rank: float = float("nan")
    probe_acc: float = float("nan")
    knn_acc: float = float("nan")
    extra: dict = field(default_factory=dict)


def evaluate_features(model, train: LabeledImages, evals: LabeledImages, cfg: RunConfig) -> EvalResult:
    """Effective rank, KNN and linear-probe accuracy of unmasked CLS features."""
    ftr = cls_features(model, train.images)["final"]
    fev = cls_features(model, evals.images)["final"]
    n = min(cfg.eval.rank_samples, len(fev))
    rho = feature_rank(fev[:n])
    k = min(cfg.eval.knn_k, len(ftr))
    _, knn = knn_classify(ftr, train.labels, fev, k=k, query_y=evals.labels)
    pc = ProbeConfig(k=k, epochs=cfg.eval.probe_epochs, batch_size=cfg.eval.probe_batch,
                     lr=cfg.eval.probe_lr, seed=cfg.run.seed)
    probe = linear_probe(ftr, train.labels, fev, evals.labels, pc, num_classes=train.num_classes)
    return EvalResult(rho, probe, knn)


def feature_rank(F) -> float:
    """Effective rank of ``F``; NaN when the features carry no variance (e.g. at zero init)."""
    try:
        return rank_report(F).rho
    except ValueError:
        return float("nan")


def classifier_accuracy(model: Classifier, data: LabeledImages, batch: int = 256) -> float:
    correct = 0
    with T.no_grad():
        for i in range(0, len(data), batch):
            logits = model(data.images[i:i + batch]).data
            correct += int((logits.argmax(axis=1) == data.labels[i:i + batch]).sum())
    return correct / len(data)


def evaluate(model, train, evals, cfg: RunConfig) -> EvalResult:
    kind = cfg.run.kind
    if kind == "mae":
        return evaluate_features(model, train, evals, cfg)
    if kind == "cls":
        res = evaluate_features(model, train, evals, cfg)
        # the classifier's own head replaces the probe
        res.extra["linear_probe_acc"] = res.probe_acc
        res.probe_acc = classifier_accuracy(model, evals)
        return res
    return EvalResult()


def sample_quality(model: DenoiserBackbone, evals: LabeledImages, cfg: RunConfig, epoch: int) -> dict:
    sched = NoiseSchedule.from_config(cfg.diffusion)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.run.seed, 104729, epoch])))
    n = cfg.eval.sample_count
    dc = cfg.diffusion
    labels = rng.integers(0, dc.num_classes, size=n) if dc.conditioning == "class" else None
    samples = ddpm_sample(model, n, rng, sched, (dc.image_size, dc.image_size, dc.channels), labels)
    ref = evals.images.reshape(len(evals), -1).astype(np.float64)
    mmd = rbf_mmd(samples, ref[: max(n, 2)], bandwidth=median_distance(ref))
    out = {"mmd": mmd, "samples": samples}
    if cfg.data.source == "toy-two-mode":
        out["mode0_frac"] = float(np.mean(two_mode_assign(samples) == 0))
    return out


def median_distance(x) -> float:
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    sq = (x * x).sum(1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * x @ x.T, 0.0)
    iu = np.triu_indices(len(x), 1)
    med = float(np.median(np.sqrt(d2[iu])))
    return med if med > 0 else 1.0


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    out_dir: str
    metrics: list
    checkpoints: list
    quality: list
    model: object = None


def _step_loss(model, cfg: RunConfig, batch_imgs, batch_labels, rng, sched):
    kind = cfg.run.kind
    if kind == "mae":
        return mae_step_loss(model, batch_imgs, rng)
    if kind == "cls":
        return T.cross_entropy(model(batch_imgs), batch_labels)
    labels = batch_labels if cfg.diffusion.conditioning == "class" else None
    return eps_loss(batch_imgs, model, rng, sched, labels)


def _write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(r.get(h)) if h != "epoch" and h != "step" else str(r[h]) for h in header])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


def train(cfg: RunConfig, out_dir: str, resume: str | None = None, log=None, figures: bool = True) -> TrainResult:
    """Run one experiment; writes ``metrics.csv``, checkpoints and figures under ``out_dir``.

    Each epoch draws its data order, masks and noise from a generator keyed
    by ``(seed, epoch)``, so resuming from an epoch checkpoint continues the
    exact same trajectory.
    """
    os.makedirs(out_dir, exist_ok=True)
    log = log or (lambda msg: None)
    train_set, eval_set = load_data(cfg)
    model = build_model(cfg)
    named = list(model.named_parameters())
    opt = AdamW(named, lr=cfg.effective_lr(), betas=(cfg.optim.beta1, cfg.optim.beta2),
                weight_decay=cfg.optim.weight_decay)
    sched = NoiseSchedule.from_config(cfg.diffusion) if cfg.run.kind == "ddpm" else None
    E = cfg.run.epochs
    bs = min(cfg.run.batch_size, len(train_set))
    steps_per_epoch = math.ceil(len(train_set) / bs)
    total = E * steps_per_epoch
    warmup = int(round(cfg.optim.warmup_frac * total))
    peak = cfg.effective_lr()
    alpha_min = cfg.alpha_min

    metrics, quality, ckpts = [], [], []
    start_epoch, step = 0, 0
    t0 = time.perf_counter()
    if resume:
        ck = load_checkpoint(resume)
        model.load_state_dict(ck.params())
        opt.load_state({k: v for k, v in ck.tensors.items() if k.startswith("optim.")})
        start_epoch, step = ck.epoch, ck.step
        mpath = os.path.join(os.path.dirname(resume), "metrics.csv")
        if os.path.exists(mpath):
            metrics = [r for r in read_metrics(mpath) if int(r["epoch"]) <= start_epoch]
        qpath = os.path.join(os.path.dirname(resume), "quality.csv")
        if os.path.exists(qpath):
            quality = [r for r in read_metrics(qpath) if int(r["epoch"]) <= start_epoch]

    def seconds():
        return time.perf_counter() - t0 if cfg.run.record_time else 0.0

    def checkpoint(epoch):
        path = os.path.join(out_dir, f"ckpt_{epoch:04d}.dsck")
        tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
        tensors.update(opt.state())
        save_checkpoint(path, cfg, epoch, step, tensors, schedule_audit(model))
        ckpts.append(path)

    def eval_row(epoch, loss):
        row = {"epoch": epoch, "step": step, "loss": loss, "alpha_min": alpha_min}
        ev = cfg.run.eval_every
        if ev and (epoch % ev == 0 or epoch == E) or (epoch == E):
            res = evaluate(model, train_set, eval_set, cfg)
            row.update(eff_rank=res.eff_rank, probe_acc=res.probe_acc, knn_acc=res.knn_acc)
            if cfg.run.kind == "ddpm" and (epoch == E or (cfg.eval.sample_every and epoch % cfg.eval.sample_every == 0)):
                q = sample_quality(model, eval_set, cfg, epoch)
                quality.append({"epoch": epoch, "mmd": q["mmd"], "mode0_frac": q.get("mode0_frac"),
                                "samples": cfg.eval.sample_count})
        else:
            row.update(eff_rank=float("nan"), probe_acc=float("nan"), knn_acc=float("nan"))
        row["seconds"] = seconds()
        return row

    if start_epoch == 0 and not resume:
        metrics.append(eval_row(0, float("nan")))
        checkpoint(0)

    for epoch in range(start_epoch + 1, E + 1):
        rng = epoch_rng(cfg.run.seed, epoch)
        order = rng.permutation(len(train_set))
        losses = []
        for s in range(0, len(order), bs):
            idx = order[s:s + bs]
            try:
                loss = _step_loss(model, cfg, train_set.images[idx], train_set.labels[idx], rng, sched)
                T.backward(loss)
            except (NormExplosionError, T.NonFiniteError) as exc:
                layer = getattr(exc, "layer", None)
                raise TrainingError(f"training diverged at epoch {epoch} (alpha_min={alpha_min}, layer={layer}): {exc}") from exc
            opt.step(lr_at(step, total, peak, warmup))
            step += 1
            losses.append(loss.item())
        row = eval_row(epoch, float(np.mean(losses)))
        metrics.append(row)
        log(f"epoch {epoch}/{E} loss {row['loss']:.5f} rank {row['eff_rank']:.4f} "
            f"probe {row['probe_acc']:.4f} knn {row['knn_acc']:.4f}")
        if epoch == E or (cfg.run.checkpoint_every and epoch % cfg.run.checkpoint_every == 0):
            checkpoint(epoch)

    _write_csv(os.path.join(out_dir, "metrics.csv"), METRICS_HEADER, metrics)
    if cfg.run.kind == "ddpm" and quality:
        _write_csv(os.path.join(out_dir, "quality.csv"), QUALITY_HEADER, quality)
    if figures:
        from .figures import plot_training
        plot_training(metrics, os.path.join(out_dir, "metrics.png"), title=f"{cfg.run.kind} alpha_min={alpha_min}")
    return TrainResult(out_dir, metrics, ckpts, quality, model)


def read_metrics(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
