"""Command-line entry point: ``deepshort <subcommand> ...``.

Exit status is 0 on success, 1 for usage or configuration errors and 2 when
a run fails.  ``DEEPSHORT_THREADS`` caps the BLAS worker count.
"""
from __future__ import annotations

import argparse
import glob
import os
import sys

import numpy as np

from .. import tensor as T
from ..schedules import advise_alpha_min, effective_alpha, make_schedule
from .config import ConfigError, RunConfig, apply_override, load_config

SUBCOMMANDS = ("train-mae", "train-cls", "train-ddpm", "probe", "knn", "rank", "recon", "sample", "schedule")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _train_args(p):
    p.add_argument("--config", help="run configuration file ([section] key = value)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--alpha-min", type=float)
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config field (repeatable)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--quiet", action="store_true")


def _eval_args(p):
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--alpha-min", type=float, help="refuse the checkpoint unless it was trained with this value")
    p.add_argument("--layer", type=int, action="append", default=[], help="also evaluate this encoder layer")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="deepshort", description="Decayed identity shortcut experiments.")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)
    for name, help_ in (("train-mae", "train a masked autoencoder"),
                        ("train-cls", "train a supervised classifier"),
                        ("train-ddpm", "train a diffusion model")):
        _train_args(sub.add_parser(name, help=help_))
    _eval_args(sub.add_parser("probe", help="linear probe on frozen CLS features"))
    _eval_args(sub.add_parser("knn", help="K-nearest-neighbour accuracy on frozen CLS features"))
    p = sub.add_parser("rank", help="effective-rank dynamics over a checkpoint series")
    p.add_argument("--checkpoint-glob", required=True, action="append")
    p.add_argument("--out", required=True, help="CSV path; a PNG is written next to it")
    p.add_argument("--per-layer", action="store_true", help="also tap the CLS token after every layer")
    p.add_argument("--rank-only", action="store_true", help="skip probe and KNN columns")
    p.add_argument("--alpha-min", type=float)
    p = sub.add_parser("recon", help="reconstruction grid from an MAE checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="PPM path")
    p.add_argument("--baseline", help="MAE checkpoint whose reconstruction fills the last row")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p = sub.add_parser("sample", help="draw samples from a diffusion checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="PPM path")
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--label", type=int, help="class label for a class-conditional model")
    p = sub.add_parser("schedule", help="print an alpha schedule and the advisor recommendation")
    p.add_argument("--depth", type=int, required=True)
    p.add_argument("--alpha-min", type=float, required=True)
    p.add_argument("--kind", choices=("linear", "cosine"), default="linear")
    p.add_argument("--out", help="optional CSV path; a PNG is written next to it")
    return ap


# ---------------------------------------------------------------- subcommands

def _train(args, kind: str) -> int:
    from .train import train
    cfg = load_config(args.config) if args.config else RunConfig()
    cfg = cfg.replace("run", kind=kind)
    if args.seed is not None:
        cfg = cfg.replace("run", seed=args.seed)
    if args.epochs is not None:
        cfg = cfg.replace("run", epochs=args.epochs)
    for s in args.set:
        cfg = apply_override(cfg, s)
    if args.alpha_min is not None:
        cfg = apply_override(cfg, f"{'diffusion' if kind == 'ddpm' else 'model'}.alpha_min={args.alpha_min!r}")
    log = None if args.quiet else (lambda m: print(m, flush=True))
    res = train(cfg, args.out, resume=args.resume, log=log, figures=not args.no_figures)
    last = res.metrics[-1]
    print(f"done: {len(res.checkpoints)} checkpoint(s), final epoch {last['epoch']} in {args.out}")
    return 0


def _load_eval(args):
    from .checkpoint import load_checkpoint
    from .reports import check_audit
    from .train import build_model, load_data
    ck = load_checkpoint(args.checkpoint)
    if ck.config.run.kind == "ddpm":
        raise RuntimeError("probe/knn need an MAE or classifier checkpoint")
    check_audit(ck, alpha_min=args.alpha_min, path=args.checkpoint)
    model = build_model(ck.config)
    model.load_state_dict(ck.params())
    return ck, model, load_data(ck.config)


def _feature_eval(args, which: str) -> int:
    from .reports import feature_metrics, write_rows
    ck, model, (train, evals) = _load_eval(args)
    res = feature_metrics(model, train, evals, ck.config, tuple(args.layer),
                          probe=which == "probe", knn=which == "knn")
    col = f"{which}_acc"
    rows = [{"epoch": ck.epoch, "alpha_min": ck.config.model.alpha_min, "layer": str(k),
             col: v[1] if which == "probe" else v[2], "eff_rank": v[0]} for k, v in res.items()]
    os.makedirs(args.out, exist_ok=True)
    write_rows(os.path.join(args.out, f"{which}.csv"), ["epoch", "alpha_min", "layer", col, "eff_rank"], rows)
    print(f"{which}: epoch {ck.epoch} alpha_min {ck.config.model.alpha_min:g} accuracy {rows[0][col]:.4f} "
          f"(CLS features of unmasked images)")
    return 0


def _rank(args) -> int:
    from .figures import plot_rank_by_layer, plot_rank_dynamics
    from .reports import RANK_HEADER, rank_dynamics, write_rows
    paths = sorted({p for g in args.checkpoint_glob for p in glob.glob(g)})
    if not paths:
        raise RuntimeError(f"no checkpoints match {args.checkpoint_glob}")
    rows = rank_dynamics(paths, per_layer=args.per_layer, probe=not args.rank_only, knn=not args.rank_only,
                         alpha_min=args.alpha_min, log=lambda m: print(m, file=sys.stderr))
    d = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(d, exist_ok=True)
    write_rows(args.out, RANK_HEADER, rows)
    stem = os.path.splitext(args.out)[0]
    plot_rank_dynamics(rows, stem + ".png")
    if args.per_layer:
        plot_rank_by_layer(rows, stem + "_layers.png")
    print(f"rank: {sum(r['status'] == 'ok' for r in rows)} row(s) written to {args.out} "
          "(CLS features of unmasked images, rank in nats)")
    return 0


def _to_unit(img, data):
    """Map standardized images back to [0, 1] for display."""
    return np.clip(data.denormalize(img), 0.0, 1.0)


def _recon(args) -> int:
    from ..models import PatchGrid, masked_view, patchify, random_mask, reconstruct_patches, tile_rows, unpatchify, write_ppm
    from .checkpoint import load_checkpoint
    from .reports import check_audit
    from .train import build_model, load_data
    ck = load_checkpoint(args.checkpoint)
    if ck.config.run.kind != "mae":
        raise RuntimeError("recon needs an MAE checkpoint")
    check_audit(ck, path=args.checkpoint)
    cfg = ck.config.model
    model = build_model(ck.config)
    model.load_state_dict(ck.params())
    _, evals = load_data(ck.config)
    n = min(args.count, len(evals))
    imgs = evals.images[:n]
    mask = random_mask(cfg.num_patches, cfg.mask_ratio, T.make_rng(args.seed), batch=n)
    rec = reconstruct_patches(model, imgs, mask)
    if args.baseline:
        bck = load_checkpoint(args.baseline)
        if bck.config.run.kind != "mae" or bck.config.model.image_size != cfg.image_size \
                or bck.config.model.patch_size != cfg.patch_size:
            raise RuntimeError("baseline must be an MAE checkpoint with the same image and patch size")
        check_audit(bck, path=args.baseline)
        base = build_model(bck.config)
        base.load_state_dict(bck.params())
        last, label = reconstruct_patches(base, imgs, mask), "baseline prediction"
    else:
        # visible patches pasted back over the prediction
        g_rec, g_img = patchify(rec, cfg.patch_size), patchify(imgs, cfg.patch_size)
        pasted = g_rec.patches.copy()
        kept = mask.kept[..., None]
        np.put_along_axis(pasted, kept, np.take_along_axis(g_img.patches, kept, axis=1), axis=1)
        last = unpatchify(PatchGrid(pasted, g_rec.image_size, g_rec.patch_size, g_rec.channels))
        label = "prediction + visible"
    shown = [_to_unit(imgs, evals), masked_view(_to_unit(imgs, evals), mask, cfg.patch_size),
             _to_unit(rec, evals), _to_unit(last, evals)]
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    write_ppm(args.out, tile_rows(shown))
    print(f"recon: {n} image(s), rows = original / masked / prediction / {label} -> {args.out}")
    return 0


def _sample(args) -> int:
    from ..diffusion import NoiseSchedule, ddpm_sample
    from ..models import tile_rows, write_ppm
    from .checkpoint import load_checkpoint
    from .reports import check_audit
    from .train import build_model, load_data
    ck = load_checkpoint(args.checkpoint)
    if ck.config.run.kind != "ddpm":
        raise RuntimeError("sample needs a diffusion checkpoint")
    check_audit(ck, path=args.checkpoint)
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    dc = ck.config.diffusion
    model = build_model(ck.config)
    model.load_state_dict(ck.params())
    train, _ = load_data(ck.config)
    rng = T.make_rng(args.seed)
    labels = None
    if dc.conditioning == "class":
        labels = np.full(args.count, args.label) if args.label is not None else np.arange(args.count) % dc.num_classes
    x = ddpm_sample(model, args.count, rng, NoiseSchedule.from_config(dc), (dc.image_size, dc.image_size, dc.channels), labels)
    if ck.config.data.source == "toy-two-mode":
        shown = np.clip((x + 1.0) / 2.0, 0.0, 1.0)
    else:
        shown = _to_unit(x, train)
    cols = int(np.ceil(np.sqrt(args.count)))
    rows = [shown[i:i + cols] for i in range(0, args.count, cols)]
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    write_ppm(args.out, tile_rows(rows))
    np.savetxt(os.path.splitext(args.out)[0] + ".csv", x.reshape(args.count, -1), delimiter=",", fmt="%.8g")
    print(f"sample: {args.count} image(s) -> {args.out}")
    return 0


def _schedule(args) -> int:
    try:
        sched = make_schedule(args.kind, args.depth, args.alpha_min)
    except (ValueError, IndexError) as exc:
        raise UsageError(str(exc)) from None
    table = sched.table()
    lines = ["l,alpha_l,running_product,log10_running_product"]
    lines += [f"{l},{a:.6f},{p:.6e},{g:.4f}" for l, a, p, g in table]
    eff = effective_alpha(sched)
    adv = advise_alpha_min(args.depth, kind=args.kind)
    print("\n".join(lines))
    print(f"alpha_eff = {eff.value:.4e} (log10 {eff.log10_value:.3f})")
    note = "inside" if adv.feasible else "closest to"
    print(f"advisor: alpha_min = {adv.recommended:.2f} ({note} the target interval [1e-3, 1e-2))")
    if args.out:
        from .figures import plot_schedule
        os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            fh.write("\n".join(lines) + "\n")
        plot_schedule(table, os.path.splitext(args.out)[0] + ".png",
                      title=f"{args.kind}, depth {args.depth}, alpha_min {args.alpha_min:g}")
    return 0


def apply_thread_limit():
    raw = os.environ.get("DEEPSHORT_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"DEEPSHORT_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"DEEPSHORT_THREADS must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        limiter = apply_thread_limit()
        try:
            return _dispatch(args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"deepshort: configuration error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure of a valid request
        print(f"deepshort: error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    c = args.command
    if c.startswith("train-"):
        return _train(args, {"train-mae": "mae", "train-cls": "cls", "train-ddpm": "ddpm"}[c])
    if c in ("probe", "knn"):
        return _feature_eval(args, c)
    return {"rank": _rank, "recon": _recon, "sample": _sample, "schedule": _schedule}[c](args)


if __name__ == "__main__":
    sys.exit(main())
