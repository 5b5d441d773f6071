import dataclasses
import math
import os
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deepshort import tensor as T
from deepshort.harness.checkpoint import load_checkpoint, save_checkpoint
from deepshort.harness.config import ConfigError, RunConfig, apply_override, parse_config, serialize
from deepshort.harness.data import (
    CIFAR_RECORD, DatasetSpec, load_cifar10_binary, load_splits, read_cifar10_file, synth_shapes, two_mode,
    two_mode_assign,
)
from deepshort.harness.optim import AdamW, default_decay_filter, lr_at, scaled_lr
from deepshort.harness.train import build_model, train
from deepshort.tensor import Tensor

TINY = """
[run]
epochs = 2
batch_size = 16
eval_every = 1
[model]
image_size = 8
patch_size = 4
dim = 16
depth = 2
heads = 2
mlp_ratio = 2
mask_ratio = 0.5
[data]
n_train = 32
n_eval = 24
[eval]
probe_epochs = 3
knn_k = 5
rank_samples = 24
[optim]
lr = 0.002
"""


def tiny(**sections):
    cfg = parse_config(TINY)
    for name, changes in sections.items():
        cfg = cfg.replace(name, **changes)
    return cfg


# ---------------------------------------------------------------- config

def test_minimal_config_defaults():
    cfg = parse_config("[model]\nalpha_min = 0.6\n")
    assert cfg == RunConfig()
    assert parse_config("") == RunConfig()


def test_config_errors():
    with pytest.raises(ConfigError, match=r"\(0, 1\]"):
        parse_config("[model]\nalpha_min = 1.5\n")
    with pytest.raises(ConfigError, match=":3: unknown key 'alpah_min'"):
        parse_config("# c\n[model]\nalpah_min = 0.6\n")
    with pytest.raises(ConfigError, match=":1: unknown section"):
        parse_config("[nope]\n")
    with pytest.raises(ConfigError, match=":2:"):
        parse_config("[run]\nepochs = many\n")
    with pytest.raises(ConfigError, match=":1: key outside"):
        parse_config("epochs = 3\n")
    with pytest.raises(ConfigError, match="expected 'key = value'"):
        parse_config("[run]\nepochs\n")


def test_config_roundtrip_canonical():
    text = serialize(tiny())
    assert serialize(parse_config(text)) == text
    assert parse_config(text) == tiny()


@settings(max_examples=30, deadline=None)
@given(a=st.floats(0.01, 1.0), lr=st.floats(0, 1), seed=st.integers(0, 2**31), skips=st.booleans(),
       root=st.text(alphabet="abcXYZ/_-.", max_size=12))
def test_config_roundtrip_property(a, lr, seed, skips, root):
    cfg = RunConfig().replace("model", alpha_min=a, use_skips=skips).replace("optim", lr=lr)
    cfg = cfg.replace("run", seed=seed).replace("data", root=root)
    assert parse_config(serialize(cfg)) == cfg


def test_overrides():
    cfg = apply_override(RunConfig(), "model.use_skips=false")
    assert cfg.model.use_skips is False
    for bad in ("model.nope=1", "nope.x=1", "model", "model.alpha_min=2"):
        with pytest.raises(ConfigError):
            apply_override(RunConfig(), bad)


def test_effective_lr_scaling():
    assert RunConfig().effective_lr() == pytest.approx(6e-4 * 64 / 1024)
    assert scaled_lr(1024) == 6e-4
    assert tiny().effective_lr() == 0.002


# ---------------------------------------------------------------- data

def test_synth_determinism_and_shapes():
    a, b = synth_shapes(1, seed=3), synth_shapes(1, seed=3)
    assert a.images.tobytes() == b.images.tobytes()
    assert synth_shapes(1, seed=4).images.tobytes() != a.images.tobytes()
    small = synth_shapes(6, classes=2, size=8)
    assert small.images.shape == (6, 8, 8, 3) and set(small.labels) == {0, 1}
    assert small.images.min() >= 0 and small.images.max() <= 1
    with pytest.raises(ValueError):
        synth_shapes(1, classes=11)


def test_synth_balance():
    counts = np.bincount(synth_shapes(1000, classes=10, size=8).labels, minlength=10)
    assert np.all(np.abs(counts / 1000 - 0.1) <= 0.005)


def test_synth_pixel_determinism_is_per_index():
    whole = synth_shapes(5, seed=1)
    tail = synth_shapes(2, seed=1, start=3)
    assert whole.images[3:].tobytes() == tail.images.tobytes()


def _cifar_bytes(labels, seed=0):
    r = np.random.default_rng(seed)
    recs = []
    for lab in labels:
        recs.append(bytes([lab]) + r.integers(0, 256, 3072, dtype=np.uint8).tobytes())
    return b"".join(recs)


def test_cifar_crafted_records(tmp_path):
    raw = _cifar_bytes([7, 2])
    (tmp_path / "test_batch.bin").write_bytes(raw)
    imgs, labels = read_cifar10_file(tmp_path / "test_batch.bin")
    assert labels.tolist() == [7, 2]
    rec1 = np.frombuffer(raw[CIFAR_RECORD:], dtype=np.uint8)
    # R plane then G then B, each row-major 32x32
    assert imgs[1, 0, 0].tolist() == [rec1[1], rec1[1 + 1024], rec1[1 + 2048]]
    assert imgs[1, 31, 31].tolist() == [rec1[1024], rec1[2048], rec1[3072]]
    data = load_cifar10_binary(tmp_path, "test", strict=False)
    assert data.images.shape == (2, 32, 32, 3) and data.images.max() <= 1.0
    with pytest.raises(ValueError, match="expected 10000"):
        load_cifar10_binary(tmp_path, "test")


def test_cifar_errors(tmp_path):
    (tmp_path / "empty.bin").write_bytes(b"")
    with pytest.raises(ValueError):
        read_cifar10_file(tmp_path / "empty.bin")
    (tmp_path / "trunc.bin").write_bytes(_cifar_bytes([1])[:-5])
    with pytest.raises(ValueError):
        read_cifar10_file(tmp_path / "trunc.bin")
    with pytest.raises(FileNotFoundError):
        load_cifar10_binary(tmp_path / "missing", "train")


def test_splits_standardized_with_train_stats():
    tr, ev = load_splits(DatasetSpec(n_train=64, n_eval=32), image_size=8)
    np.testing.assert_allclose(tr.images.mean(axis=(0, 1, 2)), 0, atol=1e-5)
    np.testing.assert_allclose(tr.images.std(axis=(0, 1, 2)), 1, atol=1e-4)
    np.testing.assert_allclose(ev.mean, tr.mean)
    with pytest.raises(ValueError):
        load_splits(DatasetSpec(source="cifar10-binary"), image_size=16)


def test_two_mode_toy():
    d = two_mode(200, seed=0)
    assert d.images.shape == (200, 2, 2, 1)
    assert np.array_equal(two_mode_assign(d.images), d.labels)
    assert 0.4 < d.labels.mean() < 0.6


# ---------------------------------------------------------------- optimizer

def test_lr_curve():
    assert lr_at(0, 100, 1.0, 10) == 0.0
    assert lr_at(5, 100, 1.0, 10) == 0.5
    assert lr_at(10, 100, 1.0, 10) == 1.0
    assert lr_at(55, 100, 1.0, 10) == pytest.approx(0.5)
    assert lr_at(100, 100, 1.0, 10) == pytest.approx(0.0)
    assert lr_at(0, 10, 2.0, 0) == 2.0


def test_adamw_matches_reference(f64):
    w = Tensor(np.array([[1.0, -2.0]]), requires_grad=True)
    b = Tensor(np.array([0.5]), requires_grad=True)
    opt = AdamW([("w", w), ("b", b)], lr=0.1, betas=(0.9, 0.99), eps=1e-8, weight_decay=0.1)
    g = np.array([[0.3, -0.4]])
    w.grad, b.grad = g.copy(), np.array([0.2])
    opt.step()
    # first step: bias-corrected update is lr * sign(g) (up to eps); decay only on the matrix
    want_w = np.array([[1.0, -2.0]]) * (1 - 0.1 * 0.1) - 0.1 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(w.data, want_w, rtol=1e-12)
    np.testing.assert_allclose(b.data, [0.5 - 0.1 * 0.2 / (0.2 + 1e-8)], rtol=1e-12)


def test_decay_filter():
    z = lambda *s: Tensor(np.zeros(s))
    assert default_decay_filter("a.weight", z(2, 2))
    assert not default_decay_filter("a.bias", z(2))
    assert default_decay_filter("encoder.stack.alphas", z(2, 3))
    assert not default_decay_filter("label_embed", z(3, 4))


def test_optimizer_state_roundtrip(rng):
    w = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    opt = AdamW([("w", w)])
    w.grad = np.ones((2, 3), dtype=np.float32)
    opt.step()
    other = AdamW([("w", w)])
    other.load_state(opt.state())
    assert other.t == 1 and np.array_equal(other.m[0], opt.m[0])


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_roundtrip(tmp_path):
    cfg = tiny()
    model = build_model(cfg)
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    audit = {"encoder.stack": [0.8, 0.8, 0.6, 0.6]}
    save_checkpoint(tmp_path / "c.dsck", cfg, 3, 12, tensors, audit)
    ck = load_checkpoint(tmp_path / "c.dsck")
    assert ck.config == cfg and (ck.epoch, ck.step) == (3, 12) and ck.audit == audit
    assert list(ck.params()) == list(model.state_dict())
    assert all(np.array_equal(ck.params()[k], v) for k, v in model.state_dict().items())
    raw = (tmp_path / "c.dsck").read_bytes()
    assert raw[:4] == b"DSCK" and struct.unpack_from("<I", raw, 4)[0] == 1
    (tmp_path / "bad.dsck").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.dsck")


# ---------------------------------------------------------------- training

def test_zero_epochs_emits_initial_checkpoint_only(tmp_path):
    res = train(tiny(run=dict(epochs=0)), str(tmp_path), figures=False)
    assert sorted(os.listdir(tmp_path)) == ["ckpt_0000.dsck", "metrics.csv"]
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == "epoch,step,loss,eff_rank,probe_acc,knn_acc,alpha_min,seconds"
    assert len(lines) == 2 and lines[1].startswith("0,0,nan,")
    assert res.checkpoints == [str(tmp_path / "ckpt_0000.dsck")]


def test_training_is_byte_deterministic(tmp_path):
    cfg = tiny()
    a = train(cfg, str(tmp_path / "a"), figures=False)
    b = train(cfg, str(tmp_path / "b"), figures=False)
    for name in ("metrics.csv", "ckpt_0000.dsck", "ckpt_0002.dsck"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = a.metrics
    assert [int(r["epoch"]) for r in rows] == [0, 1, 2] and [r["step"] for r in rows] == [0, 2, 4]
    assert all(math.isfinite(r["loss"]) for r in rows[1:])


def test_resume_continues_identically(tmp_path):
    cfg = tiny(run=dict(epochs=3, checkpoint_every=1))
    train(cfg, str(tmp_path / "full"), figures=False)
    part = tmp_path / "part"
    train(cfg.replace("run", epochs=3), str(part), figures=False)
    # restart from the epoch-1 checkpoint into the same directory
    for f in ("ckpt_0002.dsck", "ckpt_0003.dsck"):
        os.remove(part / f)
    train(cfg, str(part), resume=str(part / "ckpt_0001.dsck"), figures=False)
    for name in ("metrics.csv", "ckpt_0002.dsck", "ckpt_0003.dsck"):
        assert (tmp_path / "full" / name).read_bytes() == (part / name).read_bytes()


def test_classifier_and_ddpm_runs(tmp_path):
    cls = tiny(run=dict(kind="cls", epochs=1)).replace("model", num_classes=10)
    res = train(cls, str(tmp_path / "cls"), figures=False)
    assert 0.0 <= res.metrics[-1]["probe_acc"] <= 1.0
    dd = tiny(run=dict(kind="ddpm", epochs=1)).replace(
        "diffusion", image_size=2, channels=1, patch_size=1, dim=8, depth=2, heads=2, mlp_ratio=2, timesteps=20)
    dd = dd.replace("data", source="toy-two-mode", n_train=32, n_eval=32).replace("eval", sample_count=16)
    res = train(dd, str(tmp_path / "dd"), figures=False)
    q = (tmp_path / "dd" / "quality.csv").read_text().splitlines()
    assert q[0] == "epoch,mmd,mode0_frac,samples" and len(q) == 2
    assert res.quality[0]["samples"] == 16


def test_classifier_requires_class_count(tmp_path):
    from deepshort.harness.train import TrainingError
    with pytest.raises(TrainingError):
        train(tiny(run=dict(kind="cls")), str(tmp_path), figures=False)


def test_divergence_names_alpha_and_layer(tmp_path, monkeypatch):
    from deepshort.blocks import NormExplosionError
    from deepshort.harness import train as tr
    from deepshort.harness.train import TrainingError

    def explode(*a, **k):
        raise NormExplosionError("activation RMS 1e5 exceeds 1e4 at layer 2", 2)
    monkeypatch.setattr(tr, "mae_step_loss", explode)
    with pytest.raises(TrainingError, match=r"alpha_min=0\.6, layer=2"):
        train(tiny(), str(tmp_path), figures=False)


# ---------------------------------------------------------------- command line

from deepshort.harness.cli import main  # noqa: E402
from deepshort.harness.reports import AuditError, check_audit, rank_dynamics  # noqa: E402


def test_cli_usage_errors(capsys):
    assert main([]) == 1
    assert main(["no-such-command"]) == 1
    assert main(["schedule", "--depth", "12", "--alpha-min", "0.6", "--bogus"]) == 1
    assert main(["schedule", "--depth", "12", "--alpha-min", "1.5"]) == 1


def test_cli_schedule_table(capsys):
    assert main(["schedule", "--depth", "12", "--alpha-min", "0.6"]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert any(line.startswith("alpha_eff = ") and abs(float(line.split("=")[1].split()[0]) - 4.678e-2) < 1e-5
               for line in out)
    assert out[0].startswith("l,")


def test_cli_runtime_error_exits_2(tmp_path, capsys):
    assert main(["probe", "--checkpoint", str(tmp_path / "missing.dsck"), "--out", str(tmp_path)]) == 2
    assert "missing.dsck" in capsys.readouterr().err


def test_cli_bad_config_exits_1(tmp_path):
    (tmp_path / "bad.cfg").write_text("[model]\nalpha_min = 1.5\n")
    assert main(["train-mae", "--config", str(tmp_path / "bad.cfg"), "--out", str(tmp_path / "o")]) == 1


def test_audit_refuses_mismatched_alpha(tmp_path):
    train(tiny(run=dict(epochs=0)), str(tmp_path), figures=False)
    ck = load_checkpoint(tmp_path / "ckpt_0000.dsck")
    check_audit(ck, alpha_min=0.6)
    with pytest.raises(AuditError):
        check_audit(ck, alpha_min=0.8)
    assert main(["knn", "--checkpoint", str(tmp_path / "ckpt_0000.dsck"), "--out", str(tmp_path),
                 "--alpha-min", "0.8"]) == 2


def test_rank_dynamics_rows(tmp_path):
    train(tiny(run=dict(epochs=1)), str(tmp_path), figures=False)
    ck = str(tmp_path / "ckpt_0001.dsck")
    (tmp_path / "junk.dsck").write_bytes(b"not a checkpoint")
    rows = rank_dynamics([ck, ck, str(tmp_path / "junk.dsck"), str(tmp_path / "gone.dsck")])
    ok = [r for r in rows if r["status"] == "ok"]
    assert len(ok) == 2 and ok[0] == ok[1] and math.isfinite(ok[0]["eff_rank"])
    assert sum(r["status"].startswith("skipped") for r in rows) == 2


def test_learnable_alphas_reloaded(tmp_path):
    cfg = tiny(run=dict(epochs=1)).replace("model", schedule="learnable")
    res = train(cfg, str(tmp_path), figures=False)
    ck = load_checkpoint(tmp_path / "ckpt_0001.dsck")
    stored = ck.params()["encoder.stack.alphas"]
    assert stored.shape == (2, 2)
    assert np.array_equal(stored, res.model.encoder.stack.alphas.data)
    assert not np.all(stored == 1.0)


def test_recon_with_baseline_rows(tmp_path):
    from deepshort.models import read_ppm
    a, b = tmp_path / "a", tmp_path / "b"
    train(tiny(run=dict(epochs=1)), str(a), figures=False)
    train(tiny(run=dict(epochs=1)).replace("model", alpha_min=1.0), str(b), figures=False)
    args = ["recon", "--checkpoint", str(a / "ckpt_0001.dsck"), "--count", "3"]
    assert main(args + ["--out", str(tmp_path / "r1.ppm")]) == 0
    assert main(args + ["--out", str(tmp_path / "r2.ppm"), "--baseline", str(b / "ckpt_0001.dsck")]) == 0
    r1, r2 = read_ppm(tmp_path / "r1.ppm"), read_ppm(tmp_path / "r2.ppm")
    assert r1.shape == r2.shape == (4 * 8 + 5, 3 * 8 + 4, 3)
    # the first three rows come from the same images, mask and model
    assert np.array_equal(r1[: 3 * 9 + 1], r2[: 3 * 9 + 1]) and not np.array_equal(r1, r2)
