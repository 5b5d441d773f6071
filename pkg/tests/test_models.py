import math

import numpy as np
import pytest

from deepshort import tensor as T
from deepshort.blocks import LinearSurrogate
from deepshort.models import (
    Classifier, DegenerateMaskError, MaskSpec, MaskedAutoencoder, ModelConfig, PatchGrid, cls_features,
    full_view, mae_loss, masked_view, patchify, random_mask, read_ppm, reconstruct_patches, tile_rows,
    unpatchify, write_ppm,
)
from deepshort.schedules import make_schedule
from deepshort.tensor import Tensor

TOY = dict(image_size=8, channels=3, patch_size=4, dim=8, depth=2, heads=2, mlp_ratio=2, mask_ratio=0.5)


def toy(**kw):
    return ModelConfig(**{**TOY, **kw})


# ---------------------------------------------------------------- patches and masks

def test_patch_shapes(rng):
    assert patchify(rng.random((32, 32, 3)), 4).patches.shape == (1, 64, 48)
    img = rng.random((8, 8, 1))
    np.testing.assert_array_equal(patchify(img, 8).patches[0, 0], img.reshape(-1))
    with pytest.raises(ValueError):
        patchify(rng.random((10, 10, 3)), 4)


def test_patch_roundtrip_bitwise(rng):
    img = rng.standard_normal((3, 16, 16, 3))
    assert unpatchify(patchify(img, 4)).tobytes() == img.tobytes()


def test_patch_order_is_row_major():
    img = np.zeros((1, 4, 4, 1))
    img[0, 0:2, 2:4] = 1.0  # top-right patch
    assert patchify(img, 2).patches[0, :, 0].tolist() == [0, 1, 0, 0]


def test_mask_counts_and_partition():
    m = random_mask(64, 0.75, np.random.default_rng(0), batch=3)
    assert m.masked.shape == (3, 48) and m.kept.shape == (3, 16)
    for b in range(3):
        assert sorted(np.concatenate([m.kept[b], m.masked[b]]).tolist()) == list(range(64))


def test_mask_deterministic_and_degenerate():
    a = random_mask(4, 0.5, np.random.default_rng(3))
    b = random_mask(4, 0.5, np.random.default_rng(3))
    assert np.array_equal(a.kept, b.kept)
    for ratio in (0.0, 0.01, 0.99, 1.0):
        with pytest.raises(DegenerateMaskError):
            random_mask(16, ratio, np.random.default_rng(0))


def test_mask_frequency_monte_carlo():
    m = random_mask(64, 0.75, np.random.default_rng(11), batch=10_000)
    freq = m.masked_indicator().mean(axis=0)
    assert np.all(np.abs(freq - 0.75) < 0.02)


def test_restore_index_restores_order():
    m = MaskSpec(np.array([[1, 3]]), np.array([[0, 2]]), 0.5)
    order = np.concatenate([m.kept, m.masked], axis=1)
    assert np.take_along_axis(order, m.restore_index(), axis=1).tolist() == [[0, 1, 2, 3]]


# ---------------------------------------------------------------- config

def test_config_validation():
    assert ModelConfig().decoder_depth == 3 and ModelConfig().tap_layers == (2, 4, 6)
    for bad in (dict(image_size=30), dict(depth=5), dict(mask_ratio=1.0), dict(dim=130), dict(alpha_min=0.0)):
        with pytest.raises(ValueError):
            ModelConfig(**bad)


# ---------------------------------------------------------------- encoder

@pytest.mark.parametrize("a", [0.6, 1.0])
def test_encoder_init_identity(a, rng):
    cfg = toy(depth=4, dim=16, alpha_min=a)
    model = MaskedAutoencoder(cfg, rng)
    c = rng.standard_normal(16).astype(np.float32)
    model.encoder.cls.data = c
    grid = patchify(rng.random((2, 8, 8, 3)), 4)
    enc = model.encoder(grid.patches, random_mask(4, 0.5, rng, batch=2))
    factor = math.prod(v * v for v in make_schedule("linear", 4, a).values)
    np.testing.assert_allclose(enc.prenorm.data[:, 0], np.tile(factor * c, (2, 1)), rtol=1e-6)
    np.testing.assert_allclose(enc.prenorm.data, factor * enc.x0.data, rtol=1e-6, atol=1e-7)


def test_encoder_shapes_single_kept_token(rng):
    cfg = toy(mask_ratio=0.75)
    enc = MaskedAutoencoder(cfg, rng).encoder(patchify(rng.random((1, 8, 8, 3)), 4).patches,
                                               random_mask(4, 0.75, rng))
    assert enc.tokens.shape == (1, 1, 8) and len(enc.taps) == 1 and enc.taps[0].shape == (1, 1, 8)


def test_encoder_matches_straight_line(f64, rng):
    cfg = toy(depth=4, zero_init=False)
    model = MaskedAutoencoder(cfg, rng)
    enc = model.encoder
    patches = patchify(rng.random((2, 8, 8, 3)), 4).patches
    mask = random_mask(4, 0.5, rng, batch=2)
    got = enc(patches, mask).cls.data
    rows = np.arange(2)[:, None]
    x = patches[rows, mask.kept] @ enc.patch_embed.weight.data + enc.patch_embed.bias.data + enc.pos[mask.kept]
    x = T.concat([Tensor(np.broadcast_to(enc.cls.data, (2, 1, 8)).copy()), Tensor(x)], axis=1)
    for l in range(1, 5):
        a = make_schedule("linear", 4, cfg.alpha_min)[l]
        x = T.add(T.scale(x, a), enc.stack.attn[l - 1](x))
        x = T.add(T.scale(x, a), enc.stack.mlp[l - 1](x))
    np.testing.assert_allclose(got, enc.norm(x).data[:, 0], rtol=1e-12)


# ---------------------------------------------------------------- decoder

def test_decoder_zero_path_gives_head_bias(rng):
    cfg = toy()
    model = MaskedAutoencoder(cfg, rng)
    for lin in [model.decoder_embed, *model.fuse]:
        lin.weight.data[...] = 0
        lin.bias.data[...] = 0
    model.mask_token.data[...] = 0
    model.dec_pos = np.zeros_like(model.dec_pos)
    model.head.bias.data = rng.standard_normal(cfg.patch_dim).astype(np.float32)
    pred, _ = model(patchify(rng.random((2, 8, 8, 3)), 4).patches, random_mask(4, 0.5, rng, batch=2))
    np.testing.assert_array_equal(pred.data, np.broadcast_to(model.head.bias.data, pred.shape))


def test_fusion_width_is_two_d(rng):
    cfg = toy(depth=2, skip_period=2)
    model = MaskedAutoencoder(cfg, rng)
    assert len(model.fuse) == 1 and model.fuse[0].weight.shape == (2 * cfg.dim, cfg.dim)
    with pytest.raises(ValueError):
        model.decode(Tensor(np.zeros((1, 2, 8), np.float32)), [], random_mask(4, 0.5, rng))


def test_skip_ablation_changes_output(rng):
    with_skips = MaskedAutoencoder(toy(zero_init=False), np.random.default_rng(5))
    without = MaskedAutoencoder(toy(zero_init=False, use_skips=False), np.random.default_rng(5))
    shared = {k: v for k, v in with_skips.state_dict().items() if not k.startswith("fuse")}
    without.load_state_dict(shared)
    patches = patchify(rng.random((2, 8, 8, 3)), 4).patches
    mask = random_mask(4, 0.5, rng, batch=2)
    a, _ = with_skips(patches, mask)
    b, _ = without(patches, mask)
    assert np.abs(a.data - b.data).max() > 1e-4


def test_zero_taps_equal_mask_token_only_path(f64, rng):
    cfg = toy(depth=4, zero_init=False)
    model = MaskedAutoencoder(cfg, rng)
    patches = patchify(rng.random((2, 8, 8, 3)), 4).patches
    mask = random_mask(4, 0.5, rng, batch=2)
    enc = model.encoder(patches, mask)
    zero = [Tensor(np.zeros(t.shape)) for t in enc.taps]
    got = model.decode(enc.tokens, zero, mask).data
    # by hand: each tap row is zero at kept positions and the mask token elsewhere
    x = model._fill(model.decoder_embed(enc.tokens), mask).data + model.dec_pos
    tap = np.where(mask.masked_indicator()[..., None], model.mask_token.data, 0.0)
    for j in range(cfg.decoder_depth):
        x = model.fuse[j](Tensor(np.concatenate([x, tap], axis=-1))).data
        x = x + model.decoder.attn[j](Tensor(x)).data
        x = x + model.decoder.mlp[j](Tensor(x)).data
    want = model.head(model.dec_norm(Tensor(x))).data
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_decoder_is_undecayed(rng):
    model = MaskedAutoencoder(toy(alpha_min=0.5), rng)
    assert all(s == 1.0 and b == 1.0 for s, b in model.decoder.shortcut_coefficients())


# ---------------------------------------------------------------- loss

def test_loss_zero_at_normalized_target(f64, rng):
    grid = patchify(rng.random((2, 8, 8, 3)), 4)
    mask = random_mask(4, 0.5, rng, batch=2)
    assert mae_loss(Tensor(grid.normalized()), grid, mask).item() == pytest.approx(0.0, abs=1e-20)


def test_loss_of_zero_prediction_is_one(f64, rng):
    grid = patchify(rng.standard_normal((64, 16, 16, 3)), 4)
    mask = random_mask(16, 0.75, rng, batch=64)
    loss = mae_loss(Tensor(np.zeros(grid.patches.shape)), grid, mask).item()
    assert abs(loss - 1.0) < 1e-3  # normalization makes each masked patch exactly unit variance (up to eps)


def test_loss_ignores_kept_patches(f64, rng):
    grid = patchify(rng.random((1, 8, 8, 3)), 4)
    mask = random_mask(4, 0.5, rng)
    pred = rng.standard_normal(grid.patches.shape)
    base = mae_loss(Tensor(pred), grid, mask).item()
    pred2 = pred.copy()
    pred2[0, mask.kept[0, 0]] += 5.0
    assert mae_loss(Tensor(pred2), grid, mask).item() == base
    p = Tensor(pred, requires_grad=True)
    T.backward(mae_loss(p, grid, mask))
    assert np.all(p.grad[0, mask.kept[0]] == 0) and np.any(p.grad[0, mask.masked[0]] != 0)


def test_constant_patch_is_finite(f64):
    grid = patchify(np.full((1, 8, 8, 3), 0.3), 4)
    mask = random_mask(4, 0.5, np.random.default_rng(0))
    assert np.isfinite(mae_loss(Tensor(np.zeros(grid.patches.shape)), grid, mask).item())


def test_full_mae_loss_gradcheck(f64, rng):
    """Full MAE objective on a 4-patch toy; the smallest square grid that leaves both sets nonempty."""
    cfg = toy(zero_init=False)
    model = MaskedAutoencoder(cfg, rng)
    grid = patchify(rng.random((1, 8, 8, 3)), 4)
    mask = random_mask(4, 0.5, rng)

    def f():
        pred, _ = model(grid.patches, mask)
        return mae_loss(pred, grid, mask)

    worst = 0.0
    for name, p in model.named_parameters():
        worst = max(worst, T.grad_check(f, p, max_coords=64)["max_rel_error"])
    assert worst < 1e-4


# ---------------------------------------------------------------- classifier and features

def test_classifier_zero_head_gives_ln2(f64, rng):
    model = Classifier(toy(num_classes=2), rng)
    model.head.weight.data[...] = 0
    logits = model(rng.random((3, 8, 8, 3)))
    assert T.cross_entropy(logits, np.array([0, 1, 1])).item() == pytest.approx(math.log(2), abs=1e-15)


def test_classifier_alpha_one_equals_baseline(rng):
    imgs = rng.random((2, 8, 8, 3))
    a = Classifier(toy(num_classes=3, alpha_min=1.0, zero_init=False), np.random.default_rng(1))(imgs)
    b = Classifier(toy(num_classes=3, alpha_min=1.0, zero_init=False, variant="baseline"), np.random.default_rng(1))(imgs)
    assert a.data.tobytes() == b.data.tobytes()


def test_classifier_needs_classes(rng):
    with pytest.raises(ValueError):
        Classifier(toy(num_classes=1), rng)


def test_cls_features_layers(rng):
    model = MaskedAutoencoder(toy(depth=4, zero_init=False), rng)
    feats = cls_features(model, rng.random((5, 8, 8, 3)), batch=2, layers=(1, 4))
    assert set(feats) == {"final", 1, 4} and feats["final"].shape == (5, 8) and feats[1].dtype == np.float64


# ---------------------------------------------------------------- images

def test_recon_with_constant_head_is_patch_mean(rng):
    model = MaskedAutoencoder(toy(), rng)
    imgs = rng.random((2, 8, 8, 3))
    # a zero head predicts its (zero) bias everywhere, which maps back to each patch mean
    model.head.weight.data[...] = 0
    rec = reconstruct_patches(model, imgs, random_mask(4, 0.5, rng, batch=2))
    mu, _ = patchify(imgs, 4).stats()
    np.testing.assert_allclose(patchify(rec, 4).patches, np.broadcast_to(mu, (2, 4, 48)), atol=1e-5)


def test_masked_view_and_ppm(tmp_path, rng):
    imgs = rng.random((2, 8, 8, 3))
    mask = MaskSpec(np.array([[0, 1], [2, 3]]), np.array([[2, 3], [0, 1]]), 0.5)
    view = masked_view(imgs, mask, 4)
    assert np.all(view[0, 4:, :] == 0.5) and np.array_equal(view[0, :4], imgs[0, :4])
    grid = tile_rows([imgs, view])
    write_ppm(tmp_path / "g.ppm", grid)
    back = read_ppm(tmp_path / "g.ppm")
    assert back.shape == grid.shape and np.abs(back - grid).max() <= 0.5 / 255 + 1e-12
    assert (tmp_path / "g.ppm").read_bytes().startswith(b"P6\n")
