"""Tests for the small 3D U-Net segmenter."""

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from vaemmd import autodiff as ad
from vaemmd import volume
from vaemmd.autodiff import Tensor
from vaemmd.model import ConfigError
from vaemmd.segmenter import (
    SegError,
    UNet,
    UNetConfig,
    load_segmenter,
    predict_mask,
    seg_loss,
    seg_loss_parts,
    soft_dice_score,
    train_segmenter,
    unet_forward,
    write_prediction,
)

from test_model import _fd_param_check

MINI = UNetConfig(levels=2, base_channels=2, input_size=8, seed=3, epochs=1)


def blob_case(side=8, seed=0):
    """Smooth volume with a bright ball; mask = the ball."""
    g = np.random.default_rng(seed)
    vox = gaussian_filter(g.standard_normal((side,) * 3), 1.5).astype(np.float32)
    zz, yy, xx = np.mgrid[:side, :side, :side]
    c = side // 2
    ball = (zz - c) ** 2 + (yy - c) ** 2 + (xx - c) ** 2 <= (side // 4) ** 2
    vox = np.tanh(vox + 2.0 * ball)
    return vox.astype(np.float32), ball.astype(np.uint8)


# ----------------------------------------------------------------------
# forward
# ----------------------------------------------------------------------

def test_output_shape_matches_input():
    model = UNet(MINI)
    x = Tensor(np.zeros((2, 1, 8, 8, 8), dtype=np.float32))
    logits = unet_forward(model, x)
    assert logits.shape == (2, 2, 8, 8, 8)


def test_softmax_over_channels_sums_to_one():
    model = UNet(MINI)
    g = np.random.default_rng(1)
    logits = unet_forward(model, Tensor(g.standard_normal((1, 1, 8, 8, 8)).astype(np.float32)))
    probs = ad.softmax(logits, axis=1)
    np.testing.assert_allclose(probs.data.sum(axis=1), 1.0, atol=1e-6)


def test_config_rejects_indivisible_size():
    with pytest.raises(ConfigError):
        UNetConfig(levels=3, input_size=12).validate()


def test_unet_gradients_match_finite_differences():
    model = UNet(MINI, dtype=np.float64)
    g = np.random.default_rng(2)
    x = Tensor(np.tanh(g.standard_normal((1, 1, 8, 8, 8))))
    _, mask = blob_case(seed=5)

    def loss_fn():
        return seg_loss(model.forward(x), mask[None, ...])

    # small h keeps the central difference away from ReLU kinks
    _fd_param_check(
        model, loss_fn,
        ["enc0.conv1.w", "down0.w", "bottom.conv1.w", "up1.w", "dec0.conv2.w", "head.w", "head.b"],
        h=1e-6,
    )


# ----------------------------------------------------------------------
# loss
# ----------------------------------------------------------------------

def test_strong_correct_logits_near_zero_loss():
    _, mask = blob_case()
    m = mask[None, ...].astype(np.float64)
    logits = np.stack([(1 - m) * 20.0, m * 20.0 - (1 - m) * 20.0], axis=1)
    # channel 1 logit is +20 on foreground, -20 elsewhere
    logits[:, 0] = -logits[:, 1]
    assert seg_loss(Tensor(logits), mask[None, ...]).item() < 0.05


def test_uniform_logits_half_foreground_ce_is_ln2():
    mask = np.zeros((1, 4, 4, 4), dtype=np.uint8)
    mask[0, :2] = 1  # exactly half the voxels foreground
    logits = np.zeros((1, 2, 4, 4, 4))
    _, _, ce = seg_loss_parts(Tensor(logits), mask)
    assert abs(ce.item() - np.log(2.0)) < 1e-6


def test_nonbinary_mask_rejected():
    logits = np.zeros((1, 2, 4, 4, 4))
    mask = np.full((1, 4, 4, 4), 0.5)
    with pytest.raises(SegError):
        seg_loss(Tensor(logits), mask)


def test_seg_loss_gradients_match_finite_differences():
    g = np.random.default_rng(4)
    _, mask = blob_case(seed=6)
    base = g.standard_normal((1, 2, 8, 8, 8))
    logits = Tensor(base.copy(), requires_grad=True)
    ad.backward(seg_loss(logits, mask[None, ...]))
    analytic = logits.grad.copy()
    h = 1e-6
    pick = np.random.default_rng(0)
    flat = base.reshape(-1)
    for ix in pick.choice(flat.size, size=8, replace=False):
        old = flat[ix]
        flat[ix] = old + h
        lp = seg_loss(Tensor(base), mask[None, ...]).item()
        flat[ix] = old - h
        lm = seg_loss(Tensor(base), mask[None, ...]).item()
        flat[ix] = old
        fd = (lp - lm) / (2 * h)
        gval = analytic.reshape(-1)[ix]
        assert abs(fd - gval) / max(1.0, abs(fd), abs(gval)) < 1e-4


# ----------------------------------------------------------------------
# prediction
# ----------------------------------------------------------------------

def test_all_background_logits_give_empty_mask():
    model = UNet(MINI)
    # force the head to always prefer channel 0
    model.params["head.w"].tensor.data[:] = 0.0
    model.params["head.b"].tensor.data[:] = [5.0, -5.0]
    vox, _ = blob_case()
    assert predict_mask(model, vox).sum() == 0


def test_predict_mask_idempotent():
    model = UNet(MINI)
    vox, _ = blob_case(seed=7)
    m1 = predict_mask(model, vox)
    m2 = predict_mask(model, vox)
    assert np.array_equal(m1, m2)
    assert m1.dtype == np.uint8


# ----------------------------------------------------------------------
# training
# ----------------------------------------------------------------------

def overfit_one_case(steps=200, lr=1e-2):
    model = UNet(UNetConfig(levels=2, base_channels=4, input_size=8, seed=1, epochs=1))
    vox, mask = blob_case(seed=8)
    x = Tensor(vox[None, None, ...])
    from vaemmd.trainer import adam_step

    for t in range(1, steps + 1):
        loss = seg_loss(model.forward(x), mask[None, ...])
        model.zero_grad()
        ad.backward(loss)
        adam_step(model.parameters(), lr, 0.9, 0.999, 1e-8, t)
    return model, vox, mask


def test_overfit_one_case_dice_above_09():
    model, vox, mask = overfit_one_case()
    pred = predict_mask(model, vox)
    assert soft_dice_score(pred, mask) > 0.9


def build_seg_dataset(root, side=8):
    root.mkdir(parents=True, exist_ok=True)
    cases = []
    k = 0
    for dom in ("alpha", "beta"):
        for split, count in (("train", 3), ("val", 2)):
            for j in range(count):
                cid = f"{dom}_{split}{j}"
                vox, mask = blob_case(side, seed=k)
                k += 1
                volume.write_volume(volume.make_image(vox), root / f"{cid}.rvol")
                volume.write_volume(volume.make_mask(mask), root / f"{cid}_mask.rvol")
                cases.append(volume.Case(cid, dom, f"{cid}.rvol", f"{cid}_mask.rvol", split))
    manifest = volume.DatasetManifest(cases=cases, root=root)
    volume.save_manifest(manifest, root / "manifest.json")
    return volume.load_manifest(root / "manifest.json")


def test_train_segmenter_deterministic_and_best_selection(tmp_path):
    manifest = build_seg_dataset(tmp_path / "data")
    cfg = UNetConfig(levels=2, base_channels=2, input_size=8, seed=9, epochs=2)
    p1, log1 = train_segmenter(manifest, "raw", cfg, out_dir=tmp_path / "r1")
    p2, log2 = train_segmenter(manifest, "raw", cfg, out_dir=tmp_path / "r2")
    assert p1.read_bytes() == p2.read_bytes()
    epoch_vals = [r["val_loss"] for r in log1 if r["kind"] == "epoch"]
    _, meta = load_segmenter(p1)
    assert meta["val_loss"] == pytest.approx(min(epoch_vals), rel=1e-12)


def test_reconstructed_variant_requires_checkpoint(tmp_path):
    manifest = build_seg_dataset(tmp_path / "data")
    cfg = UNetConfig(levels=2, base_channels=2, input_size=8, seed=9, epochs=1)
    with pytest.raises(SegError):
        train_segmenter(manifest, "vae_reconstructed", cfg, out_dir=tmp_path / "r")
    with pytest.raises(SegError):
        train_segmenter(manifest, "denoised", cfg, out_dir=tmp_path / "r")


def test_variants_share_batch_order(tmp_path):
    """Raw vs reconstructed runs log identical step structure for one seed."""
    from vaemmd.model import VaeConfig
    from vaemmd.trainer import TrainConfig, TrainState, save_train_checkpoint
    from vaemmd.losses import LossWeights

    manifest = build_seg_dataset(tmp_path / "data")
    tiny_vae = VaeConfig(input_size=8, channel_ladder=(2, 4), latent_dim=3,
                         attention_blocks=(), dropout_rate=0.0, seed=5)
    vae_ckpt = tmp_path / "vae.ckpt"
    save_train_checkpoint(vae_ckpt, TrainState(TrainConfig(model=tiny_vae)), 0, 0.0)

    cfg = UNetConfig(levels=2, base_channels=2, input_size=8, seed=9, epochs=1)
    _, log_raw = train_segmenter(manifest, "raw", cfg, out_dir=tmp_path / "raw")
    _, log_rec = train_segmenter(
        manifest, "vae_reconstructed", cfg, vae_checkpoint=vae_ckpt, out_dir=tmp_path / "rec"
    )
    steps_raw = [(r["epoch"], r["step"]) for r in log_raw if r["kind"] == "step"]
    steps_rec = [(r["epoch"], r["step"]) for r in log_rec if r["kind"] == "step"]
    assert steps_raw == steps_rec
    # reconstruction cache was written for every case
    recon_files = sorted(p.name for p in (tmp_path / "rec" / "recon").glob("*_recon.rvol"))
    assert len(recon_files) == 10


def test_write_prediction_roundtrip(tmp_path):
    _, mask = blob_case(seed=11)
    path = write_prediction(mask, (1.0, 1.0, 1.0), tmp_path, "case7")
    assert path.name == "case7_pred.rvol"
    back = volume.read_volume(path)
    assert np.array_equal(back.voxels, mask)
