"""Small 3D U-Net for two-class lesion segmentation, used to compare raw
inputs against autoencoder reconstructions under identical training
conditions (same seeds, batch order, initialization — only the input
transform differs).

The network is deliberately plain: double 3x3x3 conv blocks with leaky
ReLU, stride-2 conv downsampling, transposed-conv upsampling with skip
concat, and a 1x1x1 two-channel head. No normalization or dropout, so
prediction is a pure function of (volume, parameters). Leaky (rather
than plain) ReLU keeps every unit trainable: with the extreme
foreground/background imbalance of lesion masks, a dead-ReLU network
that predicts all-background is a local minimum the optimizer cannot
leave.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from . import rng, volume
from .autodiff import ShapeError, Tensor
from .model import ConfigError, _ParamStore
from .nn import conv3d, conv_transpose3d, kaiming_conv
from .trainer import TrainError, adam_step, load_train_checkpoint


class SegError(Exception):
    pass


@dataclass
class UNetConfig:
    levels: int = 3
    base_channels: int = 8
    input_size: int = 32
    seed: int = 0
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 4
    augment: bool = True
    flip_p: float = 0.5
    rot90_p: float = 0.3

    def validate(self):
        if self.levels < 1 or self.base_channels < 1:
            raise ConfigError("levels and base_channels must be >= 1")
        if self.input_size % (1 << self.levels) != 0:
            raise ConfigError(
                f"input_size {self.input_size} not divisible by 2^{self.levels}"
            )
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("epochs, batch_size must be >= 1 and lr > 0")

    def to_dict(self):
        return {
            "levels": self.levels, "base_channels": self.base_channels,
            "input_size": self.input_size, "seed": self.seed,
            "epochs": self.epochs, "lr": self.lr, "batch_size": self.batch_size,
            "augment": self.augment, "flip_p": self.flip_p, "rot90_p": self.rot90_p,
        }

    @classmethod
    def from_dict(cls, d):
        cfg = cls(**d)
        cfg.validate()
        return cfg


class UNet(_ParamStore):
    def __init__(self, config: UNetConfig, dtype=np.float32):
        super().__init__("seg", dtype)
        config.validate()
        self.config = config
        gen = rng.generator(rng.spawn(config.seed, 888))
        ch = [config.base_channels * (1 << i) for i in range(config.levels + 1)]
        for i in range(config.levels):
            cin = 1 if i == 0 else ch[i]
            self.add_param(f"enc{i}.conv1.w", kaiming_conv(gen, (ch[i], cin, 3, 3, 3)))
            self.add_param(f"enc{i}.conv1.b", np.zeros(ch[i]))
            self.add_param(f"enc{i}.conv2.w", kaiming_conv(gen, (ch[i], ch[i], 3, 3, 3)))
            self.add_param(f"enc{i}.conv2.b", np.zeros(ch[i]))
            self.add_param(f"down{i}.w", kaiming_conv(gen, (ch[i + 1], ch[i], 4, 4, 4)))
            self.add_param(f"down{i}.b", np.zeros(ch[i + 1]))
        self.add_param("bottom.conv1.w", kaiming_conv(gen, (ch[-1], ch[-1], 3, 3, 3)))
        self.add_param("bottom.conv1.b", np.zeros(ch[-1]))
        self.add_param("bottom.conv2.w", kaiming_conv(gen, (ch[-1], ch[-1], 3, 3, 3)))
        self.add_param("bottom.conv2.b", np.zeros(ch[-1]))
        for i in range(config.levels - 1, -1, -1):
            self.add_param(f"up{i}.w", kaiming_conv(gen, (ch[i + 1], ch[i], 4, 4, 4)))
            self.add_param(f"up{i}.b", np.zeros(ch[i]))
            self.add_param(f"dec{i}.conv1.w", kaiming_conv(gen, (ch[i], 2 * ch[i], 3, 3, 3)))
            self.add_param(f"dec{i}.conv1.b", np.zeros(ch[i]))
            self.add_param(f"dec{i}.conv2.w", kaiming_conv(gen, (ch[i], ch[i], 3, 3, 3)))
            self.add_param(f"dec{i}.conv2.b", np.zeros(ch[i]))
        self.add_param("head.w", kaiming_conv(gen, (2, ch[0], 1, 1, 1)))
        self.add_param("head.b", np.zeros(2))

    def _p(self, name):
        return self.params[name].tensor

    def _double(self, prefix, h):
        h = ad.leaky_relu(conv3d(h, self._p(f"{prefix}.conv1.w"), self._p(f"{prefix}.conv1.b"), stride=1, padding=1), 0.01)
        return ad.leaky_relu(conv3d(h, self._p(f"{prefix}.conv2.w"), self._p(f"{prefix}.conv2.b"), stride=1, padding=1), 0.01)

    def forward(self, x) -> Tensor:
        x = ad.as_tensor(x)
        s = self.config.input_size
        if x.ndim != 5 or x.shape[1] != 1 or x.shape[2:] != (s, s, s):
            raise ShapeError(f"unet expects [N,1,{s},{s},{s}], got {x.shape}")
        skips = []
        h = x
        for i in range(self.config.levels):
            h = self._double(f"enc{i}", h)
            skips.append(h)
            h = ad.leaky_relu(conv3d(h, self._p(f"down{i}.w"), self._p(f"down{i}.b"), stride=2, padding=1), 0.01)
        h = self._double("bottom", h)
        for i in range(self.config.levels - 1, -1, -1):
            h = ad.leaky_relu(conv_transpose3d(h, self._p(f"up{i}.w"), self._p(f"up{i}.b"), stride=2, padding=1), 0.01)
            h = ad.concat([h, skips[i]], axis=1)
            h = self._double(f"dec{i}", h)
        return conv3d(h, self._p("head.w"), self._p("head.b"), stride=1, padding=0)


def unet_forward(model: UNet, x) -> Tensor:
    """Two-class logits at input resolution."""
    return model.forward(x)


# ----------------------------------------------------------------------
# loss
# ----------------------------------------------------------------------

def seg_loss_parts(logits, mask, smooth=1.0):
    """(total, dice_term, ce_term): soft-Dice on foreground + voxel CE."""
    logits = ad.as_tensor(logits)
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask)
    if not np.isin(m, (0, 1)).all():
        raise SegError("segmentation mask must be binary")
    if logits.ndim != 5 or logits.shape[1] != 2:
        raise ShapeError(f"seg_loss expects logits [N,2,D,H,W], got {logits.shape}")
    if m.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeError(f"mask shape {m.shape} does not match logits {logits.shape}")
    m = m.astype(logits.dtype)
    probs = ad.softmax(logits, axis=1)
    p_fg = probs[:, 1]
    mt = Tensor(m)
    inter = (p_fg * mt).sum()
    dice = (2.0 * inter + smooth) / (p_fg.sum() + mt.sum() + smooth)
    dice_term = 1.0 - dice
    p_true = p_fg * mt + probs[:, 0] * (1.0 - mt)
    ce_term = -ad.log(ad.clamp(p_true, 1e-12, 1.0)).mean()
    return dice_term + ce_term, dice_term, ce_term


def seg_loss(logits, mask, smooth=1.0):
    total, _, _ = seg_loss_parts(logits, mask, smooth)
    return total


def predict_mask(model: UNet, voxels: np.ndarray) -> np.ndarray:
    """Binary mask via channel argmax; deterministic for a fixed model."""
    x = np.asarray(voxels, dtype=np.float32)[None, None, ...]
    with ad.no_grad():
        logits = model.forward(Tensor(x))
    return (logits.data[0, 1] > logits.data[0, 0]).astype(np.uint8)


def soft_dice_score(pred_mask, gt_mask) -> float:
    a = np.asarray(pred_mask, dtype=bool)
    b = np.asarray(gt_mask, dtype=bool)
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return 2.0 * np.logical_and(a, b).sum() / denom


# ----------------------------------------------------------------------
# training on raw vs reconstructed inputs
# ----------------------------------------------------------------------

VARIANTS = ("raw", "vae_reconstructed")


def reconstruct_case(vae_state, voxels: np.ndarray) -> np.ndarray:
    """Deterministic reconstruction (z = mu) of one [-1, 1] volume."""
    x = np.asarray(voxels, dtype=np.float32)[None, None, ...]
    with ad.no_grad():
        xhat, _, _ = vae_state.model.forward(Tensor(x), mode="eval")
    return xhat.data[0, 0].astype(np.float32)


def prepare_inputs(manifest, cases, input_variant, vae_checkpoint=None, cache_dir=None):
    """Per-case input volumes in [-1, 1]; reconstructions cached as RVOL."""
    if input_variant not in VARIANTS:
        raise SegError(f"unknown input variant {input_variant!r}")
    vae_state = None
    if input_variant == "vae_reconstructed":
        if vae_checkpoint is None:
            raise SegError("vae_reconstructed variant needs a vae_checkpoint")
        vae_state, _ = load_train_checkpoint(vae_checkpoint)
    images = {}
    for c in cases:
        vol = volume.read_volume(manifest.resolve(c.image_path))
        vox = volume.minmax_to_range(vol).voxels
        if input_variant == "vae_reconstructed":
            vox = reconstruct_case(vae_state, vox)
            if cache_dir is not None:
                cache_dir = Path(cache_dir)
                cache_dir.mkdir(parents=True, exist_ok=True)
                volume.write_volume(
                    volume.make_image(vox, vol.spacing), cache_dir / f"{c.case_id}_recon.rvol"
                )
        images[c.case_id] = vox
    return images


def train_segmenter(manifest, input_variant, config: UNetConfig, vae_checkpoint=None, out_dir="seg_run"):
    """Train on the chosen input variant; returns (best ckpt path, log).

    The data order, augmentation seeds, and weight initialization depend only
    on config.seed, so raw and reconstructed runs with equal configs differ
    only in the input transform.
    """
    config.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_cases = manifest.by_split("train")
    val_cases = sorted(manifest.by_split("val"), key=lambda c: c.case_id)
    if not train_cases:
        raise TrainError("manifest has no train cases")
    if not val_cases:
        raise TrainError("manifest has no validation cases")
    all_cases = train_cases + val_cases
    images = prepare_inputs(manifest, all_cases, input_variant, vae_checkpoint, out_dir / "recon")
    masks = {
        c.case_id: volume.read_volume(manifest.resolve(c.mask_path)).voxels.astype(np.uint8)
        for c in all_cases
    }

    model = UNet(config)
    log = []
    best_path = out_dir / "seg_best.ckpt"
    best_val = np.inf
    best_epoch = -1
    t = 0
    train_ids = sorted(c.case_id for c in train_cases)
    with open(out_dir / "seg_log.jsonl", "w") as fh:
        for epoch in range(config.epochs):
            order = list(train_ids)
            rng.generator(rng.spawn(config.seed, 600, epoch)).shuffle(order)
            for start in range(0, len(order), config.batch_size):
                chunk = order[start:start + config.batch_size]
                xs, ms = [], []
                for cid in chunk:
                    img, msk = images[cid], masks[cid]
                    if config.augment:
                        seed = rng.spawn(config.seed, 700, epoch, zlib.crc32(cid.encode()))
                        iv, mv = volume.augment(
                            volume.make_image(img), volume.make_mask(msk),
                            flip_p=config.flip_p, rot90_p=config.rot90_p, seed=seed,
                        )
                        img, msk = iv.voxels, mv.voxels
                    xs.append(img[None, ...])
                    ms.append(msk)
                logits = model.forward(Tensor(np.stack(xs, axis=0)))
                loss = seg_loss(logits, np.stack(ms, axis=0))
                model.zero_grad()
                ad.backward(loss)
                t += 1
                adam_step(model.parameters(), config.lr, 0.9, 0.999, 1e-8, t)
                rec = {"kind": "step", "epoch": epoch, "step": t - 1, "loss": float(loss.item())}
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
                log.append(rec)
            val_loss, val_dice = evaluate_segmenter(model, images, masks, val_cases)
            rec = {"kind": "epoch", "epoch": epoch, "val_loss": val_loss, "val_dice": val_dice}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            log.append(rec)
            if val_loss < best_val:
                best_val = val_loss
                best_epoch = epoch
                meta = {
                    "epoch": epoch, "val_loss": val_loss, "val_dice": val_dice,
                    "config": config.to_dict(), "input_variant": input_variant,
                }
                ckpt.save_checkpoint(best_path, model.state_arrays(), meta)
        summary = {"kind": "summary", "best_epoch": best_epoch, "best_val_loss": best_val}
        fh.write(json.dumps(summary, sort_keys=True) + "\n")
        log.append(summary)
    return best_path, log


def evaluate_segmenter(model: UNet, images, masks, cases):
    """(mean seg loss, mean Dice) over the given cases."""
    losses_, dices = [], []
    with ad.no_grad():
        for c in cases:
            x = Tensor(images[c.case_id][None, None, ...].astype(np.float32))
            logits = model.forward(x)
            losses_.append(float(seg_loss(logits, masks[c.case_id][None, ...]).item()))
            pred = (logits.data[0, 1] > logits.data[0, 0]).astype(np.uint8)
            dices.append(soft_dice_score(pred, masks[c.case_id]))
    return float(np.mean(losses_)), float(np.mean(dices))


def load_segmenter(path):
    arrays, meta = ckpt.load_checkpoint(path)
    config = UNetConfig.from_dict(meta["config"])
    model = UNet(config)
    model.load_state_arrays(arrays)
    return model, meta


def write_prediction(mask_voxels, spacing, out_dir, case_id) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{case_id}_pred.rvol"
    volume.write_volume(volume.make_mask(mask_voxels.astype(np.uint8), spacing), path)
    return path
