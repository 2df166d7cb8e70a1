"""Training loop: stratified multi-domain batches, Adam with gradient
clipping, alternating discriminator updates, validation-based checkpoint
selection.

Everything is deterministic from (manifest, TrainConfig): batch order,
augmentation, dropout masks, and latent noise all derive their seeds from the
config seed, so two runs on one machine produce bit-identical logs and
checkpoints.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from . import losses, rng, volume
from .autodiff import Tensor
from .losses import LossBreakdown, LossWeights
from .model import Discriminator, VaeConfig, VaeMmd


class TrainError(Exception):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    epochs: int = 30
    grad_clip_norm: float = 1.0
    d_update_interval: int = 2
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    model: VaeConfig = field(default_factory=VaeConfig)
    disc_base_channels: int = 8
    augment: bool = True
    flip_p: float = 0.5
    rot90_p: float = 0.3
    mmd_estimator: str = "biased"
    val_includes_adv: bool = True

    def validate(self, n_domains=None):
        if self.lr <= 0:
            raise TrainError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise TrainError("betas must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1 or self.d_update_interval < 1:
            raise TrainError("batch_size, epochs, d_update_interval must be >= 1")
        if self.grad_clip_norm <= 0:
            raise TrainError("grad_clip_norm must be positive")
        if n_domains is not None and self.batch_size < n_domains:
            raise TrainError(
                f"batch_size {self.batch_size} < domain count {n_domains}; "
                "stratified batching needs at least one slot per domain"
            )
        self.weights.validate()
        self.model.validate()

    def to_dict(self):
        d = {
            k: getattr(self, k)
            for k in (
                "lr", "beta1", "beta2", "eps", "batch_size", "epochs",
                "grad_clip_norm", "d_update_interval", "seed",
                "disc_base_channels", "augment", "flip_p", "rot90_p",
                "mmd_estimator", "val_includes_adv",
            )
        }
        d["weights"] = {
            "lambda_l2": self.weights.lambda_l2,
            "lambda_l1": self.weights.lambda_l1,
            "lambda_ssim": self.weights.lambda_ssim,
            "lambda_kl": self.weights.lambda_kl,
            "lambda_mmd": self.weights.lambda_mmd,
            "lambda_adv": self.weights.lambda_adv,
            "kernel_sigmas": list(self.weights.kernel_sigmas),
        }
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        w = dict(d.pop("weights", {}))
        if "kernel_sigmas" in w:
            w["kernel_sigmas"] = tuple(w["kernel_sigmas"])
        d["weights"] = LossWeights(**w)
        d["model"] = VaeConfig.from_dict(d.pop("model", {}))
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class StratifiedBatch:
    items: list  # of (case_id, domain_id)

    @property
    def domains(self):
        return sorted({d for _, d in self.items})


def make_batches(cases_by_domain: dict, batch_size: int, seed: int):
    """Domain-stratified epoch batches, deterministic from seed.

    Every domain contributes >= 1 case per batch (requires batch_size >=
    domain count); every case appears at least once per epoch; domains with
    fewer cases recycle reshuffled copies to fill their quota.
    """
    names = sorted(cases_by_domain)
    if not names:
        raise TrainError("make_batches: no domains")
    for d in names:
        if not cases_by_domain[d]:
            raise TrainError(f"make_batches: domain {d!r} has no cases")
    if batch_size < len(names):
        raise TrainError(f"batch_size {batch_size} < domain count {len(names)}")

    base, rem = divmod(batch_size, len(names))
    gens = {d: rng.generator(rng.spawn(seed, zlib.crc32(d.encode()))) for d in names}
    pools = {d: [] for d in names}

    def draw(d):
        if not pools[d]:
            order = sorted(cases_by_domain[d])
            gens[d].shuffle(order)
            pools[d] = order
        return pools[d].pop()

    # enough batches that the largest domain cycles through all its cases
    n_batches = max(
        int(np.ceil(len(cases_by_domain[d]) / base)) if base else 0 for d in names
    )
    n_batches = max(n_batches, 1)
    batches = []
    for b in range(n_batches):
        items = []
        for di, d in enumerate(names):
            quota = base + (1 if (b + di) % len(names) < rem else 0)
            for _ in range(quota):
                items.append((draw(d), d))
        batches.append(StratifiedBatch(items))
    return batches


# ----------------------------------------------------------------------
# optimizer
# ----------------------------------------------------------------------

def adam_step(params, lr, beta1, beta2, eps, t):
    """In-place bias-corrected Adam update; t is the 1-based step count."""
    if t < 1:
        raise TrainError("adam_step: t must be >= 1")
    for p in params:
        if p.grad is None:
            raise TrainError(f"adam_step: parameter {p.name} has no gradient")
        g = np.asarray(p.grad, dtype=p.data.dtype)
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * g * g
        m_hat = p.m / (1.0 - beta1**t)
        v_hat = p.v / (1.0 - beta2**t)
        p.tensor.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


def clip_grad_norm(params, max_norm=1.0):
    """Scale all gradients uniformly so the global L2 norm is <= max_norm.

    Returns the factor applied (1.0 when already within the bound).
    """
    sq = 0.0
    grads = []
    for p in params:
        if p.grad is not None:
            grads.append(p)
            sq += float((np.asarray(p.grad, dtype=np.float64) ** 2).sum())
    norm = float(np.sqrt(sq))
    if norm <= max_norm or norm == 0.0:
        return 1.0
    factor = max_norm / norm
    for p in grads:
        p.tensor.grad = np.asarray(p.grad) * factor
    return factor


# ----------------------------------------------------------------------
# single optimization step
# ----------------------------------------------------------------------

class TrainState:
    """Owns both networks plus step counters for the two Adam chains."""

    def __init__(self, config: TrainConfig, dtype=np.float32):
        config.validate()
        self.config = config
        self.model = VaeMmd(config.model, dtype=dtype)
        self.disc = Discriminator(
            config.model.input_size, config.disc_base_channels,
            seed=config.seed, dtype=dtype,
        )
        self.t_gen = 0
        self.t_disc = 0

    def state_arrays(self):
        out = {}
        for prefix, store in (("vae", self.model), ("disc", self.disc)):
            for k, v in store.state_arrays().items():
                out[f"{prefix}.{k}"] = v
            for k, v in store.moment_arrays().items():
                out[f"{prefix}.{k}"] = v
        out["steps"] = np.array([self.t_gen, self.t_disc], dtype=np.int64)
        return out

    def load_state_arrays(self, arrays):
        for prefix, store in (("vae", self.model), ("disc", self.disc)):
            sub = {k[len(prefix) + 1:]: v for k, v in arrays.items() if k.startswith(prefix + ".")}
            store.load_state_arrays(sub, with_moments=True)
        self.t_gen, self.t_disc = (int(v) for v in arrays["steps"])


def train_step(state: TrainState, x: np.ndarray, domain_ids, step_index: int):
    """One generator update, plus a discriminator update every
    d_update_interval steps. Returns (LossBreakdown, d_loss or None).
    """
    cfg = state.config
    w = cfg.weights
    xt = Tensor(np.asarray(x, dtype=state.model.params["out.w"].data.dtype))
    step_seed = rng.spawn(cfg.seed, 300, step_index)

    xhat, dist, z = state.model.forward(xt, mode="train", seed=step_seed)
    l2 = losses.l2_loss(xt, xhat)
    l1 = losses.l1_loss(xt, xhat)
    ssim = losses.ssim3d(xt, xhat)
    kl = losses.kl_divergence(dist)
    groups = {}
    for d in sorted(set(domain_ids)):
        idx = np.array([i for i, dd in enumerate(domain_ids) if dd == d])
        groups[d] = z[idx]
    mmd, _single = losses.pairwise_domain_mmd(groups, w.kernel_sigmas, cfg.mmd_estimator)
    if w.lambda_adv > 0:
        adv = losses.adversarial_g_loss(state.disc.forward(xhat))
    else:
        adv = Tensor(np.float64(0.0))
    total, breakdown = losses.total_loss(l2, l1, ssim, kl, mmd, adv, w)

    state.model.zero_grad()
    state.disc.zero_grad()
    ad.backward(total)
    clip_grad_norm(state.model.parameters(), cfg.grad_clip_norm)
    state.t_gen += 1
    adam_step(state.model.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, state.t_gen)

    d_loss_val = None
    if w.lambda_adv > 0 and step_index % cfg.d_update_interval == 0:
        state.disc.zero_grad()
        fake = Tensor(xhat.data.copy())  # detached reconstructions
        d_loss = losses.adversarial_d_loss(state.disc.forward(xt.detach()), state.disc.forward(fake))
        ad.backward(d_loss)
        clip_grad_norm(state.disc.parameters(), cfg.grad_clip_norm)
        state.t_disc += 1
        adam_step(state.disc.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, state.t_disc)
        d_loss_val = float(d_loss.item())
    return breakdown, d_loss_val


# ----------------------------------------------------------------------
# data plumbing
# ----------------------------------------------------------------------

def load_case_image(manifest: volume.DatasetManifest, case: volume.Case) -> np.ndarray:
    """Case image scaled to [-1, 1] (matches the tanh output range)."""
    vol = volume.read_volume(manifest.resolve(case.image_path))
    return volume.minmax_to_range(vol).voxels


def _assemble_batch(images: dict, batch: StratifiedBatch, cfg: TrainConfig, epoch: int):
    arrs = []
    for case_id, _domain in batch.items:
        vox = images[case_id]
        if cfg.augment:
            seed = rng.spawn(cfg.seed, 500, epoch, zlib.crc32(case_id.encode()))
            aug, _ = volume.augment(
                volume.make_image(vox), flip_p=cfg.flip_p, rot90_p=cfg.rot90_p, seed=seed
            )
            vox = aug.voxels
        arrs.append(vox[None, ...])
    return np.stack(arrs, axis=0)


def validate_epoch(state: TrainState, images: dict, val_cases):
    """Total loss over the validation split in eval mode (z = mu).

    Reconstruction/KL/adversarial terms are case-weighted means over eval
    batches; the MMD term is computed once on the pooled validation latents
    grouped by domain.
    """
    cfg = state.config
    w = cfg.weights
    cases = sorted(val_cases, key=lambda c: c.case_id)
    if not cases:
        raise TrainError("validation split is empty")
    n = len(cases)
    sums = {"l2": 0.0, "l1": 0.0, "ssim_term": 0.0, "kl": 0.0, "adv": 0.0}
    latents = []
    domains = []
    with ad.no_grad():
        for start in range(0, n, cfg.batch_size):
            chunk = cases[start:start + cfg.batch_size]
            x = np.stack([images[c.case_id][None, ...] for c in chunk], axis=0)
            xt = Tensor(np.asarray(x, dtype=state.model.params["out.w"].data.dtype))
            xhat, dist, z = state.model.forward(xt, mode="eval")
            b = len(chunk)
            sums["l2"] += losses.l2_loss(xt, xhat).item() * b
            sums["l1"] += losses.l1_loss(xt, xhat).item() * b
            sums["ssim_term"] += (1.0 - losses.ssim3d(xt, xhat).item()) * b
            sums["kl"] += losses.kl_divergence(dist).item() * b
            if w.lambda_adv > 0 and cfg.val_includes_adv:
                sums["adv"] += losses.adversarial_g_loss(state.disc.forward(xhat)).item() * b
            latents.append(z.data.copy())
            domains.extend(c.domain_id for c in chunk)
        zs = np.concatenate(latents, axis=0)
        groups = {}
        for d in sorted(set(domains)):
            idx = np.array([i for i, dd in enumerate(domains) if dd == d])
            groups[d] = Tensor(zs[idx])
        mmd, _ = losses.pairwise_domain_mmd(groups, w.kernel_sigmas, cfg.mmd_estimator)
    means = {k: v / n for k, v in sums.items()}
    recon = w.lambda_l2 * means["l2"] + w.lambda_l1 * means["l1"] + w.lambda_ssim * means["ssim_term"]
    mmd_val = float(mmd.item())
    total = recon + w.lambda_kl * means["kl"] + w.lambda_mmd * mmd_val + w.lambda_adv * means["adv"]
    return LossBreakdown(
        l2=means["l2"], l1=means["l1"], ssim_term=means["ssim_term"], recon=recon,
        kl=means["kl"], mmd=mmd_val, adv=means["adv"], total=total,
    )


def save_train_checkpoint(path, state: TrainState, epoch: int, val_total: float):
    meta = {
        "epoch": epoch,
        "val_total": val_total,
        "config": state.config.to_dict(),
    }
    ckpt.save_checkpoint(path, state.state_arrays(), meta)


def load_train_checkpoint(path):
    arrays, meta = ckpt.load_checkpoint(path)
    config = TrainConfig.from_dict(meta["config"])
    state = TrainState(config)
    state.load_state_arrays(arrays)
    return state, meta


def train_vae(manifest: volume.DatasetManifest, config: TrainConfig, out_dir):
    """Full training run. Writes train_log.jsonl and best.ckpt under out_dir;
    returns (best checkpoint path, log records).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_cases = manifest.by_split("train")
    val_cases = manifest.by_split("val")
    if not train_cases:
        raise TrainError("manifest has no train cases")
    if not val_cases:
        raise TrainError("manifest has no validation cases")
    domains = sorted({c.domain_id for c in train_cases})
    config.validate(n_domains=len(domains))

    images = {}
    for c in train_cases + val_cases:
        images[c.case_id] = load_case_image(manifest, c)
        s = config.model.input_size
        if images[c.case_id].shape != (s, s, s):
            raise TrainError(
                f"case {c.case_id!r} has shape {images[c.case_id].shape}, expected {(s, s, s)}"
            )
    by_domain = {d: [c.case_id for c in train_cases if c.domain_id == d] for d in domains}

    state = TrainState(config)
    log = []
    log_path = out_dir / "train_log.jsonl"
    best_path = out_dir / "best.ckpt"
    best_total = np.inf
    best_epoch = -1
    step_index = 0
    with open(log_path, "w") as fh:
        for epoch in range(config.epochs):
            batches = make_batches(by_domain, config.batch_size, rng.spawn(config.seed, 400, epoch))
            for batch in batches:
                x = _assemble_batch(images, batch, config, epoch)
                breakdown, d_loss = train_step(state, x, [d for _, d in batch.items], step_index)
                rec = {
                    "kind": "step", "epoch": epoch, "step": step_index,
                    "loss": breakdown.to_dict(), "d_loss": d_loss,
                }
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
                log.append(rec)
                step_index += 1
            val = validate_epoch(state, images, val_cases)
            rec = {"kind": "epoch", "epoch": epoch, "val": val.to_dict()}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            log.append(rec)
            if val.total < best_total:
                best_total = val.total
                best_epoch = epoch
                save_train_checkpoint(best_path, state, epoch, val.total)
        summary = {"kind": "summary", "best_epoch": best_epoch, "best_val_total": best_total}
        fh.write(json.dumps(summary, sort_keys=True) + "\n")
        log.append(summary)
    return best_path, log
