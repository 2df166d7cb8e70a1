"""Loss terms for the four-part training objective plus fidelity measures.

total = recon + w_kl * KL + w_mmd * MMD + w_adv * adversarial, with
recon = w_l2 * L2 + w_l1 * L1 + w_ssim * (1 - SSIM). All terms are built
from autodiff ops, so one backward pass reaches every parameter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .nn import conv3d


class LossError(Exception):
    pass


@dataclass
class LossWeights:
    lambda_l2: float = 300.0
    lambda_l1: float = 150.0
    lambda_ssim: float = 50.0
    lambda_kl: float = 0.1
    lambda_mmd: float = 10.0
    lambda_adv: float = 5.0
    kernel_sigmas: tuple = (0.5, 1.0, 2.0)

    def validate(self):
        for name in ("lambda_l2", "lambda_l1", "lambda_ssim", "lambda_kl", "lambda_mmd", "lambda_adv"):
            if getattr(self, name) < 0:
                raise LossError(f"{name} must be non-negative")
        if len(self.kernel_sigmas) < 1 or any(s <= 0 for s in self.kernel_sigmas):
            raise LossError("kernel_sigmas must be >= 1 positive values")


@dataclass
class LossBreakdown:
    l2: float
    l1: float
    ssim_term: float  # 1 - SSIM
    recon: float
    kl: float
    mmd: float
    adv: float
    total: float

    def to_dict(self):
        return {
            "l2": self.l2,
            "l1": self.l1,
            "ssim_term": self.ssim_term,
            "recon": self.recon,
            "kl": self.kl,
            "mmd": self.mmd,
            "adv": self.adv,
            "total": self.total,
        }


# ----------------------------------------------------------------------
# reconstruction terms
# ----------------------------------------------------------------------

def _check_pair(x, xhat):
    if x.shape != xhat.shape:
        raise ShapeError(f"loss operands differ in shape: {x.shape} vs {xhat.shape}")


def l2_loss(x, xhat):
    x, xhat = ad.as_tensor(x), ad.as_tensor(xhat)
    _check_pair(x, xhat)
    return ((x - xhat) ** 2).mean()


def l1_loss(x, xhat):
    x, xhat = ad.as_tensor(x), ad.as_tensor(xhat)
    _check_pair(x, xhat)
    return ad.absolute(x - xhat).mean()


def ssim3d(x, xhat, window=7, data_range=2.0):
    """Mean SSIM over all valid uniform windows; differentiable.

    Expects volumes shaped [N, 1, D, H, W] (a bare 3-D array is wrapped).
    """
    x, xhat = ad.as_tensor(x), ad.as_tensor(xhat)
    if x.ndim == 3:
        x = ad.reshape(x, (1, 1) + x.shape)
        xhat = ad.reshape(xhat, (1, 1) + xhat.shape)
    _check_pair(x, xhat)
    if any(s < window for s in x.shape[2:]):
        raise ShapeError(f"volume spatial sides {x.shape[2:]} smaller than SSIM window {window}")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    # separable uniform window: three 1-D mean filters instead of one
    # window^3 kernel (same valid-window means, far fewer multiplies)
    inv = 1.0 / window
    w_d = Tensor(np.full((1, 1, window, 1, 1), inv, dtype=x.dtype))
    w_h = Tensor(np.full((1, 1, 1, window, 1), inv, dtype=x.dtype))
    w_w = Tensor(np.full((1, 1, 1, 1, window), inv, dtype=x.dtype))

    def filt(t):
        t = conv3d(t, w_d, stride=1, padding=0)
        t = conv3d(t, w_h, stride=1, padding=0)
        return conv3d(t, w_w, stride=1, padding=0)

    mu_x = filt(x)
    mu_y = filt(xhat)
    mu_xx = mu_x * mu_x
    mu_yy = mu_y * mu_y
    mu_xy = mu_x * mu_y
    var_x = filt(x * x) - mu_xx
    var_y = filt(xhat * xhat) - mu_yy
    cov = filt(x * xhat) - mu_xy
    num = (2.0 * mu_xy + c1) * (2.0 * cov + c2)
    den = (mu_xx + mu_yy + c1) * (var_x + var_y + c2)
    return (num / den).mean()


def psnr(x, xhat, peak=1.0, rescale_to_unit=True):
    """PSNR in dB; +inf for identical volumes.

    With rescale_to_unit the [-1, 1] volumes are mapped to [0, 1] first; the
    unit-peak convention is the one consistent with reporting
    MSE = 1.40e-4 as 38.54 dB.
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xhat = np.asarray(xhat.data if isinstance(xhat, Tensor) else xhat, dtype=np.float64)
    if x.shape != xhat.shape:
        raise ShapeError(f"psnr operands differ in shape: {x.shape} vs {xhat.shape}")
    if rescale_to_unit:
        x = (x + 1.0) / 2.0
        xhat = (xhat + 1.0) / 2.0
    mse = float(((x - xhat) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak**2 / mse)


def psnr_from_mse(mse: float, peak=1.0) -> float:
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak**2 / mse)


# ----------------------------------------------------------------------
# KL divergence to the standard normal prior
# ----------------------------------------------------------------------

def kl_divergence(dist) -> Tensor:
    """-1/2 sum_j (1 + log var_j - mu_j^2 - var_j), batch-averaged for 2-D input.

    `dist` is anything with .mu and .log_var, or a (mu, log_var) pair.
    """
    mu, log_var = (dist.mu, dist.log_var) if hasattr(dist, "mu") else dist
    mu, log_var = ad.as_tensor(mu), ad.as_tensor(log_var)
    per_dim = -0.5 * (1.0 + log_var - mu * mu - ad.exp(log_var))
    if mu.ndim == 1:
        return per_dim.sum()
    return per_dim.sum(axis=1).mean()


# ----------------------------------------------------------------------
# maximum mean discrepancy
# ----------------------------------------------------------------------

def _sq_dists(za: Tensor, zb: Tensor) -> Tensor:
    aa = (za * za).sum(axis=1)
    bb = (zb * zb).sum(axis=1)
    cross = ad.matmul(za, ad.transpose(zb, (1, 0)))
    return ad.reshape(aa, (-1, 1)) + ad.reshape(bb, (1, -1)) - 2.0 * cross


def mmd_multikernel(z_a, z_b, sigmas=(0.5, 1.0, 2.0), estimator="biased") -> Tensor:
    """Multi-kernel RBF MMD^2 between two sample sets [m, d] and [n, d].

    Biased (V-statistic) keeps full empirical means including the diagonal
    and is always >= 0; unbiased drops diagonals and may go negative.
    """
    z_a, z_b = ad.as_tensor(z_a), ad.as_tensor(z_b)
    if z_a.ndim == 1:
        z_a = ad.reshape(z_a, (-1, 1))
    if z_b.ndim == 1:
        z_b = ad.reshape(z_b, (-1, 1))
    m, n = z_a.shape[0], z_b.shape[0]
    if m < 1 or n < 1:
        raise LossError("mmd_multikernel needs non-empty sample sets")
    if estimator not in ("biased", "unbiased"):
        raise LossError(f"unknown MMD estimator {estimator!r}")
    if estimator == "unbiased" and (m < 2 or n < 2):
        raise LossError("unbiased MMD needs >= 2 samples per set")
    d_aa = _sq_dists(z_a, z_a)
    d_bb = _sq_dists(z_b, z_b)
    d_ab = _sq_dists(z_a, z_b)
    total = None
    for sigma in sigmas:
        scale = -1.0 / (2.0 * sigma**2)
        k_aa = ad.exp(scale * d_aa)
        k_bb = ad.exp(scale * d_bb)
        k_ab = ad.exp(scale * d_ab)
        if estimator == "biased":
            term = k_aa.mean() + k_bb.mean() - 2.0 * k_ab.mean()
        else:
            # exclude diagonals; k(z, z) = 1 exactly for the RBF kernel
            term = (
                (k_aa.sum() - float(m)) * (1.0 / (m * (m - 1)))
                + (k_bb.sum() - float(n)) * (1.0 / (n * (n - 1)))
                - 2.0 * k_ab.mean()
            )
        total = term if total is None else total + term
    return total * (1.0 / len(sigmas))


def pairwise_domain_mmd(groups: dict, sigmas=(0.5, 1.0, 2.0), estimator="biased"):
    """Mean MMD^2 over all unordered domain pairs present in a batch.

    Returns (scalar Tensor, single_domain_flag); a batch with fewer than two
    domains contributes 0 with the flag raised instead of erroring, since
    stratified batching can degrade at epoch tails.
    """
    names = sorted(groups)
    if len(names) < 2:
        return Tensor(np.float64(0.0)), True
    total = None
    count = 0
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            term = mmd_multikernel(groups[names[i]], groups[names[j]], sigmas, estimator)
            total = term if total is None else total + term
            count += 1
    return total * (1.0 / count), False


# ----------------------------------------------------------------------
# adversarial terms (least-squares GAN)
# ----------------------------------------------------------------------

def adversarial_g_loss(scores_fake) -> Tensor:
    scores_fake = ad.as_tensor(scores_fake)
    if scores_fake.size == 0:
        raise LossError("adversarial_g_loss: empty score vector")
    return ((scores_fake - 1.0) ** 2).mean()


def adversarial_d_loss(scores_real, scores_fake) -> Tensor:
    scores_real, scores_fake = ad.as_tensor(scores_real), ad.as_tensor(scores_fake)
    if scores_real.size == 0 or scores_fake.size == 0:
        raise LossError("adversarial_d_loss: empty score vector")
    return ((scores_real - 1.0) ** 2).mean() + (scores_fake**2).mean()


# ----------------------------------------------------------------------
# weighted total
# ----------------------------------------------------------------------

def total_loss(l2, l1, ssim, kl, mmd, adv, weights: LossWeights):
    """Combine scalar loss Tensors; returns (total Tensor, LossBreakdown)."""
    weights.validate()
    ssim_term = 1.0 - ad.as_tensor(ssim)
    recon = weights.lambda_l2 * ad.as_tensor(l2) + weights.lambda_l1 * ad.as_tensor(l1) + weights.lambda_ssim * ssim_term
    total = (
        recon
        + weights.lambda_kl * ad.as_tensor(kl)
        + weights.lambda_mmd * ad.as_tensor(mmd)
        + weights.lambda_adv * ad.as_tensor(adv)
    )
    breakdown = LossBreakdown(
        l2=float(ad.as_tensor(l2).item()),
        l1=float(ad.as_tensor(l1).item()),
        ssim_term=float(ssim_term.item()),
        recon=float(recon.item()),
        kl=float(ad.as_tensor(kl).item()),
        mmd=float(ad.as_tensor(mmd).item()),
        adv=float(ad.as_tensor(adv).item()),
        total=float(total.item()),
    )
    return total, breakdown
