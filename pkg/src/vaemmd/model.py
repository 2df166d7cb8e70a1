"""Encoder/decoder network with latent alignment hooks, plus the
least-squares discriminator.

Encoder: per block, a stride-2 4x4x4 conv, batch norm, ReLU, then a
residual block (two 3x3x3 convs, dropout inside); 3D self-attention after
the configured blocks. The bottleneck flattens to two dense heads (mean,
log-variance). Decoder mirrors with stride-2 transposed convs; each level
fuses the matching encoder feature by channel concat + 3x3x3 conv; a final
1x1x1 conv with tanh keeps outputs in [-1, 1].

The attention residual gate is a scalar initialized to zero, so a freshly
built attention module is exactly the identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import rng
from .autodiff import ShapeError, Tensor
from .nn import (
    Parameter,
    RunningStats,
    batch_norm3d,
    conv3d,
    conv_transpose3d,
    dropout,
    kaiming_conv,
    kaiming_linear,
    linear,
)


class ConfigError(Exception):
    pass


@dataclass
class VaeConfig:
    input_size: int = 32
    channel_ladder: tuple = (8, 16, 32, 64)
    latent_dim: int = 64
    attention_blocks: tuple = (3, 4)  # 1-indexed block positions
    attention_reduction: int = 8
    dropout_rate: float = 0.1
    seed: int = 0

    def validate(self):
        levels = len(self.channel_ladder)
        if levels < 1:
            raise ConfigError("channel_ladder must be non-empty")
        if self.input_size % (1 << levels) != 0:
            raise ConfigError(
                f"input_size {self.input_size} not divisible by 2^{levels}"
            )
        if self.latent_dim < 2:
            raise ConfigError("latent_dim must be >= 2")
        for b in self.attention_blocks:
            if not 1 <= b <= levels:
                raise ConfigError(f"attention block index {b} outside ladder of length {levels}")
            if self.channel_ladder[b - 1] % self.attention_reduction != 0:
                raise ConfigError(
                    f"block {b} channels {self.channel_ladder[b - 1]} not divisible by "
                    f"attention reduction {self.attention_reduction}"
                )
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError("dropout_rate must be in [0, 1)")

    @property
    def bottleneck_side(self) -> int:
        return self.input_size >> len(self.channel_ladder)

    @property
    def bottleneck_features(self) -> int:
        return self.channel_ladder[-1] * self.bottleneck_side**3

    def to_dict(self):
        d = asdict(self)
        d["channel_ladder"] = list(self.channel_ladder)
        d["attention_blocks"] = list(self.attention_blocks)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["channel_ladder"] = tuple(d.get("channel_ladder", (8, 16, 32, 64)))
        d["attention_blocks"] = tuple(d.get("attention_blocks", (3, 4)))
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def paper_scale(cls, seed=0):
        return cls(
            input_size=128,
            channel_ladder=(32, 64, 128, 256),
            latent_dim=512,
            attention_blocks=(3, 4),
            attention_reduction=8,
            dropout_rate=0.1,
            seed=seed,
        )


@dataclass
class LatentDistribution:
    mu: Tensor  # [N, latent_dim]
    log_var: Tensor  # [N, latent_dim], clamped to [-10, 10]


@dataclass
class EncoderFeatures:
    blocks: list = field(default_factory=list)  # per-block output tensors


def reparameterize(dist: LatentDistribution, eps=None, seed=None) -> Tensor:
    """z = mu + exp(log_var / 2) * eps; eps ~ N(0, I) from seed when not given."""
    if eps is None:
        if seed is None:
            raise ValueError("reparameterize needs either eps or a seed")
        g = rng.generator(seed)
        eps = Tensor(g.standard_normal(dist.mu.shape).astype(dist.mu.dtype))
    else:
        eps = ad.as_tensor(eps)
    sigma = ad.exp(dist.log_var * 0.5)
    return dist.mu + sigma * eps


class _ParamStore:
    """Shared bookkeeping for models built from Parameters + RunningStats."""

    def __init__(self, name_prefix: str, dtype=np.float32):
        self.prefix = name_prefix
        self.dtype = dtype
        self.params: dict[str, Parameter] = {}
        self.stats: dict[str, RunningStats] = {}

    def add_param(self, name: str, data: np.ndarray) -> Parameter:
        p = Parameter(f"{self.prefix}.{name}", np.asarray(data, dtype=self.dtype))
        self.params[name] = p
        return p

    def add_bn(self, name: str, channels: int):
        self.add_param(f"{name}.gamma", np.ones(channels))
        self.add_param(f"{name}.beta", np.zeros(channels))
        self.stats[name] = RunningStats(channels, dtype=self.dtype)

    def parameters(self) -> list[Parameter]:
        return [self.params[k] for k in sorted(self.params)]

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"param.{k}": p.data for k, p in self.params.items()}
        for k, s in self.stats.items():
            out[f"stats.{k}.mean"] = s.mean
            out[f"stats.{k}.var"] = s.var
        return out

    def moment_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k, p in self.params.items():
            out[f"adam_m.{k}"] = p.m
            out[f"adam_v.{k}"] = p.v
        return out

    def load_state_arrays(self, arrays: dict, with_moments=False):
        for k, p in self.params.items():
            p.tensor.data = np.asarray(arrays[f"param.{k}"], dtype=self.dtype)
            if with_moments:
                p.m = np.asarray(arrays[f"adam_m.{k}"], dtype=self.dtype)
                p.v = np.asarray(arrays[f"adam_v.{k}"], dtype=self.dtype)
        for k, s in self.stats.items():
            s.mean = np.asarray(arrays[f"stats.{k}.mean"], dtype=self.dtype)
            s.var = np.asarray(arrays[f"stats.{k}.var"], dtype=self.dtype)


def self_attention3d(x, q_w, k_w, v_w, gamma):
    """Spatial self-attention over flattened positions with residual gate.

    q_w/k_w project to reduced channels, v_w keeps full channels; output is
    x + gamma * attended values (gamma scalar, trained, initialized to 0).
    """
    n, c = x.shape[0], x.shape[1]
    spatial = x.shape[2:]
    p = int(np.prod(spatial))
    q = ad.reshape(conv3d(x, q_w), (n, q_w.shape[0], p))
    k = ad.reshape(conv3d(x, k_w), (n, k_w.shape[0], p))
    v = ad.reshape(conv3d(x, v_w), (n, c, p))
    energy = ad.matmul(ad.transpose(q, (0, 2, 1)), k)  # [N, P, P]
    attn = ad.softmax(energy, axis=2)
    out = ad.matmul(v, ad.transpose(attn, (0, 2, 1)))  # [N, C, P]
    out = ad.reshape(out, (n, c) + spatial)
    return x + gamma * out, attn


class VaeMmd(_ParamStore):
    def __init__(self, config: VaeConfig, dtype=np.float32):
        super().__init__("vae", dtype)
        config.validate()
        self.config = config
        gen = rng.generator(config.seed)
        ladder = config.channel_ladder
        in_ch = 1
        for i, ch in enumerate(ladder, start=1):
            self.add_param(f"enc{i}.conv.w", kaiming_conv(gen, (ch, in_ch, 4, 4, 4)))
            self.add_param(f"enc{i}.conv.b", np.zeros(ch))
            self.add_bn(f"enc{i}.bn", ch)
            for r in (1, 2):
                self.add_param(f"enc{i}.res.conv{r}.w", kaiming_conv(gen, (ch, ch, 3, 3, 3)))
                self.add_param(f"enc{i}.res.conv{r}.b", np.zeros(ch))
                self.add_bn(f"enc{i}.res.bn{r}", ch)
            if i in config.attention_blocks:
                cr = ch // config.attention_reduction
                self.add_param(f"enc{i}.att.q.w", kaiming_conv(gen, (cr, ch, 1, 1, 1)))
                self.add_param(f"enc{i}.att.k.w", kaiming_conv(gen, (cr, ch, 1, 1, 1)))
                self.add_param(f"enc{i}.att.v.w", kaiming_conv(gen, (ch, ch, 1, 1, 1)))
                self.add_param(f"enc{i}.att.gamma", np.zeros(()))
            in_ch = ch

        feat = config.bottleneck_features
        scale = 1.0 / np.sqrt(feat)
        self.add_param("fc_mu.w", gen.standard_normal((config.latent_dim, feat)) * scale)
        self.add_param("fc_mu.b", np.zeros(config.latent_dim))
        self.add_param("fc_logvar.w", gen.standard_normal((config.latent_dim, feat)) * scale)
        # start with small posterior variance so early reconstructions are
        # dominated by the mean path rather than latent noise
        self.add_param("fc_logvar.b", np.full(config.latent_dim, -4.0))
        self.add_param(
            "fc_expand.w", gen.standard_normal((feat, config.latent_dim)) / np.sqrt(config.latent_dim)
        )
        self.add_param("fc_expand.b", np.zeros(feat))

        levels = len(ladder)
        for i in range(levels, 0, -1):
            out_ch = ladder[i - 2] if i >= 2 else ladder[0]
            self.add_param(f"dec{i}.up.w", kaiming_conv(gen, (ladder[i - 1], out_ch, 4, 4, 4)))
            self.add_param(f"dec{i}.up.b", np.zeros(out_ch))
            self.add_bn(f"dec{i}.up_bn", out_ch)
            if i >= 2:
                self.add_param(f"dec{i}.fuse.w", kaiming_conv(gen, (out_ch, 2 * out_ch, 3, 3, 3)))
                self.add_param(f"dec{i}.fuse.b", np.zeros(out_ch))
                self.add_bn(f"dec{i}.fuse_bn", out_ch)
        self.add_param("out.w", kaiming_conv(gen, (1, ladder[0], 1, 1, 1)))
        self.add_param("out.b", np.zeros(1))

    # ------------------------------------------------------------------
    def _p(self, name):
        return self.params[name].tensor

    def _bn(self, name, x, mode):
        return batch_norm3d(
            x, self._p(f"{name}.gamma"), self._p(f"{name}.beta"), self.stats[name], mode
        )

    def encoder_forward(self, x, mode="train", seed=0):
        x = ad.as_tensor(x)
        s = self.config.input_size
        if x.ndim != 5 or x.shape[1] != 1 or x.shape[2:] != (s, s, s):
            raise ShapeError(f"encoder expects [N,1,{s},{s},{s}], got {x.shape}")
        feats = EncoderFeatures()
        h = x
        for i in range(1, len(self.config.channel_ladder) + 1):
            h = conv3d(h, self._p(f"enc{i}.conv.w"), self._p(f"enc{i}.conv.b"), stride=2, padding=1)
            h = ad.relu(self._bn(f"enc{i}.bn", h, mode))
            r = conv3d(h, self._p(f"enc{i}.res.conv1.w"), self._p(f"enc{i}.res.conv1.b"), stride=1, padding=1)
            r = ad.relu(self._bn(f"enc{i}.res.bn1", r, mode))
            r = dropout(r, self.config.dropout_rate, mode, rng.spawn(seed, 101, i))
            r = conv3d(r, self._p(f"enc{i}.res.conv2.w"), self._p(f"enc{i}.res.conv2.b"), stride=1, padding=1)
            r = self._bn(f"enc{i}.res.bn2", r, mode)
            h = ad.relu(h + r)
            if i in self.config.attention_blocks:
                h, _ = self_attention3d(
                    h,
                    self._p(f"enc{i}.att.q.w"),
                    self._p(f"enc{i}.att.k.w"),
                    self._p(f"enc{i}.att.v.w"),
                    self._p(f"enc{i}.att.gamma"),
                )
            feats.blocks.append(h)
        flat = ad.flatten(h, start_axis=1)
        mu = linear(flat, self._p("fc_mu.w"), self._p("fc_mu.b"))
        log_var = ad.clamp(
            linear(flat, self._p("fc_logvar.w"), self._p("fc_logvar.b")), -10.0, 10.0
        )
        return LatentDistribution(mu, log_var), feats

    def decoder_forward(self, z, skips: EncoderFeatures, mode="train"):
        z = ad.as_tensor(z)
        if z.ndim != 2 or z.shape[1] != self.config.latent_dim:
            raise ShapeError(f"decoder expects z of shape [N,{self.config.latent_dim}], got {z.shape}")
        ladder = self.config.channel_ladder
        levels = len(ladder)
        side = self.config.bottleneck_side
        n = z.shape[0]
        h = ad.relu(linear(z, self._p("fc_expand.w"), self._p("fc_expand.b")))
        h = ad.reshape(h, (n, ladder[-1], side, side, side))
        for i in range(levels, 0, -1):
            h = conv_transpose3d(h, self._p(f"dec{i}.up.w"), self._p(f"dec{i}.up.b"), stride=2, padding=1)
            h = ad.relu(self._bn(f"dec{i}.up_bn", h, mode))
            if i >= 2:
                skip = skips.blocks[i - 2]
                if skip.shape != h.shape:
                    raise ShapeError(
                        f"skip/decoder shape mismatch at level {i}: {skip.shape} vs {h.shape}"
                    )
                h = ad.concat([h, skip], axis=1)
                h = conv3d(h, self._p(f"dec{i}.fuse.w"), self._p(f"dec{i}.fuse.b"), stride=1, padding=1)
                h = ad.relu(self._bn(f"dec{i}.fuse_bn", h, mode))
        out = conv3d(h, self._p("out.w"), self._p("out.b"), stride=1, padding=0)
        return ad.tanh(out)

    def forward(self, x, mode="train", seed=0):
        """Full pass: returns (reconstruction, LatentDistribution, z).

        Eval mode uses eps = 0 (z = mu) so outputs are deterministic.
        """
        dist, feats = self.encoder_forward(x, mode=mode, seed=seed)
        if mode == "eval":
            z = reparameterize(dist, eps=np.zeros(dist.mu.shape, dtype=dist.mu.dtype))
        else:
            z = reparameterize(dist, seed=rng.spawn(seed, 202))
        xhat = self.decoder_forward(z, feats, mode=mode)
        return xhat, dist, z


class Discriminator(_ParamStore):
    """Strided conv stack (k=4, s=2, leaky ReLU 0.2) down to side 4, then a
    dense head to one unbounded score per sample (least-squares objective)."""

    def __init__(self, input_size: int, base_channels=8, seed=0, dtype=np.float32):
        super().__init__("disc", dtype)
        if input_size < 8 or input_size & (input_size - 1):
            raise ConfigError(f"discriminator input_size must be a power of two >= 8, got {input_size}")
        self.input_size = input_size
        gen = rng.generator(rng.spawn(seed, 777))
        side, in_ch, ch = input_size, 1, base_channels
        self.layers = []
        idx = 0
        while side > 4:
            self.add_param(f"conv{idx}.w", kaiming_conv(gen, (ch, in_ch, 4, 4, 4)))
            self.add_param(f"conv{idx}.b", np.zeros(ch))
            self.layers.append(idx)
            in_ch, ch = ch, ch * 2
            side //= 2
            idx += 1
        self.head_features = in_ch * side**3
        self.add_param("head.w", kaiming_linear(gen, 1, self.head_features) * 0.1)
        self.add_param("head.b", np.zeros(1))

    def forward(self, x):
        x = ad.as_tensor(x)
        s = self.input_size
        if x.ndim != 5 or x.shape[1] != 1 or x.shape[2:] != (s, s, s):
            raise ShapeError(f"discriminator expects [N,1,{s},{s},{s}], got {x.shape}")
        h = x
        for idx in self.layers:
            h = conv3d(h, self._p(f"conv{idx}.w"), self._p(f"conv{idx}.b"), stride=2, padding=1)
            h = ad.leaky_relu(h, 0.2)
        h = ad.flatten(h, start_axis=1)
        score = linear(h, self._p("head.w"), self._p("head.b"))
        return ad.reshape(score, (x.shape[0],))

    def _p(self, name):
        return self.params[name].tensor
