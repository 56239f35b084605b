"""StyleGAN2-style generator/discriminator pairs for the three model variants.

* ``BSG`` models the joint (image, mask) pair: the generator emits
  ``image_channels + mask_channels`` and the discriminator judges the pair.
* ``MSG`` models masks alone.
* ``CSG`` renders images for a given one-hot mask.  The resampled mask is
  concatenated to the output of every modulated convolution in the
  generator, to the discriminator input before ``fromRGB`` and to the input
  of every residual discriminator block.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .ops import downsample2d, modulated_conv2d, setup_filter, upfirdn2d, upsample2d


class Variant(str, Enum):
    BSG = "BSG"
    MSG = "MSG"
    CSG = "CSG"


class ConditionError(TypeError):
    """A condition mask was missing, superfluous or of the wrong shape."""


@dataclass
class GanConfig:
    variant: Variant = Variant.BSG
    resolution: int = 64
    latent_dim: int = 64
    mapping_layers: int = 2
    channel_base: int = 512
    channel_max: int = 64
    image_channels: int = 1
    mask_channels: int = 4
    lr_g: float = 2e-3
    lr_d: float = 2e-3
    adam_betas: tuple[float, float] = (0.0, 0.99)
    r1_gamma: float = 1.0
    r1_interval: int = 16
    path_length_weight: float = 0.0
    path_length_interval: int = 4
    ema_decay: float = 0.999
    style_mixing_prob: float = 0.0
    use_noise: bool = True
    mbstd_group: int = 0
    batch_size: int = 8
    total_steps: int = 1000
    seed: int = 0

    def __post_init__(self):
        self.variant = Variant(self.variant)
        self.adam_betas = tuple(self.adam_betas)
        r = self.resolution
        if r < 4 or r & (r - 1):
            raise ValueError(f"resolution must be a power of two >= 4, got {r}")
        if self.mask_channels < 1:
            raise ValueError("mask_channels must be >= 1 (C + 1 one-hot channels)")
        if self.variant is Variant.MSG:
            if self.image_channels not in (0, None):
                raise ValueError("MSG models masks only; image_channels must be 0")
            self.image_channels = 0
        elif self.image_channels < 1:
            raise ValueError(f"{self.variant.value} needs image_channels >= 1")

    @property
    def gen_out_channels(self) -> int:
        if self.variant is Variant.BSG:
            return self.image_channels + self.mask_channels
        if self.variant is Variant.MSG:
            return self.mask_channels
        return self.image_channels

    @property
    def disc_in_channels(self) -> int:
        """Channels of the judged sample (excluding any condition)."""
        return self.gen_out_channels

    @property
    def cond_channels(self) -> int:
        return self.mask_channels if self.variant is Variant.CSG else 0

    def channels_at(self, res: int) -> int:
        return max(1, min(self.channel_base // res, self.channel_max))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> GanConfig:
        return cls(**d)


def _lrelu(x: torch.Tensor, gain: float = math.sqrt(2)) -> torch.Tensor:
    return F.leaky_relu(x, 0.2) * gain


class FullyConnected(nn.Module):
    """Equalized-learning-rate linear layer."""

    def __init__(self, in_features, out_features, bias_init=0.0, lr_mult=1.0, activation=False):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_features, in_features) / lr_mult)
        self.bias = nn.Parameter(torch.full([out_features], float(bias_init)))
        self.weight_gain = lr_mult / math.sqrt(in_features)
        self.bias_gain = lr_mult
        self.activation = activation

    def forward(self, x):
        x = F.linear(x, self.weight * self.weight_gain, self.bias * self.bias_gain)
        return _lrelu(x) if self.activation else x


class Conv2dLayer(nn.Module):
    """Equalized-learning-rate convolution with optional FIR-filtered downsampling."""

    def __init__(self, in_channels, out_channels, kernel_size, bias=True, activation=True, down=False):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_channels, in_channels, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None
        self.weight_gain = 1 / math.sqrt(in_channels * kernel_size**2)
        self.activation = activation
        self.down = down
        self.kernel_size = kernel_size
        self.register_buffer("resample_filter", setup_filter())

    def forward(self, x):
        w = self.weight * self.weight_gain
        k = self.kernel_size
        if self.down and k == 1:
            x = downsample2d(x, self.resample_filter)
            x = F.conv2d(x, w)
        elif self.down:
            p = (self.resample_filter.numel() - 2) + (k - 1)
            x = upfirdn2d(x, self.resample_filter, pad=((p + 1) // 2, p // 2, (p + 1) // 2, p // 2))
            x = F.conv2d(x, w, stride=2)
        else:
            x = F.conv2d(x, w, padding=k // 2)
        if self.bias is not None:
            x = x + self.bias.reshape(1, -1, 1, 1)
        return _lrelu(x) if self.activation else x


def resample_condition(cond: torch.Tensor, res: int) -> torch.Tensor:
    """Nearest-neighbour resampling of a one-hot condition to ``res`` x ``res``."""
    if cond.shape[-1] == res:
        return cond
    return F.interpolate(cond, size=(res, res), mode="nearest-exact")


class MappingNetwork(nn.Module):
    def __init__(self, latent_dim, num_layers, lr_mult=0.01, w_avg_beta=0.995):
        super().__init__()
        self.latent_dim = latent_dim
        self.layers = nn.ModuleList(
            FullyConnected(latent_dim, latent_dim, lr_mult=lr_mult, activation=True)
            for _ in range(num_layers)
        )
        self.w_avg_beta = w_avg_beta
        self.register_buffer("w_avg", torch.zeros(latent_dim))

    def forward(self, z, truncation_psi=1.0, update_w_avg=False):
        x = normalize_latent(z)
        for layer in self.layers:
            x = layer(x)
        if update_w_avg:
            self.w_avg.copy_(x.detach().mean(0).lerp(self.w_avg, self.w_avg_beta))
        if truncation_psi != 1:
            x = self.w_avg.lerp(x, truncation_psi)
        return x


def normalize_latent(z: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Pixel norm: rescale each latent to unit root-mean-square."""
    if not torch.isfinite(z).all():
        raise ValueError("latent code has non-finite entries")
    return z * (z.square().mean(dim=1, keepdim=True) + eps).rsqrt()


class ModulatedLayer(nn.Module):
    """Style-modulated 3x3 convolution (optionally upsampling) + noise + bias + lrelu."""

    def __init__(self, in_channels, out_channels, w_dim, resolution, up=False, use_noise=True):
        super().__init__()
        self.affine = FullyConnected(w_dim, in_channels, bias_init=1.0)
        self.weight = nn.Parameter(torch.randn(out_channels, in_channels, 3, 3))
        self.bias = nn.Parameter(torch.zeros(out_channels))
        self.up = up
        self.resolution = resolution
        self.use_noise = use_noise
        if use_noise:
            self.register_buffer("noise_const", torch.randn(resolution, resolution))
            self.noise_strength = nn.Parameter(torch.zeros([]))
        self.register_buffer("resample_filter", setup_filter())

    def forward(self, x, w, noise_mode="random", generator=None):
        styles = self.affine(w)
        if self.up:
            x = upsample2d(x, self.resample_filter)
        x = modulated_conv2d(x, self.weight, styles, demodulate=True)
        if self.use_noise and noise_mode != "none":
            if noise_mode == "const":
                noise = self.noise_const
            else:
                noise = torch.randn(
                    x.shape[0], 1, self.resolution, self.resolution,
                    generator=generator, dtype=x.dtype, device=x.device,
                )
            x = x + noise * self.noise_strength
        return _lrelu(x + self.bias.reshape(1, -1, 1, 1))


class ToImage(nn.Module):
    def __init__(self, in_channels, out_channels, w_dim):
        super().__init__()
        self.affine = FullyConnected(w_dim, in_channels, bias_init=1.0)
        self.weight = nn.Parameter(torch.randn(out_channels, in_channels, 1, 1))
        self.bias = nn.Parameter(torch.zeros(out_channels))
        self.weight_gain = 1 / math.sqrt(in_channels)

    def forward(self, x, w):
        styles = self.affine(w) * self.weight_gain
        x = modulated_conv2d(x, self.weight, styles, demodulate=False)
        return x + self.bias.reshape(1, -1, 1, 1)


class SynthesisBlock(nn.Module):
    def __init__(self, in_channels, out_channels, w_dim, resolution, out_image_channels, cond_channels, use_noise):
        super().__init__()
        self.resolution = resolution
        self.cond_channels = cond_channels
        if in_channels == 0:
            self.const = nn.Parameter(torch.randn(out_channels, resolution, resolution))
            self.conv0 = None
        else:
            self.conv0 = ModulatedLayer(in_channels + cond_channels, out_channels, w_dim, resolution, up=True, use_noise=use_noise)
        self.conv1 = ModulatedLayer(out_channels + cond_channels, out_channels, w_dim, resolution, use_noise=use_noise)
        self.torgb = ToImage(out_channels + cond_channels, out_image_channels, w_dim)
        self.register_buffer("resample_filter", setup_filter())
        self.num_ws = 2 if self.conv0 is not None else 1

    def _with_cond(self, x, cond):
        if not self.cond_channels:
            return x
        return torch.cat([x, resample_condition(cond, x.shape[-1])], dim=1)

    def forward(self, x, img, ws, cond=None, noise_mode="random", generator=None):
        w_iter = iter(ws.unbind(1))
        if self.conv0 is None:
            x = self.const.unsqueeze(0).expand(ws.shape[0], -1, -1, -1)
        else:
            # the previous block's output is itself a demodulated feature map
            x = self.conv0(self._with_cond(x, cond), next(w_iter), noise_mode, generator)
        x = self.conv1(self._with_cond(x, cond), next(w_iter), noise_mode, generator)
        y = self.torgb(self._with_cond(x, cond), next(w_iter))
        img = y if img is None else upsample2d(img, self.resample_filter) + y
        return x, img


class Generator(nn.Module):
    def __init__(self, cfg: GanConfig):
        super().__init__()
        self.cfg = cfg
        self.mapping = MappingNetwork(cfg.latent_dim, cfg.mapping_layers)
        self.block_resolutions = [2**i for i in range(2, int(math.log2(cfg.resolution)) + 1)]
        blocks = []
        in_ch = 0
        for res in self.block_resolutions:
            out_ch = cfg.channels_at(res)
            blocks.append(
                SynthesisBlock(in_ch, out_ch, cfg.latent_dim, res, cfg.gen_out_channels, cfg.cond_channels, cfg.use_noise)
            )
            in_ch = out_ch
        self.blocks = nn.ModuleList(blocks)
        self.num_ws = sum(b.num_ws for b in self.blocks) + 1

    def check_condition(self, cond, batch=None):
        if self.cfg.variant is Variant.CSG:
            if cond is None:
                raise ConditionError("CSG generator requires a one-hot mask condition")
            expected = (self.cfg.mask_channels, self.cfg.resolution, self.cfg.resolution)
            if cond.ndim != 4 or tuple(cond.shape[1:]) != expected:
                raise ConditionError(f"condition shape {tuple(cond.shape)} != (N, {expected})")
            if batch is not None and cond.shape[0] != batch:
                raise ConditionError("condition batch size differs from latent batch size")
        elif cond is not None:
            raise ConditionError(f"{self.cfg.variant.value} generator takes no condition")

    def synthesis(self, ws, cond=None, noise_mode="random", generator=None):
        self.check_condition(cond, ws.shape[0])
        x = img = None
        i = 0
        for block in self.blocks:
            n = block.num_ws + 1
            x, img = block(x, img, ws[:, i : i + n], cond, noise_mode, generator)
            i += block.num_ws
        return img

    def forward(self, z, cond=None, truncation_psi=1.0, noise_mode="random", generator=None,
                update_w_avg=False, mixing_prob=0.0, return_ws=False):
        self.check_condition(cond, z.shape[0])
        w = self.mapping(z, truncation_psi, update_w_avg=update_w_avg)
        ws = w.unsqueeze(1).repeat(1, self.num_ws, 1)
        if mixing_prob > 0:
            draw = torch.rand([], generator=generator)
            if draw < mixing_prob:
                cutoff = int(torch.randint(1, self.num_ws, [], generator=generator))
                z2 = torch.randn(z.shape, generator=generator, dtype=z.dtype)
                ws[:, cutoff:] = self.mapping(z2, truncation_psi).unsqueeze(1)
        img = self.synthesis(ws, cond, noise_mode, generator)
        return (img, ws) if return_ws else img


class DiscriminatorBlock(nn.Module):
    """Residual block: two 3x3 convs (the second downsampling) and a 1x1 downsampling skip."""

    def __init__(self, in_channels, out_channels, cond_channels):
        super().__init__()
        self.cond_channels = cond_channels
        cin = in_channels + cond_channels
        self.conv0 = Conv2dLayer(cin, in_channels, 3)
        self.conv1 = Conv2dLayer(in_channels, out_channels, 3, down=True)
        self.skip = Conv2dLayer(cin, out_channels, 1, bias=False, activation=False, down=True)

    def forward(self, x, cond=None):
        if self.cond_channels:
            x = torch.cat([x, resample_condition(cond, x.shape[-1])], dim=1)
        y = self.skip(x)
        x = self.conv1(self.conv0(x))
        return (x + y) * math.sqrt(0.5)


class Discriminator(nn.Module):
    def __init__(self, cfg: GanConfig):
        super().__init__()
        self.cfg = cfg
        top = cfg.resolution
        self.fromrgb = Conv2dLayer(cfg.disc_in_channels + cfg.cond_channels, cfg.channels_at(top), 1)
        resolutions = [2**i for i in range(int(math.log2(top)), 2, -1)]
        self.blocks = nn.ModuleList(
            DiscriminatorBlock(cfg.channels_at(r), cfg.channels_at(r // 2), cfg.cond_channels)
            for r in resolutions
        )
        ch4 = cfg.channels_at(4)
        self.mbstd_group = cfg.mbstd_group
        self.conv = Conv2dLayer(ch4 + (1 if cfg.mbstd_group else 0), ch4, 3)
        self.fc = FullyConnected(ch4 * 16, ch4, activation=True)
        self.out = FullyConnected(ch4, 1)

    def check_condition(self, x, cond):
        if x.ndim != 4 or x.shape[1] != self.cfg.disc_in_channels:
            raise ConditionError(
                f"{self.cfg.variant.value} discriminator expects {self.cfg.disc_in_channels} channels, got {tuple(x.shape)}"
            )
        if self.cfg.variant is Variant.CSG:
            if cond is None:
                raise ConditionError("CSG discriminator requires a one-hot mask condition")
            if cond.shape[0] != x.shape[0] or cond.shape[1] != self.cfg.mask_channels:
                raise ConditionError(f"condition shape {tuple(cond.shape)} does not match input")
        elif cond is not None:
            raise ConditionError(f"{self.cfg.variant.value} discriminator takes no condition")

    def _minibatch_std(self, x):
        n, c, h, w = x.shape
        g = min(self.mbstd_group, n)
        y = x.reshape(g, -1, c, h, w)
        y = (y - y.mean(0)).square().mean(0).add(1e-8).sqrt().mean([1, 2, 3])
        y = y.reshape(-1, 1, 1, 1).repeat(g, 1, h, w)
        return torch.cat([x, y], dim=1)

    def forward(self, x, cond=None):
        self.check_condition(x, cond)
        if self.cfg.cond_channels:
            x = torch.cat([x, resample_condition(cond, x.shape[-1])], dim=1)
        x = self.fromrgb(x)
        for block in self.blocks:
            x = block(x, cond)
        if self.mbstd_group:
            x = self._minibatch_std(x)
        x = self.conv(x)
        x = self.fc(x.flatten(1))
        return self.out(x).squeeze(1)


def build_networks(cfg: GanConfig) -> tuple[Generator, Discriminator]:
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        return Generator(cfg), Discriminator(cfg)


def count_parameters(module: nn.Module) -> int:
    return sum(int(np.prod(p.shape)) for p in module.parameters())
