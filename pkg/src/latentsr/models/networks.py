"""The four networks: HR encoder, two-headed LR encoder, UNet, decoder."""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import InvalidArgument, NumericError
from .blocks import (
    AttentionBlock,
    Downsample,
    ResBlock,
    ShuffleUpsample,
    group_norm,
    sinusoidal_embedding,
)
from .config import ModelConfig

SIGMA_HEAD_FLOOR = 1e-4


@dataclass
class LRCondition:
    """Per-element mean shift and noise-scale multipliers from the LR image.

    ``z_sigma`` is strictly positive and both tensors share the HR latent
    shape.
    """

    z_mu: torch.Tensor
    z_sigma: torch.Tensor

    def __post_init__(self):
        if self.z_mu.shape != self.z_sigma.shape:
            raise InvalidArgument("z_mu and z_sigma must share shape")

    def detach(self) -> "LRCondition":
        return LRCondition(self.z_mu.detach(), self.z_sigma.detach())


def _check_divisible(h: int, w: int, factor: int, what: str):
    if h % factor or w % factor:
        raise InvalidArgument(f"{what} dims {h}x{w} not divisible by {factor}")


class HREncoder(nn.Module):
    """Maps an HR image to its latent; frozen after autoencoder pretraining."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        widths = config.ae_widths
        self.stem = nn.Conv2d(3, widths[0], 3, padding=1)
        stages = []
        for s in range(config.hr_stages):
            blocks = [ResBlock(widths[s], widths[s])
                      for _ in range(config.ae_num_res_blocks)]
            stages.append(nn.ModuleList(blocks))
            stages.append(Downsample(widths[s], widths[s + 1]))
        self.stages = nn.ModuleList(stages)
        self.tail = nn.ModuleList([ResBlock(widths[-1], widths[-1])
                                   for _ in range(config.ae_num_res_blocks)])
        self.out_norm = group_norm(widths[-1])
        self.out_conv = nn.Conv2d(widths[-1], config.latent_channels, 3, padding=1)

    def forward(self, x):
        _check_divisible(x.shape[-2], x.shape[-1], self.config.hr_downsample_factor,
                         "HR image")
        h = self.stem(x)
        for stage in self.stages:
            if isinstance(stage, nn.ModuleList):
                for block in stage:
                    h = block(h)
            else:
                h = stage(h)
        for block in self.tail:
            h = block(h)
        return self.out_conv(F.silu(self.out_norm(h)))


class LREncoder(nn.Module):
    """Shared trunk with mean and sigma heads; sigma = softplus + 1e-4."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        widths = config.lr_encoder_widths
        self.stem = nn.Conv2d(3, widths[0], 3, padding=1)
        stages = []
        for s in range(config.lr_stages):
            blocks = [ResBlock(widths[s], widths[s])
                      for _ in range(config.ae_num_res_blocks)]
            stages.append(nn.ModuleList(blocks))
            stages.append(Downsample(widths[s], widths[s + 1]))
        self.stages = nn.ModuleList(stages)
        self.tail = nn.ModuleList([ResBlock(widths[-1], widths[-1])
                                   for _ in range(config.ae_num_res_blocks)])
        c = widths[-1]
        self.mu_norm = group_norm(c)
        self.mu_conv = nn.Conv2d(c, config.latent_channels, 3, padding=1)
        self.sigma_norm = group_norm(c)
        self.sigma_conv = nn.Conv2d(c, config.latent_channels, 3, padding=1)

    def forward(self, x) -> LRCondition:
        f = self.config.lr_downsample_factor
        _check_divisible(x.shape[-2], x.shape[-1], max(f, 1), "LR image")
        h = self.stem(x)
        for stage in self.stages:
            if isinstance(stage, nn.ModuleList):
                for block in stage:
                    h = block(h)
            else:
                h = stage(h)
        for block in self.tail:
            h = block(h)
        z_mu = self.mu_conv(F.silu(self.mu_norm(h)))
        z_sigma = F.softplus(self.sigma_conv(F.silu(self.sigma_norm(h)))) + SIGMA_HEAD_FLOOR
        return LRCondition(z_mu=z_mu, z_sigma=z_sigma)


class UNet(nn.Module):
    """Latent denoiser predicting the clean latent from (z_t, log-SNR).

    The bidirectional/mean-only variants take ``latent_channels`` input;
    the unidirectional baseline takes twice that (noisy latent
    concatenated with the LR mean latent).
    """

    def __init__(self, config: ModelConfig, in_channels: int | None = None):
        super().__init__()
        self.config = config
        self.in_channels = in_channels or config.latent_channels
        widths = config.unet_widths
        levels = len(widths)
        dt = config.time_embed_dim
        heads = config.attention_heads
        rb = config.num_res_blocks

        self.time_mlp = nn.Sequential(
            nn.Linear(dt, dt), nn.SiLU(), nn.Linear(dt, dt))
        self.stem = nn.Conv2d(self.in_channels, widths[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        for i, w in enumerate(widths):
            blocks = nn.ModuleList([ResBlock(w, w, dt) for _ in range(rb)])
            if i in config.attention_levels:
                blocks.append(AttentionBlock(w, heads))
            self.down_blocks.append(blocks)
            if i < levels - 1:
                self.downsamples.append(Downsample(w, widths[i + 1]))

        w_mid = widths[-1]
        self.mid = nn.ModuleList([
            ResBlock(w_mid, w_mid, dt),
            AttentionBlock(w_mid, heads),
            ResBlock(w_mid, w_mid, dt),
        ])

        self.up_blocks = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for i in reversed(range(levels)):
            w = widths[i]
            blocks = nn.ModuleList(
                [ResBlock(2 * w, w, dt)] + [ResBlock(w, w, dt) for _ in range(rb - 1)])
            if i in config.attention_levels:
                blocks.append(AttentionBlock(w, heads))
            self.up_blocks.append(blocks)
            if i > 0:
                self.upsamples.append(ShuffleUpsample(w, widths[i - 1]))

        self.out_norm = group_norm(widths[0])
        self.out_conv = nn.Conv2d(widths[0], config.latent_channels, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def forward(self, z_t, lam):
        if not torch.isfinite(z_t).all():
            raise NumericError("z_t", "UNet input")
        if z_t.shape[1] != self.in_channels:
            raise InvalidArgument(
                f"UNet expects {self.in_channels} input channels, got {z_t.shape[1]}")
        if lam.ndim == 0:
            lam = lam.expand(z_t.shape[0])
        temb = self.time_mlp(
            sinusoidal_embedding(lam.to(z_t.dtype), self.config.time_embed_dim))
        h = self.stem(z_t)
        skips = []
        for i, blocks in enumerate(self.down_blocks):
            for block in blocks:
                h = block(h, temb) if isinstance(block, ResBlock) else block(h)
            skips.append(h)
            if i < len(self.downsamples):
                h = self.downsamples[i](h)
        for block in self.mid:
            h = block(h, temb) if isinstance(block, ResBlock) else block(h)
        for j, blocks in enumerate(self.up_blocks):
            h = torch.cat([h, skips.pop()], dim=1)
            for block in blocks:
                h = block(h, temb) if isinstance(block, ResBlock) else block(h)
            if j < len(self.upsamples):
                h = self.upsamples[j](h)
        return self.out_conv(F.silu(self.out_norm(h)))


class Decoder(nn.Module):
    """Maps a latent back to an HR image in [0,1].

    A stack of blocks at the latent resolution is followed by
    pixel-shuffle upsampling stages; the output is hard-clamped, with the
    final bias starting at 0.5 so training begins inside the clamp.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        widths = config.ae_widths
        c_top = widths[-1]
        self.stem = nn.Conv2d(config.latent_channels, c_top, 3, padding=1)
        self.deep = nn.ModuleList([ResBlock(c_top, c_top)
                                   for _ in range(config.decoder_blocks)])
        ups = []
        for s in reversed(range(config.hr_stages)):
            ups.append(ShuffleUpsample(widths[s + 1], widths[s]))
            ups.extend(ResBlock(widths[s], widths[s])
                       for _ in range(config.ae_num_res_blocks))
        self.up_path = nn.ModuleList(ups)
        self.out_norm = group_norm(widths[0])
        self.out_conv = nn.Conv2d(widths[0], 3, 3, padding=1)
        nn.init.constant_(self.out_conv.bias, 0.5)

    def forward(self, z):
        if z.shape[1] != self.config.latent_channels:
            raise InvalidArgument(
                f"decoder expects {self.config.latent_channels} latent channels, "
                f"got {z.shape[1]}")
        h = self.stem(z)
        for block in self.deep:
            h = block(h)
        for block in self.up_path:
            h = block(h)
        img = self.out_conv(F.silu(self.out_norm(h)))
        return img.clamp(0.0, 1.0)


def unet_in_channels(config: ModelConfig, conditioning: str) -> int:
    """UNet input width per conditioning mode (concat doubles it)."""
    if conditioning == "unidirectional":
        return 2 * config.latent_channels
    return config.latent_channels
