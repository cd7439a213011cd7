"""Model configuration and the toy/full presets.

One config drives four networks: the HR encoder (frozen after
pretraining), the two-headed LR encoder, the UNet denoiser, and the
decoder. The LR encoder downsamples by ``hr_downsample_factor / scale``
so LR and HR latents share spatial shape.
"""

import math
from dataclasses import dataclass, field, asdict

from ..errors import InvalidArgument


@dataclass(frozen=True)
class ModelConfig:
    latent_channels: int = 4
    scale: int = 4
    hr_downsample_factor: int = 8
    # UNet
    base_channels: int = 32
    channel_multipliers: tuple = (1, 2, 2)
    num_res_blocks: int = 1
    attention_levels: tuple = (2,)
    attention_heads: int = 1
    time_embed_dim: int = 128
    # autoencoder (HR/LR encoders and decoder)
    ae_base_channels: int = 16
    ae_channel_multipliers: tuple = (1, 2, 4, 8)
    ae_num_res_blocks: int = 1
    decoder_blocks: int = 2  # depth of the stack at the lowest decoder resolution
    lr_encoder_multipliers: tuple | None = None  # defaults to the deep ae slice

    def __post_init__(self):
        if self.scale < 1 or self.hr_downsample_factor < 1:
            raise InvalidArgument("scale and hr_downsample_factor must be >= 1")
        if self.hr_downsample_factor % self.scale:
            raise InvalidArgument(
                "hr_downsample_factor must be divisible by scale so LR and "
                "HR latents share spatial shape")
        for name in ("hr_downsample_factor",):
            f = getattr(self, name)
            if 2 ** int(math.log2(f)) != f:
                raise InvalidArgument(f"{name} must be a power of two")
        f_lr = self.lr_downsample_factor
        if f_lr >= 1 and 2 ** int(math.log2(f_lr)) != f_lr:
            raise InvalidArgument("derived lr_downsample_factor must be a power of two")
        levels = len(self.channel_multipliers)
        if not set(self.attention_levels) <= set(range(levels)):
            raise InvalidArgument(
                f"attention_levels {self.attention_levels} outside 0..{levels - 1}")
        if len(self.ae_channel_multipliers) != self.hr_stages + 1:
            raise InvalidArgument(
                "ae_channel_multipliers needs one entry per encoder stage "
                f"plus the stem ({self.hr_stages + 1} for factor "
                f"{self.hr_downsample_factor})")
        if (self.lr_encoder_multipliers is not None
                and len(self.lr_encoder_multipliers) != self.lr_stages + 1):
            raise InvalidArgument(
                f"lr_encoder_multipliers needs {self.lr_stages + 1} entries")

    @property
    def lr_downsample_factor(self) -> int:
        return self.hr_downsample_factor // self.scale

    @property
    def hr_stages(self) -> int:
        return int(math.log2(self.hr_downsample_factor))

    @property
    def lr_stages(self) -> int:
        return int(math.log2(self.lr_downsample_factor))

    @property
    def unet_widths(self) -> tuple:
        return tuple(self.base_channels * m for m in self.channel_multipliers)

    @property
    def ae_widths(self) -> tuple:
        return tuple(self.ae_base_channels * m for m in self.ae_channel_multipliers)

    @property
    def lr_encoder_widths(self) -> tuple:
        if self.lr_encoder_multipliers is not None:
            return tuple(self.ae_base_channels * m for m in self.lr_encoder_multipliers)
        # by default the LR encoder mirrors the deep end of the HR encoder
        return self.ae_widths[-(self.lr_stages + 1):]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise InvalidArgument(f"unknown ModelConfig keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("channel_multipliers", "attention_levels", "ae_channel_multipliers"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


# Small enough to train on a laptop CPU in minutes: HR 128x128, LR 32x32,
# latent 4x16x16.
TOY = ModelConfig()

# Budget-matched large preset; audited against the deployment targets by
# models.audit (UNet ~158M params / ~40 GFLOPs on a 128px LR patch,
# autoencoder ~14M params / ~102 GFLOPs).
FULL = ModelConfig(
    latent_channels=8,
    scale=4,
    hr_downsample_factor=8,
    base_channels=128,
    channel_multipliers=(1, 2, 4, 8),
    num_res_blocks=1,
    attention_levels=(2, 3),
    attention_heads=8,
    time_embed_dim=512,
    ae_base_channels=16,
    ae_channel_multipliers=(1, 2, 4, 28),
    ae_num_res_blocks=1,
    decoder_blocks=3,
    lr_encoder_multipliers=(3, 6),
)

PRESETS = {"toy": TOY, "full": FULL}
