"""End-to-end super-resolution inference from a trained state.

Wraps LR encoder -> (sampled) UNet -> decoder as a per-patch callable
compatible with tiled upscaling; per-tile RNG is derived from
(seed, "tile", index) so tile evaluation order never matters.
"""

from dataclasses import dataclass

import numpy as np
import torch

from . import diffusion
from .diffusion import ConditioningMode
from .errors import InvalidArgument
from .models import Decoder, quantize_model
from .schedule import NoiseSchedule, make_schedule
from .seeding import torch_gen
from .training import TrainState


@dataclass
class SuperResolver:
    """Callable SR model: LR image patch in, HR image patch out."""

    lr_encoder: torch.nn.Module
    unet: torch.nn.Module
    decoder: torch.nn.Module
    schedule: NoiseSchedule
    mode: ConditioningMode
    scale: int
    num_steps: int = 1
    seed: int = 0
    deterministic: bool = True
    dtype: torch.dtype = torch.float32

    @classmethod
    def from_states(cls, joint: TrainState, decoder: Decoder, num_steps: int = 1,
                    seed: int = 0, deterministic: bool = True) -> "SuperResolver":
        cfg = joint.train_config
        return cls(
            lr_encoder=joint.modules["lr_encoder"],
            unet=joint.modules["unet"],
            decoder=decoder,
            schedule=make_schedule(cfg.schedule_kind, cfg.schedule_T),
            mode=ConditioningMode(cfg.mode),
            scale=joint.model_config.scale,
            num_steps=num_steps,
            seed=seed,
            deterministic=deterministic,
            dtype=cfg.torch_dtype,
        )

    def quantized(self, weight_bits: int = 8, activation_bits: int = 16) -> "SuperResolver":
        """W8A16 (by default) fake-quantized copy of the whole stack."""
        return SuperResolver(
            lr_encoder=quantize_model(self.lr_encoder, weight_bits, activation_bits),
            unet=quantize_model(self.unet, weight_bits, activation_bits),
            decoder=quantize_model(self.decoder, weight_bits, activation_bits),
            schedule=self.schedule, mode=self.mode, scale=self.scale,
            num_steps=self.num_steps, seed=self.seed,
            deterministic=self.deterministic, dtype=self.dtype)

    def upscale_latent(self, x_l: torch.Tensor, rng: torch.Generator) -> torch.Tensor:
        cond = self.lr_encoder(x_l)
        return diffusion.sample(self.unet, cond, self.schedule, self.num_steps,
                                self.mode, rng=rng, deterministic=self.deterministic)

    def upscale_patch(self, lr_patch: np.ndarray, tile_index: int = 0) -> np.ndarray:
        """(C, h, w) float array in -> (C, h*scale, w*scale) float array out."""
        if lr_patch.ndim != 3:
            raise InvalidArgument("expected (C, H, W) LR patch")
        x = torch.as_tensor(lr_patch).to(self.dtype)[None]
        rng = torch_gen(self.seed, "tile", tile_index)
        with torch.no_grad():
            z = self.upscale_latent(x, rng)
            img = self.decoder(z)
        return img[0].double().numpy()

    def as_tile_model(self):
        return self.upscale_patch
