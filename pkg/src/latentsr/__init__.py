"""Desk-scale latent-diffusion super-resolution.

Subpackages cover the noise schedule, a parametric degradation pipeline,
small convolutional encoders/UNet/decoder with budget audits, the
LR-conditioned forward/backward diffusion processes, staged training
(autoencoder, joint, distillation, decoder finetune), tiled inference,
and reference image metrics. The ``latentsr`` CLI wires them together.
"""

__version__ = "0.1.0"
