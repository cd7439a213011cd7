"""Networks, configuration presets, budget audits, quantization, checkpoints."""

from .audit import audit_report, count_params, estimate_flops
from .checkpoint import (
    Checkpoint,
    load_checkpoint,
    load_module,
    load_optimizer,
    module_tensors,
    optimizer_tensors,
    save_checkpoint,
)
from .config import FULL, PRESETS, TOY, ModelConfig
from .networks import (
    Decoder,
    HREncoder,
    LRCondition,
    LREncoder,
    UNet,
    unet_in_channels,
)
from .quantize import fake_quantize, quantize_model, quantize_weights_

__all__ = [
    "Checkpoint", "Decoder", "FULL", "HREncoder", "LRCondition", "LREncoder",
    "ModelConfig", "PRESETS", "TOY", "UNet", "audit_report", "count_params",
    "estimate_flops", "fake_quantize", "load_checkpoint", "load_module",
    "load_optimizer", "module_tensors", "optimizer_tensors", "quantize_model",
    "quantize_weights_", "save_checkpoint", "unet_in_channels",
]
