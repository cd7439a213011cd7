"""Simulated post-training quantization (fake quantize).

Symmetric per-tensor affine quantization: round(x/s)*s with
s = max|x| / (2^(bits-1) - 1). W8A16 wraps a module so weights are
quantized once at 8 bits and every conv/linear output is re-quantized at
16 bits during the forward pass (dynamic per-tensor activation scales).
"""

import copy

import torch
import torch.nn as nn

from ..errors import InvalidArgument, NumericError


def fake_quantize(x: torch.Tensor, bits: int = 8) -> torch.Tensor:
    """Quantize-dequantize a tensor; idempotent; all-zero maps to zeros."""
    if bits < 2:
        raise InvalidArgument("bits must be >= 2")
    if not torch.isfinite(x).all():
        raise NumericError("fake_quantize input")
    qmax = 2 ** (bits - 1) - 1
    scale = x.abs().max() / qmax
    if scale == 0:
        return torch.zeros_like(x)
    return torch.round(x / scale) * scale


def quantize_weights_(module: nn.Module, bits: int = 8) -> nn.Module:
    """In-place fake quantization of every parameter tensor."""
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(fake_quantize(p, bits))
    return module


class _ActivationQuant:
    def __init__(self, bits):
        self.bits = bits

    def __call__(self, module, inputs, output):
        if isinstance(output, torch.Tensor):
            return fake_quantize(output, self.bits)
        return output


def quantize_model(module: nn.Module, weight_bits: int = 8,
                   activation_bits: int = 16) -> nn.Module:
    """Deep-copied W{weight_bits}A{activation_bits} variant of a module."""
    q = copy.deepcopy(module)
    quantize_weights_(q, weight_bits)
    hook = _ActivationQuant(activation_bits)
    for sub in q.modules():
        if isinstance(sub, (nn.Conv2d, nn.Linear)):
            sub.register_forward_hook(hook)
    q.eval()
    return q
