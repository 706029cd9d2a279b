"""Seeded, fan-in scaled initialization helpers.

All model parameters are drawn from an explicit torch.Generator so that a
context rebuilt from the same seed is bit-identical across processes.
"""

from __future__ import annotations

import math

import torch
from torch import nn


def init_linear(layer: nn.Linear, generator: torch.Generator, gain: float = 1.0) -> None:
    fan_in = layer.weight.shape[1]
    std = gain / math.sqrt(fan_in)
    with torch.no_grad():
        layer.weight.normal_(0.0, std, generator=generator)
        if layer.bias is not None:
            layer.bias.zero_()


def init_conv(layer: nn.Conv2d, generator: torch.Generator, gain: float = 1.0) -> None:
    fan_in = layer.in_channels * layer.kernel_size[0] * layer.kernel_size[1]
    std = gain / math.sqrt(fan_in)
    with torch.no_grad():
        layer.weight.normal_(0.0, std, generator=generator)
        if layer.bias is not None:
            layer.bias.zero_()
