"""
Upsampling Squeeze-and-Excitation (USE) block.

squeeze -> excite -> channel weighting -> transposed-conv upsampling.
The excitation path is two 1x1 convolutions with a fixed C -> C/2 -> C
bottleneck.
"""
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from core_utils import ShapeError
from function.autodiff import (
    ConvParams, Tensor, conv2d, deconv2d, global_avg_pool, relu, sigmoid, finalize_op,
)

UPSAMPLE_KERNEL = 4
UPSAMPLE_STRIDE = 2
UPSAMPLE_PADDING = 1


@dataclass
class ChannelDescriptor:
    z: Tensor  # [N, C, 1, 1]


@dataclass
class ChannelAttention:
    a: Tensor  # [N, C, 1, 1], entries in (0, 1)


@dataclass
class UseConfig:
    in_channels: int
    out_channels: int
    conv1: ConvParams
    conv2: ConvParams
    upsample: ConvParams

    def __post_init__(self):
        c = self.in_channels
        if c < 2 or c % 2:
            raise ShapeError(f"USE block needs an even channel count, got {c}")
        half = c // 2
        if self.conv1.transposed or self.conv1.kernel_size != (1, 1) or \
                (self.conv1.in_channels, self.conv1.out_channels) != (c, half):
            raise ShapeError(f"conv1 must be a 1x1 conv {c}->{half}")
        if self.conv2.transposed or self.conv2.kernel_size != (1, 1) or \
                (self.conv2.in_channels, self.conv2.out_channels) != (half, c):
            raise ShapeError(f"conv2 must be a 1x1 conv {half}->{c}")
        up = self.upsample
        if not up.transposed or (up.in_channels, up.out_channels) != (c, self.out_channels):
            raise ShapeError(f"upsample must be a transposed conv {c}->{self.out_channels}")
        if up.output_size(1, 1) != (2, 2) or up.output_size(4, 4) != (8, 8):
            raise ShapeError("upsample must double the spatial size")

    @classmethod
    def initialise(cls, in_channels: int, out_channels: int,
                   generator: Optional[torch.Generator] = None,
                   std: float = 0.02, dtype: torch.dtype = torch.float64) -> "UseConfig":
        """Fresh parameters: normal(0, std) weights, zero biases."""
        half = in_channels // 2

        def weight(*shape):
            return torch.randn(*shape, generator=generator, dtype=dtype) * std

        return cls(
            in_channels=in_channels,
            out_channels=out_channels,
            conv1=ConvParams(weight(half, in_channels, 1, 1), torch.zeros(half, dtype=dtype)),
            conv2=ConvParams(weight(in_channels, half, 1, 1), torch.zeros(in_channels, dtype=dtype)),
            upsample=ConvParams(
                weight(in_channels, out_channels, UPSAMPLE_KERNEL, UPSAMPLE_KERNEL),
                torch.zeros(out_channels, dtype=dtype),
                stride=UPSAMPLE_STRIDE, padding=UPSAMPLE_PADDING, transposed=True,
            ),
        )


def squeeze(x: Tensor) -> ChannelDescriptor:
    return ChannelDescriptor(global_avg_pool(x))


def excite(z: ChannelDescriptor, cfg: UseConfig) -> ChannelAttention:
    """A = sigmoid(Conv_2(ReLU(Conv_1(z))))."""
    if z.z.dim() != 4 or z.z.shape[1:] != (cfg.in_channels, 1, 1):
        raise ShapeError(f"descriptor shape {tuple(z.z.shape)} does not match {cfg.in_channels} channels")
    return ChannelAttention(sigmoid(conv2d(relu(conv2d(z.z, cfg.conv1)), cfg.conv2)))


def channel_weight(x: Tensor, a: ChannelAttention) -> Tensor:
    """Y[c, i, j] = X[c, i, j] * A[c], broadcast over spatial positions."""
    if x.dim() != 4 or a.a.shape != (x.shape[0], x.shape[1], 1, 1):
        raise ShapeError(f"attention shape {tuple(a.a.shape)} does not fit input {tuple(x.shape)}")
    return finalize_op("channel_weight", (x, a.a), x * a.a)


def use_forward(x: Tensor, cfg: UseConfig) -> Tensor:
    """Squeeze, excite, reweight, then upsample: [N,C,H,W] -> [N,C_out,2H,2W]."""
    if x.dim() != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"USE block expects {cfg.in_channels} channels, got shape {tuple(x.shape)}")
    attention = excite(squeeze(x), cfg)
    return deconv2d(channel_weight(x, attention), cfg.upsample)


class UseBlock(nn.Module):
    """Trainable USE block; parameters live in nn modules, math in use_forward."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        if in_channels < 2 or in_channels % 2:
            raise ShapeError(f"USE block needs an even channel count, got {in_channels}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.conv1 = nn.Conv2d(in_channels, in_channels // 2, 1)
        self.conv2 = nn.Conv2d(in_channels // 2, in_channels, 1)
        self.upsample = nn.ConvTranspose2d(
            in_channels, out_channels, UPSAMPLE_KERNEL, UPSAMPLE_STRIDE, UPSAMPLE_PADDING, bias=False,
        )

    def config(self) -> UseConfig:
        return UseConfig(
            in_channels=self.in_channels,
            out_channels=self.out_channels,
            conv1=ConvParams(self.conv1.weight, self.conv1.bias),
            conv2=ConvParams(self.conv2.weight, self.conv2.bias),
            upsample=ConvParams(self.upsample.weight, self.upsample.bias,
                                stride=UPSAMPLE_STRIDE, padding=UPSAMPLE_PADDING, transposed=True),
        )

    def forward(self, x: Tensor) -> Tensor:
        return use_forward(x, self.config())
