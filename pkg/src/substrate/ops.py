#!/usr/bin/env python3
"""
Differentiable op set
Everything the encoder, decoder, stereo head and losses are built from:
conv + GroupNorm + ReLU, sigmoid, bilinear resize, concat, elementwise sum,
channel softmax and horizontal warping. Tensors are B x C x H x W.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from common.errors import DisparityRangeError, ShapeMismatchError

PROB_SUM_TOL = 1e-6
MAX_NORM_GROUPS = 8
NORM_KINDS = ('group', 'none')


@dataclass
class FeatureMap:
    """Feature tensor plus its power-of-two downsampling level"""
    data: torch.Tensor
    stride_level: int

    @property
    def channels(self) -> int:
        return int(self.data.shape[1])

    @property
    def hw(self) -> Tuple[int, int]:
        return int(self.data.shape[-2]), int(self.data.shape[-1])

    def validate(self, input_hw: Tuple[int, int]) -> None:
        if not torch.isfinite(self.data).all():
            raise ShapeMismatchError(f"non-finite values in feature map at stride level {self.stride_level}")
        expected = tuple(-(-s // 2 ** self.stride_level) for s in input_hw)
        if self.hw != expected:
            raise ShapeMismatchError(
                f"feature map {self.hw} inconsistent with stride level {self.stride_level} "
                f"of input {input_hw} (expected {expected})"
            )


def norm_groups(channels: int, max_groups: int = MAX_NORM_GROUPS) -> int:
    """Largest divisor of channels not above max_groups"""
    return max(g for g in range(1, min(channels, max_groups) + 1) if channels % g == 0)


class ConvBnAct(nn.Module):
    """3x3 or 1x1 convolution, optional normalisation and ReLU; H_out = ceil(H / stride).

    norm='group' normalises each sample on its own, so batch-1 training and
    eval-mode inference see the same statistics.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, stride: int = 1,
                 norm: str = 'group', use_act: bool = True, bias: Optional[bool] = None):
        super().__init__()
        if kernel_size not in (1, 3):
            raise ValueError(f"kernel_size must be 1 or 3, got {kernel_size}")
        if stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {stride}")
        if norm not in NORM_KINDS:
            raise ValueError(f"norm must be one of {NORM_KINDS}, got '{norm}'")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        use_norm = norm != 'none'
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size, stride=stride,
                              padding=kernel_size // 2, bias=(not use_norm) if bias is None else bias)
        self.norm = nn.GroupNorm(norm_groups(out_channels), out_channels) if use_norm else None
        self.act = nn.ReLU(inplace=False) if use_act else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.in_channels:
            raise ShapeMismatchError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        x = self.conv(x)
        if self.norm is not None:
            x = self.norm(x)
        if self.act is not None:
            x = self.act(x)
        return x


def upsample_bilinear(x: torch.Tensor, factor: int) -> torch.Tensor:
    if factor == 1:
        return x
    return F.interpolate(x, scale_factor=factor, mode='bilinear', align_corners=False)


def resize_bilinear(x: torch.Tensor, hw: Tuple[int, int]) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(hw):
        return x
    return F.interpolate(x, size=tuple(hw), mode='bilinear', align_corners=False)


def elementwise_sum(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"cannot sum feature maps of shapes {tuple(a.shape)} and {tuple(b.shape)}")
    return a + b


def concat_channels(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[0] != b.shape[0] or a.shape[-2:] != b.shape[-2:]:
        raise ShapeMismatchError(f"cannot concatenate {tuple(a.shape)} with {tuple(b.shape)}")
    return torch.cat([a, b], dim=1)


def softmax_channels(logits: torch.Tensor) -> torch.Tensor:
    return torch.softmax(logits, dim=1)


def check_prob_map(probs: torch.Tensor, tol: float = PROB_SUM_TOL) -> None:
    """Per-pixel values in (0,1], channel sums 1 within tol"""
    if not ((probs > 0) & (probs <= 1)).all():
        raise ShapeMismatchError("probabilities must lie in (0, 1]")
    err = (probs.sum(dim=1) - 1.0).abs().max().item()
    if not err <= tol:
        raise ShapeMismatchError(f"channel sums deviate from 1 by {err:.2e}")


def warp_horizontal(image: torch.Tensor, disparity: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Sample image at (u - disparity(p), v) with linear interpolation.

    Returns the warped tensor and an in-frame mask (B x 1 x H x W); out-of-frame
    samples are zero.
    """
    if disparity.dim() == 3:
        disparity = disparity.unsqueeze(1)
    if image.shape[0] != disparity.shape[0] or image.shape[-2:] != disparity.shape[-2:]:
        raise ShapeMismatchError(f"image {tuple(image.shape)} and disparity {tuple(disparity.shape)} do not align")
    if (disparity < 0).any():
        raise DisparityRangeError("warp_horizontal needs nonnegative disparity")

    b, c, h, w = image.shape
    cols = torch.arange(w, dtype=disparity.dtype, device=disparity.device).view(1, 1, 1, w)
    x = cols - disparity
    in_frame = x >= 0

    x0 = torch.floor(x)
    frac = x - x0
    x0 = x0.long()
    idx0 = x0.clamp(0, w - 1).expand(b, c, h, w)
    idx1 = (x0 + 1).clamp(0, w - 1).expand(b, c, h, w)
    v0 = torch.gather(image, 3, idx0)
    v1 = torch.gather(image, 3, idx1)
    warped = v0 * (1 - frac) + v1 * frac
    warped = torch.where(in_frame.expand(b, c, h, w), warped, torch.zeros_like(warped))
    return warped, in_frame
