#!/usr/bin/env python3
"""
Stereo Matching Head
Correlation cost volume over shared half-stride features, optional cost
aggregation and soft-argmin regression. The right-view map is produced by the
same weights on the mirrored, view-swapped pair.
"""

from dataclasses import dataclass
from typing import List, Optional, Tuple

import torch
import torch.nn as nn
from loguru import logger

from common.errors import ConfigError, DisparityRangeError, ShapeMismatchError
from model.encoder_tgf import build_context_stage
from substrate.ops import ConvBnAct, FeatureMap, concat_channels, resize_bilinear

log = logger.bind(source="stereo")

OUT_OF_FRAME_COST = 1e4
SHARED_STAGES = 3
COST_STRIDE_STAGE = {2: 2, 4: 3}


@dataclass
class StereoConfig:
    d_max: int = 16
    cost_stride: int = 4
    cost_aggregation: bool = True
    refine: bool = True

    def validate(self) -> None:
        if self.d_max <= 0:
            raise ConfigError(f"stereo.d_max must be positive, got {self.d_max}")
        if self.cost_stride not in COST_STRIDE_STAGE:
            raise ConfigError(f"stereo.cost_stride must be one of {sorted(COST_STRIDE_STAGE)}")
        if self.d_max % self.cost_stride:
            raise ConfigError(f"stereo.d_max ({self.d_max}) must be a multiple of cost_stride ({self.cost_stride})")

    @property
    def num_candidates(self) -> int:
        return self.d_max // self.cost_stride + 1


@dataclass
class CostVolume:
    data: torch.Tensor          # B x D x h x w
    d_max: float
    stride: int = 1

    @property
    def num_candidates(self) -> int:
        return int(self.data.shape[1])


@dataclass
class StereoOutput:
    disp_left: torch.Tensor     # B x 1 x H x W
    disp_right: torch.Tensor
    shared_pyramid: List[FeatureMap]
    cost_volume: CostVolume


def correlation_volume(f_left: torch.Tensor, f_right: torch.Tensor,
                       num_candidates: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """Channel-mean correlation of f_left(p) with f_right(p - (d, 0)).

    Returns (B x D x h x w correlation, B x D x 1 x w in-frame mask); out-of-frame
    entries are zero.
    """
    if f_left.shape != f_right.shape:
        raise ShapeMismatchError(f"left/right features differ: {tuple(f_left.shape)} vs {tuple(f_right.shape)}")
    b, _, h, w = f_left.shape
    corr = f_left.new_zeros((b, num_candidates, h, w))
    in_frame = torch.zeros((b, num_candidates, 1, w), dtype=torch.bool, device=f_left.device)
    for d in range(num_candidates):
        if d >= w:
            break
        if d == 0:
            corr[:, 0] = (f_left * f_right).mean(dim=1)
        else:
            corr[:, d, :, d:] = (f_left[..., d:] * f_right[..., :-d]).mean(dim=1)
        in_frame[:, d, :, d:] = True
    return corr, in_frame


def costs_from_correlation(corr: torch.Tensor, in_frame: torch.Tensor) -> torch.Tensor:
    return torch.where(in_frame.expand_as(corr), -corr, torch.full_like(corr, OUT_OF_FRAME_COST))


def build_cost_volume(f_left: FeatureMap, f_right: FeatureMap, d_max: float) -> CostVolume:
    """Negated correlation per candidate; d_max is in full-resolution pixels"""
    if d_max <= 0:
        raise DisparityRangeError(f"d_max must be positive, got {d_max}")
    if f_left.stride_level != f_right.stride_level:
        raise ShapeMismatchError("left/right features come from different stride levels")
    stride = 2 ** f_left.stride_level
    corr, in_frame = correlation_volume(f_left.data, f_right.data, int(d_max // stride) + 1)
    return CostVolume(costs_from_correlation(corr, in_frame), float(d_max), stride)


def soft_argmin(cv: CostVolume, out_hw: Optional[Tuple[int, int]] = None) -> torch.Tensor:
    """Expected disparity under softmax(-cost), upsampled to out_hw, in pixels"""
    probs = torch.softmax(-cv.data, dim=1)
    candidates = torch.arange(cv.num_candidates, dtype=probs.dtype, device=probs.device).view(1, -1, 1, 1)
    disp = (probs * candidates).sum(dim=1, keepdim=True)
    if out_hw is not None:
        disp = resize_bilinear(disp, out_hw)
    return (disp * cv.stride).clamp(0.0, cv.d_max)


class CostAggregation(nn.Module):
    """Two conv blocks over the candidate axis with a residual connection"""

    def __init__(self, num_candidates: int):
        super().__init__()
        self.blocks = nn.Sequential(
            ConvBnAct(num_candidates, num_candidates, 3),
            ConvBnAct(num_candidates, num_candidates, 3, use_act=False),
        )

    def forward(self, corr: torch.Tensor) -> torch.Tensor:
        return corr + self.blocks(corr)


class DisparityRefinement(nn.Module):
    """Image-guided residual on the upsampled disparity, at full resolution.

    The last conv starts at zero, so an untrained module returns its input.
    """

    def __init__(self, d_max: float, channels: int, in_channels: int = 3):
        super().__init__()
        self.d_max = float(d_max)
        self.blocks = nn.Sequential(
            ConvBnAct(in_channels + 1, channels, 3),
            ConvBnAct(channels, channels, 3),
        )
        self.residual = nn.Conv2d(channels, 1, kernel_size=3, padding=1)
        nn.init.zeros_(self.residual.weight)
        nn.init.zeros_(self.residual.bias)

    def forward(self, disparity: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
        x = concat_channels(disparity / self.d_max, image)
        delta = self.residual(self.blocks(x)) * self.d_max
        return (disparity + delta).clamp(0.0, self.d_max)


class StereoFeatureExtractor(nn.Module):
    """The first contextual stages; shared by reference with the semantic encoder"""

    def __init__(self, channels: Tuple[int, ...], num_stages: int = SHARED_STAGES, in_channels: int = 3):
        super().__init__()
        self.stages = nn.ModuleList(build_context_stage(channels, j, in_channels) for j in range(1, num_stages + 1))

    def forward(self, image: torch.Tensor) -> List[FeatureMap]:
        feats = []
        x = image
        for j, stage in enumerate(self.stages, start=1):
            x = stage(x)
            feats.append(FeatureMap(x, (j + 1) // 2))
        return feats


class StereoHead(nn.Module):
    def __init__(self, cfg: StereoConfig, channels: Tuple[int, ...]):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.extractor = StereoFeatureExtractor(channels)
        self.cost_stage = COST_STRIDE_STAGE[cfg.cost_stride]
        c = self.extractor.stages[self.cost_stage - 1].out_channels
        self.match_proj = nn.Conv2d(c, c, kernel_size=1)
        self.aggregation = CostAggregation(cfg.num_candidates) if cfg.cost_aggregation else None
        self.refinement = DisparityRefinement(cfg.d_max, channels[0]) if cfg.refine else None
        log.debug(f"stereo head d_max={cfg.d_max} stride={cfg.cost_stride} candidates={cfg.num_candidates} "
                  f"refine={cfg.refine}")

    def regress(self, f_left: FeatureMap, f_right: FeatureMap, out_hw: Tuple[int, int],
                reference: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, CostVolume]:
        """Disparity of the reference view; `reference` is that view's image, used for refinement"""
        fl = self.match_proj(f_left.data)
        fr = self.match_proj(f_right.data)
        corr, in_frame = correlation_volume(fl, fr, self.cfg.num_candidates)
        if self.aggregation is not None:
            corr = self.aggregation(corr)
        cv = CostVolume(costs_from_correlation(corr, in_frame), float(self.cfg.d_max), self.cfg.cost_stride)
        disparity = soft_argmin(cv, out_hw)
        if self.refinement is not None and reference is not None:
            disparity = self.refinement(disparity, reference)
        return disparity, cv

    def estimate_both_views(self, left: torch.Tensor, right: torch.Tensor) -> StereoOutput:
        """D^L from (left, right); D^R from mirrored (right, left), un-mirrored"""
        if left.shape != right.shape:
            raise ShapeMismatchError(f"stereo views differ in shape: {tuple(left.shape)} vs {tuple(right.shape)}")
        b = left.shape[0]
        hw = tuple(left.shape[-2:])
        mirror_left = torch.flip(right, dims=[-1])
        mirror_right = torch.flip(left, dims=[-1])

        # one pass over all four views
        feats = self.extractor(torch.cat([left, right, mirror_left, mirror_right], dim=0))
        cost_feat = feats[self.cost_stage - 1]

        def view(k: int) -> FeatureMap:
            return FeatureMap(cost_feat.data[k * b:(k + 1) * b], cost_feat.stride_level)

        disp_left, cv = self.regress(view(0), view(1), hw, reference=left)
        disp_right_m, _ = self.regress(view(2), view(3), hw, reference=mirror_left)
        shared = [FeatureMap(f.data[:b], f.stride_level) for f in feats]
        return StereoOutput(disp_left=disp_left, disp_right=torch.flip(disp_right_m, dims=[-1]),
                            shared_pyramid=shared, cost_volume=cv)

    def forward(self, left: torch.Tensor, right: torch.Tensor) -> StereoOutput:
        return self.estimate_both_views(left, right)
