#!/usr/bin/env python3
"""
Hierarchical Deep Supervision Decoder
U-shaped decoder over the fused pyramid with one main classifier and, depending
on hds_mode, side classifiers at every deeper resolution. In full HDS mode a
chain of feature-alignment (FDA) units carries a shallow guidance feature down
to each side head.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import torch
import torch.nn as nn
from loguru import logger

from common.errors import ConfigError, ShapeMismatchError
from model.encoder_tgf import EncoderPyramid
from substrate.ops import ConvBnAct, FeatureMap, check_prob_map, concat_channels, resize_bilinear, softmax_channels

log = logger.bind(source="decoder")

HDS_MODES = ('none', 'sds', 'fds', 'sds+fds', 'hds')
GUIDANCE_SOURCES = ('GF', 'CF', 'FF')


@dataclass
class DecoderConfig:
    num_classes: int = 4
    hds_mode: str = 'hds'
    guidance_source: str = 'FF'
    guidance_layer: int = 1

    def validate(self, n_layers: Optional[int] = None) -> None:
        if self.num_classes < 2:
            raise ConfigError(f"decoder.num_classes must be >= 2, got {self.num_classes}")
        if self.hds_mode not in HDS_MODES:
            raise ConfigError(f"decoder.hds_mode must be one of {HDS_MODES}")
        if self.guidance_source not in GUIDANCE_SOURCES:
            raise ConfigError(f"decoder.guidance_source must be one of {GUIDANCE_SOURCES}")
        if self.guidance_layer not in (1, 2, 3):
            raise ConfigError(f"decoder.guidance_layer must be 1, 2 or 3, got {self.guidance_layer}")
        if n_layers is not None and self.guidance_layer > n_layers:
            raise ConfigError(f"guidance_layer {self.guidance_layer} exceeds encoder depth {n_layers}")

    @property
    def two_node_main(self) -> bool:
        return self.hds_mode in ('sds', 'sds+fds', 'hds')

    @property
    def side_heads(self) -> bool:
        return self.hds_mode in ('fds', 'sds+fds', 'hds')

    @property
    def guided(self) -> bool:
        return self.hds_mode == 'hds'

    def required_context_stage(self) -> int:
        """Contextual stage the guidance reads (0 when it reads another branch)"""
        if self.guided and self.guidance_source == 'CF':
            return 2 * self.guidance_layer - 1
        return 0


@dataclass
class BranchOutputs:
    logits: List[torch.Tensor]
    branch_roles: List[str] = field(default_factory=list)

    @property
    def L(self) -> int:
        return len(self.logits)

    def probs(self) -> List[torch.Tensor]:
        return [softmax_channels(x) for x in self.logits]

    def validate(self) -> None:
        """Every branch softmax, taken in float64, is a valid probability map"""
        for x in self.logits:
            check_prob_map(softmax_channels(x.double()))

    @property
    def main(self) -> torch.Tensor:
        return self.logits[0]


class FDAChain(nn.Module):
    """Chained 3x3 stride-2 conv + GroupNorm + ReLU units; tap u is the output of u units"""

    def __init__(self, in_channels: int, unit_channels: List[int], max_depth: Optional[int] = None):
        super().__init__()
        if max_depth is not None and len(unit_channels) > max_depth:
            raise ConfigError(f"FDA chain of {len(unit_channels)} units exceeds pyramid depth {max_depth}")
        units = []
        c_prev = in_channels
        for c in unit_channels:
            units.append(ConvBnAct(c_prev, c, 3, stride=2))
            c_prev = c
        self.units = nn.ModuleList(units)

    @property
    def depth(self) -> int:
        return len(self.units)

    def forward(self, guidance: torch.Tensor) -> List[torch.Tensor]:
        taps = []
        x = guidance
        for unit in self.units:
            x = unit(x)
            taps.append(x)
        return taps


def fda_chain(guidance: FeatureMap, depth: int, unit_channels: Optional[List[int]] = None) -> FDAChain:
    """Fresh chain of `depth` units for the given guidance feature"""
    channels = unit_channels or [guidance.channels] * depth
    if len(channels) != depth:
        raise ConfigError(f"{len(channels)} unit widths given for an FDA chain of depth {depth}")
    return FDAChain(guidance.channels, channels)


class SideHead(nn.Module):
    """concat(deep, tap) -> 1x1 classifier -> bilinear upsample to full resolution"""

    def __init__(self, deep_channels: int, tap_channels: int, num_classes: int):
        super().__init__()
        self.deep_channels = deep_channels
        self.tap_channels = tap_channels
        self.classifier = nn.Conv2d(deep_channels + tap_channels, num_classes, kernel_size=1)

    def forward(self, deep_feat: torch.Tensor, tap: torch.Tensor, out_hw: Tuple[int, int]) -> torch.Tensor:
        if deep_feat.shape[1] != self.deep_channels or tap.shape[1] != self.tap_channels:
            raise ShapeMismatchError(
                f"side head expects {self.deep_channels}+{self.tap_channels} channels, "
                f"got {deep_feat.shape[1]}+{tap.shape[1]}"
            )
        return resize_bilinear(self.classifier(concat_channels(deep_feat, tap)), out_hw)


def side_head(head: SideHead, deep_feat: FeatureMap, tap: FeatureMap, out_hw: Tuple[int, int]) -> torch.Tensor:
    return head(deep_feat.data, tap.data, out_hw)


class HDSDecoder(nn.Module):
    def __init__(self, cfg: DecoderConfig, channels: Tuple[int, ...], guidance_channels: Optional[int] = None):
        super().__init__()
        n = len(channels)
        cfg.validate(n)
        self.cfg = cfg
        self.channels = tuple(channels)
        self.n = n
        ch = self.channels

        # up_blocks[i-1] produces d_i from concat(up(d_{i+1}), F^F_i)
        self.up_blocks = nn.ModuleList(ConvBnAct(ch[i] + ch[i - 1], ch[i - 1], 3) for i in range(1, n))
        self.sds_node = ConvBnAct(ch[0], ch[0], 3) if cfg.two_node_main else None
        self.main_classifier = nn.Conv2d(ch[0], cfg.num_classes, kernel_size=1)

        self.side_heads = nn.ModuleList()
        self.fda = None
        self.aligners = nn.ModuleDict()
        if cfg.side_heads:
            self.side_heads.extend(SideHead(ch[j - 1], ch[j - 1], cfg.num_classes) for j in range(2, n + 1))
        if cfg.guided:
            g = cfg.guidance_layer
            c_g = guidance_channels if guidance_channels is not None else ch[g - 1]
            self.fda = FDAChain(c_g, [ch[j - 1] for j in range(g + 1, n + 1)], max_depth=n - 1)
            for j in range(2, min(g, n) + 1):
                self.aligners[str(j)] = nn.Conv2d(c_g, ch[j - 1], kernel_size=1, bias=False)

        log.debug(f"decoder mode={cfg.hds_mode} guidance={cfg.guidance_source}{cfg.guidance_layer} "
                  f"heads={1 + len(self.side_heads)}")

    def guidance_feature(self, pyramid: EncoderPyramid) -> FeatureMap:
        g = self.cfg.guidance_layer
        if self.cfg.guidance_source == 'GF':
            return pyramid.geometric[g - 1]
        if self.cfg.guidance_source == 'CF':
            return pyramid.context_at_level(g)
        return pyramid.fused[g - 1]

    def decode_main(self, pyramid: EncoderPyramid,
                    input_hw: Tuple[int, int]) -> Tuple[List[torch.Tensor], torch.Tensor]:
        """Returns decoded features d_1..d_n and full-resolution main logits"""
        if pyramid.n != self.n:
            raise ShapeMismatchError(f"decoder built for {self.n} layers, pyramid has {pyramid.n}")
        fused = [f.data for f in pyramid.fused]
        decoded = [None] * self.n
        decoded[-1] = fused[-1]
        for i in range(self.n - 1, 0, -1):
            up = resize_bilinear(decoded[i], fused[i - 1].shape[-2:])
            decoded[i - 1] = self.up_blocks[i - 1](concat_channels(up, fused[i - 1]))
        if self.sds_node is not None:
            decoded[0] = self.sds_node(decoded[0])
        main = resize_bilinear(self.main_classifier(decoded[0]), input_hw)
        return decoded, main

    def guidance_taps(self, pyramid: EncoderPyramid, decoded: List[torch.Tensor],
                      zero_guidance: bool = False) -> List[torch.Tensor]:
        """One tap per side head, aligned to d_j for j = 2..n"""
        if not self.cfg.guided or zero_guidance:
            return [torch.zeros_like(decoded[j - 1]) for j in range(2, self.n + 1)]
        guide = self.guidance_feature(pyramid).data
        g = self.cfg.guidance_layer
        chained = self.fda(guide)
        taps = []
        for j in range(2, self.n + 1):
            if j > g:
                tap = chained[j - g - 1]
            else:
                tap = self.aligners[str(j)](resize_bilinear(guide, decoded[j - 1].shape[-2:]))
            taps.append(resize_bilinear(tap, decoded[j - 1].shape[-2:]))
        return taps

    def hds_forward(self, pyramid: EncoderPyramid, input_hw: Tuple[int, int],
                    zero_guidance: bool = False) -> BranchOutputs:
        decoded, main = self.decode_main(pyramid, input_hw)
        logits = [main]
        roles = ['main']
        if self.side_heads:
            taps = self.guidance_taps(pyramid, decoded, zero_guidance)
            for j, (head, tap) in enumerate(zip(self.side_heads, taps), start=2):
                logits.append(head(decoded[j - 1], tap, input_hw))
                roles.append(f'side_{j}')
        return BranchOutputs(logits=logits, branch_roles=roles)

    def forward(self, pyramid: EncoderPyramid, input_hw: Tuple[int, int],
                zero_guidance: bool = False) -> BranchOutputs:
        return self.hds_forward(pyramid, input_hw, zero_guidance)
