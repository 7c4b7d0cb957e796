#!/usr/bin/env python3
"""
Duplex Tightly-Coupled Encoder
Geometric branch (encodes the left disparity) and fused branch (contextual
features progressively fused with geometric ones), linked by selective
inheritance gates:

    X~_i = (1 + G_i) * X_i + (1 - G_i) * [G_{i-1} * R(X_{i-1})]
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import torch
import torch.nn as nn
from loguru import logger

from common.errors import ConfigError, NonFiniteError, ShapeMismatchError
from substrate.ops import ConvBnAct, FeatureMap, elementwise_sum, resize_bilinear

log = logger.bind(source="encoder")

CONTEXT_INDEX_MODES = ('stage_2i_minus_1', 'identity_i')
CONTEXT_INDEX_ALIASES = {'paper_2i_minus_1': 'stage_2i_minus_1'}
FUSION_MODES = ('tgf', 'sum', 'tgf_geometric', 'tgf_fused')


@dataclass
class EncoderConfig:
    n_layers: int = 4
    channels: Tuple[int, ...] = (16, 32, 64, 128)
    context_index_mode: str = 'stage_2i_minus_1'
    gate_bias_init: float = 0.0
    fusion_mode: str = 'tgf'

    def validate(self) -> None:
        if self.n_layers < 2:
            raise ConfigError(f"encoder needs n_layers >= 2 for the fusion recursions, got {self.n_layers}")
        if len(self.channels) != self.n_layers:
            raise ConfigError(f"channels {tuple(self.channels)} must list one width per layer ({self.n_layers})")
        self.context_index_mode = CONTEXT_INDEX_ALIASES.get(self.context_index_mode, self.context_index_mode)
        if self.context_index_mode not in CONTEXT_INDEX_MODES:
            raise ConfigError(f"context_index_mode must be one of {CONTEXT_INDEX_MODES} "
                              f"(or an alias in {sorted(CONTEXT_INDEX_ALIASES)})")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}")

    @property
    def gated_geometric(self) -> bool:
        return self.fusion_mode in ('tgf', 'tgf_geometric')

    @property
    def gated_fused(self) -> bool:
        return self.fusion_mode in ('tgf', 'tgf_fused')

    def context_index(self, layer: int) -> int:
        """Contextual stage feeding fused layer `layer` (1-based)"""
        if layer == 1 or self.context_index_mode == 'identity_i':
            return layer
        return 2 * layer - 1

    def context_layers(self) -> List[int]:
        """Fused layers that read a contextual stage: 1 and 1 < i <= (n+1)/2"""
        return [i for i in range(1, self.n_layers + 1) if i == 1 or i <= (self.n_layers + 1) / 2]

    def required_context_stages(self) -> int:
        return max(self.context_index(i) for i in self.context_layers())


def context_stage_level(stage: int) -> int:
    """Half-stride stages: odd stages downsample, so stage j sits at level ceil(j/2)"""
    return math.ceil(stage / 2)


def context_stage_channels(channels: Tuple[int, ...], stage: int) -> int:
    level = context_stage_level(stage)
    return channels[min(level, len(channels)) - 1]


def build_context_stage(channels: Tuple[int, ...], stage: int, in_channels: int = 3) -> ConvBnAct:
    """Stage j of the contextual (shared stereo) feature extractor"""
    c_in = in_channels if stage == 1 else context_stage_channels(channels, stage - 1)
    c_out = context_stage_channels(channels, stage)
    return ConvBnAct(c_in, c_out, 3, stride=2 if stage % 2 == 1 else 1)


class SelectiveGate(nn.Module):
    """1x1 convolution to one channel followed by a sigmoid"""

    def __init__(self, channels: int, bias_init: float = 0.0):
        super().__init__()
        self.proj = nn.Conv2d(channels, 1, kernel_size=1)
        nn.init.constant_(self.proj.bias, bias_init)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        gate = torch.sigmoid(self.proj(x))
        if not bool(((gate >= 0) & (gate <= 1)).all()):
            raise NonFiniteError("gate", "gate map left [0, 1]")
        return gate


def compute_gate(x: torch.Tensor, gate: SelectiveGate) -> torch.Tensor:
    return gate(x)


def sig_combine(x_prev: torch.Tensor, x_cur: torch.Tensor,
                g_prev: torch.Tensor, g_cur: torch.Tensor) -> torch.Tensor:
    """Selective inheritance: (1+G_i)*X_i + (1-G_i)*(G_{i-1}*R(X_{i-1})).

    x_prev must already be remapped onto x_cur's grid; gates are B x 1 x H x W.
    """
    if x_prev.shape != x_cur.shape:
        raise ShapeMismatchError(f"remapped previous features {tuple(x_prev.shape)} "
                                 f"do not match current {tuple(x_cur.shape)}")
    hw = x_cur.shape[-2:]
    if g_prev.shape[-2:] != hw or g_cur.shape[-2:] != hw:
        raise ShapeMismatchError(f"gates {tuple(g_prev.shape)}, {tuple(g_cur.shape)} "
                                 f"do not match feature grid {tuple(hw)}")
    return (1.0 + g_cur) * x_cur + (1.0 - g_cur) * (g_prev * x_prev)


class Remap(nn.Module):
    """R: 1x1 projection to the target width, then a stride-2 conv (one level
    down) or a bilinear resize (any other ratio) onto the target grid"""

    def __init__(self, in_channels: int, out_channels: int, in_level: int, out_level: int):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, out_channels, kernel_size=1, bias=False)
        self.down = None
        if out_level - in_level == 1:
            self.down = nn.Conv2d(out_channels, out_channels, kernel_size=3, stride=2, padding=1, bias=False)

    def forward(self, x: torch.Tensor, target_hw: Tuple[int, int]) -> torch.Tensor:
        x = self.proj(x)
        if self.down is not None:
            x = self.down(x)
        return resize_bilinear(x, target_hw)


@dataclass
class EncoderPyramid:
    contextual: List[FeatureMap]
    geometric: List[FeatureMap]
    fused: List[FeatureMap]
    gates: Dict[str, List[torch.Tensor]] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.fused)

    def context_at_level(self, level: int) -> FeatureMap:
        """Deepest contextual stage on the given level (odd stage 2*level-1)"""
        return self.contextual[2 * level - 2]


class TightlyCoupledEncoder(nn.Module):
    """Geometric branch over D^L and fused branch over contextual stages, coupled per layer"""

    def __init__(self, cfg: EncoderConfig, shared_stages: int = 3, min_context_stages: int = 0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        ch = tuple(cfg.channels)
        n = cfg.n_layers
        self.shared_stages = shared_stages

        # contextual stages beyond the ones shared with the stereo extractor
        self.num_context_stages = max(shared_stages, cfg.required_context_stages(), min_context_stages)
        self.context_tail = nn.ModuleList(
            build_context_stage(ch, j) for j in range(shared_stages + 1, self.num_context_stages + 1)
        )

        self.geo_encoders = nn.ModuleList()
        self.geo_gates = nn.ModuleList()
        self.geo_remaps = nn.ModuleList()
        self.fused_encoders = nn.ModuleDict()
        self.fused_gates = nn.ModuleList()
        self.fused_remaps = nn.ModuleList()
        self.context_remaps = nn.ModuleDict()
        context_layers = set(cfg.context_layers())

        for i in range(1, n + 1):
            c_prev = 1 if i == 1 else ch[i - 2]
            self.geo_encoders.append(ConvBnAct(c_prev, ch[i - 1], 3, stride=2))
            self.geo_gates.append(SelectiveGate(ch[i - 1], cfg.gate_bias_init))
            self.fused_gates.append(SelectiveGate(ch[i - 1], cfg.gate_bias_init))
            if i > 1:
                self.geo_remaps.append(Remap(ch[i - 2], ch[i - 1], i - 1, i))
                self.fused_remaps.append(Remap(ch[i - 2], ch[i - 1], i - 1, i))

            if i == 1:
                stage = cfg.context_index(1)
                self.fused_encoders['1'] = ConvBnAct(context_stage_channels(ch, stage), ch[0], 3, stride=1)
            elif i in context_layers:
                stage = cfg.context_index(i)
                self.context_remaps[str(i)] = Remap(context_stage_channels(ch, stage), ch[i - 1],
                                                    context_stage_level(stage), i)
            else:
                self.fused_encoders[str(i)] = ConvBnAct(ch[i - 2], ch[i - 1], 3, stride=2)

        log.debug(f"encoder n={n} channels={ch} fusion={cfg.fusion_mode} "
                  f"context_stages={self.num_context_stages}")

    def extend_context(self, shared: List[FeatureMap]) -> List[FeatureMap]:
        """Append the encoder's own contextual stages to the shared ones"""
        if len(shared) < self.shared_stages:
            raise ShapeMismatchError(f"need {self.shared_stages} shared contextual stages, got {len(shared)}")
        pyramid = list(shared[:self.shared_stages])
        for offset, stage in enumerate(self.context_tail):
            j = self.shared_stages + offset + 1
            pyramid.append(FeatureMap(stage(pyramid[-1].data), context_stage_level(j)))
        return pyramid

    @staticmethod
    def _grid(input_hw: Tuple[int, int], level: int) -> Tuple[int, int]:
        return tuple(-(-s // 2 ** level) for s in input_hw)

    def _omega(self, gated: bool, remap: Remap, x_prev: torch.Tensor, x_cur: torch.Tensor,
               g_prev: torch.Tensor, g_cur: torch.Tensor) -> torch.Tensor:
        if not gated:
            return x_cur
        hw = tuple(x_cur.shape[-2:])
        return sig_combine(remap(x_prev, hw), x_cur, resize_bilinear(g_prev, hw), g_cur)

    def encode(self, left_ctx_pyramid: List[FeatureMap], disparity: torch.Tensor,
               d_max: float = 1.0) -> EncoderPyramid:
        """Run both branches; `disparity` is the left-view estimate D^L (B x 1 x H x W)"""
        cfg = self.cfg
        n = cfg.n_layers
        contextual = self.extend_context(left_ctx_pyramid)
        input_hw = tuple(disparity.shape[-2:])

        geometric: List[FeatureMap] = []
        fused: List[FeatureMap] = []
        geo_gates: List[torch.Tensor] = []
        fused_gates: List[torch.Tensor] = []

        geo_in = disparity / float(d_max)
        for i in range(1, n + 1):
            # geometric branch
            if i == 1:
                f_g = self.geo_encoders[0](geo_in)
                g_g = self.geo_gates[0](f_g)
            else:
                prev = geometric[-1].data
                x_cur = self.geo_encoders[i - 1](prev)
                g_g = self.geo_gates[i - 1](x_cur)
                f_g = self._omega(cfg.gated_geometric, self.geo_remaps[i - 2], prev, x_cur, geo_gates[-1], g_g)
            geometric.append(FeatureMap(f_g, i))
            geo_gates.append(g_g)

            # fused branch
            hw = self._grid(input_hw, i)
            if i == 1:
                x_cur = self.fused_encoders['1'](contextual[cfg.context_index(1) - 1].data)
                g_f = self.fused_gates[0](x_cur)
                f_f = elementwise_sum(resize_bilinear(x_cur, hw), f_g)
            else:
                prev = fused[-1].data
                if str(i) in self.context_remaps:
                    x_cur = self.context_remaps[str(i)](contextual[cfg.context_index(i) - 1].data, hw)
                else:
                    x_cur = self.fused_encoders[str(i)](prev)
                g_f = self.fused_gates[i - 1](x_cur)
                f_f = elementwise_sum(
                    self._omega(cfg.gated_fused, self.fused_remaps[i - 2], prev, x_cur, fused_gates[-1], g_f),
                    f_g,
                )
            fused.append(FeatureMap(f_f, i))
            fused_gates.append(g_f)

        return EncoderPyramid(contextual=contextual, geometric=geometric, fused=fused,
                              gates={'geometric': geo_gates, 'fused': fused_gates})

    def forward(self, left_ctx_pyramid: List[FeatureMap], disparity: torch.Tensor,
                d_max: float = 1.0) -> EncoderPyramid:
        return self.encode(left_ctx_pyramid, disparity, d_max)
