#!/usr/bin/env python3
"""
Joint segmentation + stereo network
Stereo head -> duplex encoder (sharing the first contextual stages) -> HDS decoder
"""

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
from loguru import logger

from model.encoder_tgf import EncoderConfig, EncoderPyramid, TightlyCoupledEncoder
from model.hds_decoder import BranchOutputs, DecoderConfig, HDSDecoder
from model.stereo_head import SHARED_STAGES, CostVolume, StereoConfig, StereoHead

log = logger.bind(source="network")


@dataclass
class JointOutput:
    disp_left: torch.Tensor
    disp_right: torch.Tensor
    branches: BranchOutputs
    pyramid: EncoderPyramid
    cost_volume: Optional[CostVolume] = None

    def predicted_labels(self) -> torch.Tensor:
        return self.branches.main.argmax(dim=1)


class JointNetwork(nn.Module):
    def __init__(self, encoder_cfg: EncoderConfig, stereo_cfg: StereoConfig, decoder_cfg: DecoderConfig):
        super().__init__()
        self.encoder_cfg = encoder_cfg
        self.stereo_cfg = stereo_cfg
        self.decoder_cfg = decoder_cfg
        channels = tuple(encoder_cfg.channels)

        self.stereo = StereoHead(stereo_cfg, channels)
        self.encoder = TightlyCoupledEncoder(encoder_cfg, shared_stages=SHARED_STAGES,
                                             min_context_stages=decoder_cfg.required_context_stage())
        self.decoder = HDSDecoder(decoder_cfg, channels)

        n_params = sum(p.numel() for p in self.parameters())
        log.info(f"joint network: {n_params:,} parameters, n={encoder_cfg.n_layers}, "
                 f"fusion={encoder_cfg.fusion_mode}, hds={decoder_cfg.hds_mode}")

    def forward(self, left: torch.Tensor, right: torch.Tensor, zero_guidance: bool = False) -> JointOutput:
        stereo = self.stereo.estimate_both_views(left, right)
        pyramid = self.encoder.encode(stereo.shared_pyramid, stereo.disp_left, float(self.stereo_cfg.d_max))
        branches = self.decoder.hds_forward(pyramid, tuple(left.shape[-2:]), zero_guidance)
        return JointOutput(disp_left=stereo.disp_left, disp_right=stereo.disp_right,
                           branches=branches, pyramid=pyramid, cost_volume=stereo.cost_volume)
