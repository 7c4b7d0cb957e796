#!/usr/bin/env python3
"""
Evaluation over a dataset
One global confusion matrix and pixel-weighted disparity errors; accepts a live
model or a checkpoint path.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Union

import torch
from loguru import logger

from common.errors import CheckpointError, SampleIOError
from evaluation.metrics import (ConfusionMatrix, SegReport, StereoAccumulator, StereoReport,
                                branch_disagreement, confusion, seg_metrics)
from model.joint_network import JointNetwork
from pipeline.config import TrainConfig, config_from_text
from pipeline.run_record import load_checkpoint
from worldgen.dataset import StereoSceneDataset

log = logger.bind(source="evaluator")


@dataclass
class EvalResult:
    seg: SegReport
    stereo: Optional[StereoReport]
    disagreement: float
    num_samples: int
    confusion: ConfusionMatrix

    def as_dict(self) -> Dict[str, float]:
        out = dict(self.seg.as_dict())
        if self.stereo is not None:
            out.update(self.stereo.as_dict())
        out['disagreement'] = 100.0 * self.disagreement
        return out


def build_network(cfg: TrainConfig) -> JointNetwork:
    return JointNetwork(cfg.encoder, cfg.stereo, cfg.decoder)


def model_from_checkpoint(path: Union[str, Path], device: Union[str, torch.device] = 'cpu') -> JointNetwork:
    payload = load_checkpoint(path, map_location=device)
    model = build_network(config_from_text(payload['config']))
    try:
        model.load_state_dict(payload['model'])
    except RuntimeError as e:
        raise CheckpointError(f"checkpoint {path} does not match its own config: {e}") from e
    return model.to(device)


def _max_label(dataset: StereoSceneDataset, ignore_index: int) -> int:
    found = -1
    for sample in dataset.samples:
        labels = sample.labels_left[sample.labels_left != ignore_index]
        if labels.size:
            found = max(found, int(labels.max()))
    return found


@torch.no_grad()
def evaluate(model_or_checkpoint: Union[JointNetwork, str, Path], dataset: StereoSceneDataset,
             device: Union[str, torch.device] = 'cpu', ignore_index: int = 255) -> EvalResult:
    if len(dataset) == 0:
        raise SampleIOError("cannot evaluate on an empty dataset")
    if isinstance(model_or_checkpoint, (str, Path)):
        model = model_from_checkpoint(model_or_checkpoint, device)
    else:
        model = model_or_checkpoint.to(device)
    num_classes = model.decoder_cfg.num_classes
    max_label = _max_label(dataset, ignore_index)
    if max_label >= num_classes:
        raise CheckpointError(f"dataset has labels up to {max_label}, "
                              f"model predicts {num_classes} classes")

    model.eval()
    cm = ConfusionMatrix.empty(num_classes)
    stereo = StereoAccumulator()
    disagree_pixels = 0.0
    total_pixels = 0

    for i in range(len(dataset)):
        batch = dataset.batch(i, device)
        out = model(batch['left'], batch['right'])
        out.branches.validate()
        labels = batch['labels']
        ignore = labels == ignore_index
        cm = cm + confusion(out.predicted_labels(), torch.where(ignore, torch.zeros_like(labels), labels),
                            num_classes, ignore_mask=ignore)
        stereo.update(out.disp_left, batch['disp_left'], batch['valid_left'])
        n_pix = labels.numel()
        disagree_pixels += branch_disagreement(out.branches.logits) * n_pix
        total_pixels += n_pix

    stereo_report = stereo.report() if stereo.count else None
    if stereo_report is None:
        log.warning("no valid disparity ground truth, stereo metrics skipped")
    result = EvalResult(seg=seg_metrics(cm), stereo=stereo_report,
                        disagreement=disagree_pixels / total_pixels,
                        num_samples=len(dataset), confusion=cm)
    log.info(f"evaluated {len(dataset)} samples: mIoU={result.seg.mIoU:.2f} "
             + (f"EPE={stereo_report.EPE:.3f}" if stereo_report else ""))
    return result
