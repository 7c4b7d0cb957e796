#!/usr/bin/env python3
"""
Stereo dataset wrapper
Turns StereoSamples into tensors with stereo-safe crops (one window for both views)
"""

from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch.utils.data import Dataset
from loguru import logger

from common.errors import ConfigError, SampleIOError
from worldgen.kitti_io import list_sample_dirs, load_sample_dir
from worldgen.scene_generator import StereoSample

log = logger.bind(source="dataset")


def sample_to_tensors(sample: StereoSample) -> Dict[str, torch.Tensor]:
    """Per-sample tensors: images 3xHxW, maps 1xHxW, labels HxW"""
    return {
        'left': torch.from_numpy(np.ascontiguousarray(sample.left_image, dtype=np.float32)),
        'right': torch.from_numpy(np.ascontiguousarray(sample.right_image, dtype=np.float32)),
        'labels': torch.from_numpy(np.ascontiguousarray(sample.labels_left, dtype=np.int64)),
        'disp_left': torch.from_numpy(np.ascontiguousarray(sample.disp_left, dtype=np.float32))[None],
        'disp_right': torch.from_numpy(np.ascontiguousarray(sample.disp_right, dtype=np.float32))[None],
        'valid_left': torch.from_numpy(np.ascontiguousarray(sample.valid_left))[None],
        'valid_right': torch.from_numpy(np.ascontiguousarray(sample.valid_right))[None],
        'occlusion_left': torch.from_numpy(np.ascontiguousarray(sample.occlusion_left))[None],
    }


def crop_sample(sample: StereoSample, top: int, left: int, height: int, width: int) -> StereoSample:
    """Same window on every array; horizontal offsets keep rectification intact"""
    rows, cols = slice(top, top + height), slice(left, left + width)
    return StereoSample(
        left_image=sample.left_image[:, rows, cols],
        right_image=sample.right_image[:, rows, cols],
        labels_left=sample.labels_left[rows, cols],
        disp_left=sample.disp_left[rows, cols],
        disp_right=sample.disp_right[rows, cols],
        valid_left=sample.valid_left[rows, cols],
        valid_right=sample.valid_right[rows, cols],
        occlusion_left=sample.occlusion_left[rows, cols],
        meta=dict(sample.meta),
    )


class StereoSceneDataset(Dataset):
    """In-memory list of samples with optional seeded random crops"""

    def __init__(self, samples: Sequence[StereoSample], crop_hw: Optional[Tuple[int, int]] = None,
                 random_crop: bool = False, seed: int = 0):
        self.samples = list(samples)
        self.crop_hw = tuple(crop_hw) if crop_hw else None
        self.random_crop = random_crop
        self.rng = np.random.default_rng(seed)

        if self.crop_hw is not None:
            ch, cw = self.crop_hw
            for i, s in enumerate(self.samples):
                if s.height < ch or s.width < cw:
                    raise ConfigError(f"crop {ch}x{cw} does not fit sample {i} ({s.height}x{s.width})")

    @classmethod
    def from_directory(cls, root: Union[str, Path], **kwargs) -> "StereoSceneDataset":
        dirs = list_sample_dirs(root)
        if not dirs:
            raise SampleIOError(f"no sample directories under {root}")
        log.info(f"loading {len(dirs)} samples from {root}")
        return cls([load_sample_dir(d) for d in dirs], **kwargs)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index: int) -> Dict[str, torch.Tensor]:
        sample = self.samples[index]
        if self.crop_hw is not None:
            ch, cw = self.crop_hw
            if self.random_crop:
                top = int(self.rng.integers(0, sample.height - ch + 1))
                left = int(self.rng.integers(0, sample.width - cw + 1))
            else:
                top = (sample.height - ch) // 2
                left = (sample.width - cw) // 2
            sample = crop_sample(sample, top, left, ch, cw)
        return sample_to_tensors(sample)

    def batch(self, index: int, device: Union[str, torch.device] = 'cpu') -> Dict[str, torch.Tensor]:
        """Single item with a leading batch dimension of 1"""
        return {k: v.unsqueeze(0).to(device) for k, v in self[index].items()}


def stack_batches(items: List[Dict[str, torch.Tensor]]) -> Dict[str, torch.Tensor]:
    return {k: torch.stack([item[k] for item in items]) for k in items[0]}
