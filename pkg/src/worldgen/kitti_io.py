#!/usr/bin/env python3
"""
KITTI-format Sample I/O
Reads and writes stereo samples using the KITTI conventions:
8-bit RGB views, 8-bit class-id labels, 16-bit disparity scaled by 256 (0 = invalid)
"""

import json
import random
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from PIL import Image
from loguru import logger

from common.errors import SampleIOError, ShapeMismatchError
from worldgen.scene_generator import StereoSample

log = logger.bind(source="kitti_io")

PathLike = Union[str, Path]

DISPARITY_SCALE = 256.0
SAMPLE_FILES = {
    'left': 'left.png',
    'right': 'right.png',
    'labels': 'labels.png',
    'disp_left': 'disp_left.png',
    'disp_right': 'disp_right.png',
    'occlusion': 'occlusion.png',
    'meta': 'meta.json',
}


# KITTI semantic PNGs store Cityscapes label ids; training uses the 19 train ids
CITYSCAPES_TRAIN_IDS = {
    7: 0, 8: 1, 11: 2, 12: 3, 13: 4, 17: 5, 19: 6, 20: 7, 21: 8, 22: 9,
    23: 10, 24: 11, 25: 12, 26: 13, 27: 14, 28: 15, 31: 16, 32: 17, 33: 18,
}
IGNORE_LABEL = 255


def to_train_ids(label_ids: np.ndarray) -> np.ndarray:
    lut = np.full(256, IGNORE_LABEL, dtype=np.int64)
    for label_id, train_id in CITYSCAPES_TRAIN_IDS.items():
        lut[label_id] = train_id
    return lut[label_ids.astype(np.uint8)]


def sample_dir_name(index: int) -> str:
    return f"sample_{index:04d}"


def encode_disparity(disp: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Float disparity -> uint16 KITTI encoding; valid pixels never encode to 0"""
    raw = np.clip(np.round(disp.astype(np.float64) * DISPARITY_SCALE), 1, 65535)
    return np.where(valid, raw, 0).astype(np.uint16)


def decode_disparity(raw: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """uint16 KITTI encoding -> (disparity in px, validity mask)"""
    raw = raw.astype(np.float32)
    return raw / DISPARITY_SCALE, raw > 0


def _read_png(path: PathLike) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise SampleIOError(f"missing file: {path}")
    try:
        with Image.open(path) as img:
            return np.array(img)
    except OSError as e:
        raise SampleIOError(f"cannot read {path}: {e}") from e


def _read_rgb(path: PathLike) -> np.ndarray:
    array = _read_png(path)
    if array.ndim == 2:
        array = np.stack([array] * 3, axis=-1)
    return (array[..., :3].astype(np.float32) / 255.0).transpose(2, 0, 1)


def load_kitti_sample(left_path: PathLike, right_path: PathLike, label_path: PathLike,
                      disp_path: PathLike, disp_right_path: Optional[PathLike] = None,
                      occlusion_path: Optional[PathLike] = None) -> StereoSample:
    """Load one sample; a missing right disparity yields an all-false valid_right"""
    left = _read_rgb(left_path)
    right = _read_rgb(right_path)
    labels = _read_png(label_path)
    if labels.ndim == 3:
        labels = labels[..., 0]
    disp_left, valid_left = decode_disparity(_read_png(disp_path))

    h, w = labels.shape
    shapes = {
        'left': left.shape[1:], 'right': right.shape[1:],
        'labels': labels.shape, 'disparity': disp_left.shape,
    }
    if disp_right_path is not None and Path(disp_right_path).is_file():
        disp_right, valid_right = decode_disparity(_read_png(disp_right_path))
        shapes['disparity_right'] = disp_right.shape
    else:
        disp_right = np.zeros((h, w), dtype=np.float32)
        valid_right = np.zeros((h, w), dtype=bool)

    if len(set(shapes.values())) != 1:
        raise ShapeMismatchError(f"size mismatch between sample files: {shapes}")

    if occlusion_path is not None and Path(occlusion_path).is_file():
        occlusion = _read_png(occlusion_path) > 0
    else:
        occlusion = np.zeros((h, w), dtype=bool)

    return StereoSample(
        left_image=left,
        right_image=right,
        labels_left=labels.astype(np.int64),
        disp_left=disp_left,
        disp_right=disp_right,
        valid_left=valid_left,
        valid_right=valid_right,
        occlusion_left=occlusion,
        meta={'source': str(left_path)},
    )


def write_sample(sample: StereoSample, out_dir: PathLike, index: Optional[int] = None) -> Dict[str, Path]:
    """Write the per-sample directory layout; returns the written paths"""
    sample.validate()
    target = Path(out_dir)
    if index is not None:
        target = target / sample_dir_name(index)
    try:
        target.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise SampleIOError(f"cannot create {target}: {e}") from e

    paths = {key: target / name for key, name in SAMPLE_FILES.items()}

    def to_rgb8(image: np.ndarray) -> np.ndarray:
        return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)

    try:
        Image.fromarray(to_rgb8(sample.left_image)).save(paths['left'])
        Image.fromarray(to_rgb8(sample.right_image)).save(paths['right'])
        Image.fromarray(sample.labels_left.astype(np.uint8)).save(paths['labels'])
        Image.fromarray(encode_disparity(sample.disp_left, sample.valid_left)).save(paths['disp_left'])
        Image.fromarray(encode_disparity(sample.disp_right, sample.valid_right)).save(paths['disp_right'])
        Image.fromarray(sample.occlusion_left.astype(np.uint8) * 255).save(paths['occlusion'])
        with open(paths['meta'], 'w') as f:
            json.dump(sample.meta, f, indent=2, default=str)
    except OSError as e:
        raise SampleIOError(f"cannot write sample to {target}: {e}") from e

    return paths


def load_sample_dir(sample_dir: PathLike) -> StereoSample:
    """Load a directory written by write_sample"""
    sample_dir = Path(sample_dir)
    files = {key: sample_dir / name for key, name in SAMPLE_FILES.items()}
    sample = load_kitti_sample(files['left'], files['right'], files['labels'], files['disp_left'],
                               disp_right_path=files['disp_right'], occlusion_path=files['occlusion'])
    if files['meta'].is_file():
        with open(files['meta']) as f:
            sample.meta = json.load(f)
    return sample


def list_sample_dirs(root: PathLike) -> List[Path]:
    root = Path(root)
    if not root.is_dir():
        raise SampleIOError(f"dataset directory not found: {root}")
    return sorted(p for p in root.iterdir() if p.is_dir() and (p / SAMPLE_FILES['left']).is_file())


def scan_kitti_split(root: PathLike, split: str = 'training') -> List[Dict[str, Optional[Path]]]:
    """Frames of a KITTI 2015 tree (image_2, image_3, semantic, disp_occ_0, disp_occ_1)"""
    base = Path(root) / split
    left_dir = base / 'image_2'
    if not left_dir.is_dir():
        raise SampleIOError(f"not a KITTI 2015 tree: {left_dir} missing")

    frames = []
    for left in sorted(left_dir.glob('*_10.png')):
        name = left.name
        frame = {
            'left': left,
            'right': base / 'image_3' / name,
            'labels': base / 'semantic' / name,
            'disp_left': base / 'disp_occ_0' / name,
            'disp_right': base / 'disp_occ_1' / name,
        }
        if not all(frame[k].is_file() for k in ('right', 'labels', 'disp_left')):
            log.warning(f"skipping incomplete frame {name}")
            continue
        if not frame['disp_right'].is_file():
            frame['disp_right'] = None
        frames.append(frame)

    log.info(f"found {len(frames)} annotated frames under {base}")
    return frames


def load_kitti_frame(frame: Dict[str, Optional[Path]], map_train_ids: bool = True) -> StereoSample:
    sample = load_kitti_sample(frame['left'], frame['right'], frame['labels'], frame['disp_left'],
                               disp_right_path=frame['disp_right'])
    if map_train_ids:
        sample.labels_left = to_train_ids(sample.labels_left)
    return sample


def split_train_test(items: List, train_ratio: float = 0.7, seed: int = 42) -> Tuple[List, List]:
    """Seeded shuffle then a train_ratio split (7:3 by default)"""
    order = list(range(len(items)))
    random.Random(seed).shuffle(order)
    cut = int(round(train_ratio * len(items)))
    return [items[i] for i in order[:cut]], [items[i] for i in order[cut:]]
