#!/usr/bin/env python3
"""
Synthetic Stereo Scene Generator
Paints fronto-parallel textured objects into a rectified stereo pair with
dense semantic labels, left/right disparity and occlusion ground truth
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from loguru import logger

from common.errors import SceneSpecError, ShapeMismatchError

log = logger.bind(source="worldgen")

SHAPES = ("rectangle", "ellipse")


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of one synthetic scene"""
    width: int = 64
    height: int = 64
    num_objects: int = 3
    num_classes: int = 4
    disparity_range: Tuple[int, int] = (2, 16)
    background_class: int = 0
    rng_seed: int = 0

    @property
    def d_min(self) -> int:
        return int(self.disparity_range[0])

    @property
    def d_max(self) -> int:
        return int(self.disparity_range[1])

    def validate(self) -> None:
        """Reject specs that break the scene invariants"""
        if self.width < 1 or self.height < 1:
            raise SceneSpecError(f"image size must be positive, got {self.width}x{self.height}")
        if self.num_classes < 2:
            raise SceneSpecError(f"class count must be >= 2, got {self.num_classes}")
        if self.num_classes > 256:
            raise SceneSpecError("class ids must fit in an 8-bit label image")
        if self.num_objects < 0:
            raise SceneSpecError(f"num_objects must be >= 0, got {self.num_objects}")
        if not 0 <= self.d_min <= self.d_max:
            raise SceneSpecError(f"disparity range must satisfy 0 <= d_min <= d_max, got {self.disparity_range}")
        if self.d_max >= self.width:
            raise SceneSpecError(f"d_max ({self.d_max}) must be smaller than the width ({self.width})")
        if not 0 <= self.background_class < self.num_classes:
            raise SceneSpecError(f"background_class {self.background_class} outside [0, {self.num_classes})")
        if self.num_objects > self.d_max - self.d_min:
            raise SceneSpecError(
                f"{self.num_objects} objects need distinct disparities in ({self.d_min}, {self.d_max}]"
            )

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["disparity_range"] = [self.d_min, self.d_max]
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SceneSpec":
        data = dict(data)
        data["disparity_range"] = tuple(data.get("disparity_range", (2, 16)))
        return cls(**data)


@dataclass
class StereoSample:
    """One training/evaluation unit; images are 3xHxW in [0,1], maps are HxW"""
    left_image: np.ndarray
    right_image: np.ndarray
    labels_left: np.ndarray
    disp_left: np.ndarray
    disp_right: np.ndarray
    valid_left: np.ndarray
    valid_right: np.ndarray
    occlusion_left: np.ndarray
    meta: Dict[str, Any] = field(default_factory=dict)

    @property
    def height(self) -> int:
        return int(self.labels_left.shape[0])

    @property
    def width(self) -> int:
        return int(self.labels_left.shape[1])

    def validate(self, num_classes: Optional[int] = None, d_max: Optional[float] = None) -> None:
        """Check shapes, ranges and label ids"""
        h, w = self.labels_left.shape
        for name in ("left_image", "right_image"):
            image = getattr(self, name)
            if image.shape != (3, h, w):
                raise ShapeMismatchError(f"{name} has shape {image.shape}, expected (3, {h}, {w})")
            if image.min() < 0.0 or image.max() > 1.0:
                raise ShapeMismatchError(f"{name} values must lie in [0, 1]")
        for name in ("disp_left", "disp_right", "valid_left", "valid_right", "occlusion_left"):
            if getattr(self, name).shape != (h, w):
                raise ShapeMismatchError(f"{name} has shape {getattr(self, name).shape}, expected ({h}, {w})")
        if (self.disp_left < 0).any() or (self.disp_right < 0).any():
            raise ShapeMismatchError("disparities must be nonnegative")
        if d_max is not None and (self.disp_left.max() > d_max or self.disp_right.max() > d_max):
            raise ShapeMismatchError(f"disparities exceed d_max={d_max}")
        if num_classes is not None:
            labels = self.labels_left
            if labels.min() < 0 or labels.max() >= num_classes:
                raise ShapeMismatchError(f"labels outside [0, {num_classes})")


@dataclass
class SceneObject:
    mask: np.ndarray
    texture: np.ndarray
    disparity: int
    class_id: int
    shape: str


def _textured_patch(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Random-noise texture around a random base color"""
    base = rng.uniform(0.15, 0.85, size=(3, 1, 1))
    noise = rng.uniform(-0.15, 0.15, size=(3, height, width))
    return np.clip(base + noise, 0.0, 1.0)


def _object_mask(rng: np.random.Generator, spec: SceneSpec) -> Tuple[np.ndarray, str]:
    h, w = spec.height, spec.width
    obj_w = int(rng.integers(max(1, w // 8), max(2, w // 2) + 1))
    obj_h = int(rng.integers(max(1, h // 8), max(2, h // 2) + 1))
    obj_w, obj_h = min(obj_w, w), min(obj_h, h)
    x0 = int(rng.integers(0, w - obj_w + 1))
    y0 = int(rng.integers(0, h - obj_h + 1))
    shape = SHAPES[int(rng.integers(0, len(SHAPES)))]

    mask = np.zeros((h, w), dtype=bool)
    if shape == "rectangle":
        mask[y0:y0 + obj_h, x0:x0 + obj_w] = True
    else:
        yy, xx = np.mgrid[0:h, 0:w]
        cy, cx = y0 + (obj_h - 1) / 2.0, x0 + (obj_w - 1) / 2.0
        ry, rx = max(obj_h / 2.0, 0.5), max(obj_w / 2.0, 0.5)
        mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    return mask, shape


def _sample_objects(rng: np.random.Generator, spec: SceneSpec) -> List[SceneObject]:
    disparities = rng.choice(
        np.arange(spec.d_min + 1, spec.d_max + 1), size=spec.num_objects, replace=False
    ) if spec.num_objects else np.array([], dtype=int)
    classes = [c for c in range(spec.num_classes) if c != spec.background_class]

    objects = []
    for disparity in disparities:
        mask, shape = _object_mask(rng, spec)
        objects.append(SceneObject(
            mask=mask,
            texture=_textured_patch(rng, spec.height, spec.width + spec.d_max),
            disparity=int(disparity),
            class_id=int(classes[int(rng.integers(0, len(classes)))]),
            shape=shape,
        ))
    # back-to-front: far (small disparity) first
    objects.sort(key=lambda obj: obj.disparity)
    return objects


def paint_scene(spec: SceneSpec, objects: List[SceneObject], background: np.ndarray) -> StereoSample:
    """Render both views from a list of objects already in painting order"""
    h, w = spec.height, spec.width
    d_bg = spec.d_min
    cols = np.arange(w)

    left = background[:, :, :w].copy()
    right = background[:, :, d_bg:d_bg + w].copy()
    labels = np.full((h, w), spec.background_class, dtype=np.int64)
    disp_left = np.full((h, w), float(d_bg), dtype=np.float32)
    disp_right = np.full((h, w), float(d_bg), dtype=np.float32)

    for obj in objects:
        left[:, obj.mask] = obj.texture[:, :, :w][:, obj.mask]
        labels[obj.mask] = obj.class_id
        disp_left[obj.mask] = obj.disparity

        # right pixel u sees left-frame column u + d
        src = cols + obj.disparity
        inside = src < w
        mask_right = np.zeros((h, w), dtype=bool)
        mask_right[:, inside] = obj.mask[:, src[inside]]
        rows, rcols = np.nonzero(mask_right)
        right[:, rows, rcols] = obj.texture[:, rows, rcols + obj.disparity]
        disp_right[mask_right] = obj.disparity

    corr = cols[None, :] - disp_left.astype(np.int64)
    valid_left = corr >= 0
    rows = np.broadcast_to(np.arange(h)[:, None], (h, w))
    seen_right = np.zeros((h, w), dtype=np.float32)
    seen_right[valid_left] = disp_right[rows[valid_left], corr[valid_left]]
    occlusion_left = valid_left & (seen_right != disp_left)
    valid_right = (cols[None, :] + disp_right.astype(np.int64)) < w

    return StereoSample(
        left_image=left.astype(np.float32),
        right_image=right.astype(np.float32),
        labels_left=labels,
        disp_left=disp_left,
        disp_right=disp_right,
        valid_left=valid_left,
        valid_right=valid_right,
        occlusion_left=occlusion_left,
        meta={"spec": spec.to_dict(), "objects": [
            {"shape": o.shape, "disparity": o.disparity, "class_id": o.class_id} for o in objects
        ]},
    )


def generate_scene(spec: SceneSpec) -> StereoSample:
    """Deterministic scene for a given spec (seed included)"""
    spec.validate()
    rng = np.random.default_rng(spec.rng_seed)
    background = _textured_patch(rng, spec.height, spec.width + spec.d_max)
    objects = _sample_objects(rng, spec)
    sample = paint_scene(spec, objects, background)
    log.debug(f"scene seed={spec.rng_seed}: {len(objects)} objects, "
              f"{int(sample.occlusion_left.sum())} occluded px")
    return sample


def generate_scenes(base_spec: SceneSpec, count: int, workers: int = 1) -> List[StereoSample]:
    """`count` scenes with seeds base_seed, base_seed+1, ..."""
    specs = [replace(base_spec, rng_seed=base_spec.rng_seed + i) for i in range(count)]
    if workers <= 1:
        return [generate_scene(s) for s in specs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(generate_scene, specs))


def rectangle_object(spec: SceneSpec, x0: int, y0: int, width: int, height: int,
                     disparity: int, class_id: int, seed: int = 0) -> SceneObject:
    """Hand-placed rectangle, for scenes with known geometry"""
    mask = np.zeros((spec.height, spec.width), dtype=bool)
    mask[y0:y0 + height, x0:x0 + width] = True
    rng = np.random.default_rng(seed)
    return SceneObject(mask=mask, texture=_textured_patch(rng, spec.height, spec.width + spec.d_max),
                       disparity=int(disparity), class_id=int(class_id), shape="rectangle")


def background_texture(spec: SceneSpec, seed: int = 0) -> np.ndarray:
    """Background noise wide enough for the right view's shifted lookups"""
    return _textured_patch(np.random.default_rng(seed), spec.height, spec.width + spec.d_max)
