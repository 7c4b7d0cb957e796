#!/usr/bin/env python3
"""
Joint Training Loop
End-to-end training of the stereo head, duplex encoder and HDS decoder with a
single backward pass of the coupling-tightening loss per iteration.
"""

import json
import random
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import torch
from loguru import logger
from tqdm import tqdm

from common.errors import NonFiniteError, SampleIOError
from losses.ct_loss import CouplingTighteningLoss, LossBreakdown
from pipeline.config import DataConfig, TrainConfig, dump_config
from pipeline.evaluator import build_network, evaluate
from pipeline.run_record import RunRecord
from worldgen.dataset import StereoSceneDataset, stack_batches
from worldgen.kitti_io import load_kitti_frame, scan_kitti_split, split_train_test
from worldgen.scene_generator import SceneSpec, generate_scenes

log = logger.bind(source="trainer")


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def scene_spec(data: DataConfig) -> SceneSpec:
    return SceneSpec(width=data.width, height=data.height, num_objects=data.num_objects,
                     num_classes=data.num_classes, disparity_range=tuple(data.disparity_range),
                     rng_seed=data.scene_seed)


def build_dataset(data: DataConfig, subset: str = 'all', seed: int = 0) -> StereoSceneDataset:
    """Samples for `subset` (all | train | test) of the configured source"""
    if data.source == 'synthetic':
        samples = generate_scenes(scene_spec(data), data.num_scenes)
    elif data.source == 'samples':
        return StereoSceneDataset.from_directory(data.path, crop_hw=data.crop_hw,
                                                 random_crop=data.random_crop, seed=seed)
    else:
        frames = scan_kitti_split(data.path, data.kitti_split)
        if subset != 'all':
            train, test = split_train_test(frames, data.train_ratio, data.split_seed)
            frames = train if subset == 'train' else test
        samples = [load_kitti_frame(f) for f in frames]
    if not samples:
        raise SampleIOError(f"no samples for data.source={data.source} subset={subset}")
    return StereoSceneDataset(samples, crop_hw=data.crop_hw, random_crop=data.random_crop, seed=seed)


class JointTrainer:
    """AdamW training over batch-size-1 stereo samples with optional accumulation"""

    def __init__(self, cfg: TrainConfig, dataset: StereoSceneDataset,
                 run_dir: Optional[Union[str, Path]] = None,
                 eval_dataset: Optional[StereoSceneDataset] = None):
        cfg.validate()
        if len(dataset) == 0:
            raise SampleIOError("training dataset is empty")
        self.cfg = cfg
        self.dataset = dataset
        self.eval_dataset = eval_dataset if eval_dataset is not None else dataset
        self.device = torch.device(cfg.device)

        seed_everything(cfg.seed)
        self.model = build_network(cfg).to(self.device)
        self.criterion = CouplingTighteningLoss(cfg.loss)
        self.optimizer = torch.optim.AdamW(self.model.parameters(), lr=cfg.lr, eps=cfg.eps,
                                           weight_decay=cfg.weight_decay)
        self.config_text = dump_config(cfg)
        self.record = RunRecord(run_dir or cfg.run_dir, self.config_text)
        self.sampler = torch.Generator().manual_seed(cfg.seed)
        self._order: List[int] = []
        self.iteration = 0

    def _next_indices(self) -> List[int]:
        picked = []
        while len(picked) < self.cfg.batch_size:
            if not self._order:
                self._order = torch.randperm(len(self.dataset), generator=self.sampler).tolist()
            picked.append(self._order.pop(0))
        return picked

    def _batch(self) -> Dict[str, torch.Tensor]:
        items = [self.dataset[i] for i in self._next_indices()]
        return {k: v.to(self.device) for k, v in stack_batches(items).items()}

    def _dump_failure(self, err: NonFiniteError) -> None:
        path = self.record.run_dir / f"nonfinite_iter_{self.iteration:06d}.json"
        with open(path, 'w') as f:
            json.dump({'iteration': self.iteration, 'term': err.term, 'breakdown': err.breakdown}, f, indent=2)
        log.error(f"non-finite loss term '{err.term}' at iteration {self.iteration}: {err.breakdown}")

    def train_step(self) -> LossBreakdown:
        batch = self._batch()
        output = self.model(batch['left'], batch['right'])
        breakdown = self.criterion(output, batch)
        (breakdown.total / self.cfg.accumulate).backward()
        # a trailing partial accumulation is stepped at the last iteration
        if self.iteration % self.cfg.accumulate == 0 or self.iteration == self.cfg.iterations:
            self.optimizer.step()
            self.optimizer.zero_grad(set_to_none=True)
        return breakdown

    def evaluate(self) -> Dict[str, float]:
        result = evaluate(self.model, self.eval_dataset, device=self.device)
        self.model.train()
        return result.as_dict()

    def checkpoint(self) -> Path:
        return self.record.save_checkpoint(self.model, self.optimizer, self.iteration, self.config_text)

    def train(self, progress: bool = True) -> RunRecord:
        cfg = self.cfg
        self.model.train()
        self.optimizer.zero_grad(set_to_none=True)
        self.checkpoint()
        log.info(f"training {cfg.iterations} iterations on {len(self.dataset)} samples "
                 f"-> {self.record.run_dir}")

        steps = tqdm(range(1, cfg.iterations + 1), desc="Training", disable=not progress)
        for it in steps:
            self.iteration = it
            try:
                breakdown = self.train_step()
            except NonFiniteError as e:
                self._dump_failure(e)
                raise
            values = breakdown.as_dict()
            self.record.log_loss(it, values)
            if cfg.log_every and it % cfg.log_every == 0:
                steps.set_postfix(total=f"{values['total']:.4f}")
                log.debug(f"iter {it}: " + ", ".join(f"{k}={v:.4f}" for k, v in values.items()))
            if cfg.eval_every and it % cfg.eval_every == 0:
                self.record.log_eval(it, self.evaluate())
            if (cfg.checkpoint_every and it % cfg.checkpoint_every == 0) or it == cfg.iterations:
                self.checkpoint()

        return self.record


def train(cfg: TrainConfig, dataset: Optional[StereoSceneDataset] = None,
          run_dir: Optional[Union[str, Path]] = None, progress: bool = True) -> RunRecord:
    if dataset is None:
        dataset = build_dataset(cfg.data, 'train', cfg.seed)
    return JointTrainer(cfg, dataset, run_dir).train(progress=progress)
