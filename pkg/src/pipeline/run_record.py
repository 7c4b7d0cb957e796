#!/usr/bin/env python3
"""
Run directory bookkeeping
losses.jsonl / evals.jsonl line records, config.cfg and checkpoints/iter_XXXXXX.pt
"""

import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import pandas as pd
import torch
from loguru import logger

from common.errors import CheckpointError, StereoSegError

log = logger.bind(source="run_record")

LOSSES_FILE = 'losses.jsonl'
EVALS_FILE = 'evals.jsonl'
CONFIG_FILE = 'config.cfg'
CHECKPOINT_DIR = 'checkpoints'


def checkpoint_name(iteration: int) -> str:
    return f"iter_{iteration:06d}.pt"


class RunRecord:
    def __init__(self, run_dir: Union[str, Path], config_text: Optional[str] = None, resume: bool = False):
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        (self.run_dir / CHECKPOINT_DIR).mkdir(exist_ok=True)
        if not resume:
            for name in (LOSSES_FILE, EVALS_FILE):
                (self.run_dir / name).write_text("")
        if config_text is not None:
            (self.run_dir / CONFIG_FILE).write_text(config_text)
        self._last_loss_iter = -1
        self._last_eval_iter = -1

    @property
    def losses_path(self) -> Path:
        return self.run_dir / LOSSES_FILE

    @property
    def evals_path(self) -> Path:
        return self.run_dir / EVALS_FILE

    @property
    def config_path(self) -> Path:
        return self.run_dir / CONFIG_FILE

    def _append(self, path: Path, record: Dict[str, Any]) -> None:
        with open(path, 'a') as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")

    def log_loss(self, iteration: int, breakdown: Dict[str, float]) -> None:
        if iteration <= self._last_loss_iter:
            raise StereoSegError(f"loss record for iteration {iteration} after {self._last_loss_iter}")
        self._last_loss_iter = iteration
        self._append(self.losses_path, {'iteration': iteration, **breakdown})

    def log_eval(self, iteration: int, reports: Dict[str, float]) -> None:
        if iteration <= self._last_eval_iter:
            raise StereoSegError(f"eval record for iteration {iteration} after {self._last_eval_iter}")
        self._last_eval_iter = iteration
        self._append(self.evals_path, {'iteration': iteration, **reports})

    def save_checkpoint(self, model: torch.nn.Module, optimizer: Optional[torch.optim.Optimizer],
                        iteration: int, config_text: str) -> Path:
        path = self.run_dir / CHECKPOINT_DIR / checkpoint_name(iteration)
        payload = {
            'iteration': iteration,
            'model': model.state_dict(),
            'optimizer': optimizer.state_dict() if optimizer is not None else None,
            'config': config_text,
        }
        try:
            torch.save(payload, path)
        except OSError as e:
            raise CheckpointError(f"cannot write checkpoint {path}: {e}") from e
        log.debug(f"checkpoint saved: {path}")
        return path

    def checkpoints(self) -> List[Path]:
        return sorted((self.run_dir / CHECKPOINT_DIR).glob('iter_*.pt'))

    def latest_checkpoint(self) -> Optional[Path]:
        found = self.checkpoints()
        return found[-1] if found else None

    def read_losses(self) -> pd.DataFrame:
        return read_jsonl(self.losses_path)

    def read_evals(self) -> pd.DataFrame:
        return read_jsonl(self.evals_path)


def read_jsonl(path: Union[str, Path]) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file() or path.stat().st_size == 0:
        return pd.DataFrame()
    return pd.read_json(path, lines=True)


def load_checkpoint(path: Union[str, Path], map_location: Union[str, torch.device] = 'cpu') -> Dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location=map_location, weights_only=False)
    except Exception as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    for key in ('model', 'config', 'iteration'):
        if key not in payload:
            raise CheckpointError(f"checkpoint {path} lacks '{key}'")
    return payload
