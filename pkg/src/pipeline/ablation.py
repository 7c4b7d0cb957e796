#!/usr/bin/env python3
"""
Ablation Harness
Runs one training + evaluation per grid cell from a shared base config and seed
set, and ranks the cells by mIoU.
"""

from itertools import product
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

import pandas as pd
from loguru import logger

from common.errors import ConfigError, StereoSegError
from evaluation.metrics import to_kv_table
from pipeline.config import TrainConfig, apply_setting, clone_config
from pipeline.evaluator import evaluate
from pipeline.trainer import JointTrainer, build_dataset
from worldgen.dataset import StereoSceneDataset

log = logger.bind(source="ablation")

Grid = Dict[str, Dict[str, Any]]

SWEEP_VALUES = (0.0, 0.5, 1.0, 1.5, 2.0)
CT_OFF = {'loss.enable_dia': False, 'loss.enable_dscc': False, 'loss.enable_scg': False}
CT_ON = {'loss.enable_dia': True, 'loss.enable_dscc': True, 'loss.enable_scg': True}


def _overall() -> Grid:
    return {
        'TGF': {'encoder.fusion_mode': 'tgf', 'decoder.hds_mode': 'none', **CT_OFF},
        'HDS': {'encoder.fusion_mode': 'sum', 'decoder.hds_mode': 'hds', **CT_OFF},
        'TGF+HDS': {'encoder.fusion_mode': 'tgf', 'decoder.hds_mode': 'hds', **CT_OFF},
        'HDS+CT': {'encoder.fusion_mode': 'sum', 'decoder.hds_mode': 'hds', **CT_ON},
        'TGF+HDS+CT': {'encoder.fusion_mode': 'tgf', 'decoder.hds_mode': 'hds', **CT_ON},
    }


def _loss_grid() -> Grid:
    grid = {}
    for dia, dscc, scg in product((False, True), repeat=3):
        name = '+'.join(t for t, on in (('DIA', dia), ('DSCC', dscc), ('SCG', scg)) if on) or 'none'
        grid[name] = {'loss.enable_dia': dia, 'loss.enable_dscc': dscc, 'loss.enable_scg': scg}
    return grid


PRESETS = {
    'overall': _overall,
    'fusion': lambda: {
        'baseline': {'encoder.fusion_mode': 'sum'},
        'SIG-disparity': {'encoder.fusion_mode': 'tgf_geometric'},
        'SIG-rgb': {'encoder.fusion_mode': 'tgf_fused'},
        'SIG-both': {'encoder.fusion_mode': 'tgf'},
    },
    'supervision': lambda: {
        'baseline': {'decoder.hds_mode': 'none'},
        'SDS': {'decoder.hds_mode': 'sds'},
        'FDS': {'decoder.hds_mode': 'fds'},
        'SDS+FDS': {'decoder.hds_mode': 'sds+fds'},
        'HDS': {'decoder.hds_mode': 'hds'},
    },
    'guidance': lambda: {
        f'{src}{layer}': {'decoder.hds_mode': 'hds', 'decoder.guidance_source': src,
                          'decoder.guidance_layer': layer}
        for src in ('GF', 'CF', 'FF') for layer in (1, 2, 3)
    },
    'loss': _loss_grid,
    'alpha': lambda: {f'alpha={v}': {'loss.alpha': v} for v in SWEEP_VALUES},
    'beta': lambda: {f'beta={v}': {'loss.beta': v} for v in SWEEP_VALUES},
}


def preset_grid(name: str) -> Grid:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ConfigError(f"unknown ablation preset '{name}', choose from {sorted(PRESETS)}") from None


def cell_config(base_cfg: TrainConfig, overrides: Mapping[str, Any], seed: Optional[int] = None) -> TrainConfig:
    cfg = clone_config(base_cfg)
    for key, value in overrides.items():
        apply_setting(cfg, key, value)
    if seed is not None:
        cfg.seed = seed
    cfg.validate()
    return cfg


def run_cell(cfg: TrainConfig, train_set: StereoSceneDataset, eval_set: StereoSceneDataset,
             run_dir: Path, progress: bool = False) -> Dict[str, Any]:
    """Train and evaluate one configuration; failures come back as success=False"""
    try:
        trainer = JointTrainer(cfg, train_set, run_dir, eval_dataset=eval_set)
        trainer.train(progress=progress)
        metrics = evaluate(trainer.model, eval_set, device=trainer.device).as_dict()
        return {'success': True, 'error': None, **metrics}
    except StereoSegError as e:
        log.error(f"cell in {run_dir} failed: {e}")
        return {'success': False, 'error': str(e)}


def ablate(base_cfg: TrainConfig, grid: Union[str, Grid], out_dir: Union[str, Path],
           seeds: Optional[Sequence[int]] = None, train_set: Optional[StereoSceneDataset] = None,
           eval_set: Optional[StereoSceneDataset] = None, progress: bool = False) -> pd.DataFrame:
    """One row per cell (metrics averaged over seeds), sorted by mIoU descending"""
    grid_name = grid if isinstance(grid, str) else 'custom'
    cells = preset_grid(grid) if isinstance(grid, str) else dict(grid)
    if not cells:
        raise ConfigError("ablation grid is empty")
    seeds = list(seeds) if seeds else [base_cfg.seed]

    # reject bad toggles before spending any training time
    configs = {name: [cell_config(base_cfg, overrides, s) for s in seeds] for name, overrides in cells.items()}

    if train_set is None:
        train_set = build_dataset(base_cfg.data, 'train', base_cfg.seed)
    if eval_set is None:
        eval_set = train_set if base_cfg.data.source != 'kitti' else build_dataset(base_cfg.data, 'test')

    out_dir = Path(out_dir)
    rows: List[Dict[str, Any]] = []
    for name, cfgs in configs.items():
        results = []
        for seed, cfg in zip(seeds, cfgs):
            log.info(f"[{grid_name}] cell {name} seed {seed}")
            results.append(run_cell(cfg, train_set, eval_set, out_dir / name / f"seed_{seed}", progress))
        ok = [r for r in results if r['success']]
        row: Dict[str, Any] = {'cell': name, **cells[name], 'seeds': len(seeds),
                               'success': len(ok) == len(results),
                               'error': next((r['error'] for r in results if not r['success']), None)}
        if ok:
            frame = pd.DataFrame(ok).drop(columns=['success', 'error'])
            row.update(frame.mean(numeric_only=True).to_dict())
        rows.append(row)

    table = pd.DataFrame(rows)
    if 'mIoU' in table:
        table = table.sort_values('mIoU', ascending=False, na_position='last').reset_index(drop=True)
    save_table(table, out_dir / f"ablation_{grid_name}")
    return table


def save_table(table: pd.DataFrame, stem: Path) -> None:
    stem.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(stem.with_suffix('.csv'), index=False)
    blocks = []
    for _, row in table.iterrows():
        values = {k: v for k, v in row.items() if not (isinstance(v, float) and pd.isna(v))}
        blocks.append(to_kv_table(values))
    stem.with_suffix('.txt').write_text("\n".join(blocks))
