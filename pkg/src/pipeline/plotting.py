#!/usr/bin/env python3
"""
Static plots: loss curves, ablation bars, alpha/beta sweep curves
"""

from pathlib import Path
from typing import Sequence, Union

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402
import seaborn as sns  # noqa: E402
from loguru import logger  # noqa: E402

from common.errors import SampleIOError  # noqa: E402
from pipeline.run_record import read_jsonl  # noqa: E402

log = logger.bind(source="plotting")

LOSS_TERMS = ('total', 'dia', 'dscc', 'scg', 'sm', 'ce')

sns.set_theme(style='whitegrid')


def _save(fig: plt.Figure, out_path: Union[str, Path]) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    log.info(f"wrote {out_path}")
    return out_path


def plot_loss_curves(run: Union[str, Path, pd.DataFrame], out_path: Union[str, Path],
                     smooth: int = 1) -> Path:
    losses = run if isinstance(run, pd.DataFrame) else read_jsonl(Path(run) / 'losses.jsonl')
    if losses.empty:
        raise SampleIOError(f"no loss records in {run}")
    terms = [t for t in LOSS_TERMS if t in losses and (losses[t] != 0).any()]
    long = losses.melt(id_vars='iteration', value_vars=terms, var_name='term', value_name='loss')
    if smooth > 1:
        long['loss'] = long.groupby('term')['loss'].transform(lambda s: s.rolling(smooth, min_periods=1).mean())
    fig, ax = plt.subplots(figsize=(8, 4.5))
    sns.lineplot(data=long, x='iteration', y='loss', hue='term', ax=ax)
    ax.set_yscale('log')
    ax.set_title('Training loss')
    return _save(fig, out_path)


def plot_ablation(table: pd.DataFrame, out_path: Union[str, Path],
                  metrics: Sequence[str] = ('mIoU', 'mAcc')) -> Path:
    present = [m for m in metrics if m in table]
    if not present:
        raise SampleIOError(f"ablation table has none of {list(metrics)}")
    long = table.melt(id_vars='cell', value_vars=present, var_name='metric', value_name='percent')
    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(table)), 4.5))
    sns.barplot(data=long, x='cell', y='percent', hue='metric', ax=ax)
    ax.tick_params(axis='x', rotation=30)
    ax.set_xlabel('')
    return _save(fig, out_path)


def plot_sweep(table: pd.DataFrame, param: str, out_path: Union[str, Path],
               metrics: Sequence[str] = ('mAcc', 'mIoU')) -> Path:
    """Metric curves against a swept loss weight (column `loss.<param>`)"""
    column = param if param in table else f'loss.{param}'
    if column not in table:
        raise SampleIOError(f"sweep table has no '{column}' column")
    data = table.sort_values(column)
    fig, ax = plt.subplots(figsize=(6, 4))
    for metric in metrics:
        if metric in data:
            ax.plot(data[column], data[metric], marker='o', label=metric)
    ax.set_xlabel(param)
    ax.set_ylabel('percent')
    ax.legend()
    return _save(fig, out_path)
