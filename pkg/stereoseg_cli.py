#!/usr/bin/env python3
"""
Stereo/Segmentation Coupling CLI
gen | train | eval | gradcheck | ablate | plot
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent / 'src'))

import click  # noqa: E402
from rich.console import Console  # noqa: E402
from rich.table import Table  # noqa: E402

from common.errors import StereoSegError  # noqa: E402
from common.logging_setup import configure_logging  # noqa: E402

console = Console()


def _load(config_path, overrides):
    from pipeline.config import load_config
    return load_config(config_path, list(overrides))


def _report_table(title: str, values: dict) -> Table:
    table = Table(title=title)
    table.add_column("Metric", style="cyan")
    table.add_column("Value", justify="right", style="green")
    for key, value in values.items():
        table.add_row(key, f"{value:.4f}" if isinstance(value, float) else str(value))
    return table


def _fail(message: str) -> None:
    console.print(f"❌ [red]{message}[/]")
    sys.exit(1)


@click.group()
@click.option('--log-level', default='WARNING', show_default=True, help='Library log level')
@click.option('--log-file', type=click.Path(dir_okay=False), default=None, help='Also log to this file')
def cli(log_level, log_file):
    """Joint semantic segmentation and stereo matching toolkit"""
    configure_logging(log_level, log_file)


@cli.command()
@click.option('--n', 'count', type=int, default=8, show_default=True, help='Number of scenes')
@click.option('--seed', type=int, default=0, show_default=True)
@click.option('--out', 'out_dir', type=click.Path(file_okay=False), required=True)
@click.option('--width', type=int, default=64, show_default=True)
@click.option('--height', type=int, default=64, show_default=True)
@click.option('--classes', 'num_classes', type=int, default=4, show_default=True)
@click.option('--objects', 'num_objects', type=int, default=3, show_default=True)
@click.option('--d-min', type=int, default=2, show_default=True)
@click.option('--d-max', type=int, default=16, show_default=True)
@click.option('--workers', type=int, default=1, show_default=True)
def gen(count, seed, out_dir, width, height, num_classes, num_objects, d_min, d_max, workers):
    """Write synthetic stereo scenes in the KITTI sample layout"""
    from tqdm import tqdm
    from worldgen.kitti_io import write_sample
    from worldgen.scene_generator import SceneSpec, generate_scenes

    try:
        spec = SceneSpec(width=width, height=height, num_objects=num_objects, num_classes=num_classes,
                         disparity_range=(d_min, d_max), rng_seed=seed)
        spec.validate()
        with console.status("[bold green]Generating scenes..."):
            samples = generate_scenes(spec, count, workers=workers)
        for i, sample in enumerate(tqdm(samples, desc="Writing samples")):
            write_sample(sample, out_dir, index=i)
    except StereoSegError as e:
        _fail(str(e))
    console.print(f"✅ [green]Wrote {count} samples to[/] {out_dir}")


@cli.command()
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--set', 'overrides', multiple=True, help='section.key=value override (repeatable)')
@click.option('--run-dir', type=click.Path(file_okay=False), default=None)
@click.option('--quiet', is_flag=True, help='Hide the progress bar')
def train(config_path, overrides, run_dir, quiet):
    """Train the joint network"""
    from pipeline.trainer import build_dataset, JointTrainer

    try:
        cfg = _load(config_path, overrides)
        with console.status("[bold green]Preparing data..."):
            dataset = build_dataset(cfg.data, 'train', cfg.seed)
        console.print(f"🚀 Training {cfg.iterations} iterations on {len(dataset)} samples")
        record = JointTrainer(cfg, dataset, run_dir).train(progress=not quiet)
    except StereoSegError as e:
        _fail(str(e))
    losses = record.read_losses()
    if not losses.empty:
        console.print(_report_table("Final loss", losses.iloc[-1].drop('iteration').to_dict()))
    console.print(f"✅ [green]Run saved to[/] {record.run_dir}")


@cli.command(name='eval')
@click.option('--checkpoint', type=click.Path(exists=True, dir_okay=False), required=True)
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False), default=None,
              help='Data section source; defaults to the checkpoint config')
@click.option('--set', 'overrides', multiple=True)
@click.option('--subset', type=click.Choice(['all', 'train', 'test']), default=None)
@click.option('--out', 'out_file', type=click.Path(dir_okay=False), default=None,
              help='Write the report as a key-value table')
def evaluate_cmd(checkpoint, config_path, overrides, subset, out_file):
    """Evaluate a checkpoint"""
    from evaluation.metrics import to_kv_table
    from pipeline.config import apply_setting, config_from_text, split_override
    from pipeline.evaluator import evaluate
    from pipeline.run_record import load_checkpoint
    from pipeline.trainer import build_dataset

    try:
        if config_path:
            cfg = _load(config_path, overrides)
        else:
            cfg = config_from_text(load_checkpoint(checkpoint)['config'])
            for item in overrides:
                apply_setting(cfg, *split_override(item))
            cfg.validate()
        dataset = build_dataset(cfg.data, subset or cfg.data.eval_subset, cfg.seed)
        with console.status("[bold green]Evaluating..."):
            result = evaluate(checkpoint, dataset, device=cfg.device, ignore_index=cfg.loss.ignore_index)
    except StereoSegError as e:
        _fail(str(e))
    values = result.as_dict()
    console.print(_report_table(f"📊 {Path(checkpoint).name} on {result.num_samples} samples", values))
    if out_file:
        Path(out_file).write_text(to_kv_table(values))
        console.print(f"💾 Report written to {out_file}")


@cli.command()
@click.option('--seed', type=int, default=0, show_default=True)
@click.option('--tol', type=float, default=1e-3, show_default=True)
def gradcheck(seed, tol):
    """Finite-difference check of every op and loss; exits nonzero on failure"""
    from pipeline.gradient_suite import run_gradient_suite

    with console.status("[bold green]Checking gradients..."):
        result = run_gradient_suite(seed=seed, tol=tol)
    table = Table(title=f"🧮 Gradient suite ({result['seconds']:.1f}s)")
    table.add_column("Check", style="cyan")
    table.add_column("Max rel. error", justify="right")
    table.add_column("Status")
    for name, report in result['results'].items():
        err = report.get('max_rel_error')
        table.add_row(name, f"{err:.2e}" if err is not None else "-",
                      "✅" if report.get('passed') else f"❌ {report.get('error', '')}")
    console.print(table)
    if not result['success']:
        _fail(result['error'])
    console.print("✅ [green]All gradients match[/]")


@cli.command()
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--set', 'overrides', multiple=True)
@click.option('--grid', 'grid_name', default='overall', show_default=True,
              help='overall | fusion | supervision | guidance | loss | alpha | beta')
@click.option('--seeds', default='', help='Comma-separated seeds (default: train.seed)')
@click.option('--out', 'out_dir', type=click.Path(file_okay=False), default='runs/ablation', show_default=True)
def ablate(config_path, overrides, grid_name, seeds, out_dir):
    """Run an ablation grid and print the ranked table"""
    from pipeline.ablation import ablate as run_ablation

    try:
        cfg = _load(config_path, overrides)
        seed_list = [int(s) for s in seeds.split(',') if s.strip()]
        table = run_ablation(cfg, grid_name, out_dir, seeds=seed_list or None)
    except (StereoSegError, ValueError) as e:
        _fail(str(e))

    shown = [c for c in ('cell', 'mIoU', 'mAcc', 'Acc', 'EPE', 'disagreement', 'success') if c in table]
    view = Table(title=f"🏁 Ablation '{grid_name}'")
    for column in shown:
        view.add_column(column)
    for _, row in table.iterrows():
        view.add_row(*[f"{row[c]:.2f}" if isinstance(row[c], float) else str(row[c]) for c in shown])
    console.print(view)
    if not table['success'].all():
        _fail("some ablation cells failed, see the error column")


@cli.command()
@click.option('--run', 'run_dirs', multiple=True, type=click.Path(exists=True, file_okay=False),
              help='Run directory with losses.jsonl (repeatable)')
@click.option('--ablation', 'tables', multiple=True, type=click.Path(exists=True, dir_okay=False),
              help='Ablation CSV (repeatable)')
@click.option('--out', 'out_dir', type=click.Path(file_okay=False), default='plots', show_default=True)
@click.option('--smooth', type=int, default=1, show_default=True)
def plot(run_dirs, tables, out_dir, smooth):
    """Render loss curves, ablation bars and alpha/beta sweeps"""
    import pandas as pd
    from pipeline.plotting import plot_ablation, plot_loss_curves, plot_sweep

    if not run_dirs and not tables:
        _fail("nothing to plot: pass --run and/or --ablation")
    out = Path(out_dir)
    try:
        for run in run_dirs:
            path = plot_loss_curves(run, out / f"loss_{Path(run).name}.png", smooth=smooth)
            console.print(f"📈 {path}")
        for csv in tables:
            table = pd.read_csv(csv)
            stem = Path(csv).stem
            for param in ('alpha', 'beta'):
                if f'loss.{param}' in table:
                    console.print(f"📈 {plot_sweep(table, param, out / f'{stem}_{param}_sweep.png')}")
            console.print(f"📊 {plot_ablation(table, out / f'{stem}.png')}")
    except StereoSegError as e:
        _fail(str(e))


def main():
    """Entry point"""
    cli()


if __name__ == "__main__":
    main()
