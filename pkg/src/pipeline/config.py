#!/usr/bin/env python3
"""
Run configuration
Typed sections loaded from flat `section.key = value` files, STEREOSEG_ environment
variables and command-line overrides, in that order.
"""

import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Optional, Tuple, Union

import yaml
from dotenv import load_dotenv
from loguru import logger

from common.errors import ConfigError
from losses.ct_loss import LossConfig
from model.encoder_tgf import EncoderConfig
from model.hds_decoder import DecoderConfig
from model.stereo_head import StereoConfig

log = logger.bind(source="config")

ENV_PREFIX = "STEREOSEG_"
SECTIONS = ('encoder', 'stereo', 'decoder', 'loss', 'data', 'train')
KEY_ALIASES = {'loss.paper_literal_sign': 'loss.negate_dscc'}


@dataclass
class DataConfig:
    source: str = 'synthetic'           # synthetic | samples | kitti
    path: str = 'data/desk'
    num_scenes: int = 8
    width: int = 64
    height: int = 64
    num_objects: int = 3
    num_classes: int = 4
    disparity_range: Tuple[int, int] = (2, 16)
    scene_seed: int = 0
    crop_hw: Tuple[int, int] = (64, 64)
    random_crop: bool = False
    kitti_split: str = 'training'
    train_ratio: float = 0.7
    split_seed: int = 42
    eval_subset: str = 'all'            # all | train | test

    def validate(self) -> None:
        if self.source not in ('synthetic', 'samples', 'kitti'):
            raise ConfigError(f"data.source must be synthetic, samples or kitti, got '{self.source}'")
        if self.eval_subset not in ('all', 'train', 'test'):
            raise ConfigError(f"data.eval_subset must be all, train or test, got '{self.eval_subset}'")
        if not 0.0 < self.train_ratio <= 1.0:
            raise ConfigError(f"data.train_ratio must be in (0, 1], got {self.train_ratio}")
        if len(self.crop_hw) != 2 or min(self.crop_hw) < 1:
            raise ConfigError(f"data.crop_hw must be two positive sizes, got {self.crop_hw}")
        if self.source == 'synthetic' and (self.crop_hw[0] > self.height or self.crop_hw[1] > self.width):
            raise ConfigError(f"crop {self.crop_hw} does not fit {self.height}x{self.width} scenes")


@dataclass
class TrainConfig:
    lr: float = 2e-4
    eps: float = 1e-5
    weight_decay: float = 1e-8
    iterations: int = 2000
    batch_size: int = 1
    accumulate: int = 1
    seed: int = 0
    device: str = 'cpu'
    log_every: int = 10
    eval_every: int = 500
    checkpoint_every: int = 500
    run_dir: str = 'runs/desk'
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    stereo: StereoConfig = field(default_factory=StereoConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> None:
        if self.iterations < 0:
            raise ConfigError(f"train.iterations must be >= 0, got {self.iterations}")
        if self.lr <= 0 or self.eps <= 0 or self.weight_decay < 0:
            raise ConfigError("train.lr and train.eps must be positive, train.weight_decay nonnegative")
        if self.batch_size < 1 or self.accumulate < 1:
            raise ConfigError("train.batch_size and train.accumulate must be >= 1")
        self.encoder.validate()
        self.stereo.validate()
        self.decoder.validate(self.encoder.n_layers)
        self.loss.validate()
        self.data.validate()
        if self.data.source == 'synthetic':
            if self.data.num_classes > self.decoder.num_classes:
                raise ConfigError(f"scenes use {self.data.num_classes} classes but decoder.num_classes "
                                  f"is {self.decoder.num_classes}")
            if self.data.disparity_range[1] > self.stereo.d_max:
                raise ConfigError(f"scene disparities reach {self.data.disparity_range[1]} px, "
                                  f"beyond stereo.d_max {self.stereo.d_max}")

    def section(self, name: str) -> Any:
        if name not in SECTIONS:
            raise ConfigError(f"unknown config section '{name}'")
        return self if name == 'train' else getattr(self, name)


def _section_fields(target: Any, name: str) -> Dict[str, Any]:
    return {f.name: f for f in fields(target) if not (name == 'train' and f.name in SECTIONS)}


def _coerce(value: Any, default: Any, key: str) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects true/false, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key} expects a list, got {value!r}")
        return tuple(value)
    if isinstance(default, float) and not isinstance(value, bool):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key} expects a number, got {value!r}") from None
    if isinstance(default, int) and not isinstance(value, int):
        raise ConfigError(f"{key} expects an integer, got {value!r}")
    if isinstance(default, str):
        return str(value)
    return value


def parse_value(text: str) -> Any:
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse value {text!r}: {e}") from e


def apply_setting(cfg: TrainConfig, dotted_key: str, value: Any) -> None:
    """Set `section.key` on cfg; raw strings are parsed as YAML scalars"""
    if '.' not in dotted_key:
        raise ConfigError(f"config key '{dotted_key}' must look like section.key")
    dotted_key = KEY_ALIASES.get(dotted_key.strip(), dotted_key.strip())
    section_name, key = dotted_key.split('.', 1)
    target = cfg.section(section_name)
    known = _section_fields(target, section_name)
    if key not in known:
        raise ConfigError(f"unknown config key '{dotted_key}'")
    if isinstance(value, str):
        value = parse_value(value)
    current = getattr(target, key)
    setattr(target, key, _coerce(value, current, dotted_key))


def parse_lines(lines: Iterable[str], source: str = "<text>") -> Dict[str, str]:
    settings = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value', got {raw.strip()!r}")
        key, value = line.split('=', 1)
        settings[key.strip()] = value.strip()
    return settings


def env_settings(environ: Optional[Mapping[str, str]] = None) -> Dict[str, str]:
    """STEREOSEG_TRAIN__LR=1e-3 -> {'train.lr': '1e-3'}"""
    environ = os.environ if environ is None else environ
    settings = {}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        body = name[len(ENV_PREFIX):].lower()
        if '__' not in body:
            continue
        section, key = body.split('__', 1)
        settings[f"{section}.{key}"] = value
    return settings


def split_override(text: str) -> Tuple[str, str]:
    if '=' not in text:
        raise ConfigError(f"override '{text}' must look like section.key=value")
    key, value = text.split('=', 1)
    return key.strip(), value.strip()


def load_config(path: Optional[Union[str, Path]] = None,
                overrides: Optional[Union[Mapping[str, Any], Iterable[str]]] = None,
                use_env: bool = True) -> TrainConfig:
    cfg = TrainConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        with open(path) as f:
            for key, value in parse_lines(f, str(path)).items():
                apply_setting(cfg, key, value)
        log.debug(f"loaded config file {path}")

    if use_env:
        load_dotenv()
        for key, value in env_settings().items():
            apply_setting(cfg, key, value)

    if overrides:
        items = overrides.items() if isinstance(overrides, Mapping) else [split_override(o) for o in overrides]
        for key, value in items:
            apply_setting(cfg, key, value)

    cfg.validate()
    return cfg


def _format(value: Any) -> str:
    if isinstance(value, tuple):
        value = list(value)
    return yaml.safe_dump(value, default_flow_style=True).strip().removesuffix('...').strip()


def dump_config(cfg: TrainConfig, path: Optional[Union[str, Path]] = None) -> str:
    lines = []
    for name in SECTIONS:
        target = cfg.section(name)
        lines.append(f"# {name}")
        for key in _section_fields(target, name):
            lines.append(f"{name}.{key} = {_format(getattr(target, key))}")
        lines.append("")
    text = "\n".join(lines)
    if path is not None:
        Path(path).write_text(text)
    return text


def config_from_text(text: str) -> TrainConfig:
    cfg = TrainConfig()
    for key, value in parse_lines(text.splitlines()).items():
        apply_setting(cfg, key, value)
    cfg.validate()
    return cfg


def clone_config(cfg: TrainConfig) -> TrainConfig:
    return config_from_text(dump_config(cfg))
