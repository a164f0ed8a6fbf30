"""INI configuration mirroring the dataclass configs.

Each section names one config type; keys are its field names and values are
Python literals (numbers, tuples, quoted or bare strings)::

    [scene]
    points_per_frame = 2048
    [model]
    mode = lstm
    [backbone]
    encoder_widths = (8, 12, 16)
"""

from __future__ import annotations

import ast
import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .data import SceneConfig
from .detect.head import HeadConfig
from .evaltrack import EvalConfig, TrackerConfig
from .loss import LossWeights
from .net import BackboneConfig, LstmConfig, ModelConfig
from .train import TrainConfig


@dataclass
class DatasetConfig:
    count: int = 20
    held_out: int = 5


@dataclass
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig.toy)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)


class ConfigError(ValueError):
    pass


def _parse_value(raw: str):
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        return raw.strip()


def _apply(obj, values: dict, section: str):
    names = {f.name for f in dataclasses.fields(obj)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {', '.join(sorted(unknown))}")
    try:
        return dataclasses.replace(obj, **values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def _section_values(parser: configparser.ConfigParser, name: str) -> dict:
    if not parser.has_section(name):
        return {}
    return {k: _parse_value(v) for k, v in parser.items(name)}


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0]) from exc
    known = {"scene", "dataset", "model", "backbone", "lstm", "head", "train", "weights", "eval",
             "tracker"}
    extra = set(parser.sections()) - known
    if extra:
        raise ConfigError(f"unknown sections: {', '.join(sorted(extra))}")
    base = RunConfig()
    m = base.model
    model = _apply(m, {**_section_values(parser, "model"),
                       "backbone": _apply(m.backbone, _section_values(parser, "backbone"), "backbone"),
                       "lstm": _apply(m.lstm, _section_values(parser, "lstm"), "lstm"),
                       "head": _apply(m.head, _section_values(parser, "head"), "head")}, "model")
    if isinstance(model.voxel_size, (int, float)):
        model = dataclasses.replace(model, voxel_size=(float(model.voxel_size),) * 3)
    t = base.train
    train = _apply(t, {**_section_values(parser, "train"),
                       "weights": _apply(t.weights, _section_values(parser, "weights"), "weights")},
                   "train")
    return RunConfig(
        scene=_apply(base.scene, _section_values(parser, "scene"), "scene"),
        dataset=_apply(base.dataset, _section_values(parser, "dataset"), "dataset"),
        model=model,
        train=train,
        eval=_apply(base.eval, _section_values(parser, "eval"), "eval"),
        tracker=_apply(base.tracker, _section_values(parser, "tracker"), "tracker"),
    )


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text())


def dump_config(cfg: RunConfig) -> str:
    """INI text that :func:`parse_config` reads back to an equal config."""
    sections = {
        "scene": cfg.scene, "dataset": cfg.dataset, "model": cfg.model,
        "backbone": cfg.model.backbone, "lstm": cfg.model.lstm, "head": cfg.model.head,
        "train": cfg.train, "weights": cfg.train.weights, "eval": cfg.eval, "tracker": cfg.tracker,
    }
    nested = {"backbone", "lstm", "head", "weights"}
    lines = []
    for name, obj in sections.items():
        lines.append(f"[{name}]")
        for f in dataclasses.fields(obj):
            if f.name in nested:
                continue
            lines.append(f"{f.name} = {getattr(obj, f.name)!r}")
        lines.append("")
    return "\n".join(lines)
