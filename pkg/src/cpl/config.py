"""Run configuration: a JSON document mirroring TrainConfig, with strict keys.

Top-level keys are the TrainConfig fields plus ``out_dir`` and
``eval_samples_per_task``; ``backbone`` and ``ranges`` are nested objects.
Any unknown key is rejected with its dotted path.
"""

from __future__ import annotations

import json
import os
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from .backbone import BackboneConfig
from .synth import DEFAULT_RANGES
from .trainer import TrainConfig

SEED_ENV = "CPL_SEED"
DEFAULT_SEED = 0


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    out_dir: str = "runs/default"
    eval_samples_per_task: int = 100

    def to_json(self) -> dict:
        d = self.train.to_json()
        d["out_dir"] = self.out_dir
        d["eval_samples_per_task"] = self.eval_samples_per_task
        return d


def default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return DEFAULT_SEED
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV}={raw!r} is not an integer") from None


def _check_type(path: str, value, hint) -> None:
    origin = typing.get_origin(hint)
    if origin is typing.Union or type(hint).__name__ == "UnionType":
        options = typing.get_args(hint)
        if value is None and type(None) in options:
            return
        hint = next(o for o in options if o is not type(None))
        origin = typing.get_origin(hint)
    ok = {
        int: isinstance(value, int) and not isinstance(value, bool),
        float: isinstance(value, (int, float)) and not isinstance(value, bool),
        bool: isinstance(value, bool),
        str: isinstance(value, str),
    }.get(hint)
    if ok is None:
        ok = isinstance(value, origin or hint)
    if not ok:
        raise ConfigError(f"{path}: expected {getattr(hint, '__name__', hint)}, got {type(value).__name__} {value!r}")


def _strict(cls, data: dict, path: str, skip=()) -> dict:
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    out = {}
    for key, value in data.items():
        dotted = f"{path}.{key}" if path else key
        if key in skip:
            continue
        if key not in names:
            raise ConfigError(f"unknown config key {dotted!r}")
        _check_type(dotted, value, hints[key])
        out[key] = float(value) if hints[key] is float else value
    return out


def _ranges(data, path="ranges") -> dict:
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    for task, sub in data.items():
        if task not in DEFAULT_RANGES:
            raise ConfigError(f"unknown config key {path}.{task!r}")
        if not isinstance(sub, dict):
            raise ConfigError(f"{path}.{task}: expected an object")
        for key, value in sub.items():
            if key not in DEFAULT_RANGES[task]:
                raise ConfigError(f"unknown config key '{path}.{task}.{key}'")
            if not isinstance(value, list) or not value:
                raise ConfigError(f"{path}.{task}.{key}: expected a non-empty list")
    return data


def parse_run_config(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    data = dict(data)
    run_keys = {"out_dir", "eval_samples_per_task"}
    top = _strict(TrainConfig, data, "", skip=run_keys | {"backbone", "ranges"})
    train = TrainConfig(**top)
    if "backbone" in data:
        train.backbone = BackboneConfig(**_strict(BackboneConfig, data["backbone"], "backbone"))
    if data.get("ranges") is not None:
        train.ranges = _ranges(data["ranges"])
    run = RunConfig(train)
    if "out_dir" in data:
        _check_type("out_dir", data["out_dir"], str)
        run.out_dir = data["out_dir"]
    if "eval_samples_per_task" in data:
        _check_type("eval_samples_per_task", data["eval_samples_per_task"], int)
        run.eval_samples_per_task = data["eval_samples_per_task"]
    if "seed" not in data:
        train.seed = default_seed()
    try:
        train.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if run.eval_samples_per_task < 1:
        raise ConfigError("eval_samples_per_task must be positive")
    return run


def load_run_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError:
        raise
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_run_config(data)


def write_effective_config(run: RunConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(run.to_json(), indent=2, sort_keys=True) + "\n")
    return path
