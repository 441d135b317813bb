"""Run configuration: one YAML file driving synthesis-to-evaluation runs.

Unknown keys are rejected (typo safety).  The effective config after
defaults is dumped next to run outputs; re-running from that dump is a
no-op difference.  CLI flags override file values; file values override
defaults.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .errors import ConfigError
from .inference import SlidingWindowConfig
from .preprocessing import PRESETS, PreprocessConfig
from .prompts import APGConfig
from .sampling import AugmentConfig, PatchSpec
from .training import LossConfig, OptimConfig

OUTPUT_ROOT_ENV = "AUTOSEG3D_OUTPUT_ROOT"


@dataclass
class DataConfig:
    manifest: str = ""
    preset: Optional[str] = None          # named preprocessing preset
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    already_preprocessed: bool = False    # skip resample/normalize on load

    def resolve_preprocess(self) -> PreprocessConfig:
        if self.preset is not None:
            if self.preset not in PRESETS:
                raise ConfigError(
                    f"unknown preprocessing preset {self.preset!r}; "
                    f"choose from {sorted(PRESETS)}"
                )
            return PRESETS[self.preset]
        return self.preprocess


@dataclass
class EvalConfig:
    tolerance_mm: float = 1.0


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    deterministic: bool = True
    checkpoint_2d: Optional[str] = None   # archive path; None -> surrogate from seed
    augment_enabled: bool = False
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    apg: APGConfig = field(default_factory=APGConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    patches: PatchSpec = field(default_factory=PatchSpec)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    infer: SlidingWindowConfig = field(default_factory=SlidingWindowConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def resolved_output_dir(self) -> Path:
        root = os.environ.get(OUTPUT_ROOT_ENV)
        out = Path(self.output_dir)
        if root and not out.is_absolute():
            return Path(root) / out
        return out


def _from_dict(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"config section {path or '<root>'} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(
            f"unknown config key(s) {sorted(unknown)} in section {path or '<root>'}"
        )
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        nested = f.type if isinstance(f.type, type) else None
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else None
        target = type(default) if default is not None and dataclasses.is_dataclass(default) else None
        if target is not None and isinstance(value, dict):
            kwargs[name] = _from_dict(target, value, f"{path}.{name}" if path else name)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad config section {path or '<root>'}: {exc}") from exc


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: no such config file")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
    return _from_dict(RunConfig, raw, "")


def dump_run_config(cfg: RunConfig, path) -> None:
    blob = dataclasses.asdict(cfg)

    def tuples_to_lists(obj):
        if isinstance(obj, tuple):
            return [tuples_to_lists(v) for v in obj]
        if isinstance(obj, list):
            return [tuples_to_lists(v) for v in obj]
        if isinstance(obj, dict):
            return {k: tuples_to_lists(v) for k, v in obj.items()}
        return obj

    Path(path).write_text(yaml.safe_dump(tuples_to_lists(blob), sort_keys=True))
