"""Run configuration: flat JSON sections, overridable by dotted command-line flags."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field, fields

from .recognizer import ModelConfig
from .writers import StyleRanges


class ConfigError(ValueError):
    pass


@dataclass
class PoolConfig:
    n_train: int = 20
    n_test: int = 8
    seed: int = 0
    lexicon: str | None = None
    images_per_train_writer: int = 100
    images_per_test_writer: int = 48
    slant: tuple[float, float] = (-0.4, 0.4)
    thickness: tuple[int, ...] = (0, 1, 2)
    noise_sigma: tuple[float, float] = (0.0, 0.15)
    jitter: tuple[int, int] = (-2, 2)
    warped_glyphs: int = 5
    warp_flip_prob: float = 0.35
    wobble: int = 1

    def ranges(self) -> StyleRanges:
        return StyleRanges(
            slant=tuple(self.slant), thickness=tuple(self.thickness), noise_sigma=tuple(self.noise_sigma),
            jitter=tuple(self.jitter), warped_glyphs=self.warped_glyphs,
            warp_flip_prob=self.warp_flip_prob, wobble=self.wobble,
        )


@dataclass
class TrainConfig:
    variant: str = "metahtr"
    pretrain_epochs: int = 60
    pretrain_lr: float = 3e-3
    batch_size: int = 32
    meta_epochs: int = 20
    steps_per_epoch: int = 50
    M: int = 8
    B: int = 16
    beta: float = 1e-4
    inner_lr: float = 1e-3
    weighted: bool | None = None
    learn_alpha: bool | None = None
    dg_lambda: float = 0.5
    dg_inner_lr: float = 5e-4


@dataclass
class EvalConfig:
    k: int = 16
    n_steps: int = 1
    reps: int = 10
    mode: str = "NL"
    lexicon: str | None = None  # lexicon file for mode L; defaults to the pool lexicon
    finetune_lr: float = 1e-3
    k_sweep: tuple[int, ...] = (1, 2, 4, 8, 16, 24, 32)
    step_sweep: tuple[int, ...] = (1, 2, 3, 5)
    diagnostic_min_count: int = 5


@dataclass
class PathConfig:
    checkpoint_dir: str = "runs/checkpoints"
    report_dir: str = "runs/reports"


@dataclass
class RunConfig:
    pool: PoolConfig = field(default_factory=PoolConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathConfig = field(default_factory=PathConfig)
    seed: int = 0
    workers: int = 1

    def validate(self) -> "RunConfig":
        checks = [
            ("train.M", self.train.M >= 1, "must be >= 1"),
            ("train.B", self.train.B >= 1, "must be >= 1"),
            ("eval.k", self.eval.k >= 0, "must be >= 0"),
            ("eval.reps", self.eval.reps >= 1, "must be >= 1"),
            ("eval.n_steps", self.eval.n_steps >= 0, "must be >= 0"),
            ("eval.mode", self.eval.mode in ("L", "NL"), "must be L or NL"),
            ("pool.n_train", self.pool.n_train >= 2, "must be >= 2"),
            ("pool.n_test", self.pool.n_test >= 1, "must be >= 1"),
            ("train.dg_lambda", 0.0 <= self.train.dg_lambda <= 1.0, "must be in [0, 1]"),
            ("workers", self.workers >= 1, "must be >= 1"),
            ("train.variant", self.train.variant in VARIANTS, f"must be one of {VARIANTS}"),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise ConfigError(f"{name} {msg}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


VARIANTS = ("metahtr", "maml", "maml_fo", "metasgd", "anil", "finetune", "dg")

SECTIONS = {"pool": PoolConfig, "model": ModelConfig, "train": TrainConfig, "eval": EvalConfig, "paths": PathConfig}


def _optional_bools() -> set[str]:
    """Dotted names of fields annotated ``bool | None``, whose None default hides the type."""
    out = set()
    for sec, cls in SECTIONS.items():
        out.update(f"{sec}.{f.name}" for f in fields(cls) if str(f.type).replace(" ", "") == "bool|None")
    return out


def _coerce(value, default, name):
    if isinstance(default, bool) or default is None and (isinstance(value, bool) or name in _optional_bools()):
        if isinstance(value, str):
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            if value.lower() in ("none", "null"):
                return None
            raise ConfigError(f"{name}: expected a boolean, got {value!r}")
        return value
    if isinstance(value, str) and value.lower() in ("none", "null") and default is None:
        return None
    try:
        if isinstance(default, tuple):
            items = value.split(",") if isinstance(value, str) else value
            kind = type(default[0]) if default else float
            return tuple(kind(v) for v in items)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: cannot interpret {value!r}") from None
    return value


def field_names() -> dict[str, object]:
    """Dotted name -> default for every configurable field."""
    out: dict[str, object] = {}
    base = RunConfig()
    for f in fields(RunConfig):
        sub = getattr(base, f.name)
        if dataclasses.is_dataclass(sub):
            for g in fields(sub):
                out[f"{f.name}.{g.name}"] = getattr(sub, g.name)
        else:
            out[f.name] = sub
    return out


def build(data: dict | None = None, overrides: dict[str, object] | None = None) -> RunConfig:
    """RunConfig from a nested dict (JSON file contents) plus dotted overrides."""
    flat: dict[str, object] = {}
    for key, val in (data or {}).items():
        if isinstance(val, dict):
            flat.update({f"{key}.{k}": v for k, v in val.items()})
        else:
            flat[key] = val
    flat.update(overrides or {})
    defaults = field_names()
    unknown = sorted(set(flat) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown config fields: {', '.join(unknown)}")
    sections: dict[str, dict] = {name: {} for name in SECTIONS}
    top: dict[str, object] = {}
    for key, val in flat.items():
        val = _coerce(val, defaults[key], key)
        if "." in key:
            sec, name = key.split(".", 1)
            sections[sec][name] = val
        else:
            top[key] = val
    kwargs = {name: cls(**sections[name]) for name, cls in SECTIONS.items()}
    try:
        return RunConfig(**kwargs, **top).validate()
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load(path: str | None, overrides: dict[str, object] | None = None) -> RunConfig:
    data = {}
    if path:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    return build(data, overrides)
