"""Run configuration: nested sections, YAML round trip, dot-path overrides.

Every field has a default, unknown keys are rejected, and values coerce from
override strings based on the field's declared type, so a config file plus a
list of ``section.key=value`` strings fully determines a run.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from typing import Any, get_args, get_origin

import yaml

from .backbone import BackboneConfig
from .denoiser import DenoiserConfig
from .diffusion import NoiseSchedule, build_linear_schedule
from .tasks import TaskSpec


@dataclass
class TaskEntry:
    name: str = ""
    kind: str = ""
    out_channels: int = 1
    weight: float = 1.0


def _default_tasks() -> list[TaskEntry]:
    return [
        TaskEntry("segmentation", "segmentation", 5),
        TaskEntry("depth", "depth", 1),
        TaskEntry("normal", "normal", 3),
    ]


@dataclass
class BackboneSection:
    encoder_kind: str = "tiny_conv"
    feature_channels: int = 64
    decoder_blocks: int = 2


@dataclass
class DenoiserSection:
    num_blocks: int = 4
    num_heads: int = 1
    variant: str = "prediction"
    head_layers: int = 4
    ffn_expansion: int = 4
    step_embed_max_period: float = 10000.0
    residual_skip: bool = True
    ablation_no_cond: bool = False
    ablation_no_diffusion: bool = False


@dataclass
class DiffusionSection:
    steps: int = 2
    beta_start: float = 1.0e-3
    beta_end: float = 1.0e-2
    standardize: str = "auto"


@dataclass
class TrainingSection:
    steps: int = 200
    batch_size: int = 8
    lr: float = 1.0e-3
    lr_power: float = 0.9
    weight_decay: float = 0.0
    log_every: int = 1
    eval_every: int = 0  # 0 = evaluate only at the end
    baseline_mode: str = "initial"  # initial | cotrain | file
    baseline_path: str = ""


@dataclass
class EvalSection:
    batch_size: int = 16
    ods_tolerance_px: int = 1


@dataclass
class SeedsSection:
    data: int = 0
    init: int = 0
    noise: int = 0
    eval_noise: int = 1234


@dataclass
class RunConfig:
    dataset: str = ""
    eval_dataset: str = ""  # defaults to the training split when empty
    setting: str = "one_label"
    tasks: list[TaskEntry] = field(default_factory=_default_tasks)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    denoiser: DenoiserSection = field(default_factory=DenoiserSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    eval: EvalSection = field(default_factory=EvalSection)
    seeds: SeedsSection = field(default_factory=SeedsSection)

    # -- derived builders -------------------------------------------------
    def task_specs(self) -> list[TaskSpec]:
        return [TaskSpec(t.name, t.kind, t.out_channels) for t in self.tasks]

    def task_weights(self) -> dict[str, float]:
        return {t.name: t.weight for t in self.tasks}

    def backbone_config(self) -> BackboneConfig:
        b = self.backbone
        return BackboneConfig(
            encoder_kind=b.encoder_kind,
            feature_channels=b.feature_channels,
            decoder_blocks=b.decoder_blocks,
            tasks=self.task_specs(),
        )

    def denoiser_config(self) -> DenoiserConfig:
        d = self.denoiser
        return DenoiserConfig(
            num_blocks=d.num_blocks,
            num_heads=d.num_heads,
            variant=d.variant,
            head_layers=d.head_layers,
            ffn_expansion=d.ffn_expansion,
            step_embed_max_period=d.step_embed_max_period,
            residual_skip=d.residual_skip,
            ablation_no_cond=d.ablation_no_cond,
            ablation_no_diffusion=d.ablation_no_diffusion,
        )

    def schedule(self, steps: int | None = None) -> NoiseSchedule:
        d = self.diffusion
        return build_linear_schedule(steps or d.steps, d.beta_start, d.beta_end)


# -- dict / YAML conversion ------------------------------------------------

def _from_dict(cls: type, data: Any, path: str = "") -> Any:
    if not dataclasses.is_dataclass(cls):
        return data
    if not isinstance(data, dict):
        raise TypeError(f"{path or cls.__name__}: expected a mapping, got {type(data).__name__}")
    # annotations are postponed strings; resolve them to real types
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise KeyError(f"{path or cls.__name__}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        ftype = hints[name]
        sub = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(ftype):
            kwargs[name] = _from_dict(ftype, value, sub)
        elif get_origin(ftype) is list and get_args(ftype) and dataclasses.is_dataclass(get_args(ftype)[0]):
            item_cls = get_args(ftype)[0]
            if not isinstance(value, list):
                raise TypeError(f"{sub}: expected a list")
            kwargs[name] = [_from_dict(item_cls, v, f"{sub}[{i}]") for i, v in enumerate(value)]
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    return _from_dict(RunConfig, data)


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def load_config(path: str) -> RunConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    return config_from_dict(data)


def save_config(cfg: RunConfig, path: str) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=False)


# -- dot-path overrides -----------------------------------------------------

_BOOL_STRINGS = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _coerce(value: str, target_type: type, path: str) -> Any:
    if target_type is bool:
        key = value.strip().lower()
        if key not in _BOOL_STRINGS:
            raise ValueError(f"{path}: cannot parse {value!r} as bool")
        return _BOOL_STRINGS[key]
    if target_type is int:
        return int(value)
    if target_type is float:
        return float(value)
    return value


def apply_override(cfg: RunConfig, assignment: str) -> None:
    """Apply one ``dot.path=value`` override in place."""
    if "=" not in assignment:
        raise ValueError(f"override must look like key.path=value, got {assignment!r}")
    dotted, raw = assignment.split("=", 1)
    parts = dotted.strip().split(".")
    obj: Any = cfg
    for i, part in enumerate(parts[:-1]):
        if not dataclasses.is_dataclass(obj) or part not in {f.name for f in dataclasses.fields(obj)}:
            raise KeyError(f"unknown config path {'.'.join(parts[: i + 1])!r}")
        obj = getattr(obj, part)
    leaf = parts[-1]
    if not dataclasses.is_dataclass(obj):
        raise KeyError(f"config path {dotted!r} does not point into a section")
    fields = {f.name: f for f in dataclasses.fields(obj)}
    if leaf not in fields:
        raise KeyError(f"unknown config key {dotted!r}")
    current = getattr(obj, leaf)
    if dataclasses.is_dataclass(current) or isinstance(current, list):
        raise ValueError(f"{dotted!r} is a section or list and cannot be set from a flag")
    setattr(obj, leaf, _coerce(raw.strip(), type(current), dotted))


def apply_overrides(cfg: RunConfig, assignments: list[str]) -> RunConfig:
    for a in assignments:
        apply_override(cfg, a)
    return cfg
