"""Multi-task dense prediction with diffusion-based map denoising."""

from .backbone import BackboneConfig, InitialOutputs, MultiTaskBackbone
from .config import RunConfig, apply_overrides, load_config, save_config
from .data import (
    LabelMapping,
    PartialLabelSample,
    SyntheticSceneConfig,
    assign_partial_labels,
    generate_scene,
    load_dataset,
)
from .denoiser import ConditionFeature, Denoiser, DenoiserConfig, embed_step
from .diffusion import NoiseSchedule, build_linear_schedule, diffuse
from .metrics import (
    MetricReport,
    compute_abs_err,
    compute_delta_m,
    compute_max_f,
    compute_mean_angle_err,
    compute_miou,
    compute_ods_f,
)
from .model import DenoisingMultiTaskModel, SingleTaskModel
from .tasks import IGNORE_INDEX, TaskSpec, default_task_suite
from .training import LossReport, evaluate, task_loss, train, training_step

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig",
    "ConditionFeature",
    "Denoiser",
    "DenoiserConfig",
    "DenoisingMultiTaskModel",
    "IGNORE_INDEX",
    "InitialOutputs",
    "LabelMapping",
    "LossReport",
    "MetricReport",
    "MultiTaskBackbone",
    "NoiseSchedule",
    "PartialLabelSample",
    "RunConfig",
    "SingleTaskModel",
    "SyntheticSceneConfig",
    "TaskSpec",
    "apply_overrides",
    "assign_partial_labels",
    "build_linear_schedule",
    "compute_abs_err",
    "compute_delta_m",
    "compute_max_f",
    "compute_mean_angle_err",
    "compute_miou",
    "compute_ods_f",
    "default_task_suite",
    "diffuse",
    "embed_step",
    "evaluate",
    "generate_scene",
    "load_config",
    "load_dataset",
    "save_config",
    "task_loss",
    "train",
    "training_step",
]
