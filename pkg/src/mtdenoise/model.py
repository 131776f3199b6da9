"""Full multi-task denoising model: backbone + conditioning + denoiser.

The forward path follows one recipe for training and inference: run the
initial model over all tasks, build the shared condition from all initial
maps, then per task decay the chosen map (prediction or feature space) and
denoise it iteratively. Regression prediction maps are standardized with
running statistics before the decay and restored afterwards, since raw depth
values and logits live on very different scales.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .backbone import BackboneConfig, InitialOutputs, MultiTaskBackbone
from .denoiser import ConditionBuilder, ConditionFeature, Denoiser, DenoiserConfig, DenoisingResult
from .diffusion import NoiseSchedule, diffuse
from .tasks import TaskSpec


class MapStandardizer(nn.Module):
    """Per-channel scale statistics for the maps fed to the decay step.

    Behaves like batch normalization without affine parameters: training
    mode uses the current batch's statistics (treated as constants) while
    updating the running buffers, evaluation mode uses the buffers. One
    (mean, std) pair is shared by the normalize/restore calls of a single
    denoising pass.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))

    def current_stats(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if self.training:
            with torch.no_grad():
                mean = x.mean(dim=(0, 2, 3))
                var = x.var(dim=(0, 2, 3), unbiased=False)
                self.running_mean.mul_(1 - self.momentum).add_(self.momentum * mean)
                self.running_var.mul_(1 - self.momentum).add_(self.momentum * var)
        else:
            mean = self.running_mean
            var = self.running_var
        shape = (1, -1, 1, 1)
        return (
            mean.view(shape).to(x.dtype),
            torch.sqrt(var.view(shape).to(x.dtype) + self.eps),
        )

    def eval_stats(self, like: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        shape = (1, -1, 1, 1)
        return (
            self.running_mean.view(shape).to(like.dtype),
            torch.sqrt(self.running_var.view(shape).to(like.dtype) + self.eps),
        )


@dataclass
class TaskDenoisingOutput:
    """Everything the denoising pass produced for one task."""

    prediction: torch.Tensor  # restored final prediction map
    x_start: torch.Tensor  # decayed input handed to the denoiser
    raw: DenoisingResult  # step outputs in the diffused (possibly standardized) space


class DenoisingMultiTaskModel(nn.Module):
    def __init__(
        self,
        backbone_cfg: BackboneConfig,
        denoiser_cfg: DenoiserConfig,
        standardize: str = "auto",
    ):
        super().__init__()
        if standardize not in ("auto", "on", "off"):
            raise ValueError(f"standardize must be auto|on|off, got {standardize!r}")
        self.backbone = MultiTaskBackbone(backbone_cfg)
        self.denoiser_cfg = denoiser_cfg
        self.task_specs = list(backbone_cfg.tasks)
        self.tasks = {t.name: t for t in self.task_specs}
        c = backbone_cfg.feature_channels
        if not denoiser_cfg.ablation_no_cond:
            self.condition = ConditionBuilder(self.task_specs, c, denoiser_cfg.variant)
        else:
            self.condition = None
        self.denoiser = Denoiser(self.task_specs, c, denoiser_cfg)
        self.standardizers = nn.ModuleDict()
        for t in self.task_specs:
            if self._wants_standardize(t, standardize):
                ch = t.out_channels if denoiser_cfg.variant == "prediction" else c
                self.standardizers[t.name] = MapStandardizer(ch)

    def _wants_standardize(self, task: TaskSpec, mode: str) -> bool:
        if mode == "on":
            return True
        if mode == "off":
            return False
        # auto: regression prediction maps only; logits and features stay raw
        return self.denoiser_cfg.variant == "prediction" and task.loss == "l1"

    @property
    def variant(self) -> str:
        return self.denoiser_cfg.variant

    def initial_forward(self, images: torch.Tensor) -> InitialOutputs:
        return self.backbone(images)

    def variant_input(self, outputs: InitialOutputs, task: str) -> torch.Tensor:
        if self.variant == "prediction":
            return outputs.task_predictions[task]
        return outputs.task_features[task]

    def build_condition(self, outputs: InitialOutputs) -> ConditionFeature | None:
        if self.condition is None:
            return None
        maps = (
            outputs.task_predictions if self.variant == "prediction" else outputs.task_features
        )
        return self.condition(maps)

    def denoise_task(
        self,
        outputs: InitialOutputs,
        cond: ConditionFeature | None,
        task: str,
        schedule: NoiseSchedule,
        generator: torch.Generator | None = None,
        noise: torch.Tensor | None = None,
    ) -> TaskDenoisingOutput:
        if task not in self.tasks:
            raise KeyError(f"unknown task {task!r}; configured: {sorted(self.tasks)}")
        x_init = self.variant_input(outputs, task)
        stats = None
        if task in self.standardizers:
            mean, std = self.standardizers[task].current_stats(x_init)
            stats = (mean, std)
            x_init = (x_init - mean) / std
        if self.denoiser_cfg.ablation_no_diffusion:
            # iterative refinement of the clean map with the identical network
            x_start = x_init
        else:
            x_start = diffuse(x_init, schedule.steps, schedule, noise=noise, generator=generator)
        result = self.denoiser.run_denoising(x_start, schedule, cond, task)
        x0 = result.final
        if stats is not None:
            x0 = x0 * stats[1] + stats[0]
        prediction = x0 if self.variant == "prediction" else self._feature_head(x0, task)
        return TaskDenoisingOutput(prediction=prediction, x_start=x_start, raw=result)

    def _feature_head(self, features: torch.Tensor, task: str) -> torch.Tensor:
        """Final task head of the feature variant. With the residual step
        parameterization the head is anchored to the backbone's prediction
        head plus a zero-initialized correction, so the denoised path starts
        out consistent with the initial one."""
        correction = self.denoiser.project_prediction(features, task)
        if self.denoiser_cfg.residual_skip:
            return self.backbone.predict_initial(features, task) + correction
        return correction

    def restore_map(self, x: torch.Tensor, task: str) -> torch.Tensor:
        """Map a tensor from the diffused space back to prediction space,
        using the stored running statistics (used for trajectory rendering)."""
        if task in self.standardizers:
            mean, std = self.standardizers[task].eval_stats(x)
            x = x * std + mean
        if self.variant == "feature":
            return self._feature_head(x, task)
        return x

    @torch.no_grad()
    def predict(
        self,
        images: torch.Tensor,
        schedule: NoiseSchedule,
        generator: torch.Generator | None = None,
    ) -> tuple[dict[str, torch.Tensor], dict[str, torch.Tensor]]:
        """Initial and denoised prediction maps for every task."""
        outputs = self.initial_forward(images)
        cond = self.build_condition(outputs)
        denoised = {}
        for name in self.tasks:
            denoised[name] = self.denoise_task(outputs, cond, name, schedule, generator=generator).prediction
        return dict(outputs.task_predictions), denoised


class SingleTaskModel(nn.Module):
    """Plain single-task network used as the reference when computing the
    multi-task performance aggregate: same encoder and decoder structure,
    one task, no denoising stage."""

    def __init__(self, backbone_cfg: BackboneConfig, task: TaskSpec):
        super().__init__()
        from .backbone import TaskDecoder, build_encoder

        self.task = task
        self.encoder = build_encoder(backbone_cfg)
        self.decoder = TaskDecoder(backbone_cfg.feature_channels, backbone_cfg.decoder_blocks)
        self.head = nn.Conv2d(backbone_cfg.feature_channels, task.out_channels, 1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.head(self.decoder(self.encoder(images)))
