"""Conditioned denoising network.

A shared condition token sequence is built from the initial maps of every
task (labeled or not), which is what lets unlabeled tasks receive gradient.
The denoiser itself is a stack of task-shared cross-attention transformer
blocks: the condition tokens act as the query stream, the noisy map plus a
sinusoidal step embedding acts as keys and values. Task-specific parameters
exist only in the input projection and the output head.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .diffusion import NoiseSchedule
from .tasks import TaskSpec


@dataclass
class DenoiserConfig:
    num_blocks: int = 4
    num_heads: int = 1
    variant: str = "prediction"  # "prediction" diffuses P_init, "feature" diffuses F_init
    head_layers: int = 4
    ffn_expansion: int = 4
    step_embed_max_period: float = 10000.0
    # each step emits input + correction, with the final projection starting
    # at zero so the step is the identity before training
    residual_skip: bool = True
    ablation_no_cond: bool = False
    ablation_no_diffusion: bool = False

    def __post_init__(self):
        if self.variant not in ("prediction", "feature"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")
        if self.head_layers < 1:
            raise ValueError("head_layers must be >= 1")


@dataclass
class ConditionFeature:
    """Flattened multi-task condition tokens, shape (N, H'*W', C)."""

    tokens: torch.Tensor
    spatial: tuple[int, int]

    def __post_init__(self):
        h, w = self.spatial
        if self.tokens.ndim != 3 or self.tokens.shape[1] != h * w:
            raise ValueError(
                f"condition tokens shaped {tuple(self.tokens.shape)} do not match spatial {self.spatial}"
            )

    def subset(self, indices) -> "ConditionFeature":
        return ConditionFeature(self.tokens[indices], self.spatial)


@dataclass
class TaskEmbedding:
    """Noisy-map tokens with the step embedding added, shape (N, L, C)."""

    tokens: torch.Tensor
    step: int


def embed_step(s: int, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of a step index: sin on the first half of the
    channels, cos on the second, wavelengths geometric up to ``max_period``."""
    if dim % 2 != 0:
        raise ValueError(f"embedding dim must be even, got {dim}")
    if s < 0:
        raise ValueError(f"step must be >= 0, got {s}")
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = float(s) * freqs
    return torch.cat([torch.sin(args), torch.cos(args)]).to(torch.float32)


class ConditionBuilder(nn.Module):
    """Builds the shared condition tokens from every task's initial map.

    Each map goes through its own 3x3 projection to the feature width, the
    projections are concatenated along channels in configured task order and
    reduced back with a shared 3x3 convolution, then flattened to tokens.
    """

    def __init__(self, tasks: list[TaskSpec], feature_channels: int, variant: str):
        super().__init__()
        self.task_order = [t.name for t in tasks]
        c = feature_channels
        in_ch = {t.name: (t.out_channels if variant == "prediction" else c) for t in tasks}
        self.task_proj = nn.ModuleDict(
            {name: nn.Conv2d(in_ch[name], c, 3, padding=1) for name in self.task_order}
        )
        self.reduce = nn.Conv2d(c * len(tasks), c, 3, padding=1)

    def forward(self, initial_maps: dict[str, torch.Tensor]) -> ConditionFeature:
        missing = [n for n in self.task_order if n not in initial_maps]
        if missing:
            raise KeyError(f"conditioning requires every task's map; missing {missing}")
        projected = [self.task_proj[name](initial_maps[name]) for name in self.task_order]
        spatial = projected[0].shape[-2:]
        for name, p in zip(self.task_order, projected):
            if p.shape[-2:] != spatial:
                raise ValueError(f"task {name!r} map has spatial {p.shape[-2:]}, expected {spatial}")
        fused = self.reduce(torch.cat(projected, dim=1))
        tokens = fused.flatten(2).transpose(1, 2)
        return ConditionFeature(tokens=tokens, spatial=(int(spatial[0]), int(spatial[1])))


class AttentionBlock(nn.Module):
    """Pre-norm attention + feed-forward with residuals on the query stream."""

    def __init__(self, channels: int, num_heads: int, ffn_expansion: int):
        super().__init__()
        self.norm_q = nn.LayerNorm(channels)
        self.norm_kv = nn.LayerNorm(channels)
        self.attn = nn.MultiheadAttention(channels, num_heads, batch_first=True)
        self.norm_ffn = nn.LayerNorm(channels)
        hidden = channels * ffn_expansion
        self.ffn = nn.Sequential(nn.Linear(channels, hidden), nn.GELU(), nn.Linear(hidden, channels))

    def forward(self, query: torch.Tensor, kv: torch.Tensor) -> torch.Tensor:
        kv_n = self.norm_kv(kv)
        attn_out, _ = self.attn(self.norm_q(query), kv_n, kv_n, need_weights=False)
        x = query + attn_out
        return x + self.ffn(self.norm_ffn(x))


class PredictionHead(nn.Module):
    """Conv-ReLU stack followed by a 1x1 projection to the task channels."""

    def __init__(self, channels: int, out_channels: int, layers: int, zero_init_out: bool = False):
        super().__init__()
        body = []
        for _ in range(layers):
            body += [nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU(inplace=True)]
        self.body = nn.Sequential(*body)
        self.out = nn.Conv2d(channels, out_channels, 1)
        if zero_init_out:
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.out(self.body(x))


@dataclass
class DenoisingResult:
    final: torch.Tensor
    trajectory: list[torch.Tensor]  # step outputs x_{S-1} .. x_0, in order


class Denoiser(nn.Module):
    """Iterative map denoiser shared by all tasks.

    In the prediction variant every step emits a task prediction map through
    the per-task head, which is also the next step's input. In the feature
    variant the steps stay in feature space and ``project_prediction`` applies
    the per-task head once after the loop.
    """

    def __init__(self, tasks: list[TaskSpec], feature_channels: int, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        self.tasks = {t.name: t for t in tasks}
        c = feature_channels
        self.channels = c
        in_ch = {t.name: (t.out_channels if cfg.variant == "prediction" else c) for t in tasks}
        # one input projection per task, reused at every step
        self.input_proj = nn.ModuleDict(
            {name: nn.Conv2d(in_ch[name], c, 3, padding=1) for name in self.tasks}
        )
        self.blocks = nn.ModuleList(
            [AttentionBlock(c, cfg.num_heads, cfg.ffn_expansion) for _ in range(cfg.num_blocks)]
        )
        self.heads = nn.ModuleDict(
            {
                t.name: PredictionHead(
                    c, t.out_channels, cfg.head_layers, zero_init_out=cfg.residual_skip
                )
                for t in tasks
            }
        )
        self.step_out: nn.Module | None = None
        if cfg.variant == "feature" and cfg.residual_skip:
            # shared per-step correction in feature space, zero at start
            last = nn.Conv2d(c, c, 3, padding=1)
            nn.init.zeros_(last.weight)
            nn.init.zeros_(last.bias)
            self.step_out = nn.Sequential(
                nn.Conv2d(c, c, 3, padding=1), nn.ReLU(inplace=True), last
            )

    def _task_name(self, task: str | TaskSpec) -> str:
        name = task.name if isinstance(task, TaskSpec) else task
        if name not in self.tasks:
            raise KeyError(f"unknown task {name!r}; configured: {sorted(self.tasks)}")
        return name

    def embed_task(self, x_s: torch.Tensor, s: int, task: str | TaskSpec) -> TaskEmbedding:
        name = self._task_name(task)
        proj = self.input_proj[name]
        if x_s.shape[1] != proj.in_channels:
            raise ValueError(
                f"task {name!r} ({self.cfg.variant} variant) expects {proj.in_channels} input "
                f"channels, got {x_s.shape[1]}"
            )
        tok = proj(x_s).flatten(2).transpose(1, 2)
        emb = embed_step(s, self.channels, self.cfg.step_embed_max_period)
        return TaskEmbedding(tokens=tok + emb.to(tok.dtype).to(tok.device), step=s)

    def denoise_step(
        self,
        x_s: torch.Tensor,
        s: int,
        cond: ConditionFeature | None,
        task: str | TaskSpec,
    ) -> torch.Tensor:
        if s < 1:
            raise ValueError(f"denoising step must be >= 1, got {s}")
        name = self._task_name(task)
        h, w = x_s.shape[-2:]
        if self.cfg.ablation_no_cond:
            if cond is not None:
                raise ValueError("ablation_no_cond is set; condition must not be supplied")
        else:
            if cond is None:
                raise ValueError("condition feature is required unless ablation_no_cond is set")
            if cond.spatial != (h, w):
                raise ValueError(f"condition spatial {cond.spatial} != map spatial {(h, w)}")

        e = self.embed_task(x_s, s, name).tokens
        if self.cfg.ablation_no_cond:
            stream = e
            for block in self.blocks:
                stream = block(stream, stream)
        else:
            stream = cond.tokens
            for block in self.blocks:
                stream = block(stream, e)
        if self.cfg.residual_skip:
            # give the head a direct view of the noisy-map tokens: local
            # noise removal is then learnable by the conv stack alone
            stream = stream + e
        out = stream.transpose(1, 2).reshape(x_s.shape[0], self.channels, h, w)
        if self.cfg.variant == "prediction":
            update = self.heads[name](out)
            return x_s + update if self.cfg.residual_skip else update
        if self.step_out is not None:
            return x_s + self.step_out(out)
        return out

    def project_prediction(self, x0: torch.Tensor, task: str | TaskSpec) -> torch.Tensor:
        """Final task head for the feature variant."""
        name = self._task_name(task)
        return self.heads[name](x0)

    def run_denoising(
        self,
        x_start: torch.Tensor,
        schedule: NoiseSchedule,
        cond: ConditionFeature | None,
        task: str | TaskSpec,
    ) -> DenoisingResult:
        x = x_start
        trajectory: list[torch.Tensor] = []
        for s in range(schedule.steps, 0, -1):
            x = self.denoise_step(x, s, cond, task)
            trajectory.append(x)
        return DenoisingResult(final=x, trajectory=trajectory)
