"""Initial multi-task model: shared encoder, per-task decoders and heads.

The encoder maps an image to a shared feature grid at 1/4 resolution. Each
task then gets its own stack of residual conv blocks and a 1x1 prediction
head with identical structure but separate parameters, producing the initial
feature and prediction maps that the denoising stage refines.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .tasks import TaskSpec


@dataclass
class BackboneConfig:
    encoder_kind: str = "tiny_conv"
    feature_channels: int = 64
    decoder_blocks: int = 2
    tasks: list[TaskSpec] = field(default_factory=list)

    def __post_init__(self):
        if self.encoder_kind not in ("tiny_conv", "resnet18_like"):
            raise ValueError(f"unknown encoder_kind {self.encoder_kind!r}")
        if self.feature_channels <= 0:
            raise ValueError("feature_channels must be positive")
        if self.decoder_blocks < 1:
            raise ValueError("decoder_blocks must be >= 1")
        if len(self.tasks) < 2:
            raise ValueError(f"need at least 2 tasks, got {len(self.tasks)}")


@dataclass
class InitialOutputs:
    """Shared feature plus per-task initial features and raw predictions."""

    backbone_feature: torch.Tensor
    task_features: dict[str, torch.Tensor]
    task_predictions: dict[str, torch.Tensor]

    def subset(self, indices: torch.Tensor | list[int]) -> "InitialOutputs":
        """Row-select a sub-batch, keeping graph connectivity."""
        return InitialOutputs(
            backbone_feature=self.backbone_feature[indices],
            task_features={k: v[indices] for k, v in self.task_features.items()},
            task_predictions={k: v[indices] for k, v in self.task_predictions.items()},
        )


def conv_bn_relu(in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=kernel // 2, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class TinyConvEncoder(nn.Module):
    """Three conv stages with total stride 4, for desk-scale runs."""

    stride = 4

    def __init__(self, out_channels: int):
        super().__init__()
        mid = max(out_channels // 2, 8)
        self.stage1 = conv_bn_relu(3, mid, stride=2)
        self.stage2 = conv_bn_relu(mid, mid, stride=2)
        self.stage3 = conv_bn_relu(mid, out_channels, stride=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.stage3(self.stage2(self.stage1(x)))


class BasicResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.down: nn.Module | None = None
        if stride != 1 or in_ch != out_ch:
            self.down = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False), nn.BatchNorm2d(out_ch)
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        identity = self.down(x) if self.down is not None else x
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + identity)


class ResNet18LikeEncoder(nn.Module):
    """Four-stage residual encoder, randomly initialized.

    The stage outputs are resized back to the first stage's resolution,
    concatenated along channels and reduced with a 3x3 convolution, so the
    effective output stride is 4. External weights can be loaded through the
    regular state-dict mechanism.
    """

    stride = 4
    required_multiple = 32

    def __init__(self, out_channels: int):
        super().__init__()
        widths = (64, 128, 256, 512)
        self.stem = nn.Sequential(
            nn.Conv2d(3, 64, 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(64),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        self.layers = nn.ModuleList()
        in_ch = 64
        for i, w in enumerate(widths):
            stride = 1 if i == 0 else 2
            self.layers.append(
                nn.Sequential(BasicResBlock(in_ch, w, stride=stride), BasicResBlock(w, w))
            )
            in_ch = w
        self.reduce = nn.Conv2d(sum(widths), out_channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.stem(x)
        feats = []
        for layer in self.layers:
            x = layer(x)
            feats.append(x)
        base = feats[0].shape[-2:]
        merged = torch.cat(
            [feats[0]]
            + [F.interpolate(f, size=base, mode="bilinear", align_corners=False) for f in feats[1:]],
            dim=1,
        )
        return self.reduce(merged)


class ResidualConvBlock(nn.Module):
    """Two 3x3 conv + BN + ReLU with a skip connection, channel preserving."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + x)


class TaskDecoder(nn.Module):
    def __init__(self, channels: int, num_blocks: int):
        super().__init__()
        self.blocks = nn.Sequential(*[ResidualConvBlock(channels) for _ in range(num_blocks)])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.blocks(x)


def build_encoder(cfg: BackboneConfig) -> nn.Module:
    if cfg.encoder_kind == "tiny_conv":
        return TinyConvEncoder(cfg.feature_channels)
    return ResNet18LikeEncoder(cfg.feature_channels)


class MultiTaskBackbone(nn.Module):
    """Shared encoder with per-task decoder and 1x1 prediction head."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.tasks = {t.name: t for t in cfg.tasks}
        self.encoder = build_encoder(cfg)
        c = cfg.feature_channels
        self.decoders = nn.ModuleDict(
            {t.name: TaskDecoder(c, cfg.decoder_blocks) for t in cfg.tasks}
        )
        self.heads = nn.ModuleDict(
            {t.name: nn.Conv2d(c, t.out_channels, 1) for t in cfg.tasks}
        )

    @property
    def required_multiple(self) -> int:
        return getattr(self.encoder, "required_multiple", self.encoder.stride)

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        if image.ndim != 4 or image.shape[1] != 3:
            raise ValueError(f"expected images shaped (N, 3, H, W), got {tuple(image.shape)}")
        h, w = image.shape[-2:]
        m = self.required_multiple
        if h % m or w % m:
            raise ValueError(
                f"image size {h}x{w} not divisible by the encoder multiple of {m}"
            )
        return self.encoder(image)

    def decode_task(self, backbone_feature: torch.Tensor, task: str | TaskSpec) -> torch.Tensor:
        name = task.name if isinstance(task, TaskSpec) else task
        if name not in self.decoders:
            raise KeyError(f"unknown task {name!r}; configured: {sorted(self.tasks)}")
        return self.decoders[name](backbone_feature)

    def predict_initial(self, task_feature: torch.Tensor, task: str | TaskSpec) -> torch.Tensor:
        name = task.name if isinstance(task, TaskSpec) else task
        if name not in self.heads:
            raise KeyError(f"unknown task {name!r}; configured: {sorted(self.tasks)}")
        if task_feature.shape[1] != self.cfg.feature_channels:
            raise ValueError(
                f"task feature has {task_feature.shape[1]} channels, "
                f"expected {self.cfg.feature_channels}"
            )
        return self.heads[name](task_feature)

    def forward(self, image: torch.Tensor) -> InitialOutputs:
        feature = self.encode(image)
        task_features = {name: self.decode_task(feature, name) for name in self.tasks}
        task_predictions = {
            name: self.predict_initial(task_features[name], name) for name in self.tasks
        }
        return InitialOutputs(feature, task_features, task_predictions)
