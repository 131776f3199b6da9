"""Declarative descriptions of the dense prediction tasks."""
from __future__ import annotations

from dataclasses import dataclass, field

IGNORE_INDEX = 255

TASK_KINDS = ("segmentation", "parsing", "saliency", "boundary", "depth", "normal")
CLASSIFICATION_KINDS = ("segmentation", "parsing", "saliency", "boundary")
REGRESSION_KINDS = ("depth", "normal")

# loss / metric / direction implied by the task kind
_KIND_DEFAULTS = {
    "segmentation": ("cross_entropy", "miou", False),
    "parsing": ("cross_entropy", "miou", False),
    "saliency": ("cross_entropy", "max_f", False),
    "boundary": ("cross_entropy", "ods_f", False),
    "depth": ("l1", "abs_err", True),
    "normal": ("l1", "mean_angle_err", True),
}


@dataclass(frozen=True)
class TaskSpec:
    """One dense task: output channels plus how it is supervised and scored.

    ``loss``, ``metric`` and ``lower_is_better`` default from ``kind`` and are
    validated against it (classification kinds require cross-entropy,
    regression kinds require L1).
    """

    name: str
    kind: str
    out_channels: int
    loss: str = ""
    metric: str = ""
    lower_is_better: bool = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}, expected one of {TASK_KINDS}")
        if self.out_channels < 1:
            raise ValueError(f"task {self.name!r}: out_channels must be >= 1, got {self.out_channels}")
        loss, metric, lower = _KIND_DEFAULTS[self.kind]
        if not self.loss:
            object.__setattr__(self, "loss", loss)
        if not self.metric:
            object.__setattr__(self, "metric", metric)
        if self.lower_is_better is None:
            object.__setattr__(self, "lower_is_better", lower)
        if self.kind in CLASSIFICATION_KINDS and self.loss != "cross_entropy":
            raise ValueError(f"task {self.name!r}: kind {self.kind!r} requires cross_entropy loss")
        if self.kind in REGRESSION_KINDS and self.loss != "l1":
            raise ValueError(f"task {self.name!r}: kind {self.kind!r} requires l1 loss")

    @property
    def is_classification(self) -> bool:
        return self.kind in CLASSIFICATION_KINDS


def default_task_suite(num_classes: int = 5) -> list[TaskSpec]:
    """Desk-scale task triple: segmentation, depth and surface normals."""
    return [
        TaskSpec("segmentation", "segmentation", num_classes),
        TaskSpec("depth", "depth", 1),
        TaskSpec("normal", "normal", 3),
    ]


def task_map(tasks: list[TaskSpec]) -> dict[str, TaskSpec]:
    names = [t.name for t in tasks]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate task names: {names}")
    return {t.name: t for t in tasks}
