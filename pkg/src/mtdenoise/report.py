"""Report files and figures.

The evaluation path writes a delimited ``key<TAB>value`` report (aggregate
last) and renders a matplotlib comparison figure next to it. Prediction maps
are rendered with fixed palettes: class colors for segmentation-like tasks,
grayscale for depth, RGB-mapped unit vectors for normals.
"""
from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import torch
import yaml

from .data import CLASS_PALETTE
from .tasks import IGNORE_INDEX, TaskSpec


# -- metric report files -----------------------------------------------------

def write_metric_report(path: str, report, baseline: dict[str, float] | None = None) -> None:
    """Serialize an evaluation report as ``key<TAB>value`` lines.

    Keys are ``{block}/{task}/{metric}``; baseline values (if any) follow,
    and the signed aggregate goes last.
    """
    lines = []
    for block in ("initial", "denoised"):
        metrics = report.block(block)
        for task in sorted(metrics.per_task):
            lines.append(f"{block}/{task}\t{metrics.per_task[task]:.6f}\n")
    if baseline:
        for task in sorted(baseline):
            lines.append(f"baseline/{task}\t{baseline[task]:.6f}\n")
    if report.denoised.delta_m is not None:
        lines.append(f"delta_m\t{report.denoised.delta_m:.6f}\n")
    with open(path, "w") as fh:
        fh.writelines(lines)


def read_metric_report(path: str) -> dict[str, float]:
    values: dict[str, float] = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            key, value = line.split("\t")
            values[key] = float(value)
    return values


def read_baseline_values(path: str, tasks: list[str]) -> dict[str, float]:
    """Per-task reference values from a YAML mapping or a report file."""
    if path.endswith((".yaml", ".yml")):
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        if "tasks" in data:
            data = data["tasks"]
        values = {str(k): float(v) for k, v in data.items()}
    else:
        report = read_metric_report(path)
        values = {}
        for key, v in report.items():
            if key.startswith("denoised/"):
                values[key.split("/", 1)[1]] = v
            elif key.startswith("baseline/"):
                values.setdefault(key.split("/", 1)[1], v)
    missing = [t for t in tasks if t not in values]
    if missing:
        raise ValueError(f"baseline file {path!r} lacks values for tasks {missing}")
    return {t: values[t] for t in tasks}


def load_delta_m_numbers(path: str) -> tuple[dict, dict, dict]:
    """Parse a YAML file with per-task mtl/stl values and metric direction."""
    with open(path) as fh:
        data = yaml.safe_load(fh)
    entries = data.get("tasks", data)
    mtl, stl, lower = {}, {}, {}
    for name, row in entries.items():
        mtl[name] = float(row["mtl"])
        stl[name] = float(row["stl"])
        lower[name] = bool(row["lower_is_better"])
    return mtl, stl, lower


# -- figures -------------------------------------------------------------------

def render_metric_comparison(path: str, report, task_specs: list[TaskSpec]) -> None:
    """One bar panel per task comparing initial vs denoised metric values."""
    specs = list(task_specs)
    fig, axes = plt.subplots(1, len(specs), figsize=(3.2 * len(specs), 3.2))
    if len(specs) == 1:
        axes = [axes]
    for ax, spec in zip(axes, specs):
        vals = [report.initial.per_task[spec.name], report.denoised.per_task[spec.name]]
        ax.bar(["initial", "denoised"], vals, color=["#559298", "#d6995e"])
        arrow = "lower=better" if spec.lower_is_better else "higher=better"
        ax.set_title(f"{spec.name}\n{spec.metric} ({arrow})", fontsize=9)
        for i, v in enumerate(vals):
            ax.text(i, v, f"{v:.3f}", ha="center", va="bottom", fontsize=8)
    if report.denoised.delta_m is not None:
        fig.suptitle(f"multi-task aggregate: {report.denoised.delta_m:+.2f}%", fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_loss_curve(path: str, log_path: str, smooth: int = 10) -> None:
    import json

    steps, totals = [], []
    with open(log_path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            steps.append(rec["step"])
            totals.append(rec["total"])
    if not steps:
        return
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(steps, totals, alpha=0.35, label="loss")
    if len(totals) >= smooth:
        kernel = np.ones(smooth) / smooth
        smoothed = np.convolve(totals, kernel, mode="valid")
        ax.plot(steps[smooth - 1 :], smoothed, label=f"smoothed ({smooth})")
    ax.set_xlabel("step")
    ax.set_ylabel("total loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# -- map rendering ---------------------------------------------------------------

def _to_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def render_class_map(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros(labels.shape + (3,), dtype=np.uint8)
    palette = (CLASS_PALETTE * 255).astype(np.uint8)
    for c in range(num_classes):
        out[labels == c] = palette[c % len(palette)]
    out[labels == IGNORE_INDEX] = (255, 255, 255)
    return out


def render_map(pred, spec: TaskSpec, depth_range: tuple[float, float] | None = None) -> np.ndarray:
    """Render one prediction map (channels first, no batch) to an RGB image."""
    arr = _to_numpy(pred)
    if spec.kind in ("segmentation", "parsing"):
        labels = arr.argmax(axis=0) if arr.ndim == 3 else arr
        return render_class_map(labels.astype(np.int64), spec.out_channels)
    if spec.kind in ("saliency", "boundary"):
        if arr.ndim == 3 and arr.shape[0] == 2:
            e = np.exp(arr - arr.max(axis=0, keepdims=True))
            prob = e[1] / e.sum(axis=0)
        else:
            prob = arr[0] if arr.ndim == 3 else arr
        gray = np.clip(prob * 255, 0, 255).astype(np.uint8)
        return np.stack([gray] * 3, axis=-1)
    if spec.kind == "depth":
        d = arr[0] if arr.ndim == 3 else arr
        lo, hi = depth_range if depth_range else (float(d.min()), float(d.max()))
        scale = (d - lo) / (hi - lo) if hi > lo else np.zeros_like(d)
        gray = np.clip(scale * 255, 0, 255).astype(np.uint8)
        return np.stack([gray] * 3, axis=-1)
    if spec.kind == "normal":
        v = arr if arr.ndim == 3 else arr[None]
        norm = np.linalg.norm(v, axis=0, keepdims=True)
        unit = v / np.where(norm == 0, 1.0, norm)
        return np.clip((unit.transpose(1, 2, 0) + 1.0) * 127.5, 0, 255).astype(np.uint8)
    raise KeyError(f"no renderer for task kind {spec.kind!r}")


def save_map_image(path: str, pred, spec: TaskSpec, depth_range=None) -> None:
    from PIL import Image

    Image.fromarray(render_map(pred, spec, depth_range), mode="RGB").save(path)


# -- raw tensor container ----------------------------------------------------------

def save_raw_maps(out_dir: str, entries: dict[str, np.ndarray]) -> None:
    """Binary container (npz) with a text index listing name, shape, dtype."""
    os.makedirs(out_dir, exist_ok=True)
    arrays = {k: np.asarray(v) for k, v in entries.items()}
    np.savez(os.path.join(out_dir, "maps.npz"), **arrays)
    with open(os.path.join(out_dir, "index.txt"), "w") as fh:
        for name in sorted(arrays):
            a = arrays[name]
            fh.write(f"{name}\t{'x'.join(map(str, a.shape))}\t{a.dtype}\tmaps.npz\n")


def render_trajectory_figure(path: str, panels: list[tuple[str, np.ndarray]]) -> None:
    """Contact sheet of named RGB panels, left to right."""
    fig, axes = plt.subplots(1, len(panels), figsize=(2.2 * len(panels), 2.6))
    if len(panels) == 1:
        axes = [axes]
    for ax, (name, img) in zip(axes, panels):
        ax.imshow(img)
        ax.set_title(name, fontsize=8)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
