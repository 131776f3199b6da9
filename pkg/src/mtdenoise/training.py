"""Optimization and evaluation under partial labels.

Each training step runs the initial forward over all tasks, builds the
shared condition from all of them, then decays and denoises only the tasks
that are labeled in the batch. Losses apply to both the initial and the
denoised prediction maps of those tasks; unlabeled tasks contribute exactly
zero and are reached only through the conditioning path.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
import zlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .config import RunConfig, config_to_dict, save_config
from .data import PartialLabelSample, SceneDataset, load_dataset
from .diffusion import NoiseSchedule
from .metrics import (
    BinaryFAccumulator,
    ConfusionAccumulator,
    MaskedMeanAccumulator,
    MetricReport,
    OdsFAccumulator,
    angle_error_map,
    compute_delta_m,
)
from .model import DenoisingMultiTaskModel, SingleTaskModel
from .tasks import IGNORE_INDEX, TaskSpec


# -- losses ------------------------------------------------------------------

def _resize_to(pred: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    if pred.shape[-2:] == size:
        return pred
    return F.interpolate(pred, size=size, mode="bilinear", align_corners=False)


def task_loss(pred: torch.Tensor, label: torch.Tensor, task: TaskSpec) -> torch.Tensor:
    """Pixel-mean loss for one task: cross-entropy with the ignore index for
    classification kinds, masked L1 for regression kinds. Predictions are
    resized (bilinearly, on logits) to the label resolution first."""
    if task.loss == "cross_entropy":
        if label.ndim != 3:
            raise ValueError(f"{task.name}: expected class labels (N, H, W), got {tuple(label.shape)}")
        logits = _resize_to(pred, label.shape[-2:])
        if not (label != IGNORE_INDEX).any():
            raise ValueError(f"{task.name}: all pixels are ignore_index")
        return F.cross_entropy(logits, label, ignore_index=IGNORE_INDEX)
    if label.ndim != 4:
        raise ValueError(f"{task.name}: expected labels (N, C, H, W), got {tuple(label.shape)}")
    out = _resize_to(pred, label.shape[-2:])
    valid = torch.isfinite(label).all(dim=1, keepdim=True)
    if not valid.any():
        raise ValueError(f"{task.name}: validity mask is empty")
    diff = (out - torch.where(valid, label, torch.zeros_like(label))).abs()
    mask = valid.expand_as(diff)
    return diff[mask].mean()


@dataclass
class LossReport:
    per_task_initial: dict[str, float]
    per_task_denoised: dict[str, float]
    total: float
    step: int


def collate(batch: list[PartialLabelSample]) -> torch.Tensor:
    return torch.stack([s.image for s in batch])


def training_step(
    batch: list[PartialLabelSample],
    model: DenoisingMultiTaskModel,
    schedule: NoiseSchedule,
    optimizer: torch.optim.Optimizer,
    task_weights: dict[str, float] | None = None,
    noise_generator: torch.Generator | None = None,
    step: int = 0,
) -> LossReport:
    if not any(s.labeled_tasks for s in batch):
        raise ValueError("batch has no labeled tasks")
    weights = task_weights or {}
    model.train()
    images = collate(batch)
    outputs = model.initial_forward(images)
    cond = model.build_condition(outputs)

    specs = model.tasks
    per_initial = {name: 0.0 for name in specs}
    per_denoised = {name: 0.0 for name in specs}
    total = images.new_zeros(())
    for name, spec in specs.items():
        idxs = [i for i, s in enumerate(batch) if name in s.labeled_tasks]
        if not idxs:
            continue
        labels = torch.stack([batch[i].labels[name] for i in idxs])
        sub = outputs.subset(idxs)
        sub_cond = cond.subset(idxs) if cond is not None else None
        denoised = model.denoise_task(sub, sub_cond, name, schedule, generator=noise_generator)
        loss_init = task_loss(sub.task_predictions[name], labels, spec)
        loss_den = task_loss(denoised.prediction, labels, spec)
        w = weights.get(name, 1.0)
        total = total + w * (loss_init + loss_den)
        per_initial[name] = float(loss_init.detach())
        per_denoised[name] = float(loss_den.detach())

    if not torch.isfinite(total):
        raise RuntimeError(
            f"non-finite training loss at step {step}: total={float(total)} "
            f"initial={per_initial} denoised={per_denoised}"
        )
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    return LossReport(per_initial, per_denoised, float(total.detach()), step)


# -- evaluation ---------------------------------------------------------------

@dataclass
class EvaluationReport:
    initial: MetricReport
    denoised: MetricReport

    def block(self, which: str) -> MetricReport:
        if which not in ("initial", "denoised"):
            raise KeyError(which)
        return getattr(self, which)


class _TaskMetric:
    """Aggregates a torch prediction/label stream into one scalar."""

    def __init__(self, spec: TaskSpec, ods_tolerance_px: int):
        self.spec = spec
        if spec.metric == "miou":
            self.agg = ConfusionAccumulator(spec.out_channels)
        elif spec.metric == "abs_err":
            self.agg = MaskedMeanAccumulator()
        elif spec.metric == "mean_angle_err":
            self.agg = MaskedMeanAccumulator()
        elif spec.metric == "max_f":
            self.agg = BinaryFAccumulator()
        elif spec.metric == "ods_f":
            self.agg = OdsFAccumulator(ods_tolerance_px)
        else:
            raise KeyError(f"unknown metric {self.spec.metric!r}")

    def update(self, pred: torch.Tensor, label: torch.Tensor) -> None:
        pred = _resize_to(pred, label.shape[-2:])
        if self.spec.metric == "miou":
            self.agg.update(pred.argmax(dim=1).numpy(), label.numpy())
        elif self.spec.metric == "abs_err":
            p = pred[:, 0].numpy()
            g = label[:, 0].numpy()
            self.agg.add(np.abs(p - g), np.isfinite(g))
        elif self.spec.metric == "mean_angle_err":
            p = pred.permute(0, 2, 3, 1).numpy()
            g = label.permute(0, 2, 3, 1).numpy()
            mask = np.isfinite(g).all(axis=-1)
            self.agg.add(angle_error_map(p, g, mask), mask)
        else:
            prob = torch.softmax(pred, dim=1)[:, 1].numpy()
            gt = label.numpy() > 0
            for p, g in zip(prob, gt):
                self.agg.update(p, g)

    def result(self) -> float:
        return self.agg.result()


@torch.no_grad()
def evaluate(
    model,
    dataset: SceneDataset,
    schedule: NoiseSchedule,
    cfg: RunConfig,
    baseline: dict[str, float] | None = None,
) -> EvaluationReport:
    """Metrics of the initial and the denoised prediction maps per task.

    The decay noise comes from a generator seeded with ``seeds.eval_noise``,
    so repeated evaluation gives identical reports. ``baseline`` per-task
    values (if given) turn into a signed aggregate on the denoised block;
    otherwise the initial block serves as the reference.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    model.eval()
    specs = {t.name: t for t in cfg.task_specs()}
    generator = torch.Generator().manual_seed(cfg.seeds.eval_noise)
    tol = cfg.eval.ods_tolerance_px
    agg_init = {n: _TaskMetric(s, tol) for n, s in specs.items()}
    agg_den = {n: _TaskMetric(s, tol) for n, s in specs.items()}

    bs = cfg.eval.batch_size
    samples = dataset.samples(all_tasks=True)
    missing = [n for n in specs if n not in samples[0].labels]
    if missing:
        raise ValueError(f"evaluation dataset lacks ground truth for tasks {missing}")
    for start in range(0, len(samples), bs):
        chunk = samples[start : start + bs]
        images = collate(chunk)
        initial, denoised = model.predict(images, schedule, generator=generator)
        for name in specs:
            labels = torch.stack([s.labels[name] for s in chunk])
            agg_init[name].update(initial[name], labels)
            agg_den[name].update(denoised[name], labels)

    init_report = MetricReport(per_task={n: agg_init[n].result() for n in specs})
    den_report = MetricReport(per_task={n: agg_den[n].result() for n in specs})
    reference = baseline if baseline is not None else init_report.per_task
    lower = {n: specs[n].lower_is_better for n in specs}
    den_report.delta_m = compute_delta_m(den_report.per_task, reference, lower)
    return EvaluationReport(initial=init_report, denoised=den_report)


# -- checkpointing -------------------------------------------------------------

def atomic_torch_save(obj, path: str) -> None:
    tmp = path + ".tmp"
    torch.save(obj, tmp)
    os.replace(tmp, path)


def save_checkpoint(
    path: str,
    model: torch.nn.Module,
    optimizer: torch.optim.Optimizer,
    step: int,
    cfg: RunConfig,
    noise_generator: torch.Generator,
    extra: dict | None = None,
) -> None:
    payload = {
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict(),
        "step": step,
        "noise_gen_state": noise_generator.get_state(),
        "config": config_to_dict(cfg),
    }
    payload.update(extra or {})
    atomic_torch_save(payload, path)
    sidecar = os.path.splitext(path)[0] + ".yaml"
    tmp = sidecar + ".tmp"
    save_config(cfg, tmp)
    os.replace(tmp, sidecar)


def load_checkpoint(path: str) -> dict:
    return torch.load(path, map_location="cpu", weights_only=False)


def _flatten(d: dict, prefix: str = "") -> dict[str, object]:
    out: dict[str, object] = {}
    for k, v in d.items():
        key = f"{prefix}.{k}" if prefix else str(k)
        if isinstance(v, dict):
            out.update(_flatten(v, key))
        else:
            out[key] = v
    return out


def check_config_match(saved: dict, current: dict) -> None:
    a, b = _flatten(saved), _flatten(current)
    divergent = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
    if divergent:
        detail = ", ".join(f"{k}: {a.get(k)!r} -> {b.get(k)!r}" for k in divergent)
        raise ValueError(f"resume config mismatch on keys: {detail}")


def file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(run_dir: str) -> str:
    """Hash every artifact in the run directory into MANIFEST."""
    manifest = os.path.join(run_dir, "MANIFEST")
    lines = []
    for base, _, files in sorted(os.walk(run_dir)):
        for name in sorted(files):
            if name == "MANIFEST":
                continue
            path = os.path.join(base, name)
            rel = os.path.relpath(path, run_dir)
            lines.append(f"{file_sha256(path)}  {rel}\n")
    with open(manifest, "w") as fh:
        fh.writelines(lines)
    return manifest


# -- training loop ---------------------------------------------------------------

def batch_indices(n: int, batch_size: int, step: int, data_seed: int) -> list[int]:
    """Deterministic batch for a global step: a fresh permutation per epoch
    (seeded by the data seed and epoch index), sliced by position."""
    steps_per_epoch = max(1, math.ceil(n / batch_size))
    epoch, pos = divmod(step, steps_per_epoch)
    gen = torch.Generator().manual_seed(data_seed * 1_000_003 + epoch)
    perm = torch.randperm(n, generator=gen).tolist()
    return perm[pos * batch_size : min((pos + 1) * batch_size, n)]


def polynomial_lr(base_lr: float, step: int, total_steps: int, power: float) -> float:
    frac = min(step / max(total_steps, 1), 1.0)
    return base_lr * (1.0 - frac) ** power


def train_single_task_baseline(
    task: TaskSpec,
    cfg: RunConfig,
    dataset: SceneDataset,
    eval_dataset: SceneDataset,
) -> float:
    """Train one single-task reference model on the images labeled for the
    task and return its metric on the evaluation split."""
    torch.manual_seed(cfg.seeds.init * 7919 + zlib.crc32(task.name.encode()) % 65536)
    model = SingleTaskModel(cfg.backbone_config(), task)
    idxs = [i for i in range(len(dataset)) if task.name in dataset.labeled_tasks(i)]
    if not idxs:
        raise ValueError(f"no training images are labeled for task {task.name!r}")
    samples = [dataset.sample(i) for i in idxs]
    opt = torch.optim.Adam(model.parameters(), lr=cfg.training.lr, weight_decay=cfg.training.weight_decay)
    n = len(samples)
    bs = min(cfg.training.batch_size, n)
    for step in range(cfg.training.steps):
        for group in opt.param_groups:
            group["lr"] = polynomial_lr(cfg.training.lr, step, cfg.training.steps, cfg.training.lr_power)
        sel = batch_indices(n, bs, step, cfg.seeds.data + 17)
        chunk = [samples[i] for i in sel]
        pred = model(collate(chunk))
        loss = task_loss(pred, torch.stack([s.labels[task.name] for s in chunk]), task)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()

    model.eval()
    metric = _TaskMetric(task, cfg.eval.ods_tolerance_px)
    with torch.no_grad():
        eval_samples = eval_dataset.samples(all_tasks=True)
        for start in range(0, len(eval_samples), cfg.eval.batch_size):
            chunk = eval_samples[start : start + cfg.eval.batch_size]
            pred = model(collate(chunk))
            metric.update(pred, torch.stack([s.labels[task.name] for s in chunk]))
    return metric.result()


def resolve_baseline(
    cfg: RunConfig, dataset: SceneDataset, eval_dataset: SceneDataset
) -> dict[str, float] | None:
    mode = cfg.training.baseline_mode
    if mode == "initial":
        return None
    if mode == "file":
        from .report import read_baseline_values

        return read_baseline_values(cfg.training.baseline_path, [t.name for t in cfg.tasks])
    if mode == "cotrain":
        return {
            t.name: train_single_task_baseline(t, cfg, dataset, eval_dataset)
            for t in cfg.task_specs()
        }
    raise ValueError(f"unknown baseline_mode {mode!r}")


@dataclass
class TrainResult:
    run_dir: str
    final_report: EvaluationReport
    baseline: dict[str, float] | None = None
    steps: int = 0


def train(cfg: RunConfig, run_dir: str, resume: str | None = None) -> TrainResult:
    """Full training run: loss log, periodic evaluation, best/last checkpoints
    keyed on the signed multi-task aggregate, and a hash manifest."""
    from .report import render_loss_curve, render_metric_comparison, write_metric_report

    os.makedirs(run_dir, exist_ok=True)
    if not cfg.dataset:
        raise ValueError("config.dataset must point at a training split")
    dataset = load_dataset(cfg.dataset)
    eval_dir = cfg.eval_dataset or cfg.dataset
    eval_dataset = load_dataset(eval_dir) if eval_dir != cfg.dataset else dataset
    save_config(cfg, os.path.join(run_dir, "config.yaml"))

    torch.manual_seed(cfg.seeds.init)
    model = DenoisingMultiTaskModel(
        cfg.backbone_config(), cfg.denoiser_config(), standardize=cfg.diffusion.standardize
    )
    schedule = cfg.schedule()
    optimizer = torch.optim.Adam(
        model.parameters(), lr=cfg.training.lr, weight_decay=cfg.training.weight_decay
    )
    noise_gen = torch.Generator().manual_seed(cfg.seeds.noise)
    start_step = 0
    baseline: dict[str, float] | None = None
    best_delta: float | None = None

    if resume:
        ck = load_checkpoint(resume)
        check_config_match(ck["config"], config_to_dict(cfg))
        model.load_state_dict(ck["model"])
        optimizer.load_state_dict(ck["optimizer"])
        noise_gen.set_state(ck["noise_gen_state"])
        start_step = ck["step"]
        baseline = ck.get("baseline")
        best_delta = ck.get("best_delta_m")
    elif cfg.training.baseline_mode != "initial":
        baseline = resolve_baseline(cfg, dataset, eval_dataset)

    weights = cfg.task_weights()
    samples = dataset.samples()
    n = len(samples)
    bs = min(cfg.training.batch_size, n)
    log_path = os.path.join(run_dir, "loss_log.jsonl")
    log_mode = "a" if resume else "w"
    report: EvaluationReport | None = None
    last_eval_step = -1

    def run_eval(step: int) -> EvaluationReport:
        nonlocal best_delta
        rep = evaluate(model, eval_dataset, schedule, cfg, baseline=baseline)
        delta = rep.denoised.delta_m
        if best_delta is None or (delta is not None and delta > best_delta):
            best_delta = delta
            save_checkpoint(
                os.path.join(run_dir, "best.pt"), model, optimizer, step, cfg, noise_gen,
                extra={"baseline": baseline, "best_delta_m": best_delta},
            )
        model.train()
        return rep

    with open(log_path, log_mode) as log:
        for step in range(start_step, cfg.training.steps):
            lr = polynomial_lr(cfg.training.lr, step, cfg.training.steps, cfg.training.lr_power)
            for group in optimizer.param_groups:
                group["lr"] = lr
            sel = batch_indices(n, bs, step, cfg.seeds.data)
            batch = [samples[i] for i in sel]
            loss = training_step(
                batch, model, schedule, optimizer,
                task_weights=weights, noise_generator=noise_gen, step=step,
            )
            if cfg.training.log_every and step % cfg.training.log_every == 0:
                record = {
                    "step": step,
                    "lr": lr,
                    "total": loss.total,
                    "initial": loss.per_task_initial,
                    "denoised": loss.per_task_denoised,
                }
                log.write(json.dumps(record) + "\n")
            if cfg.training.eval_every and (step + 1) % cfg.training.eval_every == 0:
                report = run_eval(step + 1)
                last_eval_step = step + 1
            if (step + 1) % max(1, cfg.training.steps // 2) == 0 or step + 1 == cfg.training.steps:
                save_checkpoint(
                    os.path.join(run_dir, "last.pt"), model, optimizer, step + 1, cfg, noise_gen,
                    extra={"baseline": baseline, "best_delta_m": best_delta},
                )

    if last_eval_step != cfg.training.steps or report is None:
        report = run_eval(cfg.training.steps)
    save_checkpoint(
        os.path.join(run_dir, "last.pt"), model, optimizer, cfg.training.steps, cfg, noise_gen,
        extra={"baseline": baseline, "best_delta_m": best_delta},
    )
    write_metric_report(os.path.join(run_dir, "report.txt"), report, baseline=baseline)
    render_metric_comparison(os.path.join(run_dir, "metrics.png"), report, cfg.task_specs())
    render_loss_curve(os.path.join(run_dir, "loss_curve.png"), log_path)
    write_manifest(run_dir)
    return TrainResult(run_dir=run_dir, final_report=report, baseline=baseline, steps=cfg.training.steps)
