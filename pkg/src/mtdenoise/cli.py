"""Command line interface.

Subcommands::

    gen-data   write a synthetic train/test dataset pair
    train      run training from a config file (plus dot-path overrides)
    eval       evaluate a checkpoint, or run the aggregate on published numbers
    denoise    dump per-step denoising maps for one image

Exit codes: 0 success, 1 runtime error, 2 bad flags.
"""
from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np
import torch

from . import report as report_mod
from .config import RunConfig, apply_overrides, config_from_dict, load_config, save_config
from .data import SyntheticSceneConfig, generate_split, load_dataset
from .metrics import compute_delta_m
from .model import DenoisingMultiTaskModel
from .training import evaluate, load_checkpoint, train, write_manifest


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtdenoise", description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--out", required=True, help="dataset root (train/ and test/ are created)")
    g.add_argument("--n", type=int, default=64, help="training images")
    g.add_argument("--n-test", type=int, default=16, help="test images (full labels)")
    g.add_argument("--setting", default="one_label", choices=["one_label", "random_label", "full"])
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--resolution", type=int, default=64, help="square image size")
    g.add_argument("--classes", type=int, default=5)
    g.add_argument("--with-saliency", action="store_true", help="also write saliency labels")
    g.add_argument("--with-boundary", action="store_true", help="also write boundary labels")

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", default="", help="YAML config file (defaults when omitted)")
    t.add_argument("--out", default="", help="run directory (timestamped default under runs/)")
    t.add_argument("--resume", default="", help="checkpoint to resume from")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", default="")
    e.add_argument("--dataset", default="", help="split directory (checkpoint config's eval split by default)")
    e.add_argument("--out", default="", help="output directory (default: <checkpoint dir>/eval)")
    e.add_argument("--baseline", default="", help="per-task reference values (YAML or report file)")
    e.add_argument("--eval-seed", type=int, default=None, help="override the evaluation noise seed")
    e.add_argument("--from-numbers", default="", help="YAML of per-task mtl/stl values: only run the aggregate")

    d = sub.add_parser("denoise", help="dump per-step denoised maps for one image")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--image", required=True, help="input RGB image (PNG)")
    d.add_argument("--out", required=True)
    d.add_argument("--steps", type=int, default=None, help="rebuild the schedule with this many steps")
    d.add_argument("--seed", type=int, default=None, help="noise seed (config eval seed by default)")
    return parser


def parse_override_tokens(tokens: list[str]) -> list[str]:
    """Turn leftover ``--key.path value`` / ``--key.path=value`` flags into
    ``key.path=value`` assignment strings."""
    assignments = []
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise SystemExit2(f"unrecognized argument: {tok}")
        body = tok[2:]
        if "=" in body:
            assignments.append(body)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise SystemExit2(f"override flag {tok} needs a value")
            assignments.append(f"{body}={tokens[i + 1]}")
            i += 2
    return assignments


class SystemExit2(Exception):
    """Flag-level error: exits with status 2 like argparse does."""


def cmd_gen_data(args) -> int:
    cfg = SyntheticSceneConfig(
        resolution=(args.resolution, args.resolution),
        classes=args.classes,
        include_saliency=args.with_saliency,
        include_boundary=args.with_boundary,
        seed=args.seed,
    )
    tasks = ["segmentation", "depth", "normal"]
    if args.with_saliency:
        tasks.append("saliency")
    if args.with_boundary:
        tasks.append("boundary")
    generate_split(os.path.join(args.out, "train"), args.n, cfg, args.setting, tasks=tasks)
    test_cfg = SyntheticSceneConfig(
        resolution=cfg.resolution,
        classes=cfg.classes,
        include_saliency=cfg.include_saliency,
        include_boundary=cfg.include_boundary,
        seed=args.seed + 1_000_000,
    )
    generate_split(os.path.join(args.out, "test"), args.n_test, test_cfg, "full", tasks=tasks)
    print(f"wrote {args.n} train / {args.n_test} test images under {args.out}")
    return 0


def cmd_train(args, overrides: list[str]) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    apply_overrides(cfg, overrides)
    run_dir = args.out or os.path.join("runs", time.strftime("run-%Y%m%d-%H%M%S"))
    result = train(cfg, run_dir, resume=args.resume or None)
    delta = result.final_report.denoised.delta_m
    print(f"run directory: {result.run_dir}")
    if delta is not None:
        print(f"final multi-task aggregate: {delta:+.2f}%")
    return 0


def _load_model(checkpoint_path: str) -> tuple[DenoisingMultiTaskModel, RunConfig]:
    ck = load_checkpoint(checkpoint_path)
    cfg = config_from_dict(ck["config"])
    model = DenoisingMultiTaskModel(
        cfg.backbone_config(), cfg.denoiser_config(), standardize=cfg.diffusion.standardize
    )
    model.load_state_dict(ck["model"])
    model.eval()
    return model, cfg


def cmd_eval(args) -> int:
    if args.from_numbers:
        mtl, stl, lower = report_mod.load_delta_m_numbers(args.from_numbers)
        delta = compute_delta_m(mtl, stl, lower)
        print(f"delta_m\t{delta:+.4f}%")
        if args.out:
            os.makedirs(args.out, exist_ok=True)
            with open(os.path.join(args.out, "delta_m.txt"), "w") as fh:
                fh.write(f"delta_m\t{delta:.6f}\n")
        return 0
    if not args.checkpoint:
        raise ValueError("--checkpoint is required unless --from-numbers is used")
    model, cfg = _load_model(args.checkpoint)
    if args.eval_seed is not None:
        cfg.seeds.eval_noise = args.eval_seed
    dataset_dir = args.dataset or cfg.eval_dataset or cfg.dataset
    if not dataset_dir:
        raise ValueError("no dataset: pass --dataset or set one in the checkpoint config")
    dataset = load_dataset(dataset_dir)
    baseline = None
    if args.baseline:
        baseline = report_mod.read_baseline_values(args.baseline, [t.name for t in cfg.tasks])
    rep = evaluate(model, dataset, cfg.schedule(), cfg, baseline=baseline)
    out_dir = args.out or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), "eval")
    os.makedirs(out_dir, exist_ok=True)
    report_mod.write_metric_report(os.path.join(out_dir, "report.txt"), rep, baseline=baseline)
    report_mod.render_metric_comparison(os.path.join(out_dir, "metrics.png"), rep, cfg.task_specs())
    write_manifest(out_dir)
    for task in sorted(rep.denoised.per_task):
        print(f"{task}: initial={rep.initial.per_task[task]:.4f} denoised={rep.denoised.per_task[task]:.4f}")
    if rep.denoised.delta_m is not None:
        print(f"delta_m: {rep.denoised.delta_m:+.4f}%")
    print(f"report written to {out_dir}")
    return 0


def cmd_denoise(args) -> int:
    from PIL import Image

    model, cfg = _load_model(args.checkpoint)
    schedule = cfg.schedule(steps=args.steps)
    seed = args.seed if args.seed is not None else cfg.seeds.eval_noise
    generator = torch.Generator().manual_seed(seed)
    arr = np.asarray(Image.open(args.image).convert("RGB"), dtype=np.float32) / 255.0
    image = torch.from_numpy(arr).permute(2, 0, 1).unsqueeze(0)

    os.makedirs(args.out, exist_ok=True)
    specs = {t.name: t for t in cfg.task_specs()}
    raw: dict[str, np.ndarray] = {}
    with torch.no_grad():
        outputs = model.initial_forward(image)
        cond = model.build_condition(outputs)
        for name, spec in specs.items():
            den = model.denoise_task(outputs, cond, name, schedule, generator=generator)
            steps = schedule.steps
            panels = []

            def emit(tag: str, map_pred: torch.Tensor, raw_map: torch.Tensor):
                path = os.path.join(args.out, f"{name}_{tag}.png")
                report_mod.save_map_image(path, map_pred[0], spec)
                panels.append((tag, report_mod.render_map(map_pred[0], spec)))
                raw[f"{name}/{tag}"] = raw_map[0].numpy()

            emit("initial", outputs.task_predictions[name], outputs.task_predictions[name])
            emit(f"step{steps}", model.restore_map(den.x_start, name), den.x_start)
            for i, x in enumerate(den.raw.trajectory):
                s = steps - 1 - i
                emit(f"step{s}", model.restore_map(x, name), x)
            report_mod.render_trajectory_figure(
                os.path.join(args.out, f"{name}_trajectory.png"), panels
            )
    report_mod.save_raw_maps(args.out, raw)
    write_manifest(args.out)
    print(f"wrote {len(raw)} maps for {len(specs)} tasks to {args.out}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        if args.command == "train":
            overrides = parse_override_tokens(extra)
        elif extra:
            parser.error(f"unrecognized arguments: {' '.join(extra)}")
        if args.command == "gen-data":
            code = cmd_gen_data(args)
        elif args.command == "train":
            code = cmd_train(args, overrides)
        elif args.command == "eval":
            code = cmd_eval(args)
        elif args.command == "denoise":
            code = cmd_denoise(args)
        else:  # pragma: no cover - argparse enforces the choices
            parser.error(f"unknown command {args.command!r}")
        return code
    except SystemExit2 as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SystemExit:
        raise
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
