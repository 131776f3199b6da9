"""Synthetic multi-task scenes and the partially-labeled dataset format.

Scenes are stacks of planar primitives (rectangles and ellipses over a
tilted background plane). Per pixel the nearest covering plane wins, so the
class id, the depth value and the analytic surface normal always describe
the same surface, giving the cross-task structure the conditioning is meant
to exploit. The shaded rendering of those planes, with additive noise, is
the input image.

On-disk layout of one split (bit-exact contract)::

    root/images/{id}.png            8-bit RGB
    root/segmentation/{id}.png      8-bit class ids, 255 = ignore ring
    root/depth/{id}.npy             float32 (H, W)
    root/normal/{id}.npy            float32 (H, W, 3)
    root/mapping.txt                lines "id<TAB>task1,task2"

Optional saliency/boundary maps are exact functions of the segmentation map
and are stored as 8-bit {0,1} PNGs.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np
import torch
from PIL import Image

from .tasks import IGNORE_INDEX, TaskSpec, default_task_suite

LIGHT_DIRECTION = np.array([0.3, 0.3, 0.9]) / np.linalg.norm([0.3, 0.3, 0.9])

# fixed class palette; class colors correlate with class ids so segmentation
# is learnable from the image alone
CLASS_PALETTE = np.array(
    [
        [60, 60, 70],
        [200, 80, 60],
        [70, 170, 90],
        [70, 100, 200],
        [210, 190, 70],
        [160, 70, 180],
        [70, 190, 190],
        [230, 140, 60],
    ],
    dtype=np.float64,
) / 255.0


@dataclass
class SyntheticSceneConfig:
    resolution: tuple[int, int] = (64, 64)
    num_shapes: tuple[int, int] = (3, 6)
    classes: int = 5
    depth_range: tuple[float, float] = (2.0, 10.0)
    noise_std: float = 0.02
    ignore_ring: int = 2
    include_saliency: bool = False
    include_boundary: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        if self.classes > len(CLASS_PALETTE):
            raise ValueError(f"at most {len(CLASS_PALETTE)} classes supported by the palette")
        if self.depth_range[0] >= self.depth_range[1]:
            raise ValueError("depth_range must be (near, far) with near < far")


@dataclass
class LabelMapping:
    per_image: list[frozenset[str]]
    setting: str

    def __post_init__(self):
        if self.setting not in ("one_label", "random_label", "full"):
            raise ValueError(f"unknown setting {self.setting!r}")
        if any(len(s) == 0 for s in self.per_image):
            raise ValueError("every image must be labeled for at least one task")


@dataclass
class Scene:
    image: np.ndarray  # (H, W, 3) float32, quantized to 8-bit levels
    labels: dict[str, np.ndarray]


def _plane(rng: np.random.Generator, cfg: SyntheticSceneConfig, background: bool) -> tuple:
    near, far = cfg.depth_range
    span = far - near
    if background:
        base = rng.uniform(near + 0.7 * span, far)
    else:
        base = rng.uniform(near, near + 0.7 * span)
    tilt = rng.uniform(-0.8, 0.8, size=2) * span * 0.15
    return base, tilt[0], tilt[1]


def _plane_depth(base: float, gx: float, gy: float, xx: np.ndarray, yy: np.ndarray) -> np.ndarray:
    return base + gx * xx + gy * yy


def _plane_normal(gx: float, gy: float, span: float) -> np.ndarray:
    # depth plane z = base + gx*x + gy*y over unit image coordinates;
    # gradients are rescaled by the depth span so tilts stay moderate
    n = np.array([-gx / span, -gy / span, 1.0])
    return n / np.linalg.norm(n)


def generate_scene(seed: int, cfg: SyntheticSceneConfig) -> Scene:
    """Render one scene with mutually consistent labels.

    Returns the quantized image and a label dict with keys ``segmentation``
    (uint8, 255 ignore ring), ``depth`` (float32), ``normal`` (float32,
    unit vectors), plus optional ``saliency``/``boundary`` maps.
    """
    rng = np.random.default_rng(seed)
    h, w = cfg.resolution
    near, far = cfg.depth_range
    span = far - near
    ys, xs = np.mgrid[0:h, 0:w]
    xx = xs / max(w - 1, 1)
    yy = ys / max(h - 1, 1)

    base, gx, gy = _plane(rng, cfg, background=True)
    depth = np.clip(_plane_depth(base, gx, gy, xx, yy), near, far)
    seg = np.zeros((h, w), dtype=np.uint8)
    normal = np.broadcast_to(_plane_normal(gx, gy, span), (h, w, 3)).copy()
    albedo = CLASS_PALETTE[0]
    color = np.broadcast_to(albedo, (h, w, 3)).copy()

    n_shapes = int(rng.integers(cfg.num_shapes[0], cfg.num_shapes[1] + 1))
    for _ in range(n_shapes):
        kind = rng.choice(["rect", "ellipse"])
        cls = int(rng.integers(1, cfg.classes))
        cx, cy = rng.uniform(0.15, 0.85, size=2)
        sx, sy = rng.uniform(0.08, 0.3, size=2)
        if kind == "rect":
            inside = (np.abs(xx - cx) <= sx) & (np.abs(yy - cy) <= sy)
        else:
            inside = ((xx - cx) / sx) ** 2 + ((yy - cy) / sy) ** 2 <= 1.0
        base, gx, gy = _plane(rng, cfg, background=False)
        d = np.clip(_plane_depth(base, gx, gy, xx, yy), near, far)
        wins = inside & (d < depth)
        depth[wins] = d[wins]
        seg[wins] = cls
        normal[wins] = _plane_normal(gx, gy, span)
        color[wins] = CLASS_PALETTE[cls]

    shading = np.clip(normal @ LIGHT_DIRECTION, 0.0, 1.0)
    img = color * (0.35 + 0.65 * shading[..., None])
    img = img + rng.normal(0.0, cfg.noise_std, size=img.shape)
    img_u8 = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)

    if cfg.ignore_ring > 0:
        r = cfg.ignore_ring
        seg[:r, :] = IGNORE_INDEX
        seg[-r:, :] = IGNORE_INDEX
        seg[:, :r] = IGNORE_INDEX
        seg[:, -r:] = IGNORE_INDEX

    labels: dict[str, np.ndarray] = {
        "segmentation": seg,
        "depth": depth.astype(np.float32),
        "normal": normal.astype(np.float32),
    }
    if cfg.include_saliency:
        labels["saliency"] = saliency_from_segmentation(seg)
    if cfg.include_boundary:
        labels["boundary"] = boundary_from_segmentation(seg)
    return Scene(image=(img_u8.astype(np.float32) / 255.0), labels=labels)


def saliency_from_segmentation(seg: np.ndarray) -> np.ndarray:
    """Foreground mask: any non-background, non-ignored class."""
    return ((seg != 0) & (seg != IGNORE_INDEX)).astype(np.uint8)


def boundary_from_segmentation(seg: np.ndarray) -> np.ndarray:
    """Pixels whose 4-neighborhood crosses a class boundary (ignore excluded)."""
    s = seg.astype(np.int32)
    valid = s != IGNORE_INDEX
    edge = np.zeros_like(s, dtype=bool)
    dv = (s[1:, :] != s[:-1, :]) & valid[1:, :] & valid[:-1, :]
    edge[1:, :] |= dv
    edge[:-1, :] |= dv
    dh = (s[:, 1:] != s[:, :-1]) & valid[:, 1:] & valid[:, :-1]
    edge[:, 1:] |= dh
    edge[:, :-1] |= dh
    return edge.astype(np.uint8)


def assign_partial_labels(
    n_images: int, tasks: list[str], setting: str, seed: int
) -> LabelMapping:
    """Deterministic labeled-task sets per image.

    one_label: round-robin task assignment over a seeded shuffle, so
    per-task counts differ by at most one. random_label: per image a
    uniform size in [1, T] then a uniform subset of that size; any task
    that ends up unused is added to the least-labeled images afterwards.
    full: all tasks everywhere.
    """
    t = len(tasks)
    if n_images < t:
        raise ValueError(f"n_images ({n_images}) must be >= number of tasks ({t})")
    rng = np.random.default_rng(seed)
    if setting == "full":
        per_image = [frozenset(tasks)] * n_images
    elif setting == "one_label":
        order = rng.permutation(n_images)
        names = [None] * n_images
        for slot, img in enumerate(order):
            names[img] = tasks[slot % t]
        per_image = [frozenset([n]) for n in names]
    elif setting == "random_label":
        sets = []
        for _ in range(n_images):
            k = int(rng.integers(1, t + 1))
            chosen = rng.choice(t, size=k, replace=False)
            sets.append(set(tasks[i] for i in chosen))
        for name in tasks:  # guarantee every task appears at least once
            if not any(name in s for s in sets):
                idx = min(range(n_images), key=lambda i: (len(sets[i]), i))
                sets[idx].add(name)
        per_image = [frozenset(s) for s in sets]
    else:
        raise ValueError(f"unknown setting {setting!r}")
    return LabelMapping(per_image=per_image, setting=setting)


@dataclass
class PartialLabelSample:
    """One training record: image, the labeled tasks' maps, and that set."""

    image: torch.Tensor  # (3, H, W) float32
    labels: dict[str, torch.Tensor]
    labeled_tasks: frozenset[str]
    sample_id: str = ""

    def __post_init__(self):
        if frozenset(self.labels) != self.labeled_tasks:
            raise ValueError(
                f"label keys {sorted(self.labels)} != labeled task set {sorted(self.labeled_tasks)}"
            )
        if not self.labeled_tasks:
            raise ValueError("a sample must be labeled for at least one task")


def _label_to_tensor(task: str, arr: np.ndarray) -> torch.Tensor:
    if task in ("segmentation", "parsing", "saliency", "boundary"):
        return torch.from_numpy(arr.astype(np.int64))
    if task == "depth":
        return torch.from_numpy(arr.astype(np.float32)).unsqueeze(0)
    if task == "normal":
        return torch.from_numpy(arr.astype(np.float32)).permute(2, 0, 1)
    raise KeyError(f"unknown task {task!r}")


def _save_label(path_base: str, task: str, arr: np.ndarray) -> str:
    if task in ("segmentation", "parsing", "saliency", "boundary"):
        path = path_base + ".png"
        Image.fromarray(arr.astype(np.uint8), mode="L").save(path)
    else:
        path = path_base + ".npy"
        np.save(path, arr.astype(np.float32))
    return path


def _load_label(root: str, task: str, sample_id: str) -> np.ndarray:
    png = os.path.join(root, task, f"{sample_id}.png")
    npy = os.path.join(root, task, f"{sample_id}.npy")
    if os.path.exists(png):
        return np.asarray(Image.open(png))
    if os.path.exists(npy):
        return np.load(npy)
    raise FileNotFoundError(f"missing label file for task {task!r}, image {sample_id!r}: {png}|{npy}")


def write_split(
    root: str,
    scenes: list[Scene],
    mapping: LabelMapping,
    ids: list[str] | None = None,
) -> None:
    """Write scenes and their labeled-task mapping in the dataset layout."""
    if len(scenes) != len(mapping.per_image):
        raise ValueError("scene count != mapping length")
    ids = ids or [f"{i:06d}" for i in range(len(scenes))]
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    task_names = sorted({t for s in scenes for t in s.labels})
    for t in task_names:
        os.makedirs(os.path.join(root, t), exist_ok=True)
    for sid, scene in zip(ids, scenes):
        img_u8 = np.clip(np.round(scene.image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(img_u8, mode="RGB").save(os.path.join(root, "images", f"{sid}.png"))
        for t, arr in scene.labels.items():
            _save_label(os.path.join(root, t, sid), t, arr)
    lines = [
        f"{sid}\t{','.join(sorted(tasks))}\n" for sid, tasks in zip(ids, mapping.per_image)
    ]
    with open(os.path.join(root, "mapping.txt"), "w") as fh:
        fh.writelines(lines)


def generate_split(
    root: str,
    n_images: int,
    cfg: SyntheticSceneConfig,
    setting: str,
    tasks: list[str] | None = None,
) -> LabelMapping:
    """Generate ``n_images`` scenes (seed = cfg.seed + index) and write a split."""
    tasks = tasks or [t.name for t in default_task_suite(cfg.classes)]
    scene_cfg = replace(
        cfg,
        include_saliency=cfg.include_saliency or "saliency" in tasks,
        include_boundary=cfg.include_boundary or "boundary" in tasks,
    )
    scenes = [generate_scene(cfg.seed + i, scene_cfg) for i in range(n_images)]
    mapping = assign_partial_labels(n_images, tasks, setting, seed=cfg.seed)
    write_split(root, scenes, mapping, ids=None)
    return mapping


class SceneDataset:
    """Loader for one split directory; validates the mapping on open."""

    def __init__(self, root: str):
        self.root = root
        mapping_path = os.path.join(root, "mapping.txt")
        if not os.path.exists(mapping_path):
            raise FileNotFoundError(f"not a dataset split (no mapping.txt): {root}")
        self.ids: list[str] = []
        per_image: list[frozenset[str]] = []
        with open(mapping_path) as fh:
            for line_no, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                try:
                    sid, tasks = line.split("\t")
                except ValueError as exc:
                    raise ValueError(f"{mapping_path}:{line_no}: malformed line {line!r}") from exc
                names = frozenset(t for t in tasks.split(",") if t)
                if not names:
                    raise ValueError(f"{mapping_path}:{line_no}: image {sid!r} labeled for zero tasks")
                self.ids.append(sid)
                per_image.append(names)
        if not self.ids:
            raise ValueError(f"empty dataset: {root}")
        self.task_names = sorted({t for s in per_image for t in s})
        self.mapping = LabelMapping(
            per_image=per_image, setting=_infer_setting(per_image, self.task_names)
        )
        for sid, names in zip(self.ids, per_image):
            img = os.path.join(root, "images", f"{sid}.png")
            if not os.path.exists(img):
                raise FileNotFoundError(f"missing image file for {sid!r}: {img}")
            for t in names:
                _load_label_path_check(root, t, sid)
        # tasks available on disk may exceed the mapped ones (full ground
        # truth is kept for evaluation)
        self.available_tasks = sorted(
            d for d in os.listdir(root)
            if d != "images" and os.path.isdir(os.path.join(root, d))
        )

    def __len__(self) -> int:
        return len(self.ids)

    def labeled_tasks(self, index: int) -> frozenset[str]:
        return self.mapping.per_image[index]

    def _load_image(self, sid: str) -> torch.Tensor:
        arr = np.asarray(Image.open(os.path.join(self.root, "images", f"{sid}.png")))
        return torch.from_numpy(arr.astype(np.float32) / 255.0).permute(2, 0, 1)

    def sample(self, index: int, all_tasks: bool = False) -> PartialLabelSample:
        """The ``index``-th record; ``all_tasks`` loads every label on disk
        (evaluation view) instead of only the mapped ones."""
        sid = self.ids[index]
        names = set(self.available_tasks) if all_tasks else set(self.mapping.per_image[index])
        labels = {t: _label_to_tensor(t, _load_label(self.root, t, sid)) for t in sorted(names)}
        return PartialLabelSample(
            image=self._load_image(sid),
            labels=labels,
            labeled_tasks=frozenset(names),
            sample_id=sid,
        )

    def samples(self, all_tasks: bool = False) -> list[PartialLabelSample]:
        return [self.sample(i, all_tasks=all_tasks) for i in range(len(self))]


def _infer_setting(per_image: list[frozenset[str]], task_names: list[str]) -> str:
    full = frozenset(task_names)
    if all(s == full for s in per_image):
        return "full"
    if all(len(s) == 1 for s in per_image):
        return "one_label"
    return "random_label"


def _load_label_path_check(root: str, task: str, sid: str) -> None:
    png = os.path.join(root, task, f"{sid}.png")
    npy = os.path.join(root, task, f"{sid}.npy")
    if not (os.path.exists(png) or os.path.exists(npy)):
        raise FileNotFoundError(
            f"mapping lists task {task!r} for image {sid!r} but no label file exists ({png}|{npy})"
        )


def load_dataset(root_dir: str) -> SceneDataset:
    return SceneDataset(root_dir)
