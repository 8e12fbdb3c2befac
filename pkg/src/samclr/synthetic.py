"""Procedural multi-object scenes with ground-truth masks, and the pair-purity oracle."""

from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .image_ops import CropRect, encode_png, resize_bilinear_float
from .masks import RegionMask, RegionSet, round_half_up

SHAPES = ("circle", "rectangle", "triangle")

# One palette shared by every class: fill color must not give away the shape.
SHARED_PALETTE = (
    (220, 60, 50), (240, 170, 40), (230, 220, 60), (70, 180, 70),
    (50, 170, 200), (60, 80, 210), (150, 70, 200), (220, 90, 170),
)


@dataclass(frozen=True)
class SceneSpec:
    size: int = 160
    min_objects: int = 3
    max_objects: int = 6
    min_scale: int = 44
    max_scale: int = 64
    max_coverage: float = 0.5
    min_visible: float = 0.5
    color_jitter: int = 25
    palettes: tuple = (SHARED_PALETTE, SHARED_PALETTE, SHARED_PALETTE)
    background_grid: int = 5

    def __post_init__(self):
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        if not 1 <= self.min_scale <= self.max_scale <= self.size:
            raise ValueError("object scale range must fit in the image")
        if not 0 < self.max_coverage <= 1:
            raise ValueError("max_coverage must lie in (0, 1]")
        if len(self.palettes) != len(SHAPES):
            raise ValueError("one palette per shape class")


@dataclass
class SceneGroundTruth:
    masks: list[RegionMask]
    classes: list[int]

    def label_map(self) -> np.ndarray:
        """Per-pixel object index, -1 for background."""
        h, w = self.masks[0].bitmap.shape
        out = np.full((h, w), -1, dtype=np.int32)
        for i, m in enumerate(self.masks):
            out[m.bitmap] = i
        return out

    def majority_class(self) -> int:
        areas: Counter = Counter()
        for m, c in zip(self.masks, self.classes):
            areas[c] += m.area
        best = max(areas.values())
        return min(c for c, a in areas.items() if a == best)


@dataclass
class Scene:
    image_id: str
    image: np.ndarray
    truth: SceneGroundTruth

    @property
    def label(self) -> int:
        return self.truth.majority_class()

    def region_set(self) -> RegionSet:
        return RegionSet(self.image_id, list(self.truth.masks))


def _background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    g = spec.background_grid
    base = rng.uniform(70, 180)
    grid = base + rng.uniform(-35, 35, size=(g, g, 1)) + rng.uniform(-15, 15, size=(g, g, 3))
    return resize_bilinear_float(grid, spec.size, spec.size)


def _shape_mask(kind: str, w: int, h: int, orient: int) -> np.ndarray:
    """h×w boolean mask of the shape inscribed in its box (pixel-center sampling)."""
    ys, xs = np.mgrid[0:h, 0:w] + 0.5
    if kind == "circle":
        r = min(w, h) / 2
        return (xs - w / 2) ** 2 + (ys - h / 2) ** 2 <= r * r
    if kind == "rectangle":
        return np.ones((h, w), dtype=bool)
    # triangle: apex on one side of the box, base on the opposite side
    u, v = xs / w, ys / h
    if orient == 1:
        v = 1 - v
    elif orient == 2:
        u, v = v, u
    elif orient == 3:
        u, v = v, 1 - u
    return np.abs(u - 0.5) <= v / 2


def _box_for_area(kind: str, side: float, aspect: float, limit: int) -> tuple[int, int]:
    """Box whose inscribed shape has area ``side**2``, so size never reveals the class."""
    if kind == "circle":
        d = round_half_up(side * math.sqrt(4 / math.pi))
        return min(d, limit), min(d, limit)
    k = 2.0 if kind == "triangle" else 1.0
    w = round_half_up(side * math.sqrt(k * aspect))
    h = round_half_up(side * math.sqrt(k / aspect))
    return max(1, min(w, limit)), max(1, min(h, limit))


def _object_color(spec: SceneSpec, cls: int, rng: np.random.Generator) -> np.ndarray:
    palette = spec.palettes[cls]
    base = np.array(palette[int(rng.integers(len(palette)))], dtype=np.float64)
    return base + rng.uniform(-spec.color_jitter, spec.color_jitter, size=3)


def generate_scene(spec: SceneSpec, rng: np.random.Generator, image_id: str = "") -> Scene:
    """Rasterize background then objects; later objects occlude earlier ones.

    A placement is rejected when it would push total coverage past
    ``max_coverage`` or leave an earlier object with less than
    ``min_visible`` of its drawn area.
    """
    s = spec.size
    limit = spec.max_coverage * s * s
    while True:
        count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
        owner = np.full((s, s), -1, dtype=np.int32)
        covered = 0
        drawn: list[int] = []
        visible: list[int] = []
        classes: list[int] = []
        colors: list[np.ndarray] = []
        for _ in range(count):
            for _attempt in range(100):
                cls = int(rng.integers(len(SHAPES)))
                w, h = _box_for_area(SHAPES[cls], rng.uniform(spec.min_scale, spec.max_scale),
                                     math.exp(rng.uniform(-0.3, 0.3)), s)
                x0 = int(rng.integers(0, s - w + 1))
                y0 = int(rng.integers(0, s - h + 1))
                orient = int(rng.integers(4))
                shape = _shape_mask(SHAPES[cls], w, h, orient)
                local = owner[y0:y0 + h, x0:x0 + w]
                under = local[shape]
                hidden = np.bincount(under[under >= 0], minlength=len(drawn))
                if covered + np.count_nonzero(under < 0) > limit:
                    continue
                if any(visible[i] - hidden[i] < spec.min_visible * drawn[i] for i in range(len(drawn))):
                    continue
                covered += int(np.count_nonzero(under < 0))
                for i in range(len(drawn)):
                    visible[i] -= int(hidden[i])
                local[shape] = len(drawn)
                drawn.append(int(shape.sum()))
                visible.append(drawn[-1])
                classes.append(cls)
                colors.append(_object_color(spec, cls, rng))
                break
        if len(drawn) >= spec.min_objects:
            break
    img = _background(spec, rng)
    for i, color in enumerate(colors):
        img[owner == i] = color
    img = np.floor(np.clip(img, 0, 255) + 0.5).astype(np.uint8)
    masks = [RegionMask(owner == i) for i in range(len(drawn))]
    return Scene(image_id, img, SceneGroundTruth(masks, classes))


def scene_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, index])))


def scene_id(index: int) -> str:
    return f"img{index:06d}"


def generate_scenes(spec: SceneSpec, n: int, seed: int) -> list[Scene]:
    return [generate_scene(spec, scene_rng(seed, i), scene_id(i)) for i in range(n)]


def generate_dataset(spec: SceneSpec, n: int, out_dir: str | Path, seed: int = 0) -> Path:
    """Write PNG images, one PNG per object mask, manifest.jsonl and labels.csv."""
    if n < 1:
        raise ValueError("n must be >= 1")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    manifest_lines = []
    labels = io.StringIO()
    writer = csv.writer(labels, lineterminator="\n")
    writer.writerow(["image_id", "class_id"])
    for i in range(n):
        scene = generate_scene(spec, scene_rng(seed, i), scene_id(i))
        img_rel = f"images/{scene.image_id}.png"
        (out / img_rel).write_bytes(encode_png(scene.image))
        mask_rels = []
        for k, m in enumerate(scene.truth.masks):
            rel = f"masks/{scene.image_id}_{k:02d}.png"
            (out / rel).write_bytes(encode_png(m.bitmap.astype(np.uint8) * 255))
            mask_rels.append(rel)
        manifest_lines.append(json.dumps(
            {"id": scene.image_id, "image": img_rel, "masks": mask_rels, "label": scene.label},
            separators=(", ", ": ")))
        writer.writerow([scene.image_id, scene.label])
    manifest = out / "manifest.jsonl"
    manifest.write_text("\n".join(manifest_lines) + "\n", encoding="utf-8")
    (out / "labels.csv").write_text(labels.getvalue(), encoding="utf-8")
    return manifest


# -- purity --------------------------------------------------------------------

PURE, IMPURE, BACKGROUND = "pure", "impure", "background"


def dominant_object(labels: np.ndarray, r: CropRect, threshold: float = 0.05) -> int:
    """Object index with the largest overlap with the crop, or -1 when none covers ``threshold``."""
    patch = labels[r.y0:r.y0 + r.h, r.x0:r.x0 + r.w]
    counts = np.bincount(patch[patch >= 0].ravel())
    if counts.size == 0 or counts.max() < threshold * r.w * r.h:
        return -1
    return int(np.argmax(counts))


def pair_purity(crops: Sequence[CropRect], truth: SceneGroundTruth | np.ndarray,
                threshold: float = 0.05) -> str:
    labels = truth.label_map() if isinstance(truth, SceneGroundTruth) else truth
    a = dominant_object(labels, crops[0], threshold)
    b = dominant_object(labels, crops[1], threshold)
    if a < 0 or b < 0:
        return BACKGROUND
    return PURE if a == b else IMPURE


@dataclass
class PurityResult:
    mode: str
    expansion: float
    pure: int = 0
    impure: int = 0
    background: int = 0

    @property
    def purity(self) -> float:
        n = self.pure + self.impure
        return self.pure / n if n else float("nan")

    @property
    def background_rate(self) -> float:
        n = self.pure + self.impure + self.background
        return self.background / n if n else float("nan")


def purity_benchmark(truths: Sequence[SceneGroundTruth], region_sets: Sequence[RegionSet],
                     sampler_cfg, n_pairs: int, seed: int = 0,
                     expansions: Iterable[float] = (1.3,), threshold: float = 0.05) -> list[PurityResult]:
    """Sample ``n_pairs`` pairs per mode (and per expansion for samclr) and tally purity."""
    from .rng import RngStreamKey, derive_stream
    from .sampling import sample_pair

    label_maps = [t.label_map() for t in truths]
    configs = [replace(sampler_cfg, mode="simclr")]
    configs += [replace(sampler_cfg, mode="samclr", expansion=c) for c in expansions]
    results = []
    for cfg in configs:
        res = PurityResult(cfg.mode, cfg.expansion if cfg.mode == "samclr" else 1.0)
        for j in range(n_pairs):
            idx = j % len(truths)
            rng = derive_stream(RngStreamKey(seed, "sampling", j // len(truths), idx, 0))
            h, w = label_maps[idx].shape
            pair = sample_pair(region_sets[idx], w, h, cfg, rng, region_sets[idx].image_id)
            outcome = pair_purity(pair.crops, label_maps[idx], threshold)
            setattr(res, outcome, getattr(res, outcome) + 1)
        results.append(res)
    return results


def write_purity_csv(results: Sequence[PurityResult], path: Optional[str | Path] = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mode", "c", "pairs", "pure", "impure", "background", "purity", "background_rate"])
    for r in results:
        w.writerow([r.mode, f"{r.expansion:g}", r.pure + r.impure + r.background, r.pure, r.impure,
                    r.background, f"{r.purity:.6f}", f"{r.background_rate:.6f}"])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text
