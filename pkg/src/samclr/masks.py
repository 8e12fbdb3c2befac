"""Region masks and the box geometry used to build sampling windows."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DEFAULT_MIN_AREA = 1000
DEFAULT_THETA = 0.9
DEFAULT_EXPANSION = 1.3


@dataclass(frozen=True)
class BBox:
    x0: int
    y0: int
    w: int
    h: int

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise ValueError(f"degenerate box {self}")

    @property
    def x1(self) -> int:
        return self.x0 + self.w

    @property
    def y1(self) -> int:
        return self.y0 + self.h

    def contains(self, other: "BBox") -> bool:
        return other.x0 >= self.x0 and other.y0 >= self.y0 and other.x1 <= self.x1 and other.y1 <= self.y1


@dataclass(eq=False)
class RegionMask:
    bitmap: np.ndarray
    area: int = field(init=False)
    bbox: BBox = field(init=False)
    first_pixel: int = field(init=False)

    def __post_init__(self):
        self.bitmap = np.ascontiguousarray(self.bitmap, dtype=bool)
        if self.bitmap.ndim != 2:
            raise ValueError("mask bitmap must be 2-D")
        flat = np.flatnonzero(self.bitmap)
        if flat.size == 0:
            raise ValueError("empty mask")
        self.area = int(flat.size)
        self.first_pixel = int(flat[0])
        self.bbox = bbox_of_mask(self.bitmap)

    @property
    def width(self) -> int:
        return self.bitmap.shape[1]

    @property
    def height(self) -> int:
        return self.bitmap.shape[0]

    def __eq__(self, other):
        return isinstance(other, RegionMask) and np.array_equal(self.bitmap, other.bitmap)


@dataclass
class RegionSet:
    image_id: str
    regions: list[RegionMask]

    def __len__(self) -> int:
        return len(self.regions)


def bbox_of_mask(mask) -> BBox:
    bitmap = mask.bitmap if isinstance(mask, RegionMask) else np.asarray(mask, dtype=bool)
    rows = np.flatnonzero(bitmap.any(axis=1))
    cols = np.flatnonzero(bitmap.any(axis=0))
    if rows.size == 0:
        raise ValueError("bounding box of an empty mask")
    return BBox(int(cols[0]), int(rows[0]), int(cols[-1] - cols[0] + 1), int(rows[-1] - rows[0] + 1))


def area_order(regions: Sequence[RegionMask]) -> list[RegionMask]:
    """Descending area, ties by first set pixel in row-major scan order."""
    return sorted(regions, key=lambda r: (-r.area, r.first_pixel))


def filter_min_area(regions: Sequence[RegionMask], min_area: int = DEFAULT_MIN_AREA) -> list[RegionMask]:
    if min_area < 1:
        raise ValueError("min_area must be >= 1")
    return [r for r in regions if r.area >= min_area]


def _overlap(a: RegionMask, b: RegionMask) -> int:
    x0, y0 = max(a.bbox.x0, b.bbox.x0), max(a.bbox.y0, b.bbox.y0)
    x1, y1 = min(a.bbox.x1, b.bbox.x1), min(a.bbox.y1, b.bbox.y1)
    if x0 >= x1 or y0 >= y1:
        return 0
    return int(np.count_nonzero(a.bitmap[y0:y1, x0:x1] & b.bitmap[y0:y1, x0:x1]))


def coarse_filter(regions: Sequence[RegionMask], theta: float = DEFAULT_THETA) -> list[RegionMask]:
    """Keep the coarsest regions: drop any region mostly contained in a kept, larger one.

    Region M is dropped when some kept K has |M ∩ K| / |M| >= theta.
    Output is in area order.
    """
    if not 0.0 < theta <= 1.0:
        raise ValueError("theta must lie in (0, 1]")
    kept: list[RegionMask] = []
    for m in area_order(regions):
        if all(_overlap(m, k) < theta * m.area for k in kept):
            kept.append(m)
    return kept


def round_half_up(x: float) -> int:
    return math.floor(x + 0.5)


def clamp_bbox(b: BBox, image_w: int, image_h: int) -> BBox:
    x0, y0 = max(b.x0, 0), max(b.y0, 0)
    x1, y1 = min(b.x1, image_w), min(b.y1, image_h)
    if x0 >= x1 or y0 >= y1:
        raise ValueError(f"box {b} does not intersect the {image_w}x{image_h} image")
    return BBox(x0, y0, x1 - x0, y1 - y0)


def expand_bbox(b: BBox, c: float, image_w: int, image_h: int) -> BBox:
    """Scale width and height by ``c`` about the box center, then clamp to the image."""
    if c < 1:
        raise ValueError(f"expansion factor must be >= 1, got {c}")
    w = max(round_half_up(c * b.w), b.w)
    h = max(round_half_up(c * b.h), b.h)
    # odd padding puts the extra pixel on the right/bottom side
    x0 = b.x0 - (w - b.w) // 2
    y0 = b.y0 - (h - b.h) // 2
    return clamp_bbox(BBox(x0, y0, w, h), image_w, image_h)


def postprocess_regions(regions: Sequence[RegionMask], min_area: int = DEFAULT_MIN_AREA,
                        theta: float = DEFAULT_THETA) -> list[RegionMask]:
    return coarse_filter(filter_min_area(regions, min_area), theta)
