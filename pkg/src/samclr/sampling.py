"""Positive-pair view sampling: whole-image (SimCLR) or single-region (SAMCLR)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .image_ops import CropRect
from .masks import DEFAULT_EXPANSION, BBox, RegionSet, expand_bbox, round_half_up

WHOLE_IMAGE = "whole-image"
MIN_CROP_SIDE = 8
MODES = ("simclr", "samclr")


@dataclass(frozen=True)
class SamplerConfig:
    mode: str = "samclr"
    view_size: int = 128
    area_min: float = 0.2
    area_max: float = 1.0
    aspect_min: float = 3 / 4
    aspect_max: float = 4 / 3
    max_retries: int = 10
    expansion: float = DEFAULT_EXPANSION
    flip_p: float = 0.5

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0 < self.area_min <= self.area_max <= 1:
            raise ValueError("need 0 < area_min <= area_max <= 1")
        if not self.aspect_min <= 1 <= self.aspect_max or self.aspect_min <= 0:
            raise ValueError("aspect ratio range must bracket 1")
        if self.max_retries < 1:
            raise ValueError("max_retries must be >= 1")
        if self.expansion < 1:
            raise ValueError("expansion factor must be >= 1")
        if self.view_size < 1:
            raise ValueError("view_size must be positive")


RegionId = Union[int, str]


@dataclass(frozen=True)
class ViewPair:
    image_id: str
    region_id: RegionId
    window: BBox
    crops: tuple[CropRect, CropRect]


def select_region(rs: RegionSet, rng: np.random.Generator) -> Optional[int]:
    if len(rs) == 0:
        return None
    return int(rng.integers(len(rs)))


def sample_crop_in_window(window: BBox, cfg: SamplerConfig, rng: np.random.Generator) -> CropRect:
    whole = CropRect(window.x0, window.y0, window.w, window.h)
    if window.w < MIN_CROP_SIDE or window.h < MIN_CROP_SIDE:
        return whole
    area = window.w * window.h
    log_lo, log_hi = math.log(cfg.aspect_min), math.log(cfg.aspect_max)
    for _ in range(cfg.max_retries):
        target = rng.uniform(cfg.area_min, cfg.area_max) * area
        ratio = math.exp(rng.uniform(log_lo, log_hi))
        w = max(MIN_CROP_SIDE, round_half_up(math.sqrt(target * ratio)))
        h = max(MIN_CROP_SIDE, round_half_up(math.sqrt(target / ratio)))
        if w <= window.w and h <= window.h:
            x0 = window.x0 + int(rng.integers(window.w - w + 1))
            y0 = window.y0 + int(rng.integers(window.h - h + 1))
            return CropRect(x0, y0, w, h)
    return whole


def sample_pair_simclr(width: int, height: int, cfg: SamplerConfig, rng: np.random.Generator,
                       image_id: str = "") -> ViewPair:
    window = BBox(0, 0, width, height)
    c1 = sample_crop_in_window(window, cfg, rng)
    c2 = sample_crop_in_window(window, cfg, rng)
    return ViewPair(image_id, WHOLE_IMAGE, window, (c1, c2))


def region_window(rs: RegionSet, region_id: int, width: int, height: int, c: float) -> BBox:
    return expand_bbox(rs.regions[region_id].bbox, c, width, height)


def sample_pair_samclr(rs: RegionSet, width: int, height: int, cfg: SamplerConfig,
                       rng: np.random.Generator) -> ViewPair:
    rid = select_region(rs, rng)
    if rid is None:
        return sample_pair_simclr(width, height, cfg, rng, rs.image_id)
    window = region_window(rs, rid, width, height, cfg.expansion)
    c1 = sample_crop_in_window(window, cfg, rng)
    c2 = sample_crop_in_window(window, cfg, rng)
    return ViewPair(rs.image_id, rid, window, (c1, c2))


def sample_pair(rs: Optional[RegionSet], width: int, height: int, cfg: SamplerConfig,
                rng: np.random.Generator, image_id: str = "") -> ViewPair:
    if cfg.mode == "simclr":
        return sample_pair_simclr(width, height, cfg, rng, image_id)
    if rs is None:
        raise ValueError("samclr sampling needs a region set")
    return sample_pair_samclr(rs, width, height, cfg, rng)
