import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_mask
from samclr.masks import (
    BBox, RegionMask, area_order, bbox_of_mask, clamp_bbox, coarse_filter, expand_bbox,
    filter_min_area, postprocess_regions, round_half_up,
)


def rect_mask(w, h, x0, y0, bw, bh):
    m = np.zeros((h, w), dtype=bool)
    m[y0:y0 + bh, x0:x0 + bw] = True
    return RegionMask(m)


def mask_of_area(area, width=100):
    flat = np.zeros(width * width, dtype=bool)
    flat[:area] = True
    return RegionMask(flat.reshape(width, width))


class TestBBoxOfMask:
    def test_single_pixel(self):
        m = np.zeros((10, 10), dtype=bool)
        m[7, 5] = True
        assert bbox_of_mask(m) == BBox(5, 7, 1, 1)

    def test_full(self):
        assert bbox_of_mask(np.ones((6, 9), dtype=bool)) == BBox(0, 0, 9, 6)

    def test_empty(self):
        with pytest.raises(ValueError):
            bbox_of_mask(np.zeros((3, 3), dtype=bool))
        with pytest.raises(ValueError):
            RegionMask(np.zeros((3, 3), dtype=bool))

    def test_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            m = rng.random((int(rng.integers(1, 20)), int(rng.integers(1, 20)))) < rng.uniform(0.01, 0.3)
            if not m.any():
                continue
            pts = [(x, y) for y in range(m.shape[0]) for x in range(m.shape[1]) if m[y, x]]
            xs, ys = [p[0] for p in pts], [p[1] for p in pts]
            b = bbox_of_mask(m)
            assert b == BBox(min(xs), min(ys), max(xs) - min(xs) + 1, max(ys) - min(ys) + 1)

    def test_region_mask_fields(self):
        m = rect_mask(10, 8, 2, 3, 4, 2)
        assert m.area == 8 and m.first_pixel == 3 * 10 + 2 and m.bbox == BBox(2, 3, 4, 2)


class TestMinArea:
    def test_boundary(self):
        kept = filter_min_area([mask_of_area(999), mask_of_area(1000)], 1000)
        assert [m.area for m in kept] == [1000]

    def test_min_area_one_identity(self):
        rng = np.random.default_rng(1)
        masks = [random_mask(rng, 30, 30) for _ in range(20)]
        assert filter_min_area(masks, 1) == masks

    def test_brute_force_and_idempotent(self):
        rng = np.random.default_rng(2)
        masks = [random_mask(rng, 60, 60) for _ in range(50)]
        kept = filter_min_area(masks, 400)
        assert kept == [m for m in masks if m.area >= 400]
        assert filter_min_area(kept, 400) == kept

    def test_invalid(self):
        with pytest.raises(ValueError):
            filter_min_area([], 0)


class TestCoarseFilter:
    def test_contained_dropped(self):
        big = rect_mask(20, 20, 0, 0, 20, 20)
        small = rect_mask(20, 20, 5, 5, 3, 3)
        for theta in (0.1, 0.5, 1.0):
            assert coarse_filter([small, big], theta) == [big]

    def test_disjoint_kept(self):
        a = rect_mask(20, 20, 0, 0, 5, 5)
        b = rect_mask(20, 20, 10, 10, 6, 6)
        assert coarse_filter([a, b]) == [b, a]

    def test_half_overlap(self):
        a = rect_mask(20, 10, 0, 0, 8, 4)
        b = rect_mask(20, 10, 4, 0, 8, 4)
        assert coarse_filter([a, b], 0.9) == [a, b]
        # equal area: scan order puts a first
        assert coarse_filter([b, a], 0.5) == [a]

    def test_area_order_ties(self):
        a = rect_mask(10, 10, 5, 0, 2, 2)
        b = rect_mask(10, 10, 0, 3, 2, 2)
        c = rect_mask(10, 10, 0, 0, 3, 3)
        assert area_order([b, a, c]) == [c, a, b]

    def test_antichain_property_and_idempotent(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            masks = [random_mask(rng, 40, 40) for _ in range(int(rng.integers(1, 10)))]
            theta = float(rng.uniform(0.3, 1.0))
            kept = coarse_filter(masks, theta)
            for i, m in enumerate(kept):
                for j, k in enumerate(kept):
                    if i != j:
                        # nothing kept is theta-contained in a larger kept region
                        if area_order([m, k])[0] is k:
                            assert np.count_nonzero(m.bitmap & k.bitmap) < theta * m.area
            assert coarse_filter(kept, theta) == kept

    def test_invalid_theta(self):
        with pytest.raises(ValueError):
            coarse_filter([], 0.0)

    def test_postprocess(self):
        masks = [mask_of_area(2000), mask_of_area(1500), mask_of_area(500)]
        assert postprocess_regions(masks) == [masks[0]]


class TestExpand:
    def test_identity(self):
        assert expand_bbox(BBox(3, 4, 10, 7), 1.0, 50, 50) == BBox(3, 4, 10, 7)

    def test_paper_factor(self):
        assert expand_bbox(BBox(50, 40, 100, 80), 1.3, 400, 300) == BBox(35, 28, 130, 104)

    def test_clamped_full(self):
        assert expand_bbox(BBox(0, 0, 100, 100), 1.3, 100, 100) == BBox(0, 0, 100, 100)

    def test_odd_padding_right(self):
        # w' = round(1.5 * 3) = 5 (half-up): two extra px, one each side; w'=4 -> extra on right
        assert expand_bbox(BBox(10, 10, 3, 3), 1.5, 50, 50) == BBox(9, 9, 5, 5)
        assert expand_bbox(BBox(10, 10, 3, 3), 1.3, 50, 50) == BBox(10, 10, 4, 4)

    def test_invalid(self):
        with pytest.raises(ValueError):
            expand_bbox(BBox(0, 0, 2, 2), 0.9, 10, 10)

    @given(st.integers(0, 60), st.integers(0, 60), st.integers(1, 40), st.integers(1, 40),
           st.floats(1.0, 3.0))
    @settings(max_examples=300, deadline=None)
    def test_contains_original(self, x0, y0, w, h, c):
        W, H = 100, 100
        b = BBox(x0, y0, w, h)
        e = expand_bbox(b, c, W, H)
        assert e.contains(b)
        assert e.x0 >= 0 and e.y0 >= 0 and e.x1 <= W and e.y1 <= H
        # before clamping the extents are round(c*w)
        assert e.w <= max(round_half_up(c * w), w)


class TestClamp:
    def test_inside(self):
        assert clamp_bbox(BBox(1, 2, 3, 4), 10, 10) == BBox(1, 2, 3, 4)

    def test_past_right(self):
        assert clamp_bbox(BBox(5, 0, 15, 4), 10, 10) == BBox(5, 0, 5, 4)

    def test_outside(self):
        with pytest.raises(ValueError):
            clamp_bbox(BBox(20, 20, 3, 3), 10, 10)

    def test_round_half_up(self):
        assert [round_half_up(v) for v in (0.5, 1.5, 2.5, -0.5, 2.49)] == [1, 2, 3, 0, 2]
