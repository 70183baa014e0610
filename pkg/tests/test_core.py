"""Geometry and heatmap primitives: hand-checked anchors plus property sweeps."""

import numpy as np
import pytest

from gazedet.core import (
    GazeHeatmap,
    GazeInstance,
    GazeTarget,
    HeadBox,
    box_center_form,
    box_from_center_form,
    box_giou,
    box_iou,
    heatmap_argmax,
    instance_heatmap,
    render_gaze_heatmap,
)


def random_box(rng) -> HeadBox:
    x = np.sort(rng.uniform(0, 1, 2))
    y = np.sort(rng.uniform(0, 1, 2))
    while x[1] - x[0] < 1e-6:
        x = np.sort(rng.uniform(0, 1, 2))
    while y[1] - y[0] < 1e-6:
        y = np.sort(rng.uniform(0, 1, 2))
    return HeadBox(x[0], y[0], x[1], y[1])


class TestHeadBox:
    def test_valid_box(self):
        b = HeadBox(0.1, 0.2, 0.5, 0.8)
        assert b.center == (0.3, 0.5)
        assert b.area == pytest.approx(0.4 * 0.6)

    def test_degenerate_box_rejected(self):
        with pytest.raises(ValueError):
            HeadBox(0.5, 0.0, 0.5, 1.0)  # zero width

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            HeadBox(-0.1, 0.0, 0.5, 0.5)
        with pytest.raises(ValueError):
            HeadBox(0.0, 0.0, 1.2, 0.5)

    def test_inverted_rejected(self):
        with pytest.raises(ValueError):
            HeadBox(0.6, 0.0, 0.4, 0.5)


class TestGazeTarget:
    def test_inside_requires_point(self):
        with pytest.raises(ValueError):
            GazeTarget(None, True)

    def test_outside_forbids_point(self):
        with pytest.raises(ValueError):
            GazeTarget((0.5, 0.5), False)

    def test_point_range(self):
        with pytest.raises(ValueError):
            GazeTarget((1.5, 0.5), True)
        GazeTarget((1.0, 0.0), True)  # corners are allowed


class TestGazeHeatmap:
    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            GazeHeatmap(np.full((4, 4), 1.5))
        with pytest.raises(ValueError):
            GazeHeatmap(np.full((4, 4), -0.1))

    def test_rejects_bad_shape(self):
        with pytest.raises(ValueError):
            GazeHeatmap(np.zeros((4,)))

    def test_shape_properties(self):
        hm = GazeHeatmap(np.zeros((3, 5)))
        assert (hm.height, hm.width) == (3, 5)


class TestIoU:
    def test_identical(self):
        b = HeadBox(0.2, 0.2, 0.6, 0.7)
        assert box_iou(b, b) == pytest.approx(1.0)

    def test_half_overlap(self):
        # [0, 0.5] x [0, 1] vs [0.25, 0.75] x [0, 1]: inter 0.25, union 0.75
        a = HeadBox(0.0, 0.0, 0.5, 1.0)
        b = HeadBox(0.25, 0.0, 0.75, 1.0)
        assert box_iou(a, b) == pytest.approx(1.0 / 3.0)

    def test_disjoint(self):
        a = HeadBox(0.0, 0.0, 0.25, 0.25)
        b = HeadBox(0.75, 0.75, 1.0, 1.0)
        assert box_iou(a, b) == 0.0


class TestGIoU:
    def test_identical_is_one(self):
        b = HeadBox(0.1, 0.3, 0.4, 0.9)
        assert box_giou(b, b) == pytest.approx(1.0)

    def test_abutting_halves(self):
        # Two halves of the unit square: IoU 0, enclosing box = union.
        a = HeadBox(0.0, 0.0, 0.5, 1.0)
        b = HeadBox(0.5, 0.0, 1.0, 1.0)
        assert box_giou(a, b) == pytest.approx(0.0)

    def test_separated_boxes(self):
        # Same-row squares with a 0.5 gap: IoU 0, union 0.125,
        # enclosing box 0.25, so GIoU = -0.125/0.25 = -0.5.
        a = HeadBox(0.0, 0.0, 0.25, 0.25)
        b = HeadBox(0.75, 0.0, 1.0, 0.25)
        assert box_giou(a, b) == pytest.approx(-0.5)

    def test_properties_random_sweep(self):
        rng = np.random.default_rng(42)
        for _ in range(10_000):
            a, b = random_box(rng), random_box(rng)
            iou = box_iou(a, b)
            giou = box_giou(a, b)
            assert 0.0 <= iou <= 1.0
            assert -1.0 < giou <= iou + 1e-12
            assert giou == pytest.approx(box_giou(b, a), abs=1e-12)  # symmetry

    def test_nested_boxes(self):
        outer = HeadBox(0.0, 0.0, 1.0, 1.0)
        inner = HeadBox(0.25, 0.25, 0.75, 0.75)
        # enclosing box == outer == union, so GIoU == IoU == 0.25
        assert box_giou(outer, inner) == pytest.approx(0.25)
        assert box_iou(outer, inner) == pytest.approx(0.25)


class TestCenterForm:
    def test_example(self):
        cx, cy, w, h = box_center_form(HeadBox(0.2, 0.4, 0.6, 0.8))
        assert (cx, cy, w, h) == pytest.approx((0.4, 0.6, 0.4, 0.4))

    def test_roundtrip(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            b = random_box(rng)
            back = box_from_center_form(*box_center_form(b))
            for u, v in zip(b.as_tuple(), back.as_tuple()):
                assert u == pytest.approx(v, abs=1e-12)

    def test_invalid_center_form(self):
        with pytest.raises(ValueError):
            box_from_center_form(0.05, 0.5, 0.2, 0.2)  # spills past the left edge
        with pytest.raises(ValueError):
            box_from_center_form(0.5, 0.5, 0.0, 0.2)  # zero width


class TestRenderGazeHeatmap:
    def test_peak_at_target_cell(self):
        hm = render_gaze_heatmap(GazeTarget((0.5, 0.5), True), 64, 64, 3.0)
        assert hm.values.shape == (64, 64)
        assert hm.values.max() == pytest.approx(1.0)
        x, y = heatmap_argmax(hm)
        assert (x, y) == pytest.approx((0.5, 0.5), abs=1.0 / 64)

    def test_out_of_frame_is_zero(self):
        hm = render_gaze_heatmap(GazeTarget(None, False), 64, 64, 3.0)
        assert hm.values.shape == (64, 64)
        assert np.all(hm.values == 0.0)

    def test_corner_mass_matches_mirrored_grid(self):
        # A target on the corner keeps one quadrant of the full Gaussian:
        # before peak normalization, the sum over the 64x64 grid equals 1/4
        # of the sum over the mirrored (256-wide) grid by cell-center
        # symmetry.  The rendered map divides by its peak cell, whose raw
        # value at the nearest center (0.5, 0.5) is exp(-0.5 / (2 sigma^2)).
        sigma = 3.0
        hm = render_gaze_heatmap(GazeTarget((0.0, 0.0), True), 64, 64, sigma)
        coords = np.arange(-128, 128) + 0.5
        d2 = coords[None, :] ** 2 + coords[:, None] ** 2
        full = np.exp(-d2 / (2 * sigma * sigma)).sum()
        raw_peak = np.exp(-(0.5**2 + 0.5**2) / (2 * sigma * sigma))
        assert hm.values.sum() * raw_peak == pytest.approx(full / 4.0, rel=1e-9)
        assert hm.values.sum() == pytest.approx(14.535371030852145, rel=1e-9)

    def test_render_argmax_roundtrip(self):
        rng = np.random.default_rng(3)
        cell_diag = np.hypot(1 / 64, 1 / 64)
        for _ in range(200):
            p = tuple(rng.uniform(0.02, 0.98, 2))
            hm = render_gaze_heatmap(GazeTarget(p, True), 64, 64, 3.0)
            x, y = heatmap_argmax(hm)
            assert np.hypot(x - p[0], y - p[1]) <= cell_diag

    def test_sigma_validation(self):
        with pytest.raises(ValueError):
            render_gaze_heatmap(GazeTarget((0.5, 0.5), True), 64, 64, 0.0)
        with pytest.raises(ValueError):
            render_gaze_heatmap(GazeTarget((0.5, 0.5), True), 0, 64, 3.0)


class TestHeatmapArgmax:
    def test_single_cell(self):
        assert heatmap_argmax(np.array([[0.7]])) == (0.5, 0.5)

    def test_known_position(self):
        v = np.zeros((64, 64))
        v[31, 31] = 1.0
        x, y = heatmap_argmax(GazeHeatmap(v))
        assert x == pytest.approx(31.5 / 64)
        assert y == pytest.approx(31.5 / 64)

    def test_tie_breaks_row_major(self):
        assert heatmap_argmax(np.full((4, 4), 0.25)) == (0.5 / 4, 0.5 / 4)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            heatmap_argmax(np.zeros((0, 4)))


class TestInstanceHeatmap:
    def test_caches_rendering(self):
        inst = GazeInstance(HeadBox(0.1, 0.1, 0.3, 0.3), GazeTarget((0.7, 0.7), True))
        hm1 = instance_heatmap(inst, 32, 32, 3.0)
        hm2 = instance_heatmap(inst, 32, 32, 3.0)
        assert hm1 is hm2

    def test_rerenders_on_shape_change(self):
        inst = GazeInstance(HeadBox(0.1, 0.1, 0.3, 0.3), GazeTarget((0.7, 0.7), True))
        hm1 = instance_heatmap(inst, 32, 32, 3.0)
        hm2 = instance_heatmap(inst, 16, 16, 3.0)
        assert hm2.values.shape == (16, 16)
        assert hm1.values.shape == (32, 32)
