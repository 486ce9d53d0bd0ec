import math

import numpy as np
import pytest

from rvfusion.geom import (BBox3D, Pose, bev_iou, center_distance, nms,
                           transform_box, transform_points, wrap_angle)

from util import mc_bev_iou, random_box


class TestWrapAngle:
    def test_identity(self):
        assert wrap_angle(0.0) == 0.0

    def test_pi_maps_to_minus_pi(self):
        assert wrap_angle(math.pi) == pytest.approx(-math.pi)

    def test_five_half_pi(self):
        assert wrap_angle(5 * math.pi / 2) == pytest.approx(math.pi / 2)

    def test_periodic_and_idempotent(self, rng):
        thetas = rng.uniform(-10, 10, 200)
        for k in range(-3, 4):
            np.testing.assert_allclose(
                wrap_angle(thetas + 2 * np.pi * k), wrap_angle(thetas),
                atol=1e-12)
        w = wrap_angle(thetas)
        np.testing.assert_allclose(wrap_angle(w), w, atol=1e-12)
        assert np.all(w >= -np.pi) and np.all(w < np.pi)

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            wrap_angle(float("nan"))


class TestBevIou:
    def test_identical(self):
        b = BBox3D(1, 2, 0, 2, 4, 1.5, 0.3)
        assert bev_iou(b, b) == pytest.approx(1.0, abs=1e-9)

    def test_disjoint(self):
        a = BBox3D(0, 0, 0, 1, 1, 1, 0)
        b = BBox3D(100, 0, 0, 1, 1, 1, 0)
        assert bev_iou(a, b) == 0.0

    def test_axis_aligned_half_offset(self):
        a = BBox3D(0, 0, 0, 1, 1, 1, 0)
        b = BBox3D(0.5, 0, 0, 1, 1, 1, 0)
        assert bev_iou(a, b) == pytest.approx(1 / 3, abs=1e-9)

    def test_rotated_square_vs_mc(self):
        a = BBox3D(0, 0, 0, 1, 1, 1, 0)
        b = BBox3D(0, 0, 0, 1, 1, 1, math.pi / 4)
        assert bev_iou(a, b) == pytest.approx(mc_bev_iou(a, b), abs=1e-2)

    def test_symmetric(self, rng):
        for _ in range(1000):
            a = random_box(rng)
            b = random_box(rng)
            assert abs(bev_iou(a, b) - bev_iou(b, a)) < 1e-12

    def test_rigid_invariance(self, rng):
        for _ in range(100):
            a = random_box(rng, span=3)
            b = random_box(rng, span=3)
            pose = Pose(rng.uniform(-5, 5), rng.uniform(-5, 5), 0,
                        rng.uniform(-np.pi, np.pi))
            assert bev_iou(transform_box(a, pose), transform_box(b, pose)) == \
                pytest.approx(bev_iou(a, b), abs=1e-9)

    def test_matches_mc_oracle(self, rng):
        # overlapping-prone pairs; disjoint pairs are trivially exact
        for i in range(1000):
            a = random_box(rng, span=2)
            b = random_box(rng, span=2)
            exact = bev_iou(a, b)
            if i % 50 == 0:  # full-resolution MC is slow; spot check hard
                mc = mc_bev_iou(a, b, n=1_000_000, seed=i)
            else:
                mc = mc_bev_iou(a, b, n=100_000, seed=i)
                if abs(exact - mc) >= 8e-3:
                    mc = mc_bev_iou(a, b, n=1_000_000, seed=i)
            assert abs(exact - mc) < 1e-2

    def test_degenerate_rejected(self):
        with pytest.raises(ValueError):
            BBox3D(0, 0, 0, 0, 1, 1, 0)


class TestCenterDistance:
    def test_same_center(self):
        a = BBox3D(1, 1, 0, 1, 1, 1, 0)
        assert center_distance(a, a) == 0.0

    def test_three_four_five(self):
        a = BBox3D(0, 0, 0, 1, 1, 1, 0)
        b = BBox3D(3, 4, 0, 1, 1, 1, 0)
        assert center_distance(a, b) == pytest.approx(5.0)

    def test_ignores_z(self):
        a = BBox3D(0, 0, 0, 1, 1, 1, 0)
        b = BBox3D(0, 0, 5, 1, 1, 1, 0)
        assert center_distance(a, b) == 0.0


class TestNms:
    def test_single_box(self):
        assert nms([BBox3D(0, 0, 0, 1, 1, 1, 0)], [0.5], 0.5) == [0]

    def test_two_identical(self):
        b = BBox3D(0, 0, 0, 1, 1, 1, 0)
        assert nms([b, b], [0.9, 0.8], 0.5) == [0]

    def test_partial_overlap(self):
        b0 = BBox3D(0, 0, 0, 1, 1, 1, 0)
        b1 = BBox3D(0.1, 0, 0, 1, 1, 1, 0)  # overlaps b0 heavily
        b2 = BBox3D(10, 0, 0, 1, 1, 1, 0)
        kept = nms([b0, b1, b2], [0.9, 0.8, 0.7], 0.5)
        assert kept == [0, 2]
        # surviving pairs are below threshold (exhaustive over kept set)
        for i in kept:
            for j in kept:
                if i != j:
                    assert bev_iou(
                        [b0, b1, b2][i], [b0, b1, b2][j]) < 0.5

    def test_empty(self):
        assert nms([], [], 0.5) == []

    def test_score_tie_breaks_by_index(self):
        b = BBox3D(0, 0, 0, 1, 1, 1, 0)
        assert nms([b, b], [0.5, 0.5], 0.3) == [0]


class TestTransforms:
    def test_identity(self, rng):
        pts = rng.normal(size=(10, 3))
        np.testing.assert_allclose(transform_points(pts, Pose()), pts)

    def test_quarter_turn(self):
        out = transform_points([[1, 0, 0]], Pose(yaw=math.pi / 2))
        np.testing.assert_allclose(out, [[0, 1, 0]], atol=1e-12)

    def test_rotate_then_translate(self):
        out = transform_points([[1, 0, 0]], Pose(tx=1, yaw=math.pi / 2))
        np.testing.assert_allclose(out, [[1, 1, 0]], atol=1e-12)

    def test_round_trip(self, rng):
        pts = rng.normal(size=(50, 3))
        for _ in range(20):
            pose = Pose(*rng.uniform(-5, 5, 3), rng.uniform(-np.pi, np.pi))
            back = transform_points(transform_points(pts, pose), pose.inverse())
            np.testing.assert_allclose(back, pts, atol=1e-12)

    def test_compose(self, rng):
        pts = rng.normal(size=(10, 3))
        p1 = Pose(1, 2, 0.5, 0.7)
        p2 = Pose(-0.3, 0.4, 0, -1.2)
        np.testing.assert_allclose(
            transform_points(pts, p1.compose(p2)),
            transform_points(transform_points(pts, p2), p1), atol=1e-12)
