import math

import numpy as np
import pytest

from semloop.geometry import (
    AngleNearPi,
    BBox2D,
    CameraIntrinsics,
    Cuboid,
    NotVisible,
    Pose,
    batch_exp,
    batch_inverse,
    batch_log,
    iou_2d,
    iou_3d,
    pose_compose,
    pose_from_tum_line,
    pose_inverse,
    pose_to_tum_line,
    predict_bbox,
    se3_exp,
    se3_log,
    translation_distance,
)


def random_pose(rng, max_angle=math.pi - 0.1, max_trans=10.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(-max_angle, max_angle)
    xi = np.concatenate([axis * angle, rng.uniform(-max_trans, max_trans, 3)])
    return se3_exp(xi)


class TestPoseAlgebra:
    def test_identity_compose(self):
        rng = np.random.default_rng(0)
        p = random_pose(rng)
        assert pose_compose(Pose.identity(), p).is_close(p, 1e-12)
        assert pose_compose(p, Pose.identity()).is_close(p, 1e-12)

    def test_compose_inverse_is_identity(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            p = random_pose(rng)
            assert pose_compose(p, pose_inverse(p)).is_close(Pose.identity(), 1e-12)

    def test_translation_compose(self):
        a = Pose.from_translation([1, 0, 0])
        b = Pose.from_translation([0, 2, 0])
        c = pose_compose(a, b)
        np.testing.assert_allclose(c.t, [1, 2, 0], atol=1e-15)

    def test_inverse_pure_translation(self):
        p = Pose.from_translation([1, 2, 3])
        np.testing.assert_allclose(pose_inverse(p).t, [-1, -2, -3], atol=1e-15)

    def test_compose_associative(self):
        rng = np.random.default_rng(2)
        a, b, c = (random_pose(rng) for _ in range(3))
        lhs = pose_compose(pose_compose(a, b), c)
        rhs = pose_compose(a, pose_compose(b, c))
        assert lhs.is_close(rhs, 1e-10)


class TestExpLog:
    def test_identity_round_trip(self):
        np.testing.assert_allclose(se3_log(Pose.identity()), np.zeros(6), atol=1e-15)
        assert se3_exp(np.zeros(6)).is_close(Pose.identity(), 1e-15)

    def test_log_quarter_turn_about_z(self):
        p = Pose.from_yaw(math.pi / 2)
        xi = se3_log(p)
        np.testing.assert_allclose(xi[:3], [0, 0, math.pi / 2], atol=1e-12)
        np.testing.assert_allclose(xi[3:], [0, 0, 0], atol=1e-12)

    def test_log_pure_translation(self):
        xi = se3_log(Pose.from_translation([1, 2, 3]))
        np.testing.assert_allclose(xi, [0, 0, 0, 1, 2, 3], atol=1e-15)

    def test_exp_pi_about_z_matches_rodrigues(self):
        # Rodrigues by hand: R = I + sin(pi) K + (1 - cos(pi)) K^2
        k = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
        expected = np.eye(3) + math.sin(math.pi) * k + (1 - math.cos(math.pi)) * (k @ k)
        p = se3_exp([0, 0, math.pi, 0, 0, 0])
        np.testing.assert_allclose(p.r, expected, atol=1e-12)
        np.testing.assert_allclose(p.t, np.zeros(3), atol=1e-15)

    def test_round_trip_1000_random_poses(self):
        rng = np.random.default_rng(12345)
        worst = 0.0
        for _ in range(1000):
            p = random_pose(rng)
            q = se3_exp(se3_log(p))
            worst = max(worst, np.abs(q.r - p.r).max(), np.abs(q.t - p.t).max())
        assert worst <= 1e-9

    def test_small_angle_branch(self):
        xi = np.array([1e-9, -2e-9, 1e-9, 0.5, -0.25, 0.125])
        np.testing.assert_allclose(se3_log(se3_exp(xi)), xi, atol=1e-15)

    def test_log_raises_near_pi(self):
        p = Pose.from_yaw(math.pi - 1e-9)
        with pytest.raises(AngleNearPi):
            se3_log(p)


class TestBatchKernels:
    def test_batch_matches_scalar(self):
        rng = np.random.default_rng(7)
        poses = [random_pose(rng) for _ in range(64)]
        mats = np.stack([p.matrix() for p in poses])
        inv = batch_inverse(mats)
        logs = batch_log(mats)
        back = batch_exp(logs)
        for i, p in enumerate(poses):
            np.testing.assert_allclose(inv[i], p.inverse().matrix(), atol=1e-12)
            np.testing.assert_allclose(logs[i], se3_log(p), atol=1e-10)
            np.testing.assert_allclose(back[i], p.matrix(), atol=1e-9)

    def test_batch_log_raises_near_pi(self):
        mats = np.stack([Pose.identity().matrix(), Pose.from_yaw(math.pi - 1e-8).matrix()])
        with pytest.raises(AngleNearPi):
            batch_log(mats)


class TestPredictBbox:
    K = CameraIntrinsics(fx=500, fy=500, cx=320, cy=320, width=640, height=640)

    def test_unit_cube_on_axis(self):
        # Hand oracle: project all 8 corners of a unit cube 5 m ahead.
        c = Cuboid(t=[0, 0, 5], yaw=0.0, dims=[1, 1, 1])
        corners = c.corners()
        px = np.stack(
            [500 * corners[:, 0] / corners[:, 2] + 320, 500 * corners[:, 1] / corners[:, 2] + 320],
            axis=1,
        )
        box = predict_bbox(c, Pose.identity(), self.K)
        assert box.u_min == pytest.approx(px[:, 0].min())
        assert box.u_max == pytest.approx(px[:, 0].max())
        # near face (z = 4.5) governs the extrema: half-width 500 * 0.5 / 4.5
        assert box.u_max - 320 == pytest.approx(500 * 0.5 / 4.5)
        assert 320 - box.u_min == pytest.approx(500 * 0.5 / 4.5)

    def test_behind_camera(self):
        c = Cuboid(t=[0, 0, -5], yaw=0.0, dims=[1, 1, 1])
        with pytest.raises(NotVisible):
            predict_bbox(c, Pose.identity(), self.K)

    def test_clamped_to_image(self):
        # Shift the cuboid sideways so its projection straddles the border.
        c = Cuboid(t=[3.2, 0, 5], yaw=0.0, dims=[1, 1, 1])
        corners = c.corners()
        px_u = 500 * corners[:, 0] / corners[:, 2] + 320
        assert px_u.max() > 640  # sanity: it really does straddle
        box = predict_bbox(c, Pose.identity(), self.K)
        assert box.u_max == 640
        assert box.u_min == pytest.approx(max(0.0, px_u.min()))

    def test_fully_outside_raises(self):
        c = Cuboid(t=[100, 0, 5], yaw=0.0, dims=[1, 1, 1])
        with pytest.raises(NotVisible):
            predict_bbox(c, Pose.identity(), self.K)

    def test_shrinks_as_cuboid_recedes(self):
        widths = []
        for z in (5, 10, 20, 40):
            box = predict_bbox(Cuboid(t=[0, 0, z], yaw=0.3, dims=[2, 1, 1.5]), Pose.identity(), self.K)
            widths.append(box.area())
        assert widths == sorted(widths, reverse=True)


class TestIou2d:
    def test_identical(self):
        a = BBox2D(0, 0, 2, 2)
        assert iou_2d(a, a) == 1.0

    def test_disjoint(self):
        assert iou_2d(BBox2D(0, 0, 1, 1), BBox2D(2, 2, 3, 3)) == 0.0

    def test_hand_case(self):
        a = BBox2D(0, 0, 2, 2)
        b = BBox2D(1, 1, 3, 3)
        assert iou_2d(a, b) == pytest.approx(1.0 / 7.0)
        assert iou_2d(b, a) == pytest.approx(iou_2d(a, b))


def mc_iou_3d(a: Cuboid, b: Cuboid, n=200_000, seed=0):
    """Monte-Carlo volume-sampling oracle, independent of the clipping path."""
    rng = np.random.default_rng(seed)
    corners = np.vstack([a.corners(), b.corners()])
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    pts = rng.uniform(lo, hi, size=(n, 3))

    def inside(c: Cuboid, p):
        local = c.pose().inverse().apply(p)
        return np.all(np.abs(local) <= c.dims / 2.0, axis=1)

    in_a, in_b = inside(a, pts), inside(b, pts)
    union = np.count_nonzero(in_a | in_b)
    if union == 0:
        return 0.0
    return np.count_nonzero(in_a & in_b) / union


class TestIou3d:
    def test_identical(self):
        c = Cuboid(t=[1, 2, 0.5], yaw=0.7, dims=[4, 2, 1.5])
        assert iou_3d(c, c) == pytest.approx(1.0, abs=1e-12)

    def test_far_apart(self):
        a = Cuboid(t=[0, 0, 0], yaw=0.3, dims=[1, 1, 1])
        b = Cuboid(t=[10, 0, 0], yaw=1.1, dims=[1, 1, 1])
        assert iou_3d(a, b) == 0.0

    def test_offset_unit_cubes(self):
        a = Cuboid(t=[0, 0, 0], yaw=0.0, dims=[1, 1, 1])
        b = Cuboid(t=[0.5, 0, 0], yaw=0.0, dims=[1, 1, 1])
        assert iou_3d(a, b) == pytest.approx(1.0 / 3.0)

    def test_symmetry_and_bounds(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            a = Cuboid(rng.uniform(-2, 2, 3), rng.uniform(-np.pi, np.pi), rng.uniform(0.5, 3, 3))
            b = Cuboid(rng.uniform(-2, 2, 3), rng.uniform(-np.pi, np.pi), rng.uniform(0.5, 3, 3))
            v, w = iou_3d(a, b), iou_3d(b, a)
            assert v == pytest.approx(w, abs=1e-12)
            assert 0.0 <= v <= 1.0

    def test_against_monte_carlo(self):
        rng = np.random.default_rng(42)
        for i in range(20):
            a = Cuboid(rng.uniform(-1, 1, 3), rng.uniform(-np.pi, np.pi), rng.uniform(0.5, 3, 3))
            b = Cuboid(
                a.t + rng.uniform(-1.5, 1.5, 3),
                rng.uniform(-np.pi, np.pi),
                rng.uniform(0.5, 3, 3),
            )
            assert iou_3d(a, b) == pytest.approx(mc_iou_3d(a, b, seed=i), abs=0.01)


class TestTranslationDistance:
    def test_zero_for_equal(self):
        rng = np.random.default_rng(4)
        p = random_pose(rng)
        assert translation_distance(p, p) == pytest.approx(0.0, abs=1e-12)

    def test_pythagoras(self):
        a = Pose.from_translation([0, 0, 0])
        b = Pose.from_translation([3, 4, 0])
        assert translation_distance(a, b) == pytest.approx(5.0)

    def test_left_invariance(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            a, b, g = (random_pose(rng) for _ in range(3))
            d0 = translation_distance(a, b)
            d1 = translation_distance(g @ a, g @ b)
            assert d1 == pytest.approx(d0, abs=1e-12)

    def test_triangle_inequality(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            a, b, c = (random_pose(rng) for _ in range(3))
            assert translation_distance(a, c) <= (
                translation_distance(a, b) + translation_distance(b, c) + 1e-12
            )


class TestTumFormat:
    def test_round_trip_fixed_point(self):
        rng = np.random.default_rng(8)
        p = random_pose(rng)
        line1 = pose_to_tum_line(3.25, p)
        stamp, q = pose_from_tum_line(line1)
        assert stamp == 3.25
        line2 = pose_to_tum_line(stamp, q)
        # bit-exact after the first quantizing round trip
        assert line1 == line2
        assert q.is_close(p, 1e-6)

    def test_field_count_error(self):
        with pytest.raises(ValueError):
            pose_from_tum_line("1 2 3")
