import math

import numpy as np
import pytest

from echoguide.pose import (
    Action,
    Pose,
    action_to_matrix,
    apply_action,
    euler_to_matrix,
    invert_action,
    normalize_angle,
    pose_distance,
    pose_distance_many,
    pose_to_matrix,
    relative_action,
)


def random_pose(rng, max_pitch=89.0):
    t = rng.uniform(-100, 100, 3)
    a = rng.uniform(-179, 179, 3)
    a[1] = rng.uniform(-max_pitch, max_pitch)
    return Pose(*t, *a)


def poses_close(p, q, tol=1e-6):
    p, q = p.normalize(), q.normalize()
    dt = np.abs(p.translation - q.translation).max()
    da = max(abs(normalize_angle(a - b)) for a, b in zip(p.angles, q.angles))
    return max(dt, da) < tol


class TestNormalizeAngle:
    @pytest.mark.parametrize(
        "angle,expected",
        [(190.0, -170.0), (180.0, 180.0), (-540.0, 180.0), (0.0, 0.0), (-180.0, 180.0), (359.0, -1.0)],
    )
    def test_values(self, angle, expected):
        assert normalize_angle(angle) == pytest.approx(expected, abs=1e-12)

    def test_range(self):
        rng = np.random.default_rng(0)
        for a in rng.uniform(-1e4, 1e4, 1000):
            r = normalize_angle(float(a))
            assert -180.0 < r <= 180.0
            assert abs((r - a) % 360.0) < 1e-6 or abs((r - a) % 360.0 - 360.0) < 1e-6

    def test_non_finite_rejected(self):
        for bad in (math.nan, math.inf, -math.inf):
            with pytest.raises(ValueError):
                normalize_angle(bad)


class TestPoseToMatrix:
    def test_identity(self):
        assert np.allclose(pose_to_matrix(Pose(0, 0, 0, 0, 0, 0)), np.eye(4))

    def test_pure_translation(self):
        T = pose_to_matrix(Pose(1, 2, 3, 0, 0, 0))
        assert np.allclose(T[:3, :3], np.eye(3))
        assert np.allclose(T[:3, 3], [1, 2, 3])

    def test_z90_maps_x_to_y(self):
        T = pose_to_matrix(Pose(0, 0, 0, 0, 0, 90))
        assert np.allclose(T[:3, :3] @ [1, 0, 0], [0, 1, 0], atol=1e-12)

    def test_rotation_block_orthonormal(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            p = Pose(0, 0, 0, *rng.uniform(-180, 180, 3))
            R = pose_to_matrix(p)[:3, :3]
            assert np.abs(R.T @ R - np.eye(3)).max() < 1e-9
            assert abs(np.linalg.det(R) - 1.0) < 1e-9

    def test_finite_required(self):
        with pytest.raises(ValueError):
            Pose(0, 0, 0, 0, 0, math.nan)


class TestRelativeAction:
    def test_identity_pair(self):
        p = Pose(3, -4, 5, 10, 20, 30)
        a = relative_action(p, p)
        assert np.allclose(a.as_array(), 0.0, atol=1e-12)

    def test_world_frame_source(self):
        a = relative_action(Pose(0, 0, 0, 0, 0, 0), Pose(1, 2, 3, 0, 0, 0))
        assert np.allclose(a.as_array(), [1, 2, 3, 0, 0, 0], atol=1e-12)

    def test_rotated_source_frame(self):
        # Oracle: explicit matrix product. R = Rz(90); R^T (1,0,0) = (0,-1,0).
        a = relative_action(Pose(0, 0, 0, 0, 0, 90), Pose(1, 0, 0, 0, 0, 90))
        assert np.allclose(a.as_array(), [0, -1, 0, 0, 0, 0], atol=1e-9)

    def test_matches_matrix_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(500):
            p_i, p_j = random_pose(rng), random_pose(rng)
            a = relative_action(p_i, p_j)
            lhs = pose_to_matrix(p_i) @ action_to_matrix(a)
            assert np.abs(lhs - pose_to_matrix(p_j)).max() < 1e-9

    def test_gimbal_adjacent_never_raises(self):
        p_i = Pose(0, 0, 0, 0, 0, 0)
        for pitch in (90.0, -90.0, 90.0 - 1e-8, -90.0 + 1e-8):
            p_j = Pose(1, 1, 1, 25.0, pitch, 40.0)
            a = relative_action(p_i, p_j)
            lhs = pose_to_matrix(p_i) @ action_to_matrix(a)
            assert np.abs(lhs - pose_to_matrix(p_j)).max() < 1e-6


class TestApplyAction:
    def test_translation_from_identity(self):
        p = apply_action(Pose(0, 0, 0, 0, 0, 0), Action(1, 2, 3, 0, 0, 0))
        assert poses_close(p, Pose(1, 2, 3, 0, 0, 0))

    def test_zero_action(self):
        p = Pose(5, 6, 7, 15, -25, 35)
        assert poses_close(apply_action(p, Action(0, 0, 0, 0, 0, 0)), p)

    def test_round_trip_1000_random_pairs(self):
        rng = np.random.default_rng(3)
        worst = 0.0
        for _ in range(1000):
            p_i, p_j = random_pose(rng), random_pose(rng)
            p_back = apply_action(p_i, relative_action(p_i, p_j))
            dt = np.abs(p_back.translation - p_j.translation).max()
            da = max(abs(normalize_angle(a - b)) for a, b in zip(p_back.angles, p_j.normalize().angles))
            worst = max(worst, dt, da)
        assert worst < 1e-6


class TestInvertAction:
    def test_translation_only(self):
        inv = invert_action(Action(1, 2, 3, 0, 0, 0))
        assert np.allclose(inv.as_array(), [-1, -2, -3, 0, 0, 0], atol=1e-12)

    def test_involution(self):
        # Canonical-range pitch: the Euler triple itself round-trips. Beyond
        # +/-90 deg pitch only the underlying rotation is preserved.
        rng = np.random.default_rng(4)
        for _ in range(200):
            angles = rng.uniform(-170, 170, 3)
            angles[1] = rng.uniform(-89, 89)
            a = Action(*rng.uniform(-50, 50, 3), *angles)
            back = invert_action(invert_action(a))
            assert np.abs(back.as_array() - a.normalize().as_array()).max() < 1e-9

    def test_involution_matrix_level(self):
        rng = np.random.default_rng(40)
        for _ in range(200):
            a = Action(*rng.uniform(-50, 50, 3), *rng.uniform(-179, 179, 3))
            back = invert_action(invert_action(a))
            assert np.abs(action_to_matrix(back) - action_to_matrix(a)).max() < 1e-9

    def test_round_trip_through_pose(self):
        rng = np.random.default_rng(5)
        for _ in range(500):
            p = random_pose(rng)
            a = Action(*rng.uniform(-50, 50, 3), *rng.uniform(-170, 170, 3))
            back = apply_action(apply_action(p, a), invert_action(a))
            assert poses_close(back, p, tol=1e-6)


class TestPoseDistance:
    def test_identical_poses(self):
        p = Pose(1, 2, 3, 4, 5, 6)
        assert pose_distance(p, p) == 0.0

    def test_translation_only(self):
        d = pose_distance(Pose(0, 0, 0, 10, 20, 30), Pose(3, 4, 0, 10, 20, 30))
        assert d == pytest.approx(5.0)

    def test_wraparound_equal_poses(self):
        assert pose_distance(Pose(0, 0, 0, 0, 0, 179), Pose(0, 0, 0, 0, 0, -181)) < 1e-9

    def test_symmetry(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            p, q = random_pose(rng, max_pitch=179), random_pose(rng, max_pitch=179)
            assert pose_distance(p, q) == pytest.approx(pose_distance(q, p), abs=1e-9)

    def test_triangle_inequality(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            a, b, c = (random_pose(rng, max_pitch=179) for _ in range(3))
            assert pose_distance(a, c) <= pose_distance(a, b) + pose_distance(b, c) + 1e-6

    def test_vectorized_matches_scalar(self):
        rng = np.random.default_rng(8)
        ref = random_pose(rng)
        poses = np.stack([random_pose(rng).as_array() for _ in range(50)])
        many = pose_distance_many(poses, ref)
        for i in range(50):
            assert many[i] == pytest.approx(pose_distance(Pose.from_array(poses[i]), ref), abs=1e-9)


class TestLeftInvariance:
    def test_action_depends_only_on_relative_configuration(self):
        rng = np.random.default_rng(9)
        for _ in range(1000):
            g, p_i, p_j = (random_pose(rng) for _ in range(3))
            Tg = pose_to_matrix(g)
            from echoguide.pose import matrix_to_pose

            gp_i = matrix_to_pose(Tg @ pose_to_matrix(p_i))
            gp_j = matrix_to_pose(Tg @ pose_to_matrix(p_j))
            a = relative_action(p_i, p_j)
            a_g = relative_action(gp_i, gp_j)
            diff = a.as_array() - a_g.as_array()
            diff[3:] = [normalize_angle(d) for d in diff[3:]]
            assert np.abs(diff).max() < 1e-6
