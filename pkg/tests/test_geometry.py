import math

import numpy as np
import pytest

from splatba.errors import DegenerateInputError
from splatba.geometry import (
    CameraIntrinsics,
    CameraPose,
    PoseParams6D,
    decode_translation,
    fov_to_focal,
    fov_to_focal_grad,
    intrinsics_from_json,
    intrinsics_to_json,
    normalize_poses,
    pose_angular_errors,
    poses_from_json,
    poses_to_json,
    project,
    quat_to_matrix,
    quat_to_matrix_batch,
    rot6d_to_matrix,
    rot6d_to_matrix_vjp,
    unproject,
)


def random_rotation(rng):
    q = rng.normal(size=4)
    return quat_to_matrix(q)


def random_pose(rng, trans_scale=2.0):
    return CameraPose(random_rotation(rng), rng.uniform(-trans_scale, trans_scale, 3))


class TestFovToFocal:
    def test_right_angle(self):
        assert fov_to_focal(math.pi / 2, 224) == pytest.approx(112.0, abs=1e-12)

    def test_focal_equals_width(self):
        assert fov_to_focal(2 * math.atan(0.5), 224) == pytest.approx(224.0, abs=1e-9)

    def test_domain_errors(self):
        with pytest.raises(ValueError):
            fov_to_focal(0.0, 224)
        with pytest.raises(ValueError):
            fov_to_focal(math.pi, 224)
        with pytest.raises(ValueError):
            fov_to_focal(1.0, 0)

    def test_gradient_matches_finite_difference(self):
        h = 1e-7
        for fov in (0.4, 1.0, 2.2):
            fd = (fov_to_focal(fov + h, 100) - fov_to_focal(fov - h, 100)) / (2 * h)
            assert fov_to_focal_grad(fov, 100) == pytest.approx(fd, rel=1e-6)


class TestRot6d:
    def test_identity(self):
        np.testing.assert_allclose(
            rot6d_to_matrix([1, 0, 0, 0, 1, 0]), np.eye(3), atol=1e-15
        )

    def test_scale_invariance(self):
        np.testing.assert_allclose(
            rot6d_to_matrix([2, 0, 0, 0, 3, 0]), np.eye(3), atol=1e-15
        )

    def test_parallel_inputs_degenerate(self):
        with pytest.raises(DegenerateInputError):
            rot6d_to_matrix([1, 0, 0, 1e-12, 0, 0])

    def test_zero_first_vector_degenerate(self):
        with pytest.raises(DegenerateInputError):
            rot6d_to_matrix([0, 0, 0, 0, 1, 0])

    def test_orthonormality_over_random_inputs(self):
        rng = np.random.default_rng(0)
        for _ in range(10_000):
            r = rng.normal(size=6)
            if (
                np.linalg.norm(r[:3]) < 1e-3
                or np.linalg.norm(np.cross(r[:3], r[3:])) < 1e-3
            ):
                continue
            R = rot6d_to_matrix(r)
            assert np.max(np.abs(R.T @ R - np.eye(3))) < 1e-6
            assert abs(np.linalg.det(R) - 1.0) < 1e-6

    def test_positive_scaling_invariance(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            r = rng.normal(size=6)
            scaled = np.concatenate([r[:3] * 2.5, r[3:] * 0.3])
            np.testing.assert_allclose(
                rot6d_to_matrix(r), rot6d_to_matrix(scaled), atol=1e-12
            )

    def test_vjp_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        h = 1e-6
        for _ in range(20):
            r = rng.normal(size=6)
            W = rng.normal(size=(3, 3))
            g = rot6d_to_matrix_vjp(r, W)
            for j in range(6):
                rp, rm = r.copy(), r.copy()
                rp[j] += h
                rm[j] -= h
                fd = (np.sum(W * rot6d_to_matrix(rp)) - np.sum(W * rot6d_to_matrix(rm))) / (2 * h)
                assert g[j] == pytest.approx(fd, rel=1e-5, abs=1e-8)


class TestQuatToMatrix:
    def test_identity(self):
        np.testing.assert_allclose(quat_to_matrix([1, 0, 0, 0]), np.eye(3), atol=1e-15)

    def test_half_turn_about_z(self):
        np.testing.assert_allclose(
            quat_to_matrix([0, 0, 0, 1]), np.diag([-1.0, -1.0, 1.0]), atol=1e-15
        )

    def test_normalization(self):
        np.testing.assert_allclose(quat_to_matrix([2, 0, 0, 0]), np.eye(3), atol=1e-15)

    def test_sign_symmetry_exact(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            q = rng.normal(size=4)
            assert np.array_equal(quat_to_matrix(q), quat_to_matrix(-q))

    def test_positive_scaling(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            q = rng.normal(size=4)
            np.testing.assert_allclose(
                quat_to_matrix(q), quat_to_matrix(3.7 * q), atol=1e-12
            )

    def test_near_zero_degenerate(self):
        with pytest.raises(DegenerateInputError):
            quat_to_matrix([1e-12, 0, 0, 0])

    def test_batch_matches_single(self):
        rng = np.random.default_rng(5)
        q = rng.normal(size=(40, 4))
        batch = quat_to_matrix_batch(q)
        for i in range(40):
            np.testing.assert_allclose(batch[i], quat_to_matrix(q[i]), atol=1e-14)


class TestNormalizePoses:
    def test_all_identical_become_identity(self):
        rng = np.random.default_rng(6)
        q = random_pose(rng)
        out = normalize_poses([q, q, q])
        for p in out:
            np.testing.assert_allclose(p.rotation, np.eye(3), atol=1e-12)
            np.testing.assert_allclose(p.translation, 0.0, atol=1e-12)

    def test_first_already_canonical(self):
        rng = np.random.default_rng(7)
        q = random_pose(rng)
        out = normalize_poses([CameraPose.identity(), q])
        np.testing.assert_allclose(out[1].rotation, q.rotation, atol=1e-12)
        np.testing.assert_allclose(out[1].translation, q.translation, atol=1e-12)

    def test_compose_and_compare_oracle(self):
        # out[1] must satisfy A o out[1] = B
        rng = np.random.default_rng(8)
        for _ in range(30):
            a, b = random_pose(rng), random_pose(rng)
            out = normalize_poses([a, b])
            recomposed = a.compose(out[1])
            np.testing.assert_allclose(recomposed.rotation, b.rotation, atol=1e-12)
            np.testing.assert_allclose(recomposed.translation, b.translation, atol=1e-12)

    def test_pairwise_relative_transforms_preserved(self):
        rng = np.random.default_rng(9)
        poses = [random_pose(rng) for _ in range(5)]
        out = normalize_poses(poses)
        for i in range(5):
            for j in range(5):
                rel_in = poses[i].inverse().compose(poses[j])
                rel_out = out[i].inverse().compose(out[j])
                assert np.max(np.abs(rel_in.rotation - rel_out.rotation)) < 1e-9
                assert np.max(np.abs(rel_in.translation - rel_out.translation)) < 1e-9

    def test_empty_list_rejected(self):
        with pytest.raises(ValueError):
            normalize_poses([])


class TestProjectUnproject:
    def K(self):
        return CameraIntrinsics(2 * math.atan(0.5), 224, 224)

    def test_principal_point_unprojects_on_axis(self):
        K = self.K()
        p = unproject(K.principal_point, 5.0, K, CameraPose.identity())
        np.testing.assert_allclose(p, [0, 0, 5], atol=1e-12)

    def test_unit_tangent_offset(self):
        K = self.K()
        cx, cy = K.principal_point
        p = unproject((cx + K.focal_px, cy), 5.0, K, CameraPose.identity())
        np.testing.assert_allclose(p, [5, 0, 5], atol=1e-9)

    def test_project_on_axis(self):
        K = self.K()
        (u, v), depth = project(np.array([0, 0, 5.0]), K, CameraPose.identity())
        assert (u, v) == pytest.approx(K.principal_point, abs=1e-12)
        assert depth == pytest.approx(5.0)

    def test_project_focal_offset(self):
        K = self.K()
        cx, cy = K.principal_point
        (u, v), depth = project(np.array([5, 0, 5.0]), K, CameraPose.identity())
        assert u == pytest.approx(cx + K.focal_px, abs=1e-9)
        assert v == pytest.approx(cy, abs=1e-12)

    def test_behind_camera_signal(self):
        K = self.K()
        assert project(np.array([0.0, 0, 0]), K, CameraPose.identity()) is None
        assert project(np.array([0.0, 0, -1]), K, CameraPose.identity()) is None

    def test_non_positive_depth_rejected(self):
        with pytest.raises(ValueError):
            unproject((0, 0), 0.0, self.K(), CameraPose.identity())

    def test_round_trip_oracle(self):
        rng = np.random.default_rng(10)
        K = self.K()
        for _ in range(100):
            pose = random_pose(rng)
            pixel = (rng.uniform(0, 223), rng.uniform(0, 223))
            depth = rng.uniform(0.1, 50)
            point = unproject(pixel, depth, K, pose)
            (u, v), z = project(point, K, pose)
            assert u == pytest.approx(pixel[0], abs=1e-6)
            assert v == pytest.approx(pixel[1], abs=1e-6)
            assert z == pytest.approx(depth, abs=1e-6)

    def test_project_then_unproject(self):
        rng = np.random.default_rng(11)
        K = self.K()
        for _ in range(100):
            pose = random_pose(rng)
            point = pose.apply(
                np.array([rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(0.5, 20)])
            )
            res = project(point, K, pose)
            assert res is not None
            (u, v), z = res
            back = unproject((u, v), z, K, pose)
            np.testing.assert_allclose(back, point, atol=1e-6)


class TestPoseAngularErrors:
    def test_identity_pair_zero(self):
        assert pose_angular_errors(CameraPose.identity(), CameraPose.identity()) == (0.0, 0.0)

    def test_half_turn_and_orthogonal_translation(self):
        pred = CameraPose(np.diag([-1.0, -1.0, 1.0]), np.array([1.0, 0, 0]))
        gt = CameraPose(np.eye(3), np.array([0.0, 1.0, 0]))
        rot, trans = pose_angular_errors(pred, gt)
        assert rot == pytest.approx(180.0)
        assert trans == pytest.approx(90.0)

    def test_single_near_zero_translation_convention(self):
        pred = CameraPose(np.eye(3), np.zeros(3))
        gt = CameraPose(np.eye(3), np.array([1.0, 0, 0]))
        assert pose_angular_errors(pred, gt)[1] == 90.0

    def test_self_error_is_zero(self):
        # the arccos form has a ~1e-6 deg precision floor near zero rotation
        rng = np.random.default_rng(12)
        for _ in range(20):
            p = random_pose(rng)
            rot, trans = pose_angular_errors(p, p)
            assert rot == pytest.approx(0.0, abs=5e-6)
            assert trans == pytest.approx(0.0, abs=5e-6)

    def test_geodesic_angle_oracle(self):
        # independent oracle: atan2 of the skew part's norm vs the trace term
        def angle_oracle_deg(R_a, R_b):
            R = R_a.T @ R_b
            skew = 0.5 * np.array([
                R[2, 1] - R[1, 2],
                R[0, 2] - R[2, 0],
                R[1, 0] - R[0, 1],
            ])
            return math.degrees(
                math.atan2(np.linalg.norm(skew), (np.trace(R) - 1.0) / 2.0)
            )

        rng = np.random.default_rng(13)
        for _ in range(50):
            a, b = random_pose(rng), random_pose(rng)
            rot, _ = pose_angular_errors(a, b)
            assert rot == pytest.approx(angle_oracle_deg(a.rotation, b.rotation), abs=1e-6)


class TestPoseParams6D:
    def test_identity_decodes_exactly(self):
        p = PoseParams6D.identity().decode()
        assert np.array_equal(p.rotation, np.eye(3))
        assert np.array_equal(p.translation, np.zeros(3))

    def test_encode_decode_round_trip(self):
        rng = np.random.default_rng(14)
        for _ in range(30):
            pose = random_pose(rng)
            back = PoseParams6D.from_pose(pose).decode()
            np.testing.assert_allclose(back.rotation, pose.rotation, atol=1e-12)
            np.testing.assert_allclose(back.translation, pose.translation, atol=1e-12)

    def test_homogeneous_guard(self):
        with pytest.raises(DegenerateInputError):
            decode_translation(np.array([1.0, 2.0, 3.0, 1e-9]))

    def test_homogeneous_division(self):
        np.testing.assert_allclose(
            decode_translation(np.array([2.0, 4.0, 6.0, 2.0])), [1, 2, 3], atol=1e-15
        )


class TestPoseValidation:
    def test_non_orthonormal_rejected(self):
        R = np.eye(3)
        R[0, 1] = 1e-3
        with pytest.raises(ValueError):
            CameraPose(R, np.zeros(3))

    def test_reflection_rejected(self):
        with pytest.raises(ValueError):
            CameraPose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))

    def test_intrinsics_validation(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(0.0, 10, 10)
        with pytest.raises(ValueError):
            CameraIntrinsics(1.0, 0, 10)


class TestJsonFormats:
    def test_pose_round_trip(self):
        rng = np.random.default_rng(15)
        poses = [random_pose(rng) for _ in range(4)]
        back = poses_from_json(poses_to_json(poses))
        for a, b in zip(poses, back):
            np.testing.assert_allclose(a.rotation, b.rotation, atol=0)
            np.testing.assert_allclose(a.translation, b.translation, atol=0)

    def test_intrinsics_round_trip(self):
        K = CameraIntrinsics(1.234, 64, 48)
        back = intrinsics_from_json(intrinsics_to_json(K))
        assert back.width_px == 64 and back.height_px == 48
        assert back.fov_rad == pytest.approx(K.fov_rad, rel=1e-15)

    def test_malformed_pose_record(self):
        with pytest.raises(ValueError):
            poses_from_json('[{"rotation": [1, 2, 3]}]')
