import math

import numpy as np
import pytest

from splatba.errors import DegenerateInputError, ParseError
from splatba.gaussians import (
    DepthMap,
    GaussianSet,
    activate_depth,
    activate_depth_grad,
    build_covariance,
    build_covariance_batch,
    build_covariance_batch_vjp,
    eval_sh,
    eval_sh_batch,
    eval_sh_batch_vjp,
    lift_depth_to_centers,
    load_gaussians,
    save_gaussians,
    sigmoid,
)
from splatba.geometry import CameraIntrinsics, CameraPose, project, quat_to_matrix


def random_gaussians(rng, n, degree=0):
    k = (degree + 1) ** 2
    return GaussianSet(
        centers=rng.normal(0, 2, (n, 3)) + [0, 0, 6],
        quats=rng.normal(size=(n, 4)),
        log_scales=rng.uniform(-2.5, -0.5, (n, 3)),
        opacity_logits=rng.uniform(-2, 2, n),
        sh_coeffs=rng.uniform(-0.5, 0.5, (n, k, 3)),
        sh_degree=degree,
    )


class TestActivateDepth:
    def test_midpoint(self):
        assert activate_depth(0.0, 1.0, 100.0) == pytest.approx(50.5, abs=1e-12)

    def test_three_quarters(self):
        assert activate_depth(math.log(3), 0.001, 4.001) == pytest.approx(3.001, rel=1e-12)

    def test_bounds_never_attained(self):
        # moderate logits: float rounding can reach the bound for |raw| > ~36
        assert activate_depth(30.0, 1.0, 100.0) < 100.0
        assert activate_depth(-30.0, 1.0, 100.0) > 1.0
        assert activate_depth(1e4, 1.0, 100.0) == pytest.approx(100.0)

    def test_monotone(self):
        raws = np.linspace(-8, 8, 200)
        vals = activate_depth(raws, 0.1, 10.0)
        assert np.all(np.diff(vals) > 0)

    def test_bad_planes(self):
        with pytest.raises(ValueError):
            activate_depth(0.0, 2.0, 1.0)
        with pytest.raises(ValueError):
            activate_depth(0.0, 0.0, 1.0)

    def test_derivative_matches_central_difference(self):
        rng = np.random.default_rng(0)
        h = 1e-6
        for raw in rng.uniform(-4, 4, 50):
            fd = (activate_depth(raw + h, 0.5, 20.0) - activate_depth(raw - h, 0.5, 20.0)) / (2 * h)
            assert activate_depth_grad(raw, 0.5, 20.0) == pytest.approx(fd, rel=1e-6)


class TestSigmoid:
    def test_extremes_are_finite(self):
        assert sigmoid(1000.0) == 1.0
        assert sigmoid(-1000.0) == 0.0

    def test_symmetry(self):
        x = np.linspace(-30, 30, 101)
        np.testing.assert_allclose(sigmoid(x) + sigmoid(-x), 1.0, atol=1e-15)


class TestLiftDepth:
    def K(self, w=8, h=6):
        return CameraIntrinsics(2 * math.atan(0.5), w, h)

    def test_constant_depth_plane(self):
        K = self.K()
        dm = DepthMap(np.zeros((6, 8)), near=1.0, far=3.0)
        centers = lift_depth_to_centers(dm, K, CameraPose.identity())
        np.testing.assert_allclose(centers[..., 2], 2.0, atol=1e-12)

    def test_single_pixel_principal_point(self):
        K = CameraIntrinsics(2 * math.atan(0.5), 1, 1)
        raw = np.full((1, 1), math.log(3))  # sigmoid -> 0.75
        dm = DepthMap(raw, near=0.0001, far=4.0001)
        centers = lift_depth_to_centers(dm, K, CameraPose.identity())
        np.testing.assert_allclose(centers[0, 0], [0, 0, 3.0001], atol=1e-9)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            lift_depth_to_centers(DepthMap(np.zeros((4, 4))), self.K(), CameraPose.identity())

    def test_reprojection_round_trip(self):
        rng = np.random.default_rng(1)
        K = self.K(10, 10)
        q = rng.normal(size=4)
        pose = CameraPose(quat_to_matrix(q), rng.uniform(-1, 1, 3))
        dm = DepthMap(rng.uniform(-2, 2, (10, 10)), near=1.0, far=9.0)
        centers = lift_depth_to_centers(dm, K, pose)
        depths = dm.activated()
        for y in range(10):
            for x in range(10):
                res = project(centers[y, x], K, pose)
                assert res is not None
                (u, v), z = res
                assert u == pytest.approx(x, abs=1e-5)
                assert v == pytest.approx(y, abs=1e-5)
                assert z == pytest.approx(depths[y, x], abs=1e-9)

    def test_ray_membership(self):
        # center minus depth*direction lands back on the camera origin
        rng = np.random.default_rng(2)
        K = self.K(10, 10)
        pose = CameraPose(quat_to_matrix(rng.normal(size=4)), rng.uniform(-1, 1, 3))
        dm = DepthMap(rng.uniform(-2, 2, (10, 10)), near=0.5, far=4.0)
        centers = lift_depth_to_centers(dm, K, pose)
        cam = pose.translation
        depths = dm.activated()
        dirs = (centers - cam) / depths[..., None]  # z-normalized ray directions
        origins = centers - depths[..., None] * dirs
        assert np.max(np.linalg.norm(origins - cam, axis=-1)) < 1e-9

    def test_z_within_planes(self):
        rng = np.random.default_rng(3)
        K = self.K(10, 10)
        pose = CameraPose(quat_to_matrix(rng.normal(size=4)), rng.uniform(-1, 1, 3))
        dm = DepthMap(rng.uniform(-5, 5, (10, 10)), near=0.5, far=4.0)
        centers = lift_depth_to_centers(dm, K, pose)
        z = ((centers - pose.translation) @ pose.rotation)[..., 2]
        assert np.all(z > 0.5) and np.all(z < 4.0)


class TestCovariance:
    def test_axis_aligned(self):
        cov = build_covariance([1, 0, 0, 0], [0.0, math.log(2), math.log(3)])
        np.testing.assert_allclose(cov, np.diag([1.0, 4.0, 9.0]), atol=1e-12)

    def test_isotropic_any_rotation(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            cov = build_covariance(rng.normal(size=4), [0.0, 0.0, 0.0])
            np.testing.assert_allclose(cov, np.eye(3), atol=1e-12)

    def test_eigenvalue_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            q = rng.normal(size=4)
            ls = rng.uniform(-2, 1, 3)
            cov = build_covariance(q, ls)
            eig = np.sort(np.linalg.eigvalsh(cov))
            np.testing.assert_allclose(eig, np.sort(np.exp(2 * ls)), rtol=1e-9)

    def test_symmetry_and_psd(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            cov = build_covariance(rng.normal(size=4), rng.uniform(-2, 1, 3))
            assert np.max(np.abs(cov - cov.T)) < 1e-12
            x = rng.normal(size=(1000, 3))
            assert np.all(np.einsum("ni,ij,nj->n", x, cov, x) >= 0)

    def test_degenerate_quaternion(self):
        with pytest.raises(DegenerateInputError):
            build_covariance([0, 0, 0, 0], [0, 0, 0])

    def test_batch_matches_single(self):
        rng = np.random.default_rng(7)
        q = rng.normal(size=(20, 4))
        ls = rng.uniform(-2, 1, (20, 3))
        batch = build_covariance_batch(q, ls)
        for i in range(20):
            np.testing.assert_allclose(batch[i], build_covariance(q[i], ls[i]), atol=1e-13)

    def test_vjp_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        h = 1e-6
        q = rng.normal(size=(5, 4))
        ls = rng.uniform(-1.5, 0.5, (5, 3))
        W = rng.normal(size=(5, 3, 3))
        d_q, d_ls = build_covariance_batch_vjp(q, ls, W)
        loss = lambda qq, ll: float(np.sum(W * build_covariance_batch(qq, ll)))
        for i in range(5):
            for j in range(4):
                qp, qm = q.copy(), q.copy()
                qp[i, j] += h
                qm[i, j] -= h
                fd = (loss(qp, ls) - loss(qm, ls)) / (2 * h)
                assert d_q[i, j] == pytest.approx(fd, rel=1e-5, abs=1e-9)
            for j in range(3):
                lp, lm = ls.copy(), ls.copy()
                lp[i, j] += h
                lm[i, j] -= h
                fd = (loss(q, lp) - loss(q, lm)) / (2 * h)
                assert d_ls[i, j] == pytest.approx(fd, rel=1e-5, abs=1e-9)


# real SH basis written out independently from a standard table
def sh_basis_oracle(d):
    x, y, z = d
    return np.array([
        0.5 * math.sqrt(1.0 / math.pi),
        -math.sqrt(3.0 / (4 * math.pi)) * y,
        math.sqrt(3.0 / (4 * math.pi)) * z,
        -math.sqrt(3.0 / (4 * math.pi)) * x,
        0.5 * math.sqrt(15.0 / math.pi) * x * y,
        -0.5 * math.sqrt(15.0 / math.pi) * y * z,
        0.25 * math.sqrt(5.0 / math.pi) * (3 * z * z - 1.0),
        -0.5 * math.sqrt(15.0 / math.pi) * x * z,
        0.25 * math.sqrt(15.0 / math.pi) * (x * x - y * y),
    ])


class TestEvalSh:
    def test_degree0_constant_coefficient(self):
        rgb = eval_sh(np.ones((1, 3)), [0, 0, 1.0], 0)
        np.testing.assert_allclose(rgb, 0.5 + 0.28209479177387814, atol=1e-9)

    def test_degree0_zero_coefficient(self):
        np.testing.assert_allclose(eval_sh(np.zeros((1, 3)), [1.0, 0, 0], 0), 0.5, atol=0)

    def test_degree0_direction_invariant_exactly(self):
        rng = np.random.default_rng(9)
        c = rng.uniform(-1, 1, (1, 3))
        d1 = np.array([0, 0, 1.0])
        d2 = rng.normal(size=3)
        d2 /= np.linalg.norm(d2)
        assert np.array_equal(eval_sh(c, d1, 0), eval_sh(c, d2, 0))

    def test_basis_table_oracle_degree2(self):
        rng = np.random.default_rng(10)
        for _ in range(30):
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            c = rng.uniform(-0.2, 0.2, (9, 3))
            expected = np.clip(0.5 + sh_basis_oracle(d) @ c, 0, 1)
            np.testing.assert_allclose(eval_sh(c, d, 2), expected, atol=1e-9)

    def test_degree1_oracle(self):
        rng = np.random.default_rng(11)
        c = rng.uniform(-0.3, 0.3, (4, 3))
        d = np.array([0.0, 0.0, 1.0])
        expected = np.clip(0.5 + sh_basis_oracle(d)[:4] @ c, 0, 1)
        np.testing.assert_allclose(eval_sh(c, d, 1), expected, atol=1e-9)

    def test_coefficient_count_mismatch(self):
        with pytest.raises(ValueError):
            eval_sh(np.zeros((4, 3)), [0, 0, 1.0], 0)

    def test_non_unit_direction(self):
        with pytest.raises(ValueError):
            eval_sh(np.zeros((1, 3)), [0, 0, 2.0], 0)

    def test_batch_vjp_finite_differences(self):
        rng = np.random.default_rng(12)
        h = 1e-6
        n, deg, k = 4, 2, 9
        c = rng.uniform(-0.2, 0.2, (n, k, 3))
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        W = rng.normal(size=(n, 3))
        loss = lambda cc, dd: float(np.sum(W * eval_sh_batch(cc, dd, deg)))
        d_c, d_d = eval_sh_batch_vjp(c, d, deg, W)
        for i in range(n):
            for jk in range(k):
                cp, cm = c.copy(), c.copy()
                cp[i, jk, 1] += h
                cm[i, jk, 1] -= h
                fd = (loss(cp, d) - loss(cm, d)) / (2 * h)
                assert d_c[i, jk, 1] == pytest.approx(fd, rel=1e-5, abs=1e-9)
        # direction gradient (unconstrained, before re-normalization)
        for i in range(n):
            for j in range(3):
                dp, dm = d.copy(), d.copy()
                dp[i, j] += h
                dm[i, j] -= h
                fd = (loss(c, dp) - loss(c, dm)) / (2 * h)
                assert d_d[i, j] == pytest.approx(fd, rel=1e-4, abs=1e-8)


class TestSerialization:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(13)
        gs = random_gaussians(rng, 17, degree=1)
        # store values already on the f32 grid so the round trip is exact
        gs = GaussianSet(
            gs.centers.astype(np.float32).astype(np.float64),
            gs.quats.astype(np.float32).astype(np.float64),
            gs.log_scales.astype(np.float32).astype(np.float64),
            gs.opacity_logits.astype(np.float32).astype(np.float64),
            gs.sh_coeffs.astype(np.float32).astype(np.float64),
            1,
        )
        path = tmp_path / "g.bin"
        save_gaussians(gs, path, near=0.5, far=42.0)
        back, meta = load_gaussians(path)
        assert np.array_equal(back.centers, gs.centers)
        assert np.array_equal(back.quats, gs.quats)
        assert np.array_equal(back.sh_coeffs, gs.sh_coeffs)
        assert meta == {"sh_degree": 1, "near": 0.5, "far": 42.0}

    def test_truncated_file(self, tmp_path):
        rng = np.random.default_rng(14)
        gs = random_gaussians(rng, 5)
        path = tmp_path / "g.bin"
        save_gaussians(gs, path)
        data = path.read_bytes()
        path.write_bytes(data[:-7])
        with pytest.raises(ParseError) as exc:
            load_gaussians(path)
        assert exc.value.offset is not None

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "g.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(ParseError):
            load_gaussians(path)


class TestDepthMapType:
    def test_invariants(self):
        with pytest.raises(ValueError):
            DepthMap(np.zeros((2, 2)), near=2.0, far=1.0)

    def test_activated_strictly_inside(self):
        dm = DepthMap(np.array([[-25.0, 0.0, 25.0]]), near=1.0, far=2.0)
        act = dm.activated()
        assert np.all(act > 1.0) and np.all(act < 2.0)


class TestGaussianSetValidation:
    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            GaussianSet(
                centers=np.zeros((3, 3)),
                quats=np.zeros((2, 4)),
                log_scales=np.zeros((3, 3)),
                opacity_logits=np.zeros(3),
                sh_coeffs=np.zeros((3, 1, 3)),
            )
