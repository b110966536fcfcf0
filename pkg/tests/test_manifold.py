import math

import numpy as np
import pytest

from objslam.manifold import (
    CameraIntrinsics,
    InvalidDepth,
    InvalidProjection,
    Pose,
    Quaternion,
    backproject,
    backproject_grid,
    boxminus,
    boxminus_jacobians,
    boxplus,
    exp_so3,
    inv_left_jacobian_so3,
    left_jacobian_so3,
    load_calibration,
    log_so3,
    project,
    project_points,
    save_calibration,
    skew,
)


def matrix_exp_series(phi, terms=30):
    """Independent oracle: rotation matrix exponential by power series."""
    A = skew(phi)
    R = np.eye(3)
    term = np.eye(3)
    for k in range(1, terms):
        term = term @ A / k
        R = R + term
    return R


def random_state(rng):
    from objslam.manifold import StateVector

    q = exp_so3(rng.uniform(-math.pi * 0.9, math.pi * 0.9, 3) * rng.uniform(0, 1))
    return StateVector(rng.normal(0, 2, 3), q, rng.normal(0, 1, 3), rng.normal(0, 0.05, 3), rng.normal(0, 0.2, 3))


K = CameraIntrinsics(600.0, 600.0, 320.0, 240.0, 640, 480, baseline=0.05)


class TestExpSo3:
    def test_zero_rotation(self):
        q = exp_so3([0.0, 0.0, 0.0])
        assert q.w == pytest.approx(1.0) and np.allclose(q.vec, 0.0)

    def test_half_turn_about_z(self):
        q = exp_so3([0.0, 0.0, math.pi])
        assert abs(q.w) < 1e-12
        assert np.allclose(q.vec, [0.0, 0.0, 1.0], atol=1e-12)

    def test_matches_power_series_oracle(self):
        phi = np.array([0.1, 0.2, 0.3])
        R_oracle = matrix_exp_series(phi)
        assert np.allclose(exp_so3(phi).rotation_matrix(), R_oracle, atol=1e-12)

    def test_inverse_property(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            phi = rng.normal(0, 1.5, 3)
            q = exp_so3(phi) * exp_so3(-phi)
            assert abs(q.w) > 1.0 - 1e-9 and np.linalg.norm(q.vec) < 1e-9

    def test_log_roundtrip(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            phi = rng.normal(0, 1, 3)
            if np.linalg.norm(phi) >= math.pi:
                continue
            assert np.allclose(log_so3(exp_so3(phi)), phi, atol=1e-9)

    def test_small_angle(self):
        phi = np.array([1e-10, -2e-10, 5e-11])
        assert np.allclose(log_so3(exp_so3(phi)), phi, atol=1e-18)


class TestPose:
    def test_composition_matches_matrix_product(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            A = Pose(exp_so3(rng.normal(0, 1, 3)), rng.normal(0, 2, 3))
            B = Pose(exp_so3(rng.normal(0, 1, 3)), rng.normal(0, 2, 3))
            assert np.allclose((A * B).matrix(), A.matrix() @ B.matrix(), atol=1e-9)

    def test_inverse_of_composition(self):
        rng = np.random.default_rng(6)
        A = Pose(exp_so3(rng.normal(0, 1, 3)), rng.normal(0, 2, 3))
        B = Pose(exp_so3(rng.normal(0, 1, 3)), rng.normal(0, 2, 3))
        lhs = (A * B).inverse().matrix()
        rhs = (B.inverse() * A.inverse()).matrix()
        assert np.allclose(lhs, rhs, atol=1e-9)

    def test_transform_points(self):
        T = Pose(exp_so3([0, 0, math.pi / 2]), [1.0, 0.0, 0.0])
        p = T.transform([1.0, 0.0, 0.0])
        assert np.allclose(p, [1.0, 1.0, 0.0], atol=1e-12)
        P = T.transform(np.array([[1.0, 0, 0], [0, 1.0, 0]]))
        assert np.allclose(P[0], [1.0, 1.0, 0.0], atol=1e-12)

    def test_from_matrix_roundtrip(self):
        rng = np.random.default_rng(7)
        T = Pose(exp_so3(rng.normal(0, 1, 3)), rng.normal(0, 2, 3))
        assert np.allclose(Pose.from_matrix(T.matrix()).matrix(), T.matrix(), atol=1e-12)


class TestBoxOps:
    def test_boxplus_identity(self):
        rng = np.random.default_rng(8)
        x = random_state(rng)
        y = boxplus(x, np.zeros(15))
        assert np.allclose(boxminus(y, x), 0.0, atol=1e-12)

    def test_boxplus_translation(self):
        from objslam.manifold import StateVector

        x = StateVector()
        d = np.zeros(15)
        d[0] = 1.0
        y = boxplus(x, d)
        assert np.allclose(y.r_WC, [1.0, 0.0, 0.0])
        assert y.q_WC.w == pytest.approx(1.0)

    def test_boxplus_quarter_turn(self):
        from objslam.manifold import StateVector

        x = StateVector()
        d = np.zeros(15)
        d[5] = math.pi / 2
        y = boxplus(x, d)
        expect = exp_so3([0, 0, math.pi / 2])
        assert np.allclose(y.q_WC.to_array(), expect.to_array(), atol=1e-12)
        assert np.allclose(y.r_WC, 0.0) and np.allclose(y.v_S, 0.0)

    def test_roundtrip_1000_random_pairs(self):
        rng = np.random.default_rng(9)
        for _ in range(1000):
            x0 = random_state(rng)
            x1 = random_state(rng)
            d = boxminus(x1, x0)
            x1b = boxplus(x0, d)
            assert np.linalg.norm(boxminus(x1b, x1)) < 1e-9

    def test_delta_recovery(self):
        rng = np.random.default_rng(10)
        for _ in range(200):
            x = random_state(rng)
            d = rng.normal(0, 0.5, 15)
            d[3:6] = rng.uniform(-1, 1, 3) * (math.pi * 0.9 / max(1e-9, np.linalg.norm(rng.uniform(-1, 1, 3))))
            d[3:6] = rng.normal(0, 0.8, 3)
            if np.linalg.norm(d[3:6]) >= math.pi:
                continue
            out = boxminus(boxplus(x, d), x)
            assert np.allclose(out, d, atol=1e-9)

    def test_boxminus_jacobians_match_fd(self):
        rng = np.random.default_rng(11)
        eps = 1e-6
        for _ in range(20):
            x0 = random_state(rng)
            x1 = boxplus(x0, rng.normal(0, 0.3, 15))
            J1, J0 = boxminus_jacobians(x1, x0)
            e0 = boxminus(x1, x0)
            for j in range(15):
                d = np.zeros(15)
                d[j] = eps
                fd1 = (boxminus(boxplus(x1, d), x0) - boxminus(boxplus(x1, -d), x0)) / (2 * eps)
                fd0 = (boxminus(x1, boxplus(x0, d)) - boxminus(x1, boxplus(x0, -d))) / (2 * eps)
                assert np.allclose(J1[:, j], fd1, atol=1e-5)
                assert np.allclose(J0[:, j], fd0, atol=1e-5)


class TestSo3Jacobians:
    def test_left_jacobian_definition(self):
        # Exp(phi + d) ~ Exp(J_l(phi) d) Exp(phi)
        rng = np.random.default_rng(12)
        eps = 1e-7
        for _ in range(20):
            phi = rng.normal(0, 1, 3)
            Jl = left_jacobian_so3(phi)
            for j in range(3):
                d = np.zeros(3)
                d[j] = eps
                dR = exp_so3(phi + d).rotation_matrix() @ exp_so3(phi).rotation_matrix().T
                w = log_so3(Quaternion.from_rotation_matrix(dR)) / eps
                assert np.allclose(w, Jl[:, j], atol=1e-5)

    def test_inverse_consistency(self):
        rng = np.random.default_rng(13)
        for _ in range(20):
            phi = rng.normal(0, 1, 3)
            assert np.allclose(left_jacobian_so3(phi) @ inv_left_jacobian_so3(phi), np.eye(3), atol=1e-9)


class TestCamera:
    def test_project_on_axis(self):
        assert np.allclose(project(K, [0, 0, 2.0]), [320.0, 240.0])

    def test_project_off_axis(self):
        assert np.allclose(project(K, [1.0, 0, 2.0]), [620.0, 240.0])

    def test_project_behind_camera(self):
        with pytest.raises(InvalidProjection):
            project(K, [0, 0, -1.0])

    def test_backproject(self):
        assert np.allclose(backproject(K, [320, 240], 2.0), [0, 0, 2.0])
        assert np.allclose(backproject(K, [620, 240], 2.0), [1.0, 0, 2.0])

    def test_backproject_invalid(self):
        with pytest.raises(InvalidDepth):
            backproject(K, [100, 100], 0.0)

    def test_projection_roundtrip(self):
        rng = np.random.default_rng(14)
        for _ in range(200):
            u = np.array([rng.uniform(0, 639), rng.uniform(0, 479)])
            d = rng.uniform(0.1, 10.0)
            p = backproject(K, u, d)
            assert p[2] == pytest.approx(d)
            assert np.allclose(project(K, p), u, atol=1e-6)

    def test_vectorized_matches_scalar(self):
        rng = np.random.default_rng(15)
        P = rng.normal(0, 1, (50, 3)) + np.array([0, 0, 3.0])
        uv, valid = project_points(K, P)
        for i in range(50):
            if valid[i]:
                assert np.allclose(uv[i], project(K, P[i]), atol=1e-12)

    def test_backproject_grid(self):
        depth = np.full((480, 640), 2.0)
        depth[0, 0] = 0.0
        verts, valid = backproject_grid(K, depth)
        assert not valid[0, 0]
        assert np.allclose(verts[240, 320], [0, 0, 2.0])

    def test_bad_intrinsics_rejected(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(-1.0, 600, 320, 240, 640, 480)
        with pytest.raises(ValueError):
            CameraIntrinsics(600, 600, 900, 240, 640, 480)


def test_calibration_roundtrip(tmp_path):
    T_SC = Pose(exp_so3([0.01, -0.02, 0.03]), np.array([0.005, -0.002, 0.01]))
    path = tmp_path / "calib.txt"
    save_calibration(path, K, T_SC)
    K2, T2 = load_calibration(path)
    assert K2 == K
    assert np.allclose(T2.matrix(), T_SC.matrix(), atol=1e-12)


def test_calibration_unknown_key(tmp_path):
    path = tmp_path / "calib.txt"
    save_calibration(path, K, Pose.identity())
    with open(path, "a") as f:
        f.write("bogus 1.0\n")
    with pytest.raises(ValueError):
        load_calibration(path)
