import math
import warnings

import numpy as np
import pytest
from util_sim import (
    K_TEST,
    rendered_from_sim,
    sim_frame,
    state_at,
    stationary_batch,
    textured_wall_scene,
)

from objslam.imu import ImuNoiseParams, propagate
from objslam.manifold import (
    CameraIntrinsics,
    InvalidDepth,
    Pose,
    boxminus,
    boxplus,
    exp_so3,
)
from objslam.simulator import render_frame
from objslam.tracking import (
    Frame,
    MarginalizationPrior,
    TrackingConfig,
    cauchy,
    depth_stddev,
    icp_correspondence,
    icp_residual,
    icp_weight,
    make_initial_prior,
    marginalize_reference,
    photometric_residual,
    solve_tracking,
)

K600 = CameraIntrinsics(600.0, 600.0, 320.0, 240.0, 640, 480, baseline=0.05, sigma_xy=0.5, sigma_z=0.5)
PARAMS = ImuNoiseParams()


class TestCauchy:
    def test_zero(self):
        rho, w = cauchy(0.0, 0.1)
        assert rho == 0.0 and w == 1.0

    def test_at_scale(self):
        _, w = cauchy(0.1, 0.1)
        assert w == pytest.approx(0.5)

    def test_monotonicity_sweep(self):
        es = np.linspace(0, 5, 200)
        rhos, ws = zip(*(cauchy(e, 0.5) for e in es))
        assert all(b > a for a, b in zip(rhos, rhos[1:]))
        assert all(b < a for a, b in zip(ws, ws[1:]))


class TestDepthStddev:
    def test_reference_values(self):
        s = depth_stddev(K600, 2.0)
        assert np.allclose(s, [0.0016667, 0.0016667, 0.066667], atol=1e-6)

    def test_scaling_law(self):
        s1 = depth_stddev(K600, 1.3)
        s2 = depth_stddev(K600, 2.6)
        assert s2[0] == pytest.approx(2 * s1[0])
        assert s2[2] == pytest.approx(4 * s1[2])

    def test_invalid(self):
        with pytest.raises(InvalidDepth):
            depth_stddev(K600, 0.0)


class TestIcpWeight:
    def test_reference_value(self):
        w = icp_weight([0, 0, -1.0], depth_stddev(K600, 2.0))
        assert w == pytest.approx(224.7, abs=0.1)

    def test_inverse_square_scaling(self):
        s = depth_stddev(K600, 2.0)
        assert icp_weight([0, 0, 1.0], 2 * s) == pytest.approx(icp_weight([0, 0, 1.0], s) / 4)

    def test_cap(self):
        assert icp_weight([0, 0, 1.0], np.zeros(3), cap=1e6) == 1e6


class TestPhotometricResidual:
    def setup_method(self):
        self.scene = textured_wall_scene()
        self.T = Pose.identity()
        self.frame, _ = sim_frame(self.scene, self.T)
        self.rv = rendered_from_sim(self.scene, self.T)

    def test_identity_zero(self):
        for u in ([40, 30], [80, 60], [120, 90]):
            out = photometric_residual(self.T, self.T, K_TEST, self.frame.intensity,
                                       self.frame.intensity, self.rv.depth, u)
            assert out is not None
            assert abs(out[0]) < 1e-12

    def test_constant_brightness_offset(self):
        brighter = np.clip(self.frame.intensity + 0.1, 0, 1.1)
        for u in ([40, 30], [100, 70]):
            e, _ = photometric_residual(self.T, self.T, K_TEST, self.frame.intensity,
                                        brighter, self.rv.depth, u)
            assert e == pytest.approx(-0.1, abs=1e-12)

    def test_matches_rerender_difference(self):
        # camera shift of exactly one pixel of disparity at the wall depth:
        # warped pixels land on the integer grid, so the residual must equal
        # the raw re-rendered image difference
        shift = 2.0 / K_TEST.fx
        T_L = Pose(self.T.q, self.T.t + np.array([shift, 0.0, 0.0]))
        live, _ = sim_frame(self.scene, T_L)
        for u in ([40, 30], [80, 60], [119, 88]):
            e, _ = photometric_residual(T_L, self.T, K_TEST, self.frame.intensity,
                                        live.intensity, self.rv.depth, u)
            direct = self.frame.intensity[u[1], u[0]] - live.intensity[u[1], u[0] - 1]
            assert e == pytest.approx(direct, abs=1e-9)

    def test_warp_out_of_image(self):
        T_L = Pose(self.T.q, self.T.t + np.array([5.0, 0.0, 0.0]))
        live, _ = sim_frame(self.scene, T_L)
        out = photometric_residual(T_L, self.T, K_TEST, self.frame.intensity,
                                   live.intensity, self.rv.depth, [2, 60])
        assert out is None

    def test_jacobian_matches_fd(self):
        rng = np.random.default_rng(0)
        scene = textured_wall_scene(noise=True)
        ref_frame, _ = sim_frame(scene, self.T)
        rv = rendered_from_sim(scene, self.T)
        T_L = Pose(exp_so3([0.004, -0.006, 0.003]), np.array([0.01, -0.005, 0.008]))
        live, _ = sim_frame(scene, T_L)
        checked = 0
        for _ in range(40):
            u = [int(rng.integers(8, 150)), int(rng.integers(8, 110))]
            out = photometric_residual(T_L, self.T, K_TEST, ref_frame.intensity,
                                       live.intensity, rv.depth, u)
            if out is None:
                continue
            e0, J = out
            eps = 1e-7
            fd = np.zeros(6)
            skip = False
            for j in range(6):
                d = np.zeros(6)
                d[j] = eps
                Tp = Pose((exp_so3(d[3:]) * T_L.q).normalized(), T_L.t + d[:3])
                Tm = Pose((exp_so3(-d[3:]) * T_L.q).normalized(), T_L.t - d[:3])
                op = photometric_residual(Tp, self.T, K_TEST, ref_frame.intensity,
                                          live.intensity, rv.depth, u)
                om = photometric_residual(Tm, self.T, K_TEST, ref_frame.intensity,
                                          live.intensity, rv.depth, u)
                if op is None or om is None:
                    skip = True
                    break
                fd[j] = (op[0] - om[0]) / (2 * eps)
            if skip or np.linalg.norm(fd) < 1e-6:
                continue
            assert np.linalg.norm(J - fd) / np.linalg.norm(fd) < 1e-4
            checked += 1
        assert checked >= 10


class TestIcpOps:
    def test_correspondence_identity(self):
        D_L = np.full((120, 160), 2.0)
        uv = icp_correspondence(Pose.identity(), Pose.identity(), K_TEST, [50, 40], D_L)
        assert np.allclose(uv, [50, 40], atol=1e-9)

    def test_correspondence_z_translation_radial(self):
        D_L = np.full((120, 160), 2.0)
        T_L = Pose(Pose.identity().q, np.array([0.0, 0.0, 0.2]))  # camera moved toward scene
        c = np.array([K_TEST.cx, K_TEST.cy])
        for u in ([30, 20], [130, 100], [50, 90]):
            uv = icp_correspondence(T_L, Pose.identity(), K_TEST, u, D_L)
            d_new = uv - c
            d_old = np.asarray(u, dtype=float) - c
            # collinear with the principal point and pulled toward it
            cosang = d_new @ d_old / (np.linalg.norm(d_new) * np.linalg.norm(d_old))
            assert cosang > 1 - 1e-9
            assert np.linalg.norm(d_new) < np.linalg.norm(d_old)

    def test_correspondence_behind_camera(self):
        D_L = np.full((120, 160), 2.0)
        T_L = Pose(Pose.identity().q, np.array([0.0, 0.0, 5.0]))
        # reference camera far behind: warped point behind the reference
        T_R = Pose(Pose.identity().q, np.array([0.0, 0.0, 8.0]))
        assert icp_correspondence(T_L, T_R, K_TEST, [80, 60], D_L) is None

    def test_residual_on_plane_zero(self):
        e, _ = icp_residual(Pose.identity(), [0.3, -0.2, 1.0], [0.3, -0.2, 1.0], [0, 0, -1.0])
        assert e == 0.0

    def test_residual_sign_one_cm_in_front(self):
        e, _ = icp_residual(Pose.identity(), [0.0, 0.0, 0.99], [0.0, 0.0, 1.0], [0, 0, -1.0])
        assert e == pytest.approx(0.01)

    def test_jacobian_matches_fd(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            T = Pose(exp_so3(rng.normal(0, 0.2, 3)), rng.normal(0, 0.3, 3))
            v_L = rng.normal(0, 1, 3) + [0, 0, 2]
            v_r = rng.normal(0, 1, 3) + [0, 0, 2]
            n = rng.normal(0, 1, 3)
            n /= np.linalg.norm(n)
            _, J = icp_residual(T, v_L, v_r, n)
            eps = 1e-7
            fd = np.zeros(6)
            for j in range(6):
                d = np.zeros(6)
                d[j] = eps
                Tp = Pose((exp_so3(d[3:]) * T.q).normalized(), T.t + d[:3])
                Tm = Pose((exp_so3(-d[3:]) * T.q).normalized(), T.t - d[:3])
                fd[j] = (icp_residual(Tp, v_L, v_r, n)[0] - icp_residual(Tm, v_L, v_r, n)[0]) / (2 * eps)
            assert np.linalg.norm(J - fd) / max(np.linalg.norm(fd), 1e-9) < 1e-4


class TestMarginalization:
    def test_block_diagonal_passthrough(self):
        rng = np.random.default_rng(2)
        A = rng.normal(0, 1, (15, 15))
        B = rng.normal(0, 1, (15, 15))
        H = np.zeros((30, 30))
        H[:15, :15] = A @ A.T + np.eye(15)
        H[15:, 15:] = B @ B.T + np.eye(15)
        b = rng.normal(0, 1, 30)
        from objslam.manifold import StateVector

        prior = marginalize_reference(H, b, StateVector())
        assert np.allclose(prior.H, H[15:, 15:], atol=1e-10)
        assert np.allclose(prior.b, b[15:], atol=1e-10)

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(3)
        from objslam.manifold import StateVector

        for _ in range(50):
            A = rng.normal(0, 1, (30, 30))
            H = A @ A.T + 0.5 * np.eye(30)
            b = rng.normal(0, 1, 30)
            prior = marginalize_reference(H, b, StateVector())
            Hrr_inv = np.linalg.inv(H[:15, :15])
            H_oracle = H[15:, 15:] - H[15:, :15] @ Hrr_inv @ H[:15, 15:]
            b_oracle = b[15:] - H[15:, :15] @ Hrr_inv @ b[:15]
            assert np.linalg.norm(prior.H - H_oracle) / np.linalg.norm(H_oracle) < 1e-8
            assert np.linalg.norm(prior.b - b_oracle) / max(np.linalg.norm(b_oracle), 1e-12) < 1e-8

    def test_rank_deficient_reference_warns(self):
        from objslam.manifold import StateVector

        H = np.zeros((30, 30))
        H[15:, 15:] = np.eye(15)
        H[0, 0] = 1.0  # reference block rank 1
        b = np.zeros(30)
        with warnings.catch_warnings(record=True) as rec:
            warnings.simplefilter("always")
            prior = marginalize_reference(H, b, StateVector())
        assert any("rank-deficient" in str(w.message) for w in rec)
        assert np.all(np.linalg.eigvalsh(prior.H) > -1e-12)


class TestSolveTracking:
    def setup_method(self):
        self.scene = textured_wall_scene()
        self.T0 = Pose.identity()
        self.frame0, _ = sim_frame(self.scene, self.T0, t_ns=0)
        self.frame1, _ = sim_frame(self.scene, self.T0, t_ns=int(1e9 / 15))
        self.rendered = rendered_from_sim(self.scene, self.T0)
        self.x0 = state_at(self.T0)
        self.batch = stationary_batch(self.T0.q)
        self.prior = make_initial_prior(self.x0)

    def test_fixed_point_at_ground_truth(self):
        res = solve_tracking(self.x0, self.x0, self.frame0, self.frame1, self.rendered,
                             self.batch, self.prior, K_TEST)
        assert res.status == "ok"
        d = boxminus(res.x_L, self.x0)
        assert np.linalg.norm(d[:3]) < 1e-6
        assert np.linalg.norm(d[3:6]) < 1e-6

    def test_recovers_from_perturbed_init(self):
        # horizontal viewing geometry: gravity and the world-anchored rendered
        # maps pin every state direction except the (gauge) world yaw, which
        # ICP against the fixed map also observes
        from util_sim import side_wall_scene

        scene, T0 = side_wall_scene(with_box=True)
        f0, _ = sim_frame(scene, T0, t_ns=0)
        f1, _ = sim_frame(scene, T0, t_ns=int(1e9 / 15))
        rv = rendered_from_sim(scene, T0)
        x0 = state_at(T0)
        batch = stationary_batch(T0.q)
        prior = make_initial_prior(x0)
        d0 = np.zeros(15)
        d0[:3] = [0.02, -0.015, 0.01]
        d0[3:6] = np.radians([1.5, -1.0, 2.0])
        x_init = boxplus(x0, d0)
        res = solve_tracking(x0, x_init, f0, f1, rv, batch, prior, K_TEST)
        d = boxminus(res.x_L, x0)
        assert np.linalg.norm(d[:3]) < 1e-4
        assert np.linalg.norm(d[3:6]) < 1e-4

    def test_cost_non_increasing(self):
        d0 = np.zeros(15)
        d0[:3] = [0.02, 0.01, -0.01]
        x_init = boxplus(self.x0, d0)
        cfg0 = TrackingConfig(max_iterations=0)
        at_init = solve_tracking(self.x0, x_init, self.frame0, self.frame1, self.rendered,
                                 self.batch, self.prior, K_TEST, cfg=cfg0)
        res = solve_tracking(self.x0, x_init, self.frame0, self.frame1, self.rendered,
                             self.batch, self.prior, K_TEST)
        assert res.cost <= at_init.cost + 1e-9

    def test_all_masked_falls_back_to_propagation(self):
        res = solve_tracking(self.x0, self.x0, self.frame0, self.frame1, self.rendered,
                             self.batch, self.prior, K_TEST,
                             moving_ids=frozenset({-1, 0, 1, 2}))
        assert res.status == "degenerate"
        x_prop, _ = propagate(self.x0, self.batch, PARAMS)
        assert np.linalg.norm(boxminus(res.x_L, x_prop)) < 1e-12

    def test_texture_free_needs_inertial(self):
        scene = textured_wall_scene(uniform=True)
        f0, _ = sim_frame(scene, self.T0, t_ns=0)
        f1, _ = sim_frame(scene, self.T0, t_ns=int(1e9 / 15))
        rv = rendered_from_sim(scene, self.T0)
        no_imu = solve_tracking(self.x0, self.x0, f0, f1, rv, self.batch, self.prior,
                                K_TEST, use_inertial=False)
        assert no_imu.status == "degenerate"
        with_imu = solve_tracking(self.x0, self.x0, f0, f1, rv, self.batch, self.prior, K_TEST)
        assert with_imu.status == "ok" and with_imu.vision_degenerate
        # estimate within 3 sigma of the IMU-propagated covariance
        x_prop, Sigma = propagate(self.x0, self.batch, PARAMS)
        d = boxminus(with_imu.x_L, x_prop)
        sig = np.sqrt(np.maximum(np.diag(Sigma), 1e-18))
        assert np.all(np.abs(d)[:9] <= 3 * sig[:9] + 1e-6)

    def test_moving_instance_exclusion(self):
        # a box occupying part of the view is excluded; solution stays at truth
        scene = textured_wall_scene(with_box=True)
        f0, _ = sim_frame(scene, self.T0, t_ns=0)
        f1, _ = sim_frame(scene, self.T0, t_ns=int(1e9 / 15))
        rv = rendered_from_sim(scene, self.T0)
        res = solve_tracking(self.x0, self.x0, f0, f1, rv, self.batch, self.prior,
                             K_TEST, moving_ids=frozenset({1}))
        assert res.status == "ok"
        d = boxminus(res.x_L, self.x0)
        assert np.linalg.norm(d[:3]) < 1e-6


def test_initial_prior_structure():
    from objslam.manifold import StateVector

    prior = make_initial_prior(StateVector())
    d = np.diag(prior.H)
    assert d[0] == pytest.approx(1e8)  # sigma_r = 1e-4
    assert d[5] == pytest.approx(1e-4)  # loose yaw
    assert np.allclose(prior.b, 0.0)
