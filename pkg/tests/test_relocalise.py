import warnings

import numpy as np
import pytest
from util_sim import K_TEST, rendered_from_sim, side_wall_scene, sim_frame

from objslam.features import Features, ObjectKeyframe, detect_features
from objslam.manifold import Pose, boxminus, exp_so3
from objslam.objects import Detection, ObjectModel, maybe_add_keyframe
from objslam.relocalise import (
    MatchSet,
    RelocConfig,
    attempt_relocalisation,
    match_against_keyframes,
    should_attempt,
    solve_pnp,
    verify_and_recover,
)
from objslam.simulator import Albedo, Primitive, SceneSpec
from objslam.tsdf import TsdfVolume

SHAPE = (K_TEST.height, K_TEST.width)


def lost_model(s_max=100):
    m = ObjectModel(1, TsdfVolume(0.01), Pose.identity(), S_max=s_max)
    m.status = "lost"
    return m


def det_with(size, centroid):
    mask = np.zeros(SHAPE, dtype=bool)
    cu, cv = int(centroid[0]), int(centroid[1])
    half = max(int(np.sqrt(size) // 2), 1)
    mask[max(cv - half, 0):cv + half, max(cu - half, 0):cu + half] = True
    d = Detection(1, mask)
    d.size = size  # exact ratio控制 via explicit size
    d.centroid = np.asarray(centroid, dtype=float)
    return d


class TestShouldAttempt:
    def test_ratio_above_threshold(self):
        assert should_attempt(det_with(80, (80, 60)), lost_model(100), SHAPE)

    def test_ratio_below_threshold(self):
        assert not should_attempt(det_with(50, (80, 60)), lost_model(100), SHAPE)

    def test_ratio_exactly_at_threshold_rejected(self):
        assert not should_attempt(det_with(70, (80, 60)), lost_model(100), SHAPE)

    def test_border_centroid_rejected(self):
        assert not should_attempt(det_with(95, (5, 60)), lost_model(100), SHAPE)

    def test_zero_smax_warns(self):
        with warnings.catch_warnings(record=True) as rec:
            warnings.simplefilter("always")
            ok = should_attempt(det_with(80, (80, 60)), lost_model(0), SHAPE)
        assert not ok
        assert any("S_max" in str(w.message) for w in rec)

    def test_monotone_in_current_size(self):
        results = [should_attempt(det_with(s, (80, 60)), lost_model(100), SHAPE)
                   for s in range(10, 100, 5)]
        # once true, stays true
        first_true = results.index(True) if True in results else len(results)
        assert all(results[first_true:])


class TestMatchAgainstKeyframes:
    def _features(self, rng, n):
        return Features(rng.uniform(20, 100, (n, 2)),
                        rng.integers(0, 256, (n, 32)).astype(np.uint8),
                        rng.normal(0, 1, (n, 3)) + [0, 0, 2])

    def test_identical_keyframe_wins(self):
        rng = np.random.default_rng(0)
        live = self._features(rng, 30)
        m = lost_model()
        m.keyframes.append(ObjectKeyframe(Pose.identity(), live.keypoints.copy(),
                                          live.descriptors.copy(), live.points.copy()))
        out = match_against_keyframes(m, live)
        assert out is not None
        idx, ms = out
        assert idx == 0 and len(ms) == 30

    def test_random_descriptors_no_candidate(self):
        rng = np.random.default_rng(1)
        live = self._features(rng, 50)
        m = lost_model()
        m.keyframes.append(ObjectKeyframe(Pose.identity(),
                                          rng.uniform(20, 100, (50, 2)),
                                          rng.integers(0, 256, (50, 32)).astype(np.uint8),
                                          rng.normal(0, 1, (50, 3))))
        assert match_against_keyframes(m, live) is None

    def test_best_of_two_keyframes(self):
        rng = np.random.default_rng(2)
        live = self._features(rng, 30)
        m = lost_model()
        # keyframe A shares 20 descriptors, keyframe B shares 13
        a = self._features(rng, 20)
        a.descriptors[:20] = live.descriptors[:20]
        b = self._features(rng, 13)
        b.descriptors[:13] = live.descriptors[:13]
        m.keyframes.append(ObjectKeyframe(Pose.identity(), a.keypoints, a.descriptors, a.points))
        m.keyframes.append(ObjectKeyframe(Pose.identity(), b.keypoints, b.descriptors, b.points))
        idx, ms = match_against_keyframes(m, live)
        assert idx == 0
        assert len(ms) == 20


class TestSolvePnp:
    def _scene_points(self, rng, n=30):
        return np.stack([rng.uniform(-0.8, 0.8, n), rng.uniform(-0.6, 0.6, n),
                         rng.uniform(0.8, 2.5, n)], axis=1)

    def _project(self, pts):
        uv = np.stack([K_TEST.fx * pts[:, 0] / pts[:, 2] + K_TEST.cx,
                       K_TEST.fy * pts[:, 1] / pts[:, 2] + K_TEST.cy], axis=1)
        return uv

    def test_zero_motion_identity(self):
        rng = np.random.default_rng(3)
        pts = self._scene_points(rng)
        out = solve_pnp(pts, self._project(pts), K_TEST, seed=1)
        assert out is not None
        T, inl = out
        assert inl.all()
        assert np.linalg.norm(T.t) < 1e-9
        assert T.rotation_angle_to(Pose.identity()) < 1e-9

    def test_offset_recovered_exactly(self):
        rng = np.random.default_rng(4)
        pts = self._scene_points(rng)
        T_CR_CL = Pose(exp_so3(np.radians([4.0, -8.0, 3.0])), np.array([0.06, -0.05, 0.06]))
        p_live = (pts - T_CR_CL.t) @ T_CR_CL.R  # T_CL_CR = inverse
        out = solve_pnp(pts, self._project(p_live), K_TEST, seed=2)
        assert out is not None
        T, inl = out
        assert inl.all()
        assert np.linalg.norm(T.t - T_CR_CL.t) < 1e-6
        assert T.rotation_angle_to(T_CR_CL) < 1e-6

    def test_robust_to_half_outliers(self):
        rng = np.random.default_rng(5)
        pts = self._scene_points(rng, 40)
        T_CR_CL = Pose(exp_so3(np.radians([3.0, 6.0, -4.0])), np.array([0.08, 0.02, -0.05]))
        p_live = (pts - T_CR_CL.t) @ T_CR_CL.R
        uv = self._project(p_live)
        uv[:20] = rng.uniform(0, [K_TEST.width - 1, K_TEST.height - 1], (20, 2))
        out = solve_pnp(pts, uv, K_TEST, seed=3)
        assert out is not None
        T, inl = out
        assert np.linalg.norm(T.t - T_CR_CL.t) < 1e-3
        assert T.rotation_angle_to(T_CR_CL) < 1e-3
        assert inl[20:].sum() >= 18

    def test_permutation_invariance(self):
        rng = np.random.default_rng(6)
        pts = self._scene_points(rng, 25)
        T_CR_CL = Pose(exp_so3([0.05, 0.02, -0.04]), np.array([0.05, -0.02, 0.03]))
        p_live = (pts - T_CR_CL.t) @ T_CR_CL.R
        uv = self._project(p_live)
        T1, _ = solve_pnp(pts, uv, K_TEST, seed=9)
        perm = rng.permutation(len(pts))
        T2, _ = solve_pnp(pts[perm], uv[perm], K_TEST, seed=9)
        assert np.linalg.norm(T1.matrix() - T2.matrix()) < 1e-9

    def test_too_few_inliers(self):
        rng = np.random.default_rng(7)
        pts = self._scene_points(rng, 12)
        uv = rng.uniform(0, [K_TEST.width - 1, K_TEST.height - 1], (12, 2))
        assert solve_pnp(pts, uv, K_TEST, seed=4) is None


class TestVerifyAndRecover:
    def setup_method(self):
        self.scene, self.T0 = side_wall_scene(with_box=True)
        self.box = self.scene.primitives[-1]
        frame, inst = sim_frame(self.scene, self.T0)
        self.frame = frame
        # fuse the object into its own volume at the true pose
        self.model = ObjectModel(1, TsdfVolume(0.01), self.box.pose,
                                 S_max=int((inst == 1).sum()))
        self.model.status = "lost"
        T_MC = self.box.pose.inverse() * self.T0
        self.model.volume.integrate(T_MC, K_TEST, frame.depth, frame.intensity, inst == 1)

    def test_true_candidate_accepted(self):
        T_CLO_true = self.T0.inverse() * self.box.pose
        out = verify_and_recover(self.model, T_CLO_true, self.frame, self.T0, K_TEST)
        assert out.accepted
        assert out.mean_residual < 0.005
        assert self.model.status == "live"

    def test_far_candidate_rejected(self):
        T_off = Pose(self.box.pose.q, self.box.pose.t + np.array([0.0, 0.2, 0.0]))
        out = verify_and_recover(self.model, self.T0.inverse() * T_off, self.frame,
                                 self.T0, K_TEST)
        assert not out.accepted
        assert self.model.status == "lost"


class TestEndToEnd:
    def test_moved_object_recovered(self):
        # build a model + keyframe at the initial object pose, move the
        # object, then relocalise from the new observation
        box_pos0 = (1.15, 0.1, 1.1)
        half = np.array([0.16, 0.22, 0.18])
        scene0, T0 = side_wall_scene(with_box=True, box_pos=box_pos0)
        scene0.primitives[-1].half_extents = half
        scene0.primitives[-1].albedo = Albedo("noise", 0.03, 0.05, 1.0, seed=19)
        box0 = scene0.primitives[-1]
        frame0, inst0 = sim_frame(scene0, T0)
        model = ObjectModel(1, TsdfVolume(0.01), box0.pose, S_max=int((inst0 == 1).sum()))
        T_MC = box0.pose.inverse() * T0
        model.volume.integrate(T_MC, K_TEST, frame0.depth, frame0.intensity, inst0 == 1)
        maybe_add_keyframe(model, T0.inverse() * box0.pose, frame0.intensity,
                           frame0.depth, inst0 == 1, K_TEST)
        assert len(model.keyframes) == 1
        model.status = "lost"

        delta = np.array([0.0, -0.18, 0.0])
        scene1, _ = side_wall_scene(with_box=True, box_pos=np.asarray(box_pos0) + delta)
        scene1.primitives[-1].half_extents = half
        scene1.primitives[-1].albedo = Albedo("noise", 0.03, 0.05, 1.0, seed=19)
        frame1, inst1 = sim_frame(scene1, T0)
        live_feats = detect_features(frame1.intensity, frame1.depth, inst1 == 1, K_TEST)
        out = attempt_relocalisation(model, Detection(1, inst1 == 1), frame1,
                                     live_feats, T0, K_TEST, seed=42)
        assert out.accepted
        true_T_WO = Pose(box0.pose.q, box0.pose.t + delta)
        assert np.linalg.norm(model.T_WO.t - true_T_WO.t) < 0.05
        assert model.T_WO.rotation_angle_to(true_T_WO) < np.radians(5.0)
