import numpy as np
import pytest
from util_sim import K_TEST, rendered_from_sim, side_wall_scene, sim_frame, state_at

from objslam.manifold import Pose, Quaternion, exp_so3
from objslam.objects import (
    Detection,
    ObjectModel,
    associate,
    classify_motion,
    detections_from_instance_map,
    initialize_object,
    mask_iou,
    maybe_add_keyframe,
    motion_inlier_ratio,
    refine_mask,
    track_object,
)
from objslam.simulator import Albedo, Primitive, SceneSpec, TrajectorySpec
from objslam.tracking import Frame
from objslam.tsdf import TsdfVolume


def toy_rendered(instance, valid=None):
    from objslam.tsdf import RenderedView

    h, w = instance.shape
    valid = np.ones((h, w), dtype=bool) if valid is None else valid
    return RenderedView(np.ones((h, w)), np.zeros((h, w, 3)), np.zeros((h, w, 3)),
                        instance.astype(np.int32), valid, K_TEST, Pose.identity())


def model_with_id(mid):
    return ObjectModel(mid, TsdfVolume(0.01), Pose.identity(), S_max=10)


class TestAssociate:
    def test_identical_masks_match(self):
        inst = np.zeros((6, 6), dtype=int)
        inst[1:4, 1:4] = 7
        det = Detection(1, inst == 7)
        matches, unmatched = associate([det], toy_rendered(inst), [model_with_id(7)])
        assert 7 in matches and not unmatched

    def test_disjoint_masks_unmatched(self):
        inst = np.zeros((6, 6), dtype=int)
        inst[0:2, 0:2] = 7
        det_mask = np.zeros((6, 6), dtype=bool)
        det_mask[4:6, 4:6] = True
        det = Detection(1, det_mask)
        matches, unmatched = associate([det], toy_rendered(inst), [model_with_id(7)])
        assert not matches and unmatched == [det]

    def test_competition_resolved_by_iou(self):
        # brute-force toy: one rendered mask, two overlapping detections
        inst = np.zeros((3, 3), dtype=int)
        inst[:, :] = 5
        full = Detection(1, np.ones((3, 3), dtype=bool))
        partial_mask = np.ones((3, 3), dtype=bool)
        partial_mask[0, 0] = False
        partial = Detection(2, partial_mask)
        matches, unmatched = associate([partial, full], toy_rendered(inst), [model_with_id(5)])
        assert matches[5] is full
        assert unmatched == [partial]

    def test_threshold_strictly_greater(self):
        # IoU exactly 0.8 must NOT associate
        inst = np.zeros((1, 10), dtype=int)
        inst[0, :8] = 3
        det = Detection(1, np.concatenate([np.ones(10, dtype=bool)]).reshape(1, 10))
        assert mask_iou(det.mask, inst == 3) == pytest.approx(0.8)
        matches, unmatched = associate([det], toy_rendered(inst), [model_with_id(3)])
        assert not matches
        inst2 = np.zeros((1, 10), dtype=int)
        inst2[0, :9] = 3
        matches, _ = associate([det], toy_rendered(inst2), [model_with_id(3)])
        assert 3 in matches


class TestInitialize:
    def test_centroid_on_axis(self):
        depth = np.full((K_TEST.height, K_TEST.width), 2.0)
        mask = np.zeros_like(depth, dtype=bool)
        mask[30:90, 40:120] = True  # symmetric about the principal point
        det = Detection(1, mask, {56: 0.9})
        model = initialize_object(det, depth, K_TEST, Pose.identity(), model_id=1)
        assert model is not None
        assert np.allclose(model.T_WO.t, [0, 0, 2.0], atol=1e-6)
        assert model.T_WO.q.w == 1.0
        assert model.S_max == det.size

    def test_empty_mask_deferred(self):
        depth = np.full((K_TEST.height, K_TEST.width), 2.0)
        det = Detection(1, np.zeros_like(depth, dtype=bool))
        assert initialize_object(det, depth, K_TEST, Pose.identity(), 1) is None

    def test_camera_rotation_transforms_centroid(self):
        depth = np.full((K_TEST.height, K_TEST.width), 2.0)
        mask = np.zeros_like(depth, dtype=bool)
        mask[30:90, 40:120] = True
        det = Detection(1, mask)
        T_WC = Pose(exp_so3([0, 0, np.pi / 2]), np.array([0.5, 0.0, 0.0]))
        model = initialize_object(det, depth, K_TEST, T_WC, 1)
        expect = T_WC.transform([0, 0, 2.0])
        assert np.allclose(model.T_WO.t, expect, atol=1e-6)


class TestTrackObject:
    def setup_method(self):
        self.scene, self.T0 = side_wall_scene(with_box=True)
        self.box = self.scene.primitives[-1]
        self.frame0, inst0 = sim_frame(self.scene, self.T0, t_ns=0)
        self.rendered = rendered_from_sim(self.scene, self.T0)
        self.mask0 = inst0 == 1
        self.model = ObjectModel(1, TsdfVolume(0.01), self.box.pose, S_max=int(self.mask0.sum()))

    def test_static_object_exact_init(self):
        res = track_object(self.model, self.frame0.intensity, self.frame0, self.rendered,
                           self.T0, self.T0, K_TEST, self.mask0)
        assert res.status == "ok"
        T_rel = (self.T0.inverse() * self.box.pose).inverse() * res.T_CLO
        assert np.linalg.norm(T_rel.t) < 1e-6
        assert T_rel.rotation_angle_to(Pose.identity()) < 1e-6

    def test_translated_object_recovered(self):
        moved = Pose(self.box.pose.q, self.box.pose.t + np.array([0.0, 0.01, 0.0]))
        scene2, _ = side_wall_scene(with_box=True, box_pos=moved.t)
        frame1, inst1 = sim_frame(scene2, self.T0, t_ns=int(1e9 / 15))
        res = track_object(self.model, self.frame0.intensity, frame1, self.rendered,
                           self.T0, self.T0, K_TEST, inst1 == 1)
        assert res.status == "ok"
        assert np.allclose(self.model.T_WO.t - self.box.pose.t, [0, 0.01, 0], atol=1e-3)
        assert self.model.T_WO.rotation_angle_to(moved) < np.radians(0.5)

    def test_occluded_object_lost(self):
        empty_mask = np.zeros_like(self.mask0)
        res = track_object(self.model, self.frame0.intensity, self.frame0, self.rendered,
                           self.T0, self.T0, K_TEST, empty_mask)
        assert res.status == "lost"
        assert self.model.status == "lost"


class TestMotionClassification:
    def setup_method(self):
        self.scene, self.T0 = side_wall_scene(with_box=True)
        self.frame0, inst0 = sim_frame(self.scene, self.T0, t_ns=0)
        self.rendered = rendered_from_sim(self.scene, self.T0)
        self.mask0 = inst0 == 1

    def test_static_object_ratio_one(self):
        r = motion_inlier_ratio(self.mask0, self.frame0, self.rendered, self.T0, self.T0, K_TEST)
        assert r > 0.99
        assert classify_motion(r) == "static"

    def test_displaced_object_moving_axial(self):
        # 5 cm toward the camera: point-to-plane residuals fire everywhere
        scene2, _ = side_wall_scene(with_box=True, box_pos=(1.25, 0.12, 1.1))
        frame1, inst1 = sim_frame(scene2, self.T0, t_ns=0)
        r = motion_inlier_ratio(inst1 == 1, frame1, self.rendered, self.T0, self.T0, K_TEST)
        assert r < 0.5
        assert classify_motion(r) == "moving"

    def test_displaced_object_moving_lateral(self):
        # 5 cm sideways: the sliding face itself is point-to-plane blind, but
        # the uncovered strip lands on the far wall and still tips the ratio
        scene2, _ = side_wall_scene(with_box=True, box_pos=(1.3, 0.17, 1.1))
        frame1, inst1 = sim_frame(scene2, self.T0, t_ns=0)
        r = motion_inlier_ratio(inst1 == 1, frame1, self.rendered, self.T0, self.T0, K_TEST)
        assert classify_motion(r) == "moving"

    def test_boundary_is_static(self):
        assert classify_motion(0.9) == "static"
        assert classify_motion(0.89999) == "moving"


class TestKeyframes:
    def setup_method(self):
        self.scene, self.T0 = side_wall_scene(with_box=True)
        self.frame0, inst0 = sim_frame(self.scene, self.T0, t_ns=0)
        self.mask0 = inst0 == 1
        box = self.scene.primitives[-1]
        self.model = ObjectModel(1, TsdfVolume(0.01), box.pose, S_max=int(self.mask0.sum()))
        self.T_CO = self.T0.inverse() * box.pose

    def test_first_observation_adds(self):
        added = maybe_add_keyframe(self.model, self.T_CO, self.frame0.intensity,
                                   self.frame0.depth, self.mask0, K_TEST)
        assert added and len(self.model.keyframes) == 1

    def test_five_degrees_skipped(self):
        maybe_add_keyframe(self.model, self.T_CO, self.frame0.intensity,
                           self.frame0.depth, self.mask0, K_TEST)
        T5 = Pose(exp_so3([0, np.radians(5.0), 0]), np.zeros(3)) * self.T_CO
        added = maybe_add_keyframe(self.model, T5, self.frame0.intensity,
                                   self.frame0.depth, self.mask0, K_TEST)
        assert not added

    def test_fifteen_degrees_added(self):
        maybe_add_keyframe(self.model, self.T_CO, self.frame0.intensity,
                           self.frame0.depth, self.mask0, K_TEST)
        T15 = Pose(exp_so3([0, np.radians(15.0), 0]), np.zeros(3)) * self.T_CO
        added = maybe_add_keyframe(self.model, T15, self.frame0.intensity,
                                   self.frame0.depth, self.mask0, K_TEST)
        assert added and len(self.model.keyframes) == 2


def test_refine_mask_drops_inconsistent_depth():
    scene, T0 = side_wall_scene(with_box=True)
    frame, inst = sim_frame(scene, T0)
    rendered = rendered_from_sim(scene, T0)
    det = Detection(1, inst == 1)
    # corrupt the depth of half the object's pixels
    vs, us = np.nonzero(det.mask)
    half = len(vs) // 2
    frame.depth[vs[:half], us[:half]] += 0.5
    refined = refine_mask(det, frame, rendered, 1, K_TEST)
    assert refined.sum() <= det.mask.sum() - half + 5


def test_detections_from_instance_map():
    inst = np.zeros((10, 10), dtype=np.int32)
    inst[2:5, 2:5] = 1
    inst[6:9, 6:9] = 4
    dets = detections_from_instance_map(inst, {1: {56: 0.9}, 4: {39: 0.8}})
    assert len(dets) == 2
    assert dets[0].instance_id == 1 and dets[0].best_class == 56
    assert dets[1].size == 9


def test_s_max_monotone():
    m = model_with_id(1)
    m.S_max = max(m.S_max, 50)
    assert m.S_max == 50
    m.S_max = max(m.S_max, 20)
    assert m.S_max == 50
