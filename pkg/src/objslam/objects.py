"""Object lifecycle: detection association, model initialisation, object-pose
tracking, motion classification, mask refinement, and keyframe bookkeeping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .features import Features, ObjectKeyframe, detect_features
from .manifold import CameraIntrinsics, Pose
from .tracking import Frame, ObjectSolveResult, TrackingConfig, solve_object_pose
from .tsdf import NoClassError, RenderedView, TsdfVolume, most_likely_class

PERSON_CLASS_ID = 1


@dataclass
class Detection:
    """One instance mask with its class probabilities."""

    instance_id: int
    mask: np.ndarray
    class_probs: dict[int, float] = field(default_factory=dict)
    size: int = 0
    centroid: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        vs, us = np.nonzero(self.mask)
        self.size = int(len(us))
        if self.size:
            self.centroid = np.array([us.mean(), vs.mean()])

    @property
    def best_class(self) -> int:
        if not self.class_probs:
            return 0
        return max(sorted(self.class_probs), key=lambda c: (self.class_probs[c], -c))

    @property
    def is_person(self) -> bool:
        return self.best_class == PERSON_CLASS_ID


def detections_from_instance_map(instance: np.ndarray, classmap: dict[int, dict[int, float]]):
    """Split an instance-id image into Detection objects (id 0 = background)."""
    out = []
    for inst in np.unique(instance):
        if inst <= 0:
            continue
        out.append(Detection(int(inst), instance == inst, classmap.get(int(inst), {})))
    return out


@dataclass
class ObjectModel:
    id: int
    volume: TsdfVolume
    T_WO: Pose
    status: str = "live"  # live | lost
    motion: str = "static"  # static | moving
    S_max: int = 0
    keyframes: list = field(default_factory=list)
    source_instance: int = 0
    created_frame: int = 0

    def most_likely_class(self) -> int:
        try:
            return most_likely_class(self.volume)
        except NoClassError:
            return 0


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.count_nonzero(a & b)
    union = np.count_nonzero(a | b)
    return inter / union if union else 0.0


def associate(detections, rendered: RenderedView, models,
              iou_threshold: float = 0.8):
    """Greedy one-to-one detection-to-model matching on rendered-mask IoU.

    Matches require IoU strictly greater than the threshold. Returns
    (matches: model_id -> Detection, unmatched detections in input order).
    """
    live = [m for m in models if m.status == "live"]
    pairs = []
    for mi, model in enumerate(live):
        rmask = rendered.valid & (rendered.instance == model.id)
        if not rmask.any():
            continue
        for di, det in enumerate(detections):
            iou = mask_iou(det.mask, rmask)
            if iou > iou_threshold:
                pairs.append((iou, di, mi))
    pairs.sort(key=lambda p: (-p[0], p[1], p[2]))
    matches: dict[int, Detection] = {}
    used_det = set()
    used_model = set()
    for iou, di, mi in pairs:
        if di in used_det or mi in used_model:
            continue
        used_det.add(di)
        used_model.add(mi)
        matches[live[mi].id] = detections[di]
    unmatched = [d for i, d in enumerate(detections) if i not in used_det]
    return matches, unmatched


def initialize_object(detection: Detection, depth: np.ndarray, K: CameraIntrinsics,
                      T_WC: Pose, model_id: int, voxel_size: float = 0.01,
                      truncation_voxels: float = 4.0, max_weight: float = 100.0,
                      min_depth_pixels: int = 200, created_frame: int = 0) -> ObjectModel | None:
    """New model at the world centroid of the masked depth, identity rotation.

    Returns None (initialisation deferred) when too few masked pixels carry
    valid depth.
    """
    vs, us = np.nonzero(detection.mask & (depth > 0))
    if len(us) < min_depth_pixels:
        return None
    d = depth[vs, us]
    pts_c = np.stack([(us - K.cx) / K.fx * d, (vs - K.cy) / K.fy * d, d], axis=1)
    centroid_w = T_WC.transform(pts_c.mean(axis=0))
    return ObjectModel(
        id=model_id,
        volume=TsdfVolume(voxel_size, truncation_voxels, max_weight),
        T_WO=Pose(Pose.identity().q, centroid_w),
        S_max=detection.size,
        source_instance=detection.instance_id,
        created_frame=created_frame,
    )


def track_object(model: ObjectModel, ref_intensity: np.ndarray | None, live_frame: Frame,
                 rendered: RenderedView, T_WCL: Pose, T_WCR: Pose, K: CameraIntrinsics,
                 live_mask: np.ndarray, cfg: TrackingConfig | None = None,
                 use_photometric: bool = True) -> ObjectSolveResult:
    """Estimate the live camera-object pose and update T_WO on success.

    T_WO is held at its previous value while T_CLO is optimised; the live
    camera pose is a fixed input. On too few residuals the model is lost.
    """
    T_CLO_init = T_WCL.inverse() * model.T_WO
    T_CRO = T_WCR.inverse() * model.T_WO
    res = solve_object_pose(T_CLO_init, T_CRO, model.T_WO, T_WCR, live_frame,
                            ref_intensity, rendered, model.id, live_mask, K, cfg,
                            use_photometric=use_photometric)
    if res.status == "ok":
        model.T_WO = T_WCL * res.T_CLO
    else:
        model.status = "lost"
    return res


def motion_inlier_ratio(detection_mask: np.ndarray, live_frame: Frame,
                        rendered: RenderedView, T_WCL: Pose, T_WCR: Pose,
                        K: CameraIntrinsics, sigma_gate: float = 3.0) -> float:
    """Fraction of the object's pixels consistent with the static-world
    alignment: |point-to-plane residual| within sigma_gate times the depth
    noise, evaluated at the converged camera pose."""
    sel = detection_mask & live_frame.valid
    vs, us = np.nonzero(sel)
    if len(us) == 0:
        return 0.0
    d = live_frame.depth[vs, us]
    v_l = np.stack([(us - K.cx) / K.fx * d, (vs - K.cy) / K.fy * d, d], axis=1)
    w = v_l @ T_WCL.R.T + T_WCL.t
    p_r = (w - T_WCR.t) @ T_WCR.R
    z = p_r[:, 2]
    ok = z > 1e-9
    zs = np.where(ok, z, 1.0)
    u = np.round(K.fx * p_r[:, 0] / zs + K.cx).astype(np.int64)
    v = np.round(K.fy * p_r[:, 1] / zs + K.cy).astype(np.int64)
    ok &= (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
    uc = np.clip(u, 0, K.width - 1)
    vc = np.clip(v, 0, K.height - 1)
    ok &= rendered.valid[vc, uc] & rendered.normal_ok[vc, uc]
    if not np.any(ok):
        return 0.0
    n_r = rendered.normal[vc, uc]
    v_r = rendered.vertex[vc, uc]
    e = np.abs(np.sum(n_r * (w - v_r), axis=1))
    sigma_z = d * d / (K.fx * K.baseline) * K.sigma_z
    gate = np.maximum(sigma_gate * sigma_z, 1e-4)
    inl = ok & (e <= gate)
    return float(np.count_nonzero(inl)) / float(np.count_nonzero(ok))


def classify_motion(inlier_ratio: float, static_ratio: float = 0.9) -> str:
    """'static' when the inlier ratio reaches the threshold (ties stay static)."""
    return "static" if inlier_ratio >= static_ratio else "moving"


def refine_mask(detection: Detection, live_frame: Frame, rendered: RenderedView,
                model_id: int, K: CameraIntrinsics, sigma_gate: float = 3.0) -> np.ndarray:
    """Drop masked pixels farther than sigma_gate * sigma_z(d) from the
    object's rendered depth (where the model renders)."""
    mask = detection.mask & live_frame.valid
    rsel = rendered.valid & (rendered.instance == model_id)
    both = mask & rsel
    if not both.any():
        return mask
    d = live_frame.depth[both]
    gate = np.maximum(sigma_gate * d * d / (K.fx * K.baseline) * K.sigma_z, 1e-3)
    keep = np.abs(d - rendered.depth[both]) <= gate
    out = mask.copy()
    vs, us = np.nonzero(both)
    out[vs[~keep], us[~keep]] = False
    return out


def maybe_add_keyframe(model: ObjectModel, T_CO: Pose, intensity: np.ndarray,
                       depth: np.ndarray, mask: np.ndarray, K: CameraIntrinsics,
                       min_angle_deg: float = 10.0, max_features: int = 400,
                       features: Features | None = None) -> bool:
    """Append an ObjectKeyframe when the view change against every stored
    keyframe exceeds min_angle_deg (strictly)."""
    thresh = np.radians(min_angle_deg)
    for kf in model.keyframes:
        if kf.T_CO.rotation_angle_to(T_CO) <= thresh:
            return False
    if features is None:
        features = detect_features(intensity, depth, mask, K, max_features=max_features)
    if len(features) == 0:
        return False
    model.keyframes.append(ObjectKeyframe(Pose(T_CO.q, T_CO.t.copy()), features.keypoints,
                                          features.descriptors, features.points))
    return True
