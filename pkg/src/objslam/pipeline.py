"""End-to-end per-frame orchestration: tracking, segmentation handling,
object tracking, relocalisation, fusion, raycasting, marginalisation, and
result export."""

from __future__ import annotations

import json
import os
import pickle
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .config import SessionConfig
from .dataset import Dataset, DatasetError, write_tum
from .features import detect_features
from .imu import ImuNoiseParams, make_batch, propagate
from .manifold import Pose, Quaternion, StateVector, exp_so3
from .objects import (
    Detection,
    ObjectModel,
    associate,
    classify_motion,
    detections_from_instance_map,
    initialize_object,
    maybe_add_keyframe,
    motion_inlier_ratio,
    refine_mask,
    track_object,
)
from .relocalise import attempt_relocalisation, should_attempt
from .tracking import (
    Frame,
    MarginalizationPrior,
    TrackingConfig,
    make_initial_prior,
    marginalize_reference,
    solve_tracking,
)
from .tsdf import TsdfVolume, export_volume_ply, raycast

TIMING_CATEGORIES = ("camera_tracking", "object_tracking", "relocalisation",
                     "segmentation", "integration", "raycasting")
TIMING_UNITS = {"camera_tracking": "VO", "object_tracking": "MO", "relocalisation": "KF",
                "segmentation": "VO", "integration": "VO", "raycasting": "VO"}


class _Timer:
    def __init__(self):
        self.total = {c: 0.0 for c in TIMING_CATEGORIES}
        self.samples = {c: 0 for c in TIMING_CATEGORIES}
        self.units = {c: 0 for c in TIMING_CATEGORIES}
        self.wall = 0.0

    def add(self, cat, dt, units):
        self.total[cat] += dt
        self.samples[cat] += 1
        self.units[cat] += units

    def report(self, frame_count):
        out = {}
        for c in TIMING_CATEGORIES:
            per_unit = (self.total[c] / self.units[c] * 1e3) if self.units[c] > 0 else None
            out[c] = {
                "unit": TIMING_UNITS[c],
                "total_ms": self.total[c] * 1e3,
                "samples": self.samples[c],
                "units": self.units[c],
                "ms_per_frame": self.total[c] * 1e3 / max(frame_count, 1),
                "ms_per_unit": per_unit,
            }
        out["wall_total_ms"] = self.wall * 1e3
        return out


@dataclass
class PipelineResult:
    camera_trajectory: list  # (t_s, Pose)
    object_trajectories: dict  # source_instance -> list[(t_s, Pose)]
    models: list
    background: TsdfVolume
    degenerate_frames: list
    report: dict
    out_dir: str | None = None


def _gravity_align_init(dataset: Dataset, cfg: SessionConfig) -> StateVector:
    """First state: position at the origin (world frame definition), roll and
    pitch from the averaged accelerometer direction, zero velocity/biases."""
    n = min(cfg.pipeline.init_gravity_samples, len(dataset.imu))
    acc = np.mean([m.accel for m in dataset.imu[:n]], axis=0)
    a = acc / max(np.linalg.norm(acc), 1e-9)
    z = np.array([0.0, 0.0, 1.0])
    axis = np.cross(a, z)
    s = np.linalg.norm(axis)
    if s < 1e-12:
        q_WS = Quaternion.identity() if a[2] > 0 else exp_so3([np.pi, 0.0, 0.0])
    else:
        q_WS = exp_so3(axis / s * np.arctan2(s, float(a @ z)))
    q_WC = (q_WS * dataset.T_SC.q).normalized()
    return StateVector(np.zeros(3), q_WC, np.zeros(3))


def _dilate(mask, px):
    if px <= 0 or not mask.any():
        return mask
    return ndimage.binary_dilation(mask, iterations=px)


def run(dataset_dir, config: SessionConfig | None = None, out_dir=None,
        timing: bool = False) -> PipelineResult:
    """Process a dataset end to end; optionally write trajectories, clouds,
    and the report to out_dir."""
    cfg = config or SessionConfig()
    cfg.validate()
    ds = Dataset(dataset_dir)
    K = ds.K
    T_SC = ds.T_SC
    t_cfg: TrackingConfig = cfg.tracking
    o_cfg = cfg.objects
    r_cfg = cfg.relocalisation
    imu_params = ImuNoiseParams(cfg.imu.sigma_gyro, cfg.imu.sigma_accel,
                                cfg.imu.sigma_gyro_bias, cfg.imu.sigma_accel_bias,
                                np.array([0.0, 0.0, cfg.imu.gravity_mps2]))

    stamps = [rec.t_ns for rec in ds.frames]
    gaps = np.diff(stamps) * 1e-9
    if len(gaps) and gaps.max() > cfg.pipeline.max_imu_gap_s:
        raise DatasetError(f"frame gap of {gaps.max():.3f}s exceeds {cfg.pipeline.max_imu_gap_s}s")
    imu_ts = [m.t_ns for m in ds.imu]
    if not imu_ts or imu_ts[0] > stamps[0] or imu_ts[-1] < stamps[-1]:
        raise DatasetError("IMU data does not cover the frame span")

    background = TsdfVolume(cfg.volumetric.voxel_size_background,
                            cfg.volumetric.truncation_voxels, cfg.volumetric.max_weight)
    models: list[ObjectModel] = []
    next_model_id = 1
    timer = _Timer()
    wall0 = time.perf_counter()

    x_state = _gravity_align_init(ds, cfg)
    prior = make_initial_prior(x_state)
    rendered = None
    ref_frame: Frame | None = None
    cam_rows = []
    obj_rows: dict[int, list] = {}
    degenerate_frames = []
    frame_idx_of = {}

    for i in range(len(ds)):
        t_ns, intensity, depth, inst_map = ds.load_frame(i)
        t_s = t_ns * 1e-9
        detections = detections_from_instance_map(inst_map, ds.classmap)
        persons = [d for d in detections if d.is_person]
        det_objects = [d for d in detections if not d.is_person]
        person_mask = np.zeros_like(depth, dtype=bool)
        for p in persons:
            person_mask |= p.mask
        live_frame = Frame(t_ns, intensity, depth, (depth > 0) & ~_dilate(person_mask, o_cfg.moving_mask_dilate_px))

        degenerate = False
        if i == 0:
            x_L = x_state
            joint = None
        else:
            t0 = time.perf_counter()
            batch = make_batch(ds.imu, stamps[i - 1], t_ns)
            x_prop, _ = propagate(x_state, batch, imu_params, T_SC)
            moving_ids = frozenset(m.id for m in models if m.status == "live" and m.motion == "moving")
            result = solve_tracking(x_state, x_prop, ref_frame, live_frame, rendered,
                                    batch, prior, K, t_cfg, imu_params, T_SC, moving_ids)
            x_L = result.x_L
            joint = result
            degenerate = result.status == "degenerate"
            n_vo = 1 + sum(1 for m in models if m.status == "live")
            timer.add("camera_tracking", time.perf_counter() - t0, n_vo)
            if degenerate:
                degenerate_frames.append(i)

        T_WC_L = x_L.pose()
        cam_rows.append((t_s, T_WC_L))

        matches: dict[int, Detection] = {}
        refined: dict[int, np.ndarray] = {}
        unmatched: list[Detection] = list(det_objects) if i == 0 else []
        if i > 0 and not degenerate and rendered is not None:
            t0 = time.perf_counter()
            matches, unmatched = associate(det_objects, rendered, models, o_cfg.iou_threshold)
            by_id = {m.id: m for m in models}
            for mid, det in matches.items():
                model = by_id[mid]
                model.S_max = max(model.S_max, det.size)
                rmask = refine_mask(det, live_frame, rendered, mid, K, o_cfg.refine_sigma_gate)
                refined[mid] = rmask
                ratio = motion_inlier_ratio(rmask, live_frame, rendered, T_WC_L,
                                            joint.x_R.pose() if joint else T_WC_L, K,
                                            o_cfg.motion_sigma_gate)
                model.motion = classify_motion(ratio, o_cfg.motion_static_ratio)
            timer.add("segmentation", time.perf_counter() - t0,
                      sum(1 for m in models if m.status == "live"))

        # object tracking for moving models
        if i > 0 and not degenerate and rendered is not None and ref_frame is not None:
            moving = [m for m in models if m.status == "live" and m.motion == "moving"]
            if moving:
                t0 = time.perf_counter()
                T_WCR = joint.x_R.pose() if joint else T_WC_L
                for model in moving:
                    if model.id in matches:
                        live_mask = refined[model.id]
                    else:
                        rmask = rendered.valid & (rendered.instance == model.id)
                        if rmask.sum() < o_cfg.lost_min_rendered_px:
                            continue
                        live_mask = _dilate(rmask, o_cfg.moving_mask_dilate_px)
                    track_object(model, ref_frame.intensity, live_frame, rendered,
                                 T_WC_L, T_WCR, K, live_mask, t_cfg)
                timer.add("object_tracking", time.perf_counter() - t0, len(moving))

        # relocalisation of lost models
        if i > 0 and not degenerate:
            lost = [m for m in models if m.status == "lost"]
            if lost:
                t0 = time.perf_counter()
                kf_considered = 0
                attempts = 0
                by_id = {m.id: m for m in models}
                candidates = [(d, None) for d in unmatched]
                for mid, det in list(matches.items()):
                    holder = by_id[mid]
                    if i - holder.created_frame <= r_cfg.duplicate_max_age:
                        candidates.append((det, holder))
                feat_cache: dict[int, object] = {}
                for det, holder in candidates:
                    if attempts >= r_cfg.max_attempts_per_frame:
                        break
                    for model in lost:
                        if model.status != "lost":
                            continue
                        if attempts >= r_cfg.max_attempts_per_frame:
                            break
                        cls = model.most_likely_class()
                        if cls and det.best_class and cls != det.best_class:
                            continue
                        if not should_attempt(det, model, depth.shape,
                                              r_cfg.ratio_threshold, r_cfg.border_margin_px):
                            continue
                        key = id(det)
                        if key not in feat_cache:
                            feat_cache[key] = detect_features(intensity, depth, det.mask, K,
                                                              max_features=r_cfg.max_features)
                        attempts += 1
                        kf_considered += len(model.keyframes)
                        seed = (cfg.pipeline.seed * 1000003 + t_ns) % (2 ** 63)
                        out = attempt_relocalisation(model, det, live_frame, feat_cache[key],
                                                     T_WC_L, K, seed=seed,
                                                     tracking_cfg=t_cfg, cfg=r_cfg)
                        if out.accepted:
                            if holder is not None:
                                # duplicate model spawned from this detection
                                models.remove(holder)
                                matches.pop(holder.id, None)
                                refined.pop(holder.id, None)
                            else:
                                unmatched = [d for d in unmatched if d is not det]
                            matches[model.id] = det
                            refined[model.id] = det.mask & live_frame.valid
                            model.S_max = max(model.S_max, det.size)
                            model.motion = "static"
                            break
                timer.add("relocalisation", time.perf_counter() - t0, kf_considered)

        # new models for remaining unmatched detections
        if not degenerate:
            for det in unmatched:
                model = initialize_object(det, depth, K, T_WC_L, next_model_id,
                                          cfg.volumetric.voxel_size_object,
                                          cfg.volumetric.truncation_voxels,
                                          cfg.volumetric.max_weight,
                                          o_cfg.min_init_depth_pixels, created_frame=i)
                if model is None:
                    continue
                next_model_id += 1
                models.append(model)
                matches[model.id] = det
                refined[model.id] = det.mask & live_frame.valid

        # keyframes for matched models
        by_id = {m.id: m for m in models}
        for mid, det in matches.items():
            model = by_id.get(mid)
            if model is None or model.status != "live":
                continue
            if len(model.keyframes) >= o_cfg.max_keyframes:
                continue
            T_CO = T_WC_L.inverse() * model.T_WO
            maybe_add_keyframe(model, T_CO, intensity, depth,
                               refined.get(mid, det.mask), K,
                               o_cfg.keyframe_angle_deg, r_cfg.max_features)

        # fusion (skipped entirely on degenerate frames)
        if not degenerate:
            t0 = time.perf_counter()
            exclude = person_mask.copy()
            for det in det_objects:
                exclude |= det.mask
            if rendered is not None:
                exclude |= rendered.valid & (rendered.instance > 0)
            bg_mask = (depth > 0) & ~_dilate(exclude, 2)
            background.integrate(T_WC_L, K, depth, intensity, bg_mask, None,
                                 fuse_foreground=False)
            for mid, det in matches.items():
                model = by_id.get(mid)
                if model is None or model.status != "live":
                    continue
                T_MC = model.T_WO.inverse() * T_WC_L
                model.volume.integrate(T_MC, K, depth, intensity,
                                       refined.get(mid, det.mask & live_frame.valid),
                                       class_probs=det.class_probs)
            timer.add("integration", time.perf_counter() - t0,
                      1 + sum(1 for m in models if m.status == "live"))

        # raycast for the next frame's reference
        t0 = time.perf_counter()
        entries = [(m.id, m.volume, m.T_WO) for m in models if m.status == "live"]
        rendered = raycast(entries, background, T_WC_L, K,
                           cfg.volumetric.raycast_near, cfg.volumetric.raycast_far)
        timer.add("raycasting", time.perf_counter() - t0, 1 + len(entries))

        # lost marking: live, unmatched, and (nearly) invisible in the new render
        for m in models:
            if m.status != "live" or m.id in matches:
                continue
            if rendered.pixel_count(m.id) < o_cfg.lost_min_rendered_px:
                m.status = "lost"

        # record object trajectories for live matched models
        for mid in matches:
            model = by_id.get(mid)
            if model is None or model.status != "live":
                continue
            obj_rows.setdefault(model.source_instance, []).append((t_s, model.T_WO))

        # marginalise the reference state out for the next frame
        if joint is not None:
            prior = marginalize_reference(joint.H, joint.b, x_L)
        x_state = x_L
        ref_frame = live_frame
        frame_idx_of[t_ns] = i

    timer.wall = time.perf_counter() - wall0
    report = {
        "frame_count": len(ds),
        "degenerate_frames": degenerate_frames,
        "model_count": len(models),
        "models": [
            {"id": m.id, "source_instance": m.source_instance, "status": m.status,
             "motion": m.motion, "keyframes": len(m.keyframes), "S_max": m.S_max,
             "class": m.most_likely_class()}
            for m in models
        ],
        "timings": timer.report(len(ds)) if timing else None,
    }

    result = PipelineResult(cam_rows, obj_rows, models, background,
                            degenerate_frames, report, str(out_dir) if out_dir else None)
    if out_dir is not None:
        write_outputs(result, out_dir)
    return result


def write_outputs(result: PipelineResult, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    write_tum(os.path.join(out_dir, "trajectory_cam.txt"), result.camera_trajectory)
    for inst, rows in sorted(result.object_trajectories.items()):
        write_tum(os.path.join(out_dir, f"trajectory_obj_{inst}.txt"), rows)
    export_volume_ply(os.path.join(out_dir, "cloud_background.ply"), result.background)
    for m in result.models:
        export_volume_ply(os.path.join(out_dir, f"cloud_obj_{m.id}.ply"), m.volume,
                          m.T_WO, foreground_gate=True)
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8", newline="\n") as f:
        json.dump(result.report, f, indent=1)
        f.write("\n")


# ---------------------------------------------------------------------------
# Session snapshot (versioned binary container)
# ---------------------------------------------------------------------------

SNAPSHOT_VERSION = 1


def save_session(path, models, background, state: StateVector, frame_index: int) -> None:
    payload = {
        "version": SNAPSHOT_VERSION,
        "models": models,
        "background": background,
        "state": state,
        "frame_index": frame_index,
    }
    with open(path, "wb") as f:
        pickle.dump(payload, f, protocol=pickle.HIGHEST_PROTOCOL)


def load_session(path):
    with open(path, "rb") as f:
        payload = pickle.load(f)
    if payload.get("version") != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {payload.get('version')!r}")
    return payload
