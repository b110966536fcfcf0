"""Recovery of lost objects: attempt gating, keyframe feature matching,
perspective-n-point pose estimation (minimal 3-point solver inside RANSAC,
Gauss-Newton polish), and dense geometric verification against the object's
own volume."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import polynomial as npoly

from .features import Features, match_descriptors
from .manifold import CameraIntrinsics, Pose, exp_so3
from .objects import Detection, ObjectModel
from .tracking import Frame, TrackingConfig, solve_object_pose
from .tsdf import raycast


@dataclass
class RelocConfig:
    ratio_threshold: float = 0.7  # S_current / S_max gate
    border_margin_px: int = 20
    hamming_threshold: int = 64
    ratio_test: float = 0.8
    min_matches: int = 12
    ransac_iterations: int = 500
    inlier_px: float = 2.0
    min_inliers: int = 6
    verify_residual_m: float = 0.01
    verify_valid_ratio: float = 0.5
    max_attempts_per_frame: int = 4
    duplicate_max_age: int = 3
    max_features: int = 400


@dataclass
class MatchSet:
    pairs: np.ndarray  # (K,2): keyframe feature index, live feature index
    distances: np.ndarray

    def __len__(self) -> int:
        return len(self.pairs)


def should_attempt(detection: Detection, model: ObjectModel, image_shape,
                   ratio_threshold: float = 0.7, border_margin: int = 20) -> bool:
    """Gate: mask-size ratio strictly above the threshold and the detection
    centroid away from every image edge."""
    if model.S_max <= 0:
        warnings.warn(f"model {model.id} has S_max=0; relocalisation skipped", RuntimeWarning)
        return False
    if detection.size == 0:
        return False
    h, w = image_shape
    cu, cv = detection.centroid
    if cu < border_margin or cu > w - 1 - border_margin:
        return False
    if cv < border_margin or cv > h - 1 - border_margin:
        return False
    return detection.size / model.S_max > ratio_threshold


def match_against_keyframes(model: ObjectModel, live: Features,
                            hamming_threshold: int = 64, ratio: float = 0.8,
                            min_matches: int = 12):
    """Best keyframe by mutual-NN match count; None when no keyframe reaches
    the minimum."""
    best = None
    for idx, kf in enumerate(model.keyframes):
        pairs, dists = match_descriptors(kf.descriptors, live.descriptors,
                                         max_distance=hamming_threshold, ratio=ratio)
        if best is None or len(pairs) > len(best[1].pairs):
            best = (idx, MatchSet(pairs, dists))
    if best is None or len(best[1]) < min_matches:
        return None
    return best


# ---------------------------------------------------------------------------
# Minimal 3-point pose + RANSAC
# ---------------------------------------------------------------------------


def _p3p_solutions(P: np.ndarray, f: np.ndarray):
    """Camera poses T with  s_i f_i = T(P_i)  from 3 points and unit bearings.

    Grunert-style formulation: eliminate the distance ratios into a quartic
    solved numerically; each admissible root gives camera-frame points, and
    absolute orientation recovers the rigid transform.
    """
    a = np.linalg.norm(P[1] - P[2])
    b = np.linalg.norm(P[0] - P[2])
    c = np.linalg.norm(P[0] - P[1])
    if min(a, b, c) < 1e-9 or b < 1e-9:
        return []
    cos_a = float(f[1] @ f[2])
    cos_b = float(f[0] @ f[2])
    cos_g = float(f[0] @ f[1])
    K1 = (a / b) ** 2
    K2 = (c / b) ** 2
    q = np.array([1.0, -2.0 * cos_b, 1.0])  # 1 - 2 v cos_b + v^2 (ascending)
    N = npoly.polyadd((K1 - K2) * q, np.array([1.0, 0.0, -1.0]))
    D = np.array([2.0 * cos_g, -2.0 * cos_a])
    C = npoly.polyadd(np.array([1.0]), -K2 * q)
    poly = npoly.polyadd(npoly.polymul(N, N),
                         npoly.polyadd(-2.0 * cos_g * npoly.polymul(N, D),
                                       npoly.polymul(C, npoly.polymul(D, D))))
    roots = npoly.polyroots(poly)
    out = []
    for v in roots:
        if abs(v.imag) > 1e-8 or v.real <= 1e-9:
            continue
        v = float(v.real)
        den = float(npoly.polyval(v, D))
        if abs(den) < 1e-12:
            continue
        u = float(npoly.polyval(v, N)) / den
        if u <= 1e-9:
            continue
        s1sq = b * b / max(1.0 + v * v - 2.0 * v * cos_b, 1e-12)
        s1 = np.sqrt(s1sq)
        s = np.array([s1, u * s1, v * s1])
        Q = s[:, None] * f
        T = _absolute_orientation(P, Q)
        if T is not None:
            out.append(T)
    return out


def _absolute_orientation(P: np.ndarray, Q: np.ndarray) -> Pose | None:
    """Rigid T with Q ~= T(P) for small point sets (SVD method)."""
    Pc = P - P.mean(axis=0)
    Qc = Q - Q.mean(axis=0)
    H = Pc.T @ Qc
    U, _, Vt = np.linalg.svd(H)
    R = Vt.T @ U.T
    if np.linalg.det(R) < 0:
        Vt = Vt.copy()
        Vt[2] *= -1
        R = Vt.T @ U.T
    t = Q.mean(axis=0) - R @ P.mean(axis=0)
    if not np.all(np.isfinite(R)):
        return None
    return Pose.from_rt(R, t)


def _reprojection_errors(T: Pose, points: np.ndarray, pixels: np.ndarray, K: CameraIntrinsics):
    p = points @ T.R.T + T.t
    z = p[:, 2]
    ok = z > 1e-9
    zs = np.where(ok, z, 1.0)
    uv = np.stack([K.fx * p[:, 0] / zs + K.cx, K.fy * p[:, 1] / zs + K.cy], axis=1)
    err = np.linalg.norm(uv - pixels, axis=1)
    err[~ok] = np.inf
    return err


def _refine_pose(T: Pose, points: np.ndarray, pixels: np.ndarray, K: CameraIntrinsics,
                 iterations: int = 10) -> Pose:
    for _ in range(iterations):
        p = points @ T.R.T + T.t
        z = p[:, 2]
        ok = z > 1e-9
        if not np.all(ok):
            p = p[ok]
            z = z[ok]
            px = pixels[ok]
            pts = points[ok]
        else:
            px = pixels
            pts = points
        if len(p) < 3:
            break
        uv = np.stack([K.fx * p[:, 0] / z + K.cx, K.fy * p[:, 1] / z + K.cy], axis=1)
        r = (uv - px).reshape(-1)
        J = np.zeros((len(p), 2, 6))
        rp = pts @ T.R.T
        for i in range(len(p)):
            dpi = np.array([[K.fx / z[i], 0.0, -K.fx * p[i, 0] / z[i] ** 2],
                            [0.0, K.fy / z[i], -K.fy * p[i, 1] / z[i] ** 2]])
            A = np.hstack([np.eye(3), -_skew(rp[i])])
            J[i] = dpi @ A
        Jf = J.reshape(-1, 6)
        H = Jf.T @ Jf + 1e-12 * np.eye(6)
        g = Jf.T @ r
        try:
            delta = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            break
        T = Pose((exp_so3(delta[3:]) * T.q).normalized(), T.t + delta[:3])
        if np.linalg.norm(delta) < 1e-12:
            break
    return T


def _skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def solve_pnp(points: np.ndarray, pixels: np.ndarray, K: CameraIntrinsics,
              seed: int = 0, iterations: int = 500, inlier_px: float = 2.0,
              min_inliers: int = 6):
    """RANSAC P3P + Gauss-Newton refinement.

    points are 3D in the keyframe camera frame, pixels are live detections.
    Returns (T_CR_CL, inlier mask) where T_CR_CL maps live-camera coordinates
    into the keyframe camera frame, or None when fewer than min_inliers agree.
    The match list is put into canonical order first, so the result is
    permutation invariant for a fixed seed.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    n = len(points)
    if n < 3:
        return None
    order = np.lexsort((points[:, 2], points[:, 1], points[:, 0], pixels[:, 1], pixels[:, 0]))
    points = points[order]
    pixels = pixels[order]

    bear = np.stack([(pixels[:, 0] - K.cx) / K.fx, (pixels[:, 1] - K.cy) / K.fy,
                     np.ones(n)], axis=1)
    bear /= np.linalg.norm(bear, axis=1, keepdims=True)

    rng = np.random.default_rng(seed)
    best_T = None
    best_inl = None
    best_count = 0
    for _ in range(iterations):
        idx = rng.choice(n, size=3, replace=False)
        for T in _p3p_solutions(points[idx], bear[idx]):
            err = _reprojection_errors(T, points, pixels, K)
            inl = err <= inlier_px
            count = int(np.count_nonzero(inl))
            if count > best_count:
                best_count = count
                best_T = T
                best_inl = inl
        if best_count == n:
            break
    if best_T is None or best_count < min_inliers:
        return None
    T = _refine_pose(best_T, points[best_inl], pixels[best_inl], K)
    err = _reprojection_errors(T, points, pixels, K)
    inliers_sorted = err <= inlier_px
    if int(np.count_nonzero(inliers_sorted)) < min_inliers:
        return None
    inliers = np.zeros(n, dtype=bool)
    inliers[order] = inliers_sorted
    # T maps keyframe-frame points into the live camera; report the inverse
    return T.inverse(), inliers


# ---------------------------------------------------------------------------
# Dense verification and recovery
# ---------------------------------------------------------------------------


@dataclass
class RecoveryResult:
    accepted: bool
    T_WO: Pose | None
    mean_residual: float
    valid_ratio: float


def verify_and_recover(model: ObjectModel, T_CLO_candidate: Pose, live_frame: Frame,
                       T_WCL: Pose, K: CameraIntrinsics,
                       tracking_cfg: TrackingConfig | None = None,
                       cfg: RelocConfig | None = None) -> RecoveryResult:
    """Refine the candidate pose densely against the model's own volume and
    accept when the geometry agrees.

    The object volume is raycast at the candidate pose into the live camera;
    the object-centric solve then runs with the geometric term only (keyframes
    store no dense intensity). On acceptance the model goes live with the
    refined T_WO; the caller handles duplicate-model deletion.
    """
    cfg = cfg or RelocConfig()
    tracking_cfg = tracking_cfg or TrackingConfig()
    T_WO_cand = T_WCL * T_CLO_candidate
    view = raycast([(model.id, model.volume, T_WO_cand)], None, T_WCL, K)
    sel = view.valid & (view.instance == model.id)
    if not sel.any():
        return RecoveryResult(False, None, np.inf, 0.0)
    live_mask = _dilate(sel, 6)
    res = solve_object_pose(T_CLO_candidate, T_CLO_candidate, T_WO_cand, T_WCL,
                            live_frame, None, view, model.id, live_mask, K,
                            tracking_cfg, use_photometric=False)
    accepted = (res.status == "ok"
                and res.mean_icp_residual < cfg.verify_residual_m
                and res.valid_ratio > cfg.verify_valid_ratio)
    if not accepted:
        return RecoveryResult(False, None, res.mean_icp_residual, res.valid_ratio)
    T_WO = T_WCL * res.T_CLO
    model.T_WO = T_WO
    model.status = "live"
    return RecoveryResult(True, T_WO, res.mean_icp_residual, res.valid_ratio)


def _dilate(mask: np.ndarray, px: int) -> np.ndarray:
    from scipy import ndimage

    return ndimage.binary_dilation(mask, iterations=px)


def attempt_relocalisation(model: ObjectModel, detection: Detection, live_frame: Frame,
                           live_features: Features, T_WCL: Pose, K: CameraIntrinsics,
                           seed: int = 0, tracking_cfg: TrackingConfig | None = None,
                           cfg: RelocConfig | None = None) -> RecoveryResult:
    """Full pipeline for one (lost model, detection) pair: match keyframes,
    PnP, dense verification."""
    cfg = cfg or RelocConfig()
    if len(model.keyframes) == 0 or len(live_features) == 0:
        return RecoveryResult(False, None, np.inf, 0.0)
    best = match_against_keyframes(model, live_features, cfg.hamming_threshold,
                                   cfg.ratio_test, cfg.min_matches)
    if best is None:
        return RecoveryResult(False, None, np.inf, 0.0)
    kf_idx, matches = best
    kf = model.keyframes[kf_idx]
    pts = kf.points[matches.pairs[:, 0]]
    pix = live_features.keypoints[matches.pairs[:, 1]]
    pnp = solve_pnp(pts, pix, K, seed=seed, iterations=cfg.ransac_iterations,
                    inlier_px=cfg.inlier_px, min_inliers=cfg.min_inliers)
    if pnp is None:
        return RecoveryResult(False, None, np.inf, 0.0)
    T_CR_CL, _ = pnp
    T_CLO = T_CR_CL.inverse() * kf.T_CO
    return verify_and_recover(model, T_CLO, live_frame, T_WCL, K, tracking_cfg, cfg)
