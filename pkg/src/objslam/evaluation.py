"""Trajectory evaluation: ATE RMSE with optional rigid alignment, per-frame
drift series, camera-relative object-pose errors, and report/figure export."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .dataset import read_tum
from .manifold import Pose, Quaternion


class EvaluationError(RuntimeError):
    """Raised when trajectories cannot be associated or parsed."""


def associate_timestamps(t_a: np.ndarray, t_b: np.ndarray, tol: float = 0.01):
    """Greedy nearest-timestamp association within tol seconds; one-to-one."""
    pairs = []
    used_b: set[int] = set()
    j = 0
    order = np.argsort(t_b)
    t_b_sorted = t_b[order]
    for i, t in enumerate(t_a):
        k = int(np.searchsorted(t_b_sorted, t))
        best = None
        for cand in (k - 1, k):
            if 0 <= cand < len(t_b_sorted):
                d = abs(t_b_sorted[cand] - t)
                if d <= tol and (best is None or d < best[0]):
                    best = (d, cand)
        if best is not None:
            jb = int(order[best[1]])
            if jb not in used_b:
                used_b.add(jb)
                pairs.append((i, jb))
    return pairs


def align_rigid(src: np.ndarray, dst: np.ndarray):
    """Closed-form rotation+translation (no scale) minimising |dst - (R src + t)|^2."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    H = (src - mu_s).T @ (dst - mu_d)
    U, _, Vt = np.linalg.svd(H)
    S = np.eye(3)
    if np.linalg.det(Vt.T @ U.T) < 0:
        S[2, 2] = -1.0
    R = Vt.T @ S @ U.T
    t = mu_d - R @ mu_s
    return R, t


@dataclass
class EvaluationReport:
    rmse_m: float
    times: list
    err_trans_m: list
    err_rot_deg: list
    frame_count: int
    align: str

    def to_json(self, path) -> None:
        payload = {
            "rmse_m": self.rmse_m,
            "frame_count": self.frame_count,
            "align": self.align,
            "series": [
                {"t": t, "err_trans_m": et, "err_rot_deg": er}
                for t, et, er in zip(self.times, self.err_trans_m, self.err_rot_deg)
            ],
        }
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            json.dump(payload, f, indent=1)
            f.write("\n")

    @staticmethod
    def from_json(path) -> "EvaluationReport":
        with open(path, "r", encoding="utf-8") as f:
            d = json.load(f)
        series = d.get("series", [])
        return EvaluationReport(
            d["rmse_m"], [s["t"] for s in series], [s["err_trans_m"] for s in series],
            [s["err_rot_deg"] for s in series], d["frame_count"], d.get("align", "none"))


def evaluate_trajectories(t_est, poses_est, t_gt, poses_gt, align: str = "rigid",
                          tol: float = 0.01) -> EvaluationReport:
    """ATE RMSE over timestamp-associated pairs, plus the per-frame drift series."""
    if align not in ("rigid", "none"):
        raise ValueError("align must be 'rigid' or 'none'")
    pairs = associate_timestamps(np.asarray(t_est, dtype=float), np.asarray(t_gt, dtype=float), tol)
    if len(pairs) < 2:
        raise EvaluationError("fewer than 2 associable trajectory pairs")
    P_est = np.array([poses_est[i].t for i, _ in pairs])
    P_gt = np.array([poses_gt[j].t for _, j in pairs])
    if align == "rigid":
        R, t = align_rigid(P_est, P_gt)
    else:
        R, t = np.eye(3), np.zeros(3)
    P_al = P_est @ R.T + t
    err = P_al - P_gt
    trans = np.linalg.norm(err, axis=1)
    rmse = float(np.sqrt(np.mean(trans ** 2)))
    Rq = Quaternion.from_rotation_matrix(R)
    rots = []
    for (i, j) in pairs:
        q_al = (Rq * poses_est[i].q).normalized()
        dq = (poses_gt[j].q.conjugate() * q_al).normalized()
        ang = 2.0 * np.arccos(np.clip(abs(dq.w), -1.0, 1.0))
        rots.append(np.degrees(ang))
    times = [float(t_est[i]) for i, _ in pairs]
    return EvaluationReport(rmse, times, [float(x) for x in trans], [float(x) for x in rots],
                            len(pairs), align)


def evaluate_files(est_path, gt_path, align: str = "rigid", tol: float = 0.01) -> EvaluationReport:
    t_est, p_est = read_tum(est_path)
    t_gt, p_gt = read_tum(gt_path)
    if len(t_est) == 0 or len(t_gt) == 0:
        raise EvaluationError("empty trajectory file")
    return evaluate_trajectories(t_est, p_est, t_gt, p_gt, align=align, tol=tol)


def object_pose_errors(t_est_cam, p_est_cam, t_gt_cam, p_gt_cam,
                       t_est_obj, p_est_obj, t_gt_obj, p_gt_obj, tol: float = 0.01):
    """Per-frame object pose error, gauge-free.

    Works on camera-relative object poses C(t) = T_WC(t)^-1 T_WO(t) for both
    the estimate and the ground truth; the constant object-frame offset
    between the estimated model frame and the ground-truth primitive frame is
    anchored at the first common frame.

    Returns (times, translation errors m, rotation errors deg).
    """
    def rel_series(t_cam, p_cam, t_obj, p_obj):
        pairs = associate_timestamps(np.asarray(t_obj, dtype=float), np.asarray(t_cam, dtype=float), tol)
        return {round(float(t_obj[i]), 6): p_cam[j].inverse() * p_obj[i] for i, j in pairs}

    rel_est = rel_series(t_est_cam, p_est_cam, t_est_obj, p_est_obj)
    rel_gt = rel_series(t_gt_cam, p_gt_cam, t_gt_obj, p_gt_obj)
    common = sorted(set(rel_est) & set(rel_gt))
    if len(common) < 1:
        raise EvaluationError("no common object observations")
    t0 = common[0]
    offset = rel_gt[t0].inverse() * rel_est[t0]
    times, errs_t, errs_r = [], [], []
    for t in common:
        E = (rel_gt[t] * offset).inverse() * rel_est[t]
        times.append(t)
        errs_t.append(float(np.linalg.norm(E.t)))
        errs_r.append(float(np.degrees(E.rotation_angle_to(Pose.identity()))))
    return np.array(times), np.array(errs_t), np.array(errs_r)


# ---------------------------------------------------------------------------
# Drift CSV + figures
# ---------------------------------------------------------------------------


def export_plots(report: EvaluationReport, out_dir) -> dict:
    """Write the drift series as CSV and render the matching figures.

    Produces drift.csv (t,err_trans_m,err_rot_deg) plus drift_trans.png and
    drift_rot.png next to it. Returns the written paths.
    """
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "drift.csv")
    with open(csv_path, "w", encoding="utf-8", newline="\n") as f:
        f.write("t,err_trans_m,err_rot_deg\n")
        for t, et, er in zip(report.times, report.err_trans_m, report.err_rot_deg):
            f.write(f"{t:.9f},{et:.9f},{er:.9f}\n")

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = {"csv": csv_path}
    for key, series, label in (("trans", report.err_trans_m, "translation error [m]"),
                               ("rot", report.err_rot_deg, "rotation error [deg]")):
        fig, ax = plt.subplots(figsize=(6.0, 3.2))
        ax.plot(report.times, series, lw=1.2)
        ax.set_xlabel("time [s]")
        ax.set_ylabel(label)
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        p = os.path.join(out_dir, f"drift_{key}.png")
        fig.savefig(p, dpi=120)
        plt.close(fig)
        paths[key] = p
    return paths
