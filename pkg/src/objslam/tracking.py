"""RGB-D-inertial tracking: robustified Gauss-Newton over the joint
(reference, live) state pair, coarse-to-fine, with reference-state
marginalisation. Also hosts the object-centric 6-dof solver reused by the
object tracking and relocalisation stages.

Residual conventions:
  photometric e_p = I_R[u_R] - I_L[warp(u_R)]   anchored at reference pixels,
      warping through the *rendered* reference depth;
  ICP        e_g = n_r . (T_WCL v_L - v_r)      anchored at live pixels with
      projective association into the rendered reference maps;
  inertial   e_s = propagate(x_R) boxminus x_L  whitened by its information,
      one scalar Cauchy kernel on the whitened norm.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import imu as imu_mod
from .manifold import (
    CameraIntrinsics,
    InvalidDepth,
    Pose,
    StateVector,
    backproject,
    backproject_grid,
    boxminus,
    boxminus_jacobians,
    boxplus,
    exp_so3,
    project,
    skew,
)
from .tsdf import RenderedView


# ---------------------------------------------------------------------------
# Config and small types
# ---------------------------------------------------------------------------


@dataclass
class TrackingConfig:
    pyramid_levels: int = 3
    max_iterations: int = 10
    step_tol: float = 1e-6
    sigma_intensity: float = 0.02  # uniform photometric noise, [0,1] units
    cauchy_photo: float = 0.1
    cauchy_icp: float = 0.02
    cauchy_inertial: float = 3.0  # whitened units
    icp_dist_gate: float = 0.05
    icp_normal_gate_deg: float = 30.0
    icp_weight_cap: float = 1e6
    min_valid_pixels: int = 100
    min_object_pixels: int = 50
    vision_rank_tol: float = 1e-6

    @property
    def w_photo(self) -> float:
        return 1.0 / (self.sigma_intensity ** 2)


@dataclass
class Frame:
    """One RGB-D frame prepared for tracking; valid excludes bad depth and
    (for the reference role) pixels of moving objects."""

    t_ns: int
    intensity: np.ndarray
    depth: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.valid = np.asarray(self.valid, dtype=bool) & (self.depth > 0)


@dataclass
class MarginalizationPrior:
    H: np.ndarray  # 15x15 information
    b: np.ndarray  # 15 rhs (of H dx = b at the linearisation point)
    x_ref: StateVector

    def __post_init__(self):
        self.H = 0.5 * (self.H + self.H.T)


def make_initial_prior(x0: StateVector, sigma_r: float = 1e-4, sigma_rp: float = 0.02,
                       sigma_yaw: float = 100.0, sigma_v: float = 0.1,
                       sigma_bg: float = 0.01, sigma_ba: float = 0.1) -> MarginalizationPrior:
    """Anchor of the very first state: tight position (frame definition),
    gravity-observed roll/pitch, loose yaw, loose velocity and biases."""
    d = np.array([sigma_r] * 3 + [sigma_rp, sigma_rp, sigma_yaw] + [sigma_v] * 3
                 + [sigma_bg] * 3 + [sigma_ba] * 3)
    return MarginalizationPrior(np.diag(1.0 / d ** 2), np.zeros(15), x0.copy())


# ---------------------------------------------------------------------------
# Small residual-level operations (spec surface)
# ---------------------------------------------------------------------------


def cauchy(e: float, c: float):
    """(rho, IRLS weight) of the Cauchy kernel with scale c."""
    if c <= 0:
        raise ValueError("scale must be positive")
    r2 = (e / c) ** 2
    return 0.5 * c * c * np.log1p(r2), 1.0 / (1.0 + r2)


def depth_stddev(K: CameraIntrinsics, d: float) -> np.ndarray:
    """Per-axis depth noise (x, y, z) of the disparity sensor model."""
    if d <= 0:
        raise InvalidDepth(f"non-positive depth {d}")
    return np.array([d / K.fx * K.sigma_xy, d / K.fx * K.sigma_xy,
                     d * d / (K.fx * K.baseline) * K.sigma_z])


def icp_weight(n_r, sigma_D, cap: float = 1e6) -> float:
    """Inverse-covariance point-to-plane weight 1 / (n.n sigma.sigma)."""
    n_r = np.asarray(n_r, dtype=float)
    s = float(np.dot(sigma_D, sigma_D)) * float(np.dot(n_r, n_r))
    if s < 1.0 / cap:
        return cap
    return 1.0 / s


def _bilinear_with_gradient(img: np.ndarray, uv: np.ndarray):
    """Bilinear sample plus the exact derivative of the bilinear interpolant.

    Returns (values, dI/du, dI/dv, in_bounds)."""
    h, w = img.shape
    u = uv[:, 0]
    v = uv[:, 1]
    ok = (u >= 0) & (u <= w - 1 - 1e-9) & (v >= 0) & (v <= h - 1 - 1e-9)
    u0 = np.clip(np.floor(u).astype(np.int64), 0, w - 2)
    v0 = np.clip(np.floor(v).astype(np.int64), 0, h - 2)
    fu = np.clip(u - u0, 0.0, 1.0)
    fv = np.clip(v - v0, 0.0, 1.0)
    i00 = img[v0, u0]
    i01 = img[v0, u0 + 1]
    i10 = img[v0 + 1, u0]
    i11 = img[v0 + 1, u0 + 1]
    val = (1 - fv) * ((1 - fu) * i00 + fu * i01) + fv * ((1 - fu) * i10 + fu * i11)
    gu = (1 - fv) * (i01 - i00) + fv * (i11 - i10)
    gv = (1 - fu) * (i10 - i00) + fu * (i11 - i01)
    return val, gu, gv, ok


def photometric_residual(T_WCL: Pose, T_WCR: Pose, K: CameraIntrinsics,
                         I_R: np.ndarray, I_L: np.ndarray, D_R: np.ndarray, u_R):
    """Single-pixel photometric residual and its 1x6 live-pose Jacobian.

    Returns None when the reference depth is invalid or the warp leaves the
    live image (residual dropped, not an error).
    """
    u_R = np.asarray(u_R)
    d = float(D_R[int(u_R[1]), int(u_R[0])])
    if d <= 0:
        return None
    p_R = backproject(K, u_R, d)
    w_pt = T_WCR.transform(p_R)
    R_L = T_WCL.R
    p_L = R_L.T @ (w_pt - T_WCL.t)
    if p_L[2] <= 1e-9:
        return None
    uv = project(K, p_L)
    val, gu, gv, ok = _bilinear_with_gradient(I_L, uv[None, :])
    if not ok[0]:
        return None
    e = float(I_R[int(u_R[1]), int(u_R[0])] - val[0])
    z = p_L[2]
    dpi = np.array([[K.fx / z, 0.0, -K.fx * p_L[0] / z ** 2],
                    [0.0, K.fy / z, -K.fy * p_L[1] / z ** 2]])
    gp = gu[0] * dpi[0] + gv[0] * dpi[1]
    h = R_L @ gp
    J = np.empty(6)
    J[:3] = h
    J[3:] = -np.cross(h, w_pt - T_WCL.t)
    return e, J


def icp_correspondence(T_WCL: Pose, T_WCR: Pose, K: CameraIntrinsics, u_L, D_L):
    """Reference pixel for a live pixel via project/back-project; None if lost."""
    d = float(D_L[int(u_L[1]), int(u_L[0])])
    if d <= 0:
        return None
    p_L = backproject(K, u_L, d)
    p_R = T_WCR.inverse().transform(T_WCL.transform(p_L))
    if p_R[2] <= 1e-9:
        return None
    uv = project(K, p_R)
    if not (0 <= uv[0] <= K.width - 1 and 0 <= uv[1] <= K.height - 1):
        return None
    return uv


def icp_residual(T_WCL: Pose, v_L, v_r_W, n_r_W):
    """Point-to-plane residual n_r . (T v_L - v_r) and its 1x6 live-pose Jacobian."""
    n = np.asarray(n_r_W, dtype=float)
    w_pt = T_WCL.transform(np.asarray(v_L, dtype=float))
    e = float(n @ (w_pt - np.asarray(v_r_W, dtype=float)))
    m = T_WCL.q.rotate(v_L)
    J = np.empty(6)
    J[:3] = n
    J[3:] = -np.cross(n, m)
    return e, J


# ---------------------------------------------------------------------------
# Pyramids
# ---------------------------------------------------------------------------


@dataclass
class FrameLevel:
    K: CameraIntrinsics
    intensity: np.ndarray
    depth: np.ndarray
    valid: np.ndarray
    vertex: np.ndarray
    normal: np.ndarray
    normal_ok: np.ndarray


def _normals_from_vertices(vertex: np.ndarray, valid: np.ndarray):
    """Camera-frame normals by central differences, oriented toward the camera."""
    h, w = valid.shape
    du = np.zeros_like(vertex)
    dv = np.zeros_like(vertex)
    du[:, 1:-1] = vertex[:, 2:] - vertex[:, :-2]
    dv[1:-1, :] = vertex[2:, :] - vertex[:-2, :]
    ok = np.zeros((h, w), dtype=bool)
    ok[1:-1, 1:-1] = (valid[1:-1, 2:] & valid[1:-1, :-2] & valid[2:, 1:-1] & valid[:-2, 1:-1])
    n = np.cross(du.reshape(-1, 3), dv.reshape(-1, 3)).reshape(h, w, 3)
    norm = np.linalg.norm(n, axis=-1)
    ok &= norm > 1e-12
    n = np.where(ok[..., None], n / np.maximum(norm, 1e-12)[..., None], 0.0)
    flip = np.sum(n * vertex, axis=-1) > 0
    n[flip] = -n[flip]
    return n, ok


def build_frame_pyramid(frame: Frame, K: CameraIntrinsics, levels: int) -> list[FrameLevel]:
    out = []
    I, D, V = frame.intensity, frame.depth, frame.valid
    Kl = K
    for lvl in range(levels):
        vertex, dvalid = backproject_grid(Kl, D)
        normal, nok = _normals_from_vertices(vertex, dvalid & V)
        out.append(FrameLevel(Kl, I, D, V & dvalid, vertex, normal, nok))
        if lvl + 1 < levels:
            h2, w2 = I.shape[0] // 2, I.shape[1] // 2
            I = I[: 2 * h2, : 2 * w2].reshape(h2, 2, w2, 2).mean(axis=(1, 3))
            D = D[: 2 * h2 * 2: 2, : 2 * w2 * 2: 2][:h2, :w2]
            V = V[: 2 * h2 * 2: 2, : 2 * w2 * 2: 2][:h2, :w2]
            Kl = Kl.scaled(2)
    return out


@dataclass
class RenderedLevel:
    depth: np.ndarray
    vertex: np.ndarray
    normal: np.ndarray
    instance: np.ndarray
    valid: np.ndarray
    normal_ok: np.ndarray


def build_rendered_pyramid(view: RenderedView, levels: int) -> list[RenderedLevel]:
    out = []
    d, vx, nm, inst, val, nok = (view.depth, view.vertex, view.normal, view.instance,
                                 view.valid, view.normal_ok)
    for lvl in range(levels):
        out.append(RenderedLevel(d, vx, nm, inst, val, nok))
        if lvl + 1 < levels:
            d = d[::2, ::2]
            vx = vx[::2, ::2]
            nm = nm[::2, ::2]
            inst = inst[::2, ::2]
            val = val[::2, ::2]
            nok = nok[::2, ::2]
    return out


# ---------------------------------------------------------------------------
# Vectorized term builders
# ---------------------------------------------------------------------------


class _PhotoTerm:
    """Photometric residuals of one pyramid level, anchored at reference pixels."""

    def __init__(self, K, I_R, I_L, rend: RenderedLevel, usable: np.ndarray, cfg: TrackingConfig):
        self.K = K
        self.I_L = I_L
        self.cfg = cfg
        vs, us = np.nonzero(usable & (rend.depth > 0))
        self.i_ref = I_R[vs, us]
        d = rend.depth[vs, us]
        self.p_R = np.stack([(us - K.cx) / K.fx * d, (vs - K.cy) / K.fy * d, d], axis=1)
        self.n_candidates = len(vs)

    def evaluate(self, R_R, t_R, R_L, t_L, with_jac: bool):
        if self.n_candidates == 0:
            z = np.zeros((0,))
            return z, np.zeros((0, 6)), np.zeros((0, 6)), z
        K = self.K
        w_pt = self.p_R @ R_R.T + t_R
        rel = w_pt - t_L
        p_L = rel @ R_L
        zc = p_L[:, 2]
        ok = zc > 1e-9
        zs = np.where(ok, zc, 1.0)
        uv = np.stack([K.fx * p_L[:, 0] / zs + K.cx, K.fy * p_L[:, 1] / zs + K.cy], axis=1)
        val, gu, gv, inb = _bilinear_with_gradient(self.I_L, uv)
        ok &= inb
        e = self.i_ref - val
        if not with_jac:
            return e[ok], None, None, None
        gp = np.zeros((len(e), 3))
        gp[:, 0] = gu * K.fx / zs
        gp[:, 1] = gv * K.fy / zs
        gp[:, 2] = -(gu * K.fx * p_L[:, 0] + gv * K.fy * p_L[:, 1]) / zs ** 2
        h = gp @ R_L.T
        J_L = np.empty((len(e), 6))
        J_L[:, :3] = h
        J_L[:, 3:] = -np.cross(h, rel)
        J_R = np.empty((len(e), 6))
        J_R[:, :3] = -h
        J_R[:, 3:] = np.cross(h, self.p_R @ R_R.T)
        return e[ok], J_R[ok], J_L[ok], None


class _IcpTerm:
    """Point-to-plane residuals of one level, anchored at live pixels."""

    def __init__(self, K, live: FrameLevel, rend: RenderedLevel, usable: np.ndarray,
                 cfg: TrackingConfig, live_select: np.ndarray | None = None):
        self.K = K
        self.rend = rend
        self.usable = usable
        self.cfg = cfg
        sel = live.valid & live.normal_ok
        if live_select is not None:
            sel &= live_select
        vs, us = np.nonzero(sel)
        self.v_L = live.vertex[vs, us]
        self.n_L = live.normal[vs, us]
        d = live.depth[vs, us]
        sig = np.stack([d / K.fx * K.sigma_xy, d / K.fx * K.sigma_xy,
                        d * d / (K.fx * K.baseline) * K.sigma_z], axis=1)
        s2 = np.sum(sig * sig, axis=1)
        self.w_g = np.where(s2 < 1.0 / cfg.icp_weight_cap, cfg.icp_weight_cap, 1.0 / np.maximum(s2, 1e-30))
        self.n_candidates = len(vs)
        self.cos_gate = np.cos(np.radians(cfg.icp_normal_gate_deg))

    def evaluate(self, R_R, t_R, R_L, t_L, with_jac: bool):
        if self.n_candidates == 0:
            z = np.zeros((0,))
            return z, None, z, 0
        K = self.K
        rot_v = self.v_L @ R_L.T
        w_pt = rot_v + t_L
        p_R = (w_pt - t_R) @ R_R
        zc = p_R[:, 2]
        ok = zc > 1e-9
        zs = np.where(ok, zc, 1.0)
        u = np.round(K.fx * p_R[:, 0] / zs + K.cx).astype(np.int64)
        v = np.round(K.fy * p_R[:, 1] / zs + K.cy).astype(np.int64)
        ok &= (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
        uc = np.clip(u, 0, K.width - 1)
        vc = np.clip(v, 0, K.height - 1)
        ok &= self.usable[vc, uc] & self.rend.normal_ok[vc, uc]
        v_r = self.rend.vertex[vc, uc]
        n_r = self.rend.normal[vc, uc]
        diff = w_pt - v_r
        ok &= np.linalg.norm(diff, axis=1) <= self.cfg.icp_dist_gate
        n_live_w = self.n_L @ R_L.T
        ok &= np.sum(n_live_w * n_r, axis=1) >= self.cos_gate
        e = np.sum(n_r * diff, axis=1)
        if not with_jac:
            return e[ok], None, self.w_g[ok], int(np.count_nonzero(ok))
        J = np.empty((len(e), 6))
        J[:, :3] = n_r
        J[:, 3:] = -np.cross(n_r, rot_v)
        return e[ok], J[ok], self.w_g[ok], int(np.count_nonzero(ok))


# ---------------------------------------------------------------------------
# Joint camera solve
# ---------------------------------------------------------------------------


@dataclass
class TrackingResult:
    x_R: StateVector
    x_L: StateVector
    H: np.ndarray  # 30x30 joint normal-equation matrix at convergence
    b: np.ndarray  # 30 rhs
    cost: float
    n_dense: int  # valid photo+ICP residuals at the finest level
    status: str  # ok | degenerate
    vision_degenerate: bool = False


def _prior_terms(prior: MarginalizationPrior, x_R: StateVector):
    r = boxminus(x_R, prior.x_ref)
    J1, _ = boxminus_jacobians(x_R, prior.x_ref)
    grad = prior.H @ r - prior.b
    Hc = J1.T @ prior.H @ J1
    bc = -J1.T @ grad
    cost = 0.5 * r @ prior.H @ r - r @ prior.b
    return Hc, bc, cost


def _inertial_terms(x_R, x_L, batch, params, T_SC, cfg: TrackingConfig, with_jac=True):
    res = imu_mod.inertial_residual(x_R, x_L, batch, params, T_SC)
    L = np.linalg.cholesky(res.information)
    wn = float(np.linalg.norm(L.T @ res.error))
    rho, k = cauchy(wn, cfg.cauchy_inertial)
    if not with_jac:
        return None, None, rho
    J = np.hstack([res.J_ref, res.J_live])  # 15 x 30
    Hc = k * (J.T @ res.information @ J)
    bc = -k * (J.T @ (res.information @ res.error))
    return Hc, bc, rho


def solve_tracking(x_R: StateVector, x_L_init: StateVector, ref_frame: Frame | None,
                   live_frame: Frame, rendered: RenderedView | None,
                   batch, prior: MarginalizationPrior, K: CameraIntrinsics,
                   cfg: TrackingConfig | None = None,
                   imu_params: imu_mod.ImuNoiseParams | None = None,
                   T_SC: Pose | None = None,
                   moving_ids: set | frozenset = frozenset(),
                   use_inertial: bool = True) -> TrackingResult:
    """Minimise E_track over the joint (x_R, x_L) pair.

    Dense terms come from the rendered reference view (photometric anchored at
    reference pixels, ICP at live pixels); `moving_ids` excludes rendered
    pixels of those instances from both. On degeneracy the live state falls
    back to IMU propagation and the returned system carries prior+inertial
    terms only.
    """
    cfg = cfg or TrackingConfig()
    imu_params = imu_params or imu_mod.ImuNoiseParams()
    T_SC = T_SC or Pose.identity()

    x_R = x_R.copy()
    x_L = x_L_init.copy()

    # pyramids and per-level term builders
    photo_terms: list[_PhotoTerm | None] = [None] * cfg.pyramid_levels
    icp_terms: list[_IcpTerm | None] = [None] * cfg.pyramid_levels
    n_finest = 0
    if rendered is not None and ref_frame is not None:
        live_pyr = build_frame_pyramid(live_frame, K, cfg.pyramid_levels)
        rend_pyr = build_rendered_pyramid(rendered, cfg.pyramid_levels)
        ref_I = ref_frame.intensity
        usable_full = rendered.valid.copy()
        if moving_ids:
            usable_full &= ~np.isin(rendered.instance, list(moving_ids))
        usable = usable_full
        I_R_lvl = ref_I
        for lvl in range(cfg.pyramid_levels):
            photo_terms[lvl] = _PhotoTerm(live_pyr[lvl].K, I_R_lvl, live_pyr[lvl].intensity,
                                          rend_pyr[lvl], usable, cfg)
            icp_terms[lvl] = _IcpTerm(live_pyr[lvl].K, live_pyr[lvl], rend_pyr[lvl], usable, cfg)
            if lvl + 1 < cfg.pyramid_levels:
                h2, w2 = I_R_lvl.shape[0] // 2, I_R_lvl.shape[1] // 2
                I_R_lvl = I_R_lvl[: 2 * h2, : 2 * w2].reshape(h2, 2, w2, 2).mean(axis=(1, 3))
                usable = usable[::2, ::2]
        n_finest = photo_terms[0].n_candidates + icp_terms[0].n_candidates

    def assemble(lvl, xr, xl, with_jac=True):
        H = np.zeros((30, 30))
        b = np.zeros(30)
        cost = 0.0
        n_valid = 0
        R_R, t_R = xr.q_WC.rotation_matrix(), xr.r_WC
        R_L, t_L = xl.q_WC.rotation_matrix(), xl.r_WC
        pt = photo_terms[lvl]
        if pt is not None:
            e, J_R, J_L, _ = pt.evaluate(R_R, t_R, R_L, t_L, with_jac)
            r2 = (e / cfg.cauchy_photo) ** 2
            kw = cfg.w_photo / (1.0 + r2)
            cost += float(np.sum(0.5 * cfg.w_photo * cfg.cauchy_photo ** 2 * np.log1p(r2)))
            n_valid += len(e)
            if with_jac and len(e):
                Jw_R = J_R * kw[:, None]
                Jw_L = J_L * kw[:, None]
                H[0:6, 0:6] += J_R.T @ Jw_R
                H[0:6, 15:21] += J_R.T @ Jw_L
                H[15:21, 0:6] += J_L.T @ Jw_R
                H[15:21, 15:21] += J_L.T @ Jw_L
                b[0:6] -= Jw_R.T @ e
                b[15:21] -= Jw_L.T @ e
        it = icp_terms[lvl]
        if it is not None:
            e, J, w_g, n_ok = it.evaluate(R_R, t_R, R_L, t_L, with_jac)
            r2 = (e / cfg.cauchy_icp) ** 2
            kw = w_g / (1.0 + r2)
            cost += float(np.sum(0.5 * w_g * cfg.cauchy_icp ** 2 * np.log1p(r2)))
            n_valid += n_ok
            if with_jac and len(e):
                Jw = J * kw[:, None]
                H[15:21, 15:21] += J.T @ Jw
                b[15:21] -= Jw.T @ e
        vision_H = H.copy()
        if use_inertial and batch is not None:
            Hi, bi, rho = _inertial_terms(xr, xl, batch, imu_params, T_SC, cfg, with_jac)
            cost += rho
            if with_jac:
                H += Hi
                b += bi
        Hp, bp, cp = _prior_terms(prior, xr)
        cost += cp
        if with_jac:
            H[:15, :15] += Hp
            b[:15] += bp
        return H, b, cost, n_valid, vision_H

    # degeneracy pre-check at the finest level with the initial poses
    dense_available = rendered is not None and ref_frame is not None
    if dense_available:
        _, _, _, n0, _ = assemble(0, x_R, x_L, with_jac=False)
        dense_available = n0 >= cfg.min_valid_pixels

    if not dense_available:
        if batch is not None:
            x_L, _ = imu_mod.propagate(x_R, batch, imu_params, T_SC)
        else:
            x_L = x_R.copy()
        H, b, cost, _, _ = assemble_inertial_only(x_R, x_L, batch, imu_params, T_SC, cfg, prior)
        return TrackingResult(x_R, x_L, H, b, cost, 0, "degenerate", True)

    vision_degenerate = False
    for lvl in range(cfg.pyramid_levels - 1, -1, -1):
        H, b, cost, _, vision_H = assemble(lvl, x_R, x_L)
        if lvl == 0:
            ev = np.linalg.eigvalsh(vision_H[15:21, 15:21])
            vision_degenerate = ev[-1] <= 0 or ev[0] < cfg.vision_rank_tol * ev[-1]
        for _ in range(cfg.max_iterations):
            Hd = H + 1e-9 * max(np.max(np.diag(H)), 1.0) * np.eye(30)
            try:
                delta = np.linalg.solve(Hd, b)
            except np.linalg.LinAlgError:
                break
            if not np.all(np.isfinite(delta)):
                break
            step = 1.0
            accepted = False
            for _ in range(5):
                xr_new = boxplus(x_R, step * delta[:15])
                xl_new = boxplus(x_L, step * delta[15:])
                _, _, cost_new, _, _ = assemble(lvl, xr_new, xl_new, with_jac=False)
                if cost_new <= cost + 1e-12:
                    x_R, x_L = xr_new, xl_new
                    accepted = True
                    break
                step *= 0.5
            if not accepted:
                break
            if np.linalg.norm(step * delta) < cfg.step_tol:
                break
            H, b, cost, _, _ = assemble(lvl, x_R, x_L)

    if vision_degenerate and not use_inertial:
        if batch is not None:
            x_L, _ = imu_mod.propagate(x_R, batch, imu_params, T_SC)
        H, b, cost, _, _ = assemble_inertial_only(x_R, x_L, batch, imu_params, T_SC, cfg, prior)
        return TrackingResult(x_R, x_L, H, b, cost, n_finest, "degenerate", True)

    H, b, cost, n_valid, _ = assemble(0, x_R, x_L)
    return TrackingResult(x_R, x_L, H, b, cost, n_valid, "ok", vision_degenerate)


def assemble_inertial_only(x_R, x_L, batch, imu_params, T_SC, cfg, prior):
    """Joint system from prior + inertial terms only (degenerate frames)."""
    H = np.zeros((30, 30))
    b = np.zeros(30)
    cost = 0.0
    if batch is not None:
        Hi, bi, rho = _inertial_terms(x_R, x_L, batch, imu_params, T_SC, cfg, True)
        H += Hi
        b += bi
        cost += rho
    Hp, bp, cp = _prior_terms(prior, x_R)
    H[:15, :15] += Hp
    b[:15] += bp
    return H, b, cost + cp, 0, None


# ---------------------------------------------------------------------------
# Marginalisation
# ---------------------------------------------------------------------------


def marginalize_reference(H: np.ndarray, b: np.ndarray, x_bar_live: StateVector) -> MarginalizationPrior:
    """Schur-complement the reference block (first 15 dims) out of the joint
    system H dx = b, leaving a prior on the live state."""
    H = np.asarray(H, dtype=float)
    b = np.asarray(b, dtype=float).reshape(30)
    H_rr = H[:15, :15]
    H_rl = H[:15, 15:]
    H_lr = H[15:, :15]
    H_ll = H[15:, 15:]
    b_r = b[:15]
    b_l = b[15:]
    try:
        X = np.linalg.solve(H_rr, H_rl)
        y = np.linalg.solve(H_rr, b_r)
        if np.linalg.cond(H_rr) > 1e14:
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        warnings.warn("rank-deficient reference block; using pseudo-inverse", RuntimeWarning)
        Hinv = np.linalg.pinv(H_rr)
        X = Hinv @ H_rl
        y = Hinv @ b_r
    H_star = H_ll - H_lr @ X
    b_star = b_l - H_lr @ y
    H_star = 0.5 * (H_star + H_star.T)
    w, V = np.linalg.eigh(H_star)
    if w[0] < -1e-9 * max(abs(w[-1]), 1.0):
        warnings.warn("marginalised prior not PSD; clamping negative eigenvalues", RuntimeWarning)
    if w[0] < 0:
        H_star = (V * np.maximum(w, 0.0)) @ V.T
    return MarginalizationPrior(H_star, b_star, x_bar_live.copy())


# ---------------------------------------------------------------------------
# Object-centric 6-dof solve (shared by object tracking and relocalisation)
# ---------------------------------------------------------------------------


@dataclass
class ObjectSolveResult:
    T_CLO: Pose
    status: str  # ok | lost
    mean_icp_residual: float
    valid_ratio: float
    n_residuals: int


def solve_object_pose(T_CLO_init: Pose, T_CRO: Pose, T_WO: Pose, T_WCR: Pose,
                      live_frame: Frame, ref_intensity: np.ndarray | None,
                      rendered: RenderedView, instance_id: int, live_mask: np.ndarray,
                      K: CameraIntrinsics, cfg: TrackingConfig | None = None,
                      use_photometric: bool = True) -> ObjectSolveResult:
    """Gauss-Newton over the live camera-object pose T_CLO.

    ICP (Eq-13 style, object frame) anchors at live pixels inside live_mask;
    the photometric term re-warps rendered reference object pixels into the
    live image. T_WO is held fixed throughout.
    """
    cfg = cfg or TrackingConfig()
    levels = cfg.pyramid_levels
    live_pyr = build_frame_pyramid(
        Frame(live_frame.t_ns, live_frame.intensity, live_frame.depth,
              live_frame.valid & live_mask), K, levels)
    rend_pyr = build_rendered_pyramid(rendered, levels)

    q_off = T_WO.inverse()
    ref_levels = []
    I_R = ref_intensity
    obj_sel = rendered.valid & (rendered.instance == instance_id)
    T_ORC = T_CRO.inverse()
    for lvl in range(levels):
        rl = rend_pyr[lvl]
        Kl = live_pyr[lvl].K
        sel = obj_sel & (rl.depth > 0)
        vs, us = np.nonzero(sel)
        d = rl.depth[vs, us]
        p_cr = np.stack([(us - Kl.cx) / Kl.fx * d, (vs - Kl.cy) / Kl.fy * d, d], axis=1)
        q_o = p_cr @ T_ORC.R.T + T_ORC.t  # object-frame anchor points
        i_ref = I_R[vs, us] if I_R is not None else None
        ref_levels.append((q_o, i_ref, sel))
        if lvl + 1 < levels and I_R is not None:
            h2, w2 = I_R.shape[0] // 2, I_R.shape[1] // 2
            I_R = I_R[: 2 * h2, : 2 * w2].reshape(h2, 2, w2, 2).mean(axis=(1, 3))
        obj_sel = obj_sel[::2, ::2]

    T = Pose(T_CLO_init.q, T_CLO_init.t.copy())

    def icp_data(lvl):
        lv = live_pyr[lvl]
        rl = rend_pyr[lvl]
        vs, us = np.nonzero(lv.valid & lv.normal_ok)
        v_l = lv.vertex[vs, us]
        d = lv.depth[vs, us]
        Kl = lv.K
        sig2 = 2 * (d / Kl.fx * Kl.sigma_xy) ** 2 + (d * d / (Kl.fx * Kl.baseline) * Kl.sigma_z) ** 2
        w_g = np.where(sig2 < 1.0 / cfg.icp_weight_cap, cfg.icp_weight_cap, 1.0 / np.maximum(sig2, 1e-30))
        return v_l, w_g, rl, Kl

    def assemble(lvl, T, with_jac=True):
        H = np.zeros((6, 6))
        b = np.zeros(6)
        cost = 0.0
        n_icp = 0
        sum_abs = 0.0
        sum_w = 0.0
        R = T.R
        t = T.t
        v_l, w_g, rl, Kl = icp_cache[lvl]
        # ICP: live pixels -> object frame -> correspondence in reference view
        if len(v_l):
            p_o = (v_l - t) @ R
            p_cr = p_o @ T_CRO.R.T + T_CRO.t
            zc = p_cr[:, 2]
            ok = zc > 1e-9
            zs = np.where(ok, zc, 1.0)
            u = np.round(Kl.fx * p_cr[:, 0] / zs + Kl.cx).astype(np.int64)
            v = np.round(Kl.fy * p_cr[:, 1] / zs + Kl.cy).astype(np.int64)
            ok &= (u >= 0) & (u < Kl.width) & (v >= 0) & (v < Kl.height)
            uc = np.clip(u, 0, Kl.width - 1)
            vc = np.clip(v, 0, Kl.height - 1)
            ok &= rl.valid[vc, uc] & rl.normal_ok[vc, uc] & (rl.instance[vc, uc] == instance_id)
            v_r_o = rl.vertex[vc, uc] @ q_off.R.T + q_off.t
            n_r_o = rl.normal[vc, uc] @ q_off.R.T
            diff = p_o - v_r_o
            ok &= np.linalg.norm(diff, axis=1) <= cfg.icp_dist_gate
            e = np.sum(n_r_o * diff, axis=1)
            e = e[ok]
            wg = w_g[ok]
            r2 = (e / cfg.cauchy_icp) ** 2
            kw = wg / (1.0 + r2)
            cost += float(np.sum(0.5 * wg * cfg.cauchy_icp ** 2 * np.log1p(r2)))
            n_icp = len(e)
            sum_abs += float(np.sum(kw * np.abs(e)))
            sum_w += float(np.sum(kw))
            if with_jac and len(e):
                h = n_r_o[ok] @ R.T
                J = np.empty((len(e), 6))
                J[:, :3] = -h
                J[:, 3:] = np.cross(h, v_l[ok] - t)
                Jw = J * kw[:, None]
                H += J.T @ Jw
                b -= Jw.T @ e
        # photometric: rendered reference object pixels -> live image
        q_o, i_ref, _ = ref_levels[lvl]
        if use_photometric and i_ref is not None and len(q_o):
            lv = live_pyr[lvl]
            Kl2 = lv.K
            p_l = q_o @ R.T + t
            zc = p_l[:, 2]
            ok = zc > 1e-9
            zs = np.where(ok, zc, 1.0)
            uv = np.stack([Kl2.fx * p_l[:, 0] / zs + Kl2.cx, Kl2.fy * p_l[:, 1] / zs + Kl2.cy], axis=1)
            val, gu, gv, inb = _bilinear_with_gradient(lv.intensity, uv)
            ok &= inb
            e = (i_ref - val)[ok]
            r2 = (e / cfg.cauchy_photo) ** 2
            kw = cfg.w_photo / (1.0 + r2)
            cost += float(np.sum(0.5 * cfg.w_photo * cfg.cauchy_photo ** 2 * np.log1p(r2)))
            if with_jac and len(e):
                gp = np.zeros((len(zs), 3))
                gp[:, 0] = gu * Kl2.fx / zs
                gp[:, 1] = gv * Kl2.fy / zs
                gp[:, 2] = -(gu * Kl2.fx * p_l[:, 0] + gv * Kl2.fy * p_l[:, 1]) / zs ** 2
                gp = gp[ok]
                rq = (q_o @ R.T)[ok]
                J = np.empty((len(e), 6))
                J[:, :3] = -gp
                J[:, 3:] = np.cross(gp, rq)
                Jw = J * kw[:, None]
                H += J.T @ Jw
                b -= Jw.T @ e
        return H, b, cost, n_icp, sum_abs, sum_w

    icp_cache = [icp_data(lvl) for lvl in range(levels)]

    for lvl in range(levels - 1, -1, -1):
        H, b, cost, *_ = assemble(lvl, T)
        for _ in range(cfg.max_iterations):
            Hd = H + 1e-9 * max(np.max(np.diag(H)), 1.0) * np.eye(6)
            try:
                delta = np.linalg.solve(Hd, b)
            except np.linalg.LinAlgError:
                break
            if not np.all(np.isfinite(delta)):
                break
            step, accepted = 1.0, False
            for _ in range(5):
                T_new = Pose((exp_so3(step * delta[3:]) * T.q).normalized(), T.t + step * delta[:3])
                _, _, c_new, *_ = assemble(lvl, T_new, with_jac=False)
                if c_new <= cost + 1e-12:
                    T, cost, accepted = T_new, c_new, True
                    break
                step *= 0.5
            if not accepted:
                break
            if np.linalg.norm(step * delta) < cfg.step_tol:
                break
            H, b, cost, *_ = assemble(lvl, T)

    _, _, _, n_icp, sum_abs, sum_w = assemble(0, T, with_jac=False)
    n_cand = len(icp_cache[0][0])
    ratio = n_icp / max(n_cand, 1)
    mean_res = sum_abs / max(sum_w, 1e-12)
    status = "ok" if n_icp >= cfg.min_object_pixels else "lost"
    return ObjectSolveResult(T, status, mean_res, ratio, n_icp)
