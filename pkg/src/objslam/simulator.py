"""Synthetic RGB-D + IMU + instance-mask sequence generator.

Scenes are closed-form primitives (plane / sphere / box) with procedural
albedo, moved along analytic trajectories; rendering is exact per-pixel ray
intersection, IMU signals come from the trajectory derivatives. Everything is
seeded from a single config seed, so re-runs are bit-identical.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .dataset import (
    write_classmap,
    write_depth16,
    write_frames_csv,
    write_gray8,
    write_mask16,
    write_tum,
)
from .imu import ImuMeasurement, ImuNoiseParams, save_imu_csv
from .manifold import CameraIntrinsics, Pose, Quaternion, log_so3, save_calibration

G_W = np.array([0.0, 0.0, -9.81])
LIGHT_DIR = np.array([0.35, -0.25, -0.9]) / np.linalg.norm([0.35, -0.25, -0.9])
AMBIENT = 0.35


def smootherstep(s):
    s = np.clip(s, 0.0, 1.0)
    return s * s * s * (s * (6.0 * s - 15.0) + 10.0)


def smootherstep_dot(s):
    s = np.clip(s, 0.0, 1.0)
    return 30.0 * s * s * (s - 1.0) * (s - 1.0)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Quaternion:
    """Camera orientation with z forward (towards target), x right, y down."""
    f = np.asarray(target, dtype=float) - np.asarray(eye, dtype=float)
    f = f / np.linalg.norm(f)
    up = np.asarray(up, dtype=float)
    x = np.cross(f, up)
    n = np.linalg.norm(x)
    if n < 1e-9:
        raise ValueError("view direction parallel to up vector")
    x = x / n
    y = np.cross(f, x)
    R = np.stack([x, y, f], axis=1)
    return Quaternion.from_rotation_matrix(R)


class TrajectorySpec:
    """Analytic pose curve: clamped cubic spline for translation, eased slerp
    between quaternion keyframes for rotation."""

    def __init__(self, times, positions, rot_times=None, rot_quats=None):
        self.times = np.asarray(times, dtype=float)
        self.positions = np.asarray(positions, dtype=float)
        if len(self.times) < 2:
            raise ValueError("need at least two waypoints")
        self._spline = CubicSpline(self.times, self.positions, axis=0, bc_type="clamped")
        self._vel = self._spline.derivative(1)
        self._acc = self._spline.derivative(2)
        if rot_times is None:
            rot_times = [self.times[0], self.times[-1]]
            rot_quats = [Quaternion.identity(), Quaternion.identity()]
        self.rot_times = np.asarray(rot_times, dtype=float)
        self.rot_quats = list(rot_quats)
        # world-frame rotation increments between keyframes
        self._rot_deltas = []
        for q0, q1 in zip(self.rot_quats, self.rot_quats[1:]):
            self._rot_deltas.append(log_so3((q1 * q0.conjugate()).normalized()))

    @property
    def t_start(self) -> float:
        return float(self.times[0])

    @property
    def t_end(self) -> float:
        return float(self.times[-1])

    def _clamp(self, t):
        return float(np.clip(t, self.times[0], self.times[-1]))

    def position(self, t):
        return self._spline(self._clamp(t))

    def velocity(self, t):
        return self._vel(self._clamp(t))

    def acceleration(self, t):
        return self._acc(self._clamp(t))

    def _segment(self, t):
        t = float(np.clip(t, self.rot_times[0], self.rot_times[-1]))
        i = int(np.searchsorted(self.rot_times, t, side="right")) - 1
        i = min(max(i, 0), len(self.rot_times) - 2)
        dt = self.rot_times[i + 1] - self.rot_times[i]
        s = (t - self.rot_times[i]) / dt
        return i, s, dt

    def rotation(self, t) -> Quaternion:
        from .manifold import exp_so3

        i, s, _ = self._segment(t)
        phi = self._rot_deltas[i] * smootherstep(s)
        return (exp_so3(phi) * self.rot_quats[i]).normalized()

    def angular_velocity_world(self, t):
        i, s, dt = self._segment(t)
        return self._rot_deltas[i] * (smootherstep_dot(s) / dt)

    def pose(self, t) -> Pose:
        return Pose(self.rotation(t), self.position(t))

    @staticmethod
    def static(pose: Pose, t0=0.0, t1=1e6) -> "TrajectorySpec":
        traj = TrajectorySpec([t0, t1], [pose.t, pose.t],
                              [t0, t1], [pose.q, pose.q])
        return traj


@dataclass
class Albedo:
    kind: str = "uniform"  # uniform | checker | noise
    scale: float = 0.2
    v0: float = 0.5
    v1: float = 0.9
    seed: int = 0


def _value_noise(p, scale, seed):
    """Deterministic band-limited value noise in [0,1] at points (N,3)."""
    g = p / scale
    base = np.floor(g)
    f = smootherstep(g - base)
    out = np.zeros(len(p))
    for corner in range(8):
        d = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1], dtype=float)
        node = base + d
        h = np.sin(node[:, 0] * 12.9898 + node[:, 1] * 78.233 + node[:, 2] * 37.719 + seed * 0.6180339887)
        h = (h * 43758.5453) % 1.0
        w = np.prod(np.where(d[None, :] == 1, f, 1.0 - f), axis=1)
        out += w * h
    return out


def _albedo_at(albedo: Albedo, p):
    if albedo.kind == "uniform":
        return np.full(len(p), albedo.v0)
    if albedo.kind == "checker":
        # half-cell offset keeps coordinate planes (z=0 in primitive frames)
        # away from cell boundaries
        cells = np.floor(p / albedo.scale + 0.5).astype(np.int64)
        parity = (cells[:, 0] + cells[:, 1] + cells[:, 2]) % 2
        return np.where(parity == 0, albedo.v0, albedo.v1)
    if albedo.kind == "noise":
        n = _value_noise(p, albedo.scale, albedo.seed)
        return albedo.v0 + (albedo.v1 - albedo.v0) * n
    raise ValueError(f"unknown albedo kind {albedo.kind!r}")


@dataclass
class Primitive:
    """One scene element; geometry lives in the primitive frame."""

    kind: str  # plane | sphere | box
    instance_id: int = 0  # 0 = background
    class_id: int = 0
    albedo: Albedo = field(default_factory=Albedo)
    pose: Pose = field(default_factory=Pose.identity)
    trajectory: TrajectorySpec | None = None
    radius: float = 0.5
    half_extents: np.ndarray = field(default_factory=lambda: np.array([0.1, 0.1, 0.1]))
    plane_extents: tuple | None = None  # (hx, hy) or None for infinite

    def pose_at(self, t) -> Pose:
        return self.trajectory.pose(t) if self.trajectory is not None else self.pose


@dataclass
class SceneSpec:
    primitives: list
    gravity: np.ndarray = field(default_factory=lambda: G_W.copy())

    def __post_init__(self):
        static_bg = [p for p in self.primitives
                     if p.instance_id == 0 and p.trajectory is None]
        if not static_bg:
            raise ValueError("scene needs at least one static background primitive")

    def objects(self):
        return [p for p in self.primitives if p.instance_id != 0]


def _intersect_plane(o, d, extents):
    dz = d[:, 2]
    safe = np.where(np.abs(dz) < 1e-12, 1e-12, dz)
    s = -o[2] / safe
    p = o[None, :] + s[:, None] * d
    ok = (np.abs(dz) > 1e-12) & (s > 1e-6)
    if extents is not None:
        ok &= (np.abs(p[:, 0]) <= extents[0]) & (np.abs(p[:, 1]) <= extents[1])
    n = np.tile(np.array([0.0, 0.0, 1.0]), (len(d), 1))
    return np.where(ok, s, np.inf), n


def _intersect_sphere(o, d, r):
    a = np.sum(d * d, axis=1)
    b = 2.0 * d @ o
    c = o @ o - r * r
    disc = b * b - 4 * a * c
    ok = disc > 0
    s = np.full(len(d), np.inf)
    sq = np.sqrt(np.maximum(disc, 0.0))
    s0 = (-b - sq) / (2 * a)
    s1 = (-b + sq) / (2 * a)
    cand = np.where(s0 > 1e-6, s0, np.where(s1 > 1e-6, s1, np.inf))
    s[ok] = cand[ok]
    p = o[None, :] + s[:, None] * d
    n = p / r
    return s, n


def _intersect_box(o, d, he):
    eps = 1e-12
    safe = np.where(np.abs(d) < eps, eps, d)
    t0 = (-he[None, :] - o[None, :]) / safe
    t1 = (he[None, :] - o[None, :]) / safe
    tlo = np.minimum(t0, t1)
    thi = np.maximum(t0, t1)
    entry_axis = np.argmax(tlo, axis=1)
    s_in = np.max(tlo, axis=1)
    s_out = np.min(thi, axis=1)
    ok = (s_in <= s_out) & (s_in > 1e-6)
    s = np.where(ok, s_in, np.inf)
    n = np.zeros((len(d), 3))
    rows = np.arange(len(d))
    n[rows, entry_axis] = -np.sign(d[rows, entry_axis])
    return s, n


def render_frame(scene: SceneSpec, t: float, T_WC: Pose, K: CameraIntrinsics,
                 rng: np.random.Generator | None = None,
                 depth_sigma_px: float = 0.0, intensity_sigma: float = 0.0):
    """Ray-trace one frame: (intensity [0,1], depth m (0 invalid), instance ids).

    Depth follows the camera-z convention; depth noise applies the
    disparity-model standard deviation d^2 / (f b) * depth_sigma_px.
    """
    h, w = K.height, K.width
    uu, vv = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    dirs_c = np.stack([(uu - K.cx) / K.fx, (vv - K.cy) / K.fy, np.ones_like(uu)], axis=-1).reshape(-1, 3)

    best_s = np.full(h * w, np.inf)
    best_inst = np.zeros(h * w, dtype=np.int32)
    best_albedo = np.zeros(h * w)
    best_normal_w = np.zeros((h * w, 3))

    for prim in scene.primitives:
        T_WP = prim.pose_at(t)
        T_PC = T_WP.inverse() * T_WC
        o = T_PC.t
        d = dirs_c @ T_PC.R.T
        if prim.kind == "plane":
            s, n_p = _intersect_plane(o, d, prim.plane_extents)
        elif prim.kind == "sphere":
            s, n_p = _intersect_sphere(o, d, prim.radius)
        elif prim.kind == "box":
            s, n_p = _intersect_box(o, d, np.asarray(prim.half_extents, dtype=float))
        else:
            raise ValueError(f"unknown primitive kind {prim.kind!r}")
        closer = s < best_s
        if not np.any(closer):
            continue
        idx = np.nonzero(closer)[0]
        p_prim = o[None, :] + s[idx, None] * d[idx]
        n_prim = n_p[idx]
        # orient toward the camera
        flip = np.sum(n_prim * d[idx], axis=1) > 0
        n_prim[flip] = -n_prim[flip]
        best_s[idx] = s[idx]
        best_inst[idx] = prim.instance_id
        best_albedo[idx] = _albedo_at(prim.albedo, p_prim)
        best_normal_w[idx] = n_prim @ T_WP.R.T

    hit = np.isfinite(best_s)
    shade = AMBIENT + (1.0 - AMBIENT) * np.maximum(0.0, best_normal_w @ (-LIGHT_DIR))
    intensity = np.where(hit, np.clip(best_albedo * shade, 0.0, 1.0), 0.0)
    depth = np.where(hit, best_s, 0.0)
    inst = np.where(hit, best_inst, 0).astype(np.int32)

    if rng is not None and intensity_sigma > 0:
        intensity = np.clip(intensity + rng.normal(0.0, intensity_sigma, intensity.shape), 0.0, 1.0)
    if rng is not None and depth_sigma_px > 0:
        sigma = depth ** 2 / (K.fx * K.baseline) * depth_sigma_px
        depth = np.where(hit, np.maximum(depth + rng.normal(0.0, 1.0, depth.shape) * sigma, 0.01), 0.0)

    return intensity.reshape(h, w), depth.reshape(h, w), inst.reshape(h, w)


def synthesize_imu(cam_traj: TrajectorySpec, T_SC: Pose, rate_hz: float,
                   params: ImuNoiseParams, duration: float,
                   rng: np.random.Generator | None = None,
                   with_noise: bool = False) -> list[ImuMeasurement]:
    """Exact IMU signals of the sensor frame along the camera trajectory.

    omega from the analytic angular velocity; specific force a = R_SW (a_W - g).
    The lever-arm acceleration (camera-to-sensor offset) is differentiated
    numerically with a 1e-4 s central stencil, exact when the offset is zero.
    """
    T_CS = T_SC.inverse()
    lever = np.asarray(T_CS.t, dtype=float)
    has_lever = float(np.linalg.norm(lever)) > 0.0
    n = int(round(duration * rate_hz))
    g = params.gravity

    out = []
    b_g = np.zeros(3)
    b_a = np.zeros(3)
    dt = 1.0 / rate_hz
    for k in range(n):
        t = k * dt
        R_WC = cam_traj.rotation(t).rotation_matrix()
        R_WS = R_WC @ T_CS.R
        w_world = cam_traj.angular_velocity_world(t)
        omega = R_WS.T @ w_world
        acc_w = cam_traj.acceleration(t)
        if has_lever:
            h = 1e-4
            l0 = cam_traj.rotation(t - h).rotation_matrix() @ lever
            l1 = R_WC @ lever
            l2 = cam_traj.rotation(t + h).rotation_matrix() @ lever
            acc_w = acc_w + (l0 - 2 * l1 + l2) / (h * h)
        accel = R_WS.T @ (acc_w - g)
        if with_noise and rng is not None:
            b_g = b_g + rng.normal(0.0, params.sigma_gyro_bias * math.sqrt(dt), 3)
            b_a = b_a + rng.normal(0.0, params.sigma_accel_bias * math.sqrt(dt), 3)
            omega = omega + b_g + rng.normal(0.0, params.sigma_gyro * math.sqrt(rate_hz), 3)
            accel = accel + b_a + rng.normal(0.0, params.sigma_accel * math.sqrt(rate_hz), 3)
        out.append(ImuMeasurement(int(round(t * 1e9)), omega, accel))
    return out


def generate_dataset(scene: SceneSpec, cam_traj: TrajectorySpec, duration: float,
                     out_dir, K: CameraIntrinsics, T_SC: Pose | None = None,
                     seed: int = 0, frame_rate: float = 15.0, imu_rate: float = 200.0,
                     noise_params: ImuNoiseParams | None = None,
                     depth_sigma_px: float = 0.0, intensity_sigma: float = 0.0,
                     imu_noise: bool = False) -> int:
    """Write a full dataset; returns the frame count."""
    T_SC = T_SC or Pose.identity()
    noise_params = noise_params or ImuNoiseParams(gravity=scene.gravity)
    rng = np.random.default_rng(seed)
    os.makedirs(out_dir, exist_ok=True)
    for sub in ("intensity", "depth", "mask"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)

    measurements = synthesize_imu(cam_traj, T_SC, imu_rate, noise_params, duration,
                                  rng=rng, with_noise=imu_noise)
    save_imu_csv(os.path.join(out_dir, "imu.csv"), measurements)
    save_calibration(os.path.join(out_dir, "calib.txt"), K, T_SC)

    n_frames = int(round(duration * frame_rate))
    index = []
    cam_rows = []
    obj_rows: dict[int, list] = {p.instance_id: [] for p in scene.objects()}
    classmap = {p.instance_id: {p.class_id: 0.9} for p in scene.objects()}
    noisy = depth_sigma_px > 0 or intensity_sigma > 0
    for i in range(n_frames):
        t = i / frame_rate
        t_ns = int(round(t * 1e9))
        T_WC = cam_traj.pose(t)
        intensity, depth, inst = render_frame(
            scene, t, T_WC, K, rng=rng if noisy else None,
            depth_sigma_px=depth_sigma_px, intensity_sigma=intensity_sigma)
        write_gray8(os.path.join(out_dir, "intensity", f"{i:06d}.png"), intensity)
        write_depth16(os.path.join(out_dir, "depth", f"{i:06d}.png"), depth)
        write_mask16(os.path.join(out_dir, "mask", f"{i:06d}.png"), inst)
        index.append((i, t_ns))
        cam_rows.append((t, T_WC))
        for prim in scene.objects():
            obj_rows[prim.instance_id].append((t, prim.pose_at(t)))

    write_frames_csv(os.path.join(out_dir, "frames.csv"), index)
    write_tum(os.path.join(out_dir, "groundtruth_cam.txt"), cam_rows)
    for inst, rows in obj_rows.items():
        write_tum(os.path.join(out_dir, f"groundtruth_obj_{inst}.txt"), rows)
    write_classmap(os.path.join(out_dir, "classmap.txt"), classmap)
    return n_frames


# ---------------------------------------------------------------------------
# Named scenarios
# ---------------------------------------------------------------------------

DEFAULT_K = CameraIntrinsics(130.0, 130.0, 79.5, 59.5, 160, 120,
                             baseline=0.095, sigma_xy=0.5, sigma_z=0.1)

NOISY_DEPTH_SIGMA_PX = 0.1  # matches DEFAULT_K.sigma_z
NOISY_INTENSITY_SIGMA = 0.01


def _room_primitives():
    return [
        Primitive("plane", pose=Pose.identity(), plane_extents=(3.0, 2.0),
                  albedo=Albedo("checker", 0.25, 0.45, 0.8)),  # floor z=0
        Primitive("plane", pose=Pose(Quaternion.from_rotation_matrix(
            np.array([[0.0, 0.0, -1.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])), np.array([2.6, 0.0, 1.0])),
            plane_extents=(1.2, 2.0), albedo=Albedo("noise", 0.18, 0.35, 0.85, seed=3)),  # back wall x=2.6
        Primitive("plane", pose=Pose(Quaternion.from_rotation_matrix(
            np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]])), np.array([0.0, 1.6, 1.0])),
            plane_extents=(3.0, 1.2), albedo=Albedo("noise", 0.22, 0.3, 0.75, seed=5)),  # left wall y=1.6
        Primitive("plane", pose=Pose(Quaternion.from_rotation_matrix(
            np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])), np.array([0.0, -1.6, 1.0])),
            plane_extents=(3.0, 1.2), albedo=Albedo("noise", 0.2, 0.4, 0.9, seed=7)),  # right wall y=-1.6
    ]


def _chair(instance=1, pos=(1.9, 0.35, 0.22), trajectory=None):
    return Primitive("box", instance_id=instance, class_id=56,
                     albedo=Albedo("checker", 0.07, 0.25, 0.95),
                     pose=Pose(Quaternion.identity(), np.array(pos)),
                     trajectory=trajectory,
                     half_extents=np.array([0.16, 0.14, 0.22]))


def _ornament(instance=2, pos=(1.7, -0.55, 0.9)):
    return Primitive("sphere", instance_id=instance, class_id=47,
                     albedo=Albedo("checker", 0.08, 0.3, 0.85),
                     pose=Pose(Quaternion.identity(), np.array(pos)), radius=0.16)


def _cam_keyframes(eyes, targets, times):
    quats = [look_at(e, tg) for e, tg in zip(eyes, targets)]
    return TrajectorySpec(times, eyes, times, quats)


def _scenario_static_room(duration):
    scene = SceneSpec(_room_primitives() + [_chair(), _ornament()])
    t = np.linspace(0.0, duration, 6)
    eyes = np.array([
        [0.0, 0.0, 1.1], [0.0, 0.0, 1.1], [0.05, 0.25, 1.15],
        [0.1, -0.2, 1.05], [0.05, 0.15, 1.1], [0.0, 0.0, 1.1],
    ])
    targets = np.array([
        [2.2, 0.0, 0.8], [2.2, 0.0, 0.8], [2.2, 0.35, 0.75],
        [2.2, -0.3, 0.8], [2.2, 0.2, 0.85], [2.2, 0.0, 0.8],
    ])
    cam = _cam_keyframes(eyes, targets, t)
    return scene, cam


def _scenario_moving_chair(duration):
    t0, t1 = 0.3 * duration, 0.75 * duration
    chair_traj = TrajectorySpec(
        [0.0, t0, t1, duration],
        [[1.9, 0.45, 0.22], [1.9, 0.45, 0.22], [1.9, -0.35, 0.22], [1.9, -0.35, 0.22]],
    )
    scene = SceneSpec(_room_primitives() + [_chair(trajectory=chair_traj), _ornament()])
    t = np.linspace(0.0, duration, 5)
    eyes = np.array([
        [0.0, 0.0, 1.1], [0.0, 0.0, 1.1], [0.05, 0.1, 1.12],
        [0.08, -0.1, 1.08], [0.05, 0.0, 1.1],
    ])
    targets = np.array([
        [2.0, 0.1, 0.6], [2.0, 0.1, 0.6], [2.0, 0.1, 0.55],
        [2.0, -0.1, 0.6], [2.0, 0.0, 0.6],
    ])
    cam = _cam_keyframes(eyes, targets, t)
    return scene, cam


def _scenario_lost_and_found(duration):
    # object moves strictly while the camera looks away, mirroring a
    # move-it-behind-your-back experiment; object close enough that keyframe
    # features are plentiful at this resolution
    t_away0, t_away1 = 0.3 * duration, 0.7 * duration
    p_before = [1.25, 0.5, 0.95]
    p_after = [1.25, -0.1, 0.95]
    obj_traj = TrajectorySpec(
        [0.0, t_away0 + 0.05 * duration, t_away1 - 0.05 * duration, duration],
        [p_before, p_before, p_after, p_after],
    )
    # distinctive (non-repetitive) texture so keyframe features disambiguate
    obj = Primitive("box", instance_id=1, class_id=39,
                    albedo=Albedo("noise", 0.03, 0.05, 1.0, seed=19),
                    trajectory=obj_traj,
                    half_extents=np.array([0.16, 0.2, 0.17]))
    scene = SceneSpec(_room_primitives() + [obj])
    times = [0.0, 0.12 * duration, t_away0, t_away1, 0.86 * duration, duration]
    eyes = np.array([
        [0.0, 0.1, 1.0], [0.0, 0.1, 1.0], [0.0, 0.05, 1.0],
        [0.0, 0.05, 1.0], [0.0, 0.1, 1.0], [0.0, 0.1, 1.0],
    ])
    targets = np.array([
        p_before, p_before, [1.4, -1.5, 0.8],
        [1.4, -1.5, 0.8], p_after, p_after,
    ])
    cam = _cam_keyframes(eyes, targets, times)
    return scene, cam


def _scenario_fast_dynamic(duration):
    t0, t1 = 0.25 * duration, 0.8 * duration
    slide = 0.5
    cam_traj = TrajectorySpec(
        [0.0, t0, t1, duration],
        [[0.0, 0.0, 1.1], [0.0, 0.0, 1.1], [0.0, slide, 1.1], [0.0, slide, 1.1]],
        [0.0, duration],
        [look_at([0, 0, 1.1], [2.0, 0.0, 1.0]), look_at([0, 0, 1.1], [2.0, 0.0, 1.0])],
    )
    # the object slides in lockstep with the camera and fills most of the view
    obj_traj = TrajectorySpec(
        [0.0, t0, t1, duration],
        [[1.15, 0.0, 1.05], [1.15, 0.0, 1.05], [1.15, slide, 1.05], [1.15, slide, 1.05]],
    )
    obj = Primitive("box", instance_id=1, class_id=56,
                    albedo=Albedo("checker", 0.1, 0.25, 0.9),
                    trajectory=obj_traj,
                    half_extents=np.array([0.12, 0.55, 0.45]))
    scene = SceneSpec(_room_primitives() + [obj])
    return scene, cam_traj


def _scenario_texture_free(duration):
    wall = Primitive("plane", pose=Pose(Quaternion.from_rotation_matrix(
        np.array([[0.0, 0.0, -1.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])), np.array([2.0, 0.0, 1.0])),
        plane_extents=None, albedo=Albedo("uniform", v0=0.55))
    scene = SceneSpec([wall])
    cam = TrajectorySpec(
        [0.0, 0.3 * duration, duration],
        [[0.0, 0.0, 1.0], [0.0, 0.0, 1.0], [0.15, 0.1, 1.0]],
        [0.0, duration],
        [look_at([0, 0, 1.0], [2.0, 0.0, 1.0]), look_at([0, 0, 1.0], [2.0, 0.0, 1.0])],
    )
    return scene, cam


SCENARIOS = {
    "static-room": (_scenario_static_room, 10.0),
    "moving-chair": (_scenario_moving_chair, 8.0),
    "lost-and-found": (_scenario_lost_and_found, 10.0),
    "fast-dynamic": (_scenario_fast_dynamic, 8.0),
    "texture-free": (_scenario_texture_free, 4.0),
}


def generate_scenario(name: str, out_dir, seed: int = 0, noisy: bool = False,
                      frames: int | None = None, frame_rate: float = 15.0,
                      imu_rate: float = 200.0) -> int:
    """Generate a named scenario dataset; returns the frame count."""
    if name not in SCENARIOS:
        raise ValueError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}")
    builder, default_duration = SCENARIOS[name]
    duration = default_duration if frames is None else frames / frame_rate
    scene, cam = builder(duration)
    params = ImuNoiseParams()
    return generate_dataset(
        scene, cam, duration, out_dir, DEFAULT_K, Pose.identity(), seed=seed,
        frame_rate=frame_rate, imu_rate=imu_rate, noise_params=params,
        depth_sigma_px=NOISY_DEPTH_SIGMA_PX if noisy else 0.0,
        intensity_sigma=NOISY_INTENSITY_SIGMA if noisy else 0.0,
        imu_noise=noisy)
