"""Coordinate frames, camera model, and the boxplus/boxminus state calculus.

Conventions, fixed project-wide:
  * Quaternions are Hamiltonian, stored scalar-first (w, x, y, z), unit norm.
  * Rotations are perturbed on the left: q boxplus da = exp_so3(da) * q.
  * A pose T_AB maps points from frame B to frame A: p_A = R_AB p_B + t_AB.
  * The system state is (r_WC, q_WC, v_S, b_g, b_a); its tangent is the
    15-vector (dr, dalpha, dv, db_g, db_a).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Tangent-space layout of the 15-dim state perturbation.
DR = slice(0, 3)
DALPHA = slice(3, 6)
DV = slice(6, 9)
DBG = slice(9, 12)
DBA = slice(12, 15)
STATE_DIM = 15


class InvalidProjection(ValueError):
    """Raised when a point with non-positive depth is projected."""


class InvalidDepth(ValueError):
    """Raised when back-projecting a non-positive depth."""


def skew(v) -> np.ndarray:
    """3x3 cross-product matrix: skew(a) @ b == cross(a, b)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


@dataclass
class Quaternion:
    """Unit Hamiltonian quaternion, scalar first. Treat instances as immutable."""

    w: float
    x: float
    y: float
    z: float

    @staticmethod
    def identity() -> "Quaternion":
        return Quaternion(1.0, 0.0, 0.0, 0.0)

    @staticmethod
    def from_array(a) -> "Quaternion":
        return Quaternion(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    def to_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    @property
    def vec(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    def norm(self) -> float:
        return math.sqrt(self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z)

    def normalized(self) -> "Quaternion":
        n = self.norm()
        if n == 0.0:
            raise ValueError("cannot normalize zero quaternion")
        return Quaternion(self.w / n, self.x / n, self.y / n, self.z / n)

    def conjugate(self) -> "Quaternion":
        return Quaternion(self.w, -self.x, -self.y, -self.z)

    inverse = conjugate  # unit quaternion

    def __mul__(self, other: "Quaternion") -> "Quaternion":
        """Hamilton product self * other."""
        w1, x1, y1, z1 = self.w, self.x, self.y, self.z
        w2, x2, y2, z2 = other.w, other.x, other.y, other.z
        return Quaternion(
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        )

    def rotation_matrix(self) -> np.ndarray:
        w, x, y, z = self.w, self.x, self.y, self.z
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )

    @staticmethod
    def from_rotation_matrix(R) -> "Quaternion":
        """Shepperd's method; returns the w >= 0 representative."""
        R = np.asarray(R, dtype=float)
        t = np.trace(R)
        if t > 0.0:
            s = math.sqrt(t + 1.0) * 2.0
            q = Quaternion(0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s)
        else:
            i = int(np.argmax(np.diag(R)))
            if i == 0:
                s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
                q = Quaternion((R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s)
            elif i == 1:
                s = math.sqrt(1.0 - R[0, 0] + R[1, 1] - R[2, 2]) * 2.0
                q = Quaternion((R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s)
            else:
                s = math.sqrt(1.0 - R[0, 0] - R[1, 1] + R[2, 2]) * 2.0
                q = Quaternion((R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s)
        q = q.normalized()
        if q.w < 0.0:
            q = Quaternion(-q.w, -q.x, -q.y, -q.z)
        return q

    def rotate(self, v) -> np.ndarray:
        return self.rotation_matrix() @ np.asarray(v, dtype=float)


def exp_so3(phi) -> Quaternion:
    """Quaternion exponential of a rotation vector (radians)."""
    phi = np.asarray(phi, dtype=float)
    angle = float(np.linalg.norm(phi))
    if angle < 1e-8:
        # Taylor: sin(a/2)/a = 1/2 - a^2/48, cos(a/2) = 1 - a^2/8
        s = 0.5 - angle * angle / 48.0
        q = Quaternion(1.0 - angle * angle / 8.0, s * phi[0], s * phi[1], s * phi[2])
    else:
        half = 0.5 * angle
        s = math.sin(half) / angle
        q = Quaternion(math.cos(half), s * phi[0], s * phi[1], s * phi[2])
    return q.normalized()


def log_so3(q: Quaternion) -> np.ndarray:
    """Rotation vector of a unit quaternion, minimal angle (norm <= pi).

    At exactly pi the axis sign is fixed so its first nonzero component
    is non-negative.
    """
    if q.w < 0.0:
        q = Quaternion(-q.w, -q.x, -q.y, -q.z)
    vec = q.vec
    s = float(np.linalg.norm(vec))
    if s < 1e-12:
        if q.w <= 1e-12:  # half turn, vec carries the axis but w ~ 0 handled below
            return np.zeros(3)
        return 2.0 * vec / q.w
    angle = 2.0 * math.atan2(s, q.w)
    axis = vec / s
    if abs(angle - math.pi) < 1e-12:
        for c in axis:
            if c != 0.0:
                if c < 0.0:
                    axis = -axis
                break
        angle = math.pi
    return angle * axis


def rotmat_exp_so3(phi) -> np.ndarray:
    """Rodrigues rotation matrix of a rotation vector."""
    return exp_so3(phi).rotation_matrix()


def left_jacobian_so3(phi) -> np.ndarray:
    """Left Jacobian J_l of SO(3) at phi (d Exp(phi+d)/dd = J_l(phi) ... )."""
    phi = np.asarray(phi, dtype=float)
    a = float(np.linalg.norm(phi))
    S = skew(phi)
    if a < 1e-6:
        return np.eye(3) + 0.5 * S + (S @ S) / 6.0
    a2 = a * a
    return np.eye(3) + (1.0 - math.cos(a)) / a2 * S + (a - math.sin(a)) / (a2 * a) * (S @ S)


def right_jacobian_so3(phi) -> np.ndarray:
    return left_jacobian_so3(-np.asarray(phi, dtype=float))


def inv_left_jacobian_so3(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    a = float(np.linalg.norm(phi))
    S = skew(phi)
    if a < 1e-6:
        return np.eye(3) - 0.5 * S + (S @ S) / 12.0
    a2 = a * a
    cot = 1.0 / a2 - (1.0 + math.cos(a)) / (2.0 * a * math.sin(a))
    return np.eye(3) - 0.5 * S + cot * (S @ S)


def inv_right_jacobian_so3(phi) -> np.ndarray:
    return inv_left_jacobian_so3(-np.asarray(phi, dtype=float))


@dataclass
class Pose:
    """Rigid transform (rotation + translation). Treat instances as immutable."""

    q: Quaternion = field(default_factory=Quaternion.identity)
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float).reshape(3)

    @staticmethod
    def identity() -> "Pose":
        return Pose(Quaternion.identity(), np.zeros(3))

    @staticmethod
    def from_matrix(T) -> "Pose":
        T = np.asarray(T, dtype=float)
        return Pose(Quaternion.from_rotation_matrix(T[:3, :3]), T[:3, 3].copy())

    @staticmethod
    def from_rt(R, t) -> "Pose":
        return Pose(Quaternion.from_rotation_matrix(R), np.asarray(t, dtype=float))

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.q.rotation_matrix()
        T[:3, 3] = self.t
        return T

    @property
    def R(self) -> np.ndarray:
        return self.q.rotation_matrix()

    def compose(self, other: "Pose") -> "Pose":
        """self * other (apply other first, then self)."""
        q = (self.q * other.q).normalized()
        return Pose(q, self.q.rotate(other.t) + self.t)

    __mul__ = compose

    def inverse(self) -> "Pose":
        qi = self.q.conjugate()
        return Pose(qi, -qi.rotate(self.t))

    def transform(self, p) -> np.ndarray:
        """Apply to a single point (3,) or an array of points (N, 3)."""
        p = np.asarray(p, dtype=float)
        if p.ndim == 1:
            return self.q.rotate(p) + self.t
        return p @ self.R.T + self.t

    def rotation_angle_to(self, other: "Pose") -> float:
        """Geodesic angle (rad) between the two rotations."""
        return float(np.linalg.norm(log_so3((self.q.conjugate() * other.q).normalized())))


@dataclass
class CameraIntrinsics:
    """Pinhole camera with the disparity-based depth noise parameters."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    baseline: float = 0.05
    sigma_xy: float = 0.5  # pixels
    sigma_z: float = 0.5  # pixels, disparity direction

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0 or self.baseline <= 0:
            raise ValueError("fx, fy and baseline must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def scaled(self, factor: float) -> "CameraIntrinsics":
        """Intrinsics of a pyramid level downsampled by `factor`."""
        return CameraIntrinsics(
            self.fx / factor,
            self.fy / factor,
            self.cx / factor,
            self.cy / factor,
            int(self.width // factor),
            int(self.height // factor),
            self.baseline,
            self.sigma_xy,
            self.sigma_z,
        )


@dataclass
class StateVector:
    """Camera pose, IMU velocity (sensor frame) and IMU biases.

    Treat instances as immutable: operations return new states.
    """

    r_WC: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q_WC: Quaternion = field(default_factory=Quaternion.identity)
    v_S: np.ndarray = field(default_factory=lambda: np.zeros(3))
    b_g: np.ndarray = field(default_factory=lambda: np.zeros(3))
    b_a: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.r_WC = np.asarray(self.r_WC, dtype=float).reshape(3)
        self.v_S = np.asarray(self.v_S, dtype=float).reshape(3)
        self.b_g = np.asarray(self.b_g, dtype=float).reshape(3)
        self.b_a = np.asarray(self.b_a, dtype=float).reshape(3)

    def pose(self) -> Pose:
        return Pose(self.q_WC, self.r_WC)

    def copy(self) -> "StateVector":
        return StateVector(self.r_WC.copy(), Quaternion(self.q_WC.w, self.q_WC.x, self.q_WC.y, self.q_WC.z),
                           self.v_S.copy(), self.b_g.copy(), self.b_a.copy())


def boxplus(x: StateVector, delta) -> StateVector:
    """Retract a 15-vector perturbation onto the state."""
    delta = np.asarray(delta, dtype=float).reshape(STATE_DIM)
    if not np.all(np.isfinite(delta)):
        raise ValueError("perturbation must be finite")
    q = (exp_so3(delta[DALPHA]) * x.q_WC).normalized()
    return StateVector(x.r_WC + delta[DR], q, x.v_S + delta[DV], x.b_g + delta[DBG], x.b_a + delta[DBA])


def boxminus(x1: StateVector, x0: StateVector) -> np.ndarray:
    """Perturbation delta with boxplus(x0, delta) == x1 (dalpha norm <= pi)."""
    delta = np.empty(STATE_DIM)
    delta[DR] = x1.r_WC - x0.r_WC
    delta[DALPHA] = log_so3((x1.q_WC * x0.q_WC.conjugate()).normalized())
    delta[DV] = x1.v_S - x0.v_S
    delta[DBG] = x1.b_g - x0.b_g
    delta[DBA] = x1.b_a - x0.b_a
    return delta


def boxminus_jacobians(x1: StateVector, x0: StateVector):
    """d(x1 boxminus x0) w.r.t. perturbations of x1 and of x0 (15x15 each)."""
    e_alpha = log_so3((x1.q_WC * x0.q_WC.conjugate()).normalized())
    J1 = np.eye(STATE_DIM)
    J0 = -np.eye(STATE_DIM)
    J1[DALPHA, DALPHA] = inv_left_jacobian_so3(e_alpha)
    J0[DALPHA, DALPHA] = -inv_right_jacobian_so3(e_alpha)
    return J1, J0


def project(K: CameraIntrinsics, p_C) -> np.ndarray:
    """Pinhole projection of a camera-frame point to pixel (u, v)."""
    p_C = np.asarray(p_C, dtype=float)
    if p_C[2] <= 0.0:
        raise InvalidProjection(f"non-positive depth {p_C[2]:.6f}")
    return np.array([K.fx * p_C[0] / p_C[2] + K.cx, K.fy * p_C[1] / p_C[2] + K.cy])


def backproject(K: CameraIntrinsics, u, d: float) -> np.ndarray:
    """Camera-frame point of pixel u at depth d (metres along the optical axis)."""
    if d <= 0.0:
        raise InvalidDepth(f"non-positive depth {d:.6f}")
    u = np.asarray(u, dtype=float)
    return np.array([(u[0] - K.cx) / K.fx * d, (u[1] - K.cy) / K.fy * d, d])


def project_points(K: CameraIntrinsics, P) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection. Returns (uv (N,2), valid (N,)); invalid rows are 0."""
    P = np.asarray(P, dtype=float).reshape(-1, 3)
    valid = P[:, 2] > 1e-9
    z = np.where(valid, P[:, 2], 1.0)
    uv = np.empty((P.shape[0], 2))
    uv[:, 0] = K.fx * P[:, 0] / z + K.cx
    uv[:, 1] = K.fy * P[:, 1] / z + K.cy
    uv[~valid] = 0.0
    return uv, valid


def backproject_grid(K: CameraIntrinsics, depth) -> tuple[np.ndarray, np.ndarray]:
    """Vertex map (H,W,3) of a depth image; valid where depth > 0."""
    depth = np.asarray(depth, dtype=float)
    h, w = depth.shape
    us = np.arange(w, dtype=float)
    vs = np.arange(h, dtype=float)
    uu, vv = np.meshgrid(us, vs)
    valid = depth > 0.0
    verts = np.empty((h, w, 3))
    verts[..., 0] = (uu - K.cx) / K.fx * depth
    verts[..., 1] = (vv - K.cy) / K.fy * depth
    verts[..., 2] = depth
    verts[~valid] = 0.0
    return verts, valid


# ---------------------------------------------------------------------------
# Calibration file: flat key/value text, camera-IMU extrinsic as
# translation + quaternion (w x y z).
# ---------------------------------------------------------------------------

_CALIB_KEYS = (
    "fx", "fy", "cx", "cy", "width", "height", "baseline", "sigma_xy", "sigma_z",
    "t_sc_x", "t_sc_y", "t_sc_z", "q_sc_w", "q_sc_x", "q_sc_y", "q_sc_z",
)


def save_calibration(path, K: CameraIntrinsics, T_SC: Pose) -> None:
    fields = [
        ("fx", K.fx), ("fy", K.fy), ("cx", K.cx), ("cy", K.cy),
        ("width", K.width), ("height", K.height),
        ("baseline", K.baseline), ("sigma_xy", K.sigma_xy), ("sigma_z", K.sigma_z),
        ("t_sc_x", T_SC.t[0]), ("t_sc_y", T_SC.t[1]), ("t_sc_z", T_SC.t[2]),
        ("q_sc_w", T_SC.q.w), ("q_sc_x", T_SC.q.x), ("q_sc_y", T_SC.q.y), ("q_sc_z", T_SC.q.z),
    ]
    lines = [f"{k} {float(v)!r}" for k, v in fields]
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def load_calibration(path) -> tuple[CameraIntrinsics, Pose]:
    values: dict[str, float] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition(" ")
            if key not in _CALIB_KEYS:
                raise ValueError(f"unknown calibration key {key!r}")
            values[key] = float(val)
    missing = [k for k in _CALIB_KEYS if k not in values]
    if missing:
        raise ValueError(f"calibration file missing keys: {missing}")
    K = CameraIntrinsics(
        values["fx"], values["fy"], values["cx"], values["cy"],
        int(values["width"]), int(values["height"]),
        values["baseline"], values["sigma_xy"], values["sigma_z"],
    )
    q = Quaternion(values["q_sc_w"], values["q_sc_x"], values["q_sc_y"], values["q_sc_z"]).normalized()
    T_SC = Pose(q, np.array([values["t_sc_x"], values["t_sc_y"], values["t_sc_z"]]))
    return K, T_SC
