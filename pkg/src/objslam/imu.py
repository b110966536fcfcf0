"""IMU handling: numerical preintegration, state propagation, inertial residual.

State propagation runs in "sensor-natural" coordinates (IMU position, attitude
and world-frame velocity) and converts to/from the estimator state (camera
pose, sensor-frame velocity) through the camera-IMU extrinsic at the
endpoints. Error-state Jacobians are the exact linearisation of the discrete
midpoint scheme, so they match finite differences of the full propagation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .manifold import (
    DALPHA,
    DBA,
    DBG,
    DR,
    DV,
    STATE_DIM,
    Pose,
    Quaternion,
    StateVector,
    boxminus,
    boxminus_jacobians,
    right_jacobian_so3,
    skew,
)


class MalformedBatch(ValueError):
    """Raised for unordered timestamps or measurements not covering the span."""


class DegenerateInformation(RuntimeError):
    """Raised when the propagated covariance cannot be inverted reliably."""


@dataclass
class ImuMeasurement:
    t_ns: int
    gyro: np.ndarray  # rad/s, sensor frame
    accel: np.ndarray  # m/s^2, sensor frame

    def __post_init__(self):
        self.t_ns = int(self.t_ns)
        self.gyro = np.asarray(self.gyro, dtype=float).reshape(3)
        self.accel = np.asarray(self.accel, dtype=float).reshape(3)


@dataclass
class ImuNoiseParams:
    sigma_gyro: float = 2.4e-4  # rad/s/sqrt(Hz)
    sigma_accel: float = 1.9e-3  # m/s^2/sqrt(Hz)
    sigma_gyro_bias: float = 1.0e-5  # rad/s^2/sqrt(Hz)
    sigma_accel_bias: float = 1.0e-4  # m/s^3/sqrt(Hz)
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))

    def __post_init__(self):
        self.gravity = np.asarray(self.gravity, dtype=float).reshape(3)
        for s in (self.sigma_gyro, self.sigma_accel, self.sigma_gyro_bias, self.sigma_accel_bias):
            if s <= 0:
                raise ValueError("noise densities must be positive")


@dataclass
class PreintegratedBatch:
    """Measurements spanning [t_start, t_end], endpoints included.

    The first and last entries must sit exactly on the span boundaries
    (make_batch interpolates them). covariance/jacobian are the by-products of
    the latest propagate call, kept for inspection; propagate itself is pure.
    """

    measurements: tuple
    t_start_ns: int
    t_end_ns: int
    bias_gyro: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bias_accel: np.ndarray = field(default_factory=lambda: np.zeros(3))
    covariance: np.ndarray | None = None
    jacobian: np.ndarray | None = None

    def __post_init__(self):
        if self.t_end_ns < self.t_start_ns:
            raise MalformedBatch("batch ends before it starts")
        ts = [m.t_ns for m in self.measurements]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise MalformedBatch("timestamps must be strictly increasing")
        if self.measurements:
            if ts[0] != self.t_start_ns or ts[-1] != self.t_end_ns:
                raise MalformedBatch("measurements must cover the batch span exactly")

    @property
    def duration(self) -> float:
        return (self.t_end_ns - self.t_start_ns) * 1e-9


def make_batch(measurements, t_start_ns: int, t_end_ns: int) -> PreintegratedBatch:
    """Slice measurements onto [t_start, t_end], interpolating the boundaries."""
    if t_end_ns < t_start_ns:
        raise MalformedBatch("batch ends before it starts")
    if t_end_ns == t_start_ns:
        return PreintegratedBatch((), t_start_ns, t_end_ns)
    ts = np.array([m.t_ns for m in measurements], dtype=np.int64)
    if len(ts) == 0 or ts[0] > t_start_ns or ts[-1] < t_end_ns:
        raise MalformedBatch("IMU data does not cover the requested span")
    if np.any(np.diff(ts) <= 0):
        raise MalformedBatch("timestamps must be strictly increasing")

    def sample_at(t_ns):
        i = int(np.searchsorted(ts, t_ns))
        if i < len(ts) and ts[i] == t_ns:
            m = measurements[i]
            return ImuMeasurement(t_ns, m.gyro, m.accel)
        lo, hi = measurements[i - 1], measurements[i]
        w = (t_ns - lo.t_ns) / (hi.t_ns - lo.t_ns)
        return ImuMeasurement(t_ns, (1 - w) * lo.gyro + w * hi.gyro, (1 - w) * lo.accel + w * hi.accel)

    inner = [m for m in measurements if t_start_ns < m.t_ns < t_end_ns]
    out = [sample_at(t_start_ns)] + inner + [sample_at(t_end_ns)]
    return PreintegratedBatch(tuple(out), t_start_ns, t_end_ns)


def _state_to_natural(x: StateVector, T_SC: Pose):
    """(p_WS, R_WS, v_W) plus the camera rotation, from the estimator state."""
    T_CS = T_SC.inverse()
    R_WC = x.q_WC.rotation_matrix()
    R_WS = R_WC @ T_CS.R
    p_WS = x.r_WC + R_WC @ T_CS.t
    v_W = R_WS @ x.v_S
    return p_WS, R_WS, v_W


def _natural_to_state(p_WS, R_WS, v_W, b_g, b_a, T_SC: Pose) -> StateVector:
    T_WS = Pose.from_rt(R_WS, p_WS)
    T_WC = T_WS * T_SC
    v_S = R_WS.T @ v_W
    return StateVector(T_WC.t, T_WC.q, v_S, b_g.copy(), b_a.copy())


def _m_state_to_natural(x: StateVector, T_SC: Pose) -> np.ndarray:
    """Jacobian of the natural perturbation w.r.t. the state perturbation."""
    T_CS = T_SC.inverse()
    R_WC = x.q_WC.rotation_matrix()
    R_WS = R_WC @ T_CS.R
    lever = R_WC @ T_CS.t
    v_W = R_WS @ x.v_S
    M = np.eye(STATE_DIM)
    M[DR, DALPHA] = -skew(lever)
    M[DV, DALPHA] = -skew(v_W)
    M[DV, DV] = R_WS
    return M


def _m_natural_to_state(R_WS, v_W, T_SC: Pose) -> np.ndarray:
    """Inverse mapping, evaluated from natural coordinates."""
    T_CS = T_SC.inverse()
    R_WC = R_WS @ T_CS.R.T
    lever = R_WC @ T_CS.t
    Minv = np.eye(STATE_DIM)
    Minv[DR, DALPHA] = skew(lever)
    Minv[DV, DALPHA] = R_WS.T @ skew(v_W)
    Minv[DV, DV] = R_WS.T
    return Minv


def _propagate_full(x_R: StateVector, batch: PreintegratedBatch, params: ImuNoiseParams,
                    T_SC: Pose):
    """Midpoint propagation with first-order error dynamics.

    Returns (predicted state, 15x15 covariance, 15x15 Jacobian w.r.t. x_R),
    all in estimator-state tangent coordinates.
    """
    if len(batch.measurements) == 0:
        return x_R.copy(), np.zeros((STATE_DIM, STATE_DIM)), np.eye(STATE_DIM)

    g = params.gravity
    b_g, b_a = x_R.b_g, x_R.b_a
    p, R, v = _state_to_natural(x_R, T_SC)

    Sigma = np.zeros((STATE_DIM, STATE_DIM))
    J = np.eye(STATE_DIM)
    I3 = np.eye(3)

    meas = batch.measurements
    for k in range(len(meas) - 1):
        m0, m1 = meas[k], meas[k + 1]
        dt = (m1.t_ns - m0.t_ns) * 1e-9
        w_mid = 0.5 * (m0.gyro + m1.gyro) - b_g
        phi = w_mid * dt
        from .manifold import rotmat_exp_so3

        R_next = R @ rotmat_exp_so3(phi)
        a0 = R @ (m0.accel - b_a)
        a1 = R_next @ (m1.accel - b_a)
        # trapezoid for velocity; exact double integral of the linear
        # acceleration interpolant for position (kills the dt^2 drift bias)
        v_next = v + (0.5 * (a0 + a1) + g) * dt
        p_next = p + v * dt + dt * dt * (a0 / 3.0 + a1 / 6.0 + 0.5 * g)

        Jr = right_jacobian_so3(phi)
        RJr = R_next @ Jr
        Sa = 0.5 * (skew(a0) + skew(a1))
        Sbg = 0.5 * skew(a1) @ RJr  # d(velocity acc)/d b_g, divided by dt

        Phi = np.eye(STATE_DIM)
        Phi[DR, DV] = I3 * dt
        Phi[DR, DALPHA] = -dt * dt * (skew(a0) / 3.0 + skew(a1) / 6.0)
        Phi[DR, DBG] = dt ** 3 / 6.0 * skew(a1) @ RJr
        Phi[DR, DBA] = -dt * dt * (R / 3.0 + R_next / 6.0)
        Phi[DALPHA, DBG] = -RJr * dt
        Phi[DV, DALPHA] = -dt * Sa
        Phi[DV, DBG] = dt * dt * Sbg
        Phi[DV, DBA] = -0.5 * dt * (R + R_next)

        G = np.zeros((STATE_DIM, 12))
        G[DR, 0:3] = dt ** 3 / 6.0 * skew(a1) @ RJr
        G[DR, 3:6] = -dt * dt * (R / 3.0 + R_next / 6.0)
        G[DALPHA, 0:3] = -RJr * dt
        G[DV, 0:3] = dt * dt * Sbg
        G[DV, 3:6] = -0.5 * dt * (R + R_next)
        G[DBG, 6:9] = I3
        G[DBA, 9:12] = I3

        Q = np.zeros((12, 12))
        Q[0:3, 0:3] = params.sigma_gyro ** 2 / dt * I3
        Q[3:6, 3:6] = params.sigma_accel ** 2 / dt * I3
        Q[6:9, 6:9] = params.sigma_gyro_bias ** 2 * dt * I3
        Q[9:12, 9:12] = params.sigma_accel_bias ** 2 * dt * I3

        Sigma = Phi @ Sigma @ Phi.T + G @ Q @ G.T
        Sigma = 0.5 * (Sigma + Sigma.T)
        J = Phi @ J
        p, R, v = p_next, R_next, v_next

    # re-orthonormalise the accumulated rotation
    q = Quaternion.from_rotation_matrix(R)
    R = q.rotation_matrix()

    x_hat = _natural_to_state(p, R, v, b_g, b_a, T_SC)
    Minv = _m_natural_to_state(R, v, T_SC)
    M_R = _m_state_to_natural(x_R, T_SC)
    Sigma_state = Minv @ Sigma @ Minv.T
    J_state = Minv @ J @ M_R
    return x_hat, 0.5 * (Sigma_state + Sigma_state.T), J_state


def propagate(x_R: StateVector, batch: PreintegratedBatch, params: ImuNoiseParams,
              T_SC: Pose | None = None) -> tuple[StateVector, np.ndarray]:
    """Predict the live state from the reference state through the batch."""
    x_hat, Sigma, _ = _propagate_full(x_R, batch, params, T_SC or Pose.identity())
    return x_hat, Sigma


@dataclass
class InertialResidual:
    error: np.ndarray  # 15
    information: np.ndarray  # 15x15
    J_ref: np.ndarray  # 15x15, w.r.t. reference-state perturbation
    J_live: np.ndarray  # 15x15, w.r.t. live-state perturbation
    predicted: StateVector


INFO_REGULARISATION = 1e-12
MAX_INFO_CONDITION = 1e12


def inertial_residual(x_R: StateVector, x_L: StateVector, batch: PreintegratedBatch,
                      params: ImuNoiseParams, T_SC: Pose | None = None) -> InertialResidual:
    """e = propagate(x_R) boxminus x_L, with information and analytic Jacobians."""
    T_SC = T_SC or Pose.identity()
    x_hat, Sigma, J_pred = _propagate_full(x_R, batch, params, T_SC)
    e = boxminus(x_hat, x_L)
    J_hat, J_xL = boxminus_jacobians(x_hat, x_L)
    S = Sigma + INFO_REGULARISATION * np.eye(STATE_DIM)
    if np.linalg.cond(S) > MAX_INFO_CONDITION:
        raise DegenerateInformation("propagated covariance is numerically singular")
    info = np.linalg.inv(S)
    info = 0.5 * (info + info.T)
    return InertialResidual(e, info, J_hat @ J_pred, J_xL, x_hat)


# ---------------------------------------------------------------------------
# IMU CSV: header timestamp_ns,gx,gy,gz,ax,ay,az
# ---------------------------------------------------------------------------

IMU_CSV_HEADER = "timestamp_ns,gx,gy,gz,ax,ay,az"


def save_imu_csv(path, measurements) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(IMU_CSV_HEADER + "\n")
        for m in measurements:
            vals = ",".join(f"{float(x)!r}" for x in (*m.gyro, *m.accel))
            f.write(f"{m.t_ns},{vals}\n")


def load_imu_csv(path) -> list[ImuMeasurement]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().strip()
        if header != IMU_CSV_HEADER:
            raise ValueError(f"unexpected IMU CSV header {header!r}")
        for line in f:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            out.append(ImuMeasurement(int(parts[0]), [float(p) for p in parts[1:4]],
                                      [float(p) for p in parts[4:7]]))
    return out
