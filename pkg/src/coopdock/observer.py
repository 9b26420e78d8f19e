"""EKF disturbance observer with the bias force as part of the state.

Each vessel runs its own filter over the augmented state

    x = [eta, nu, b] in R^9

where b is the lumped exogenous force expressed in the inertial frame and
modeled as a random walk with near-zero drift (the current/wind force is
effectively constant over a docking run).  The filter's estimate b_hat is
what the MPC prediction model uses to anticipate the disturbance.

Predict propagates eta/nu through the same Euler map as the prediction
model; update applies a linear position/velocity measurement with the
heading innovation wrapped.  All functions return new values; nothing is
mutated in place.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .allocation import (
    AzimuthThrusterCmd,
    FixedThrusterCmd,
    allocate_azimuth,
    allocate_fixed,
)
from .dynamics import (
    BiasForce,
    PlantFidelity,
    VesselParams,
    VesselState,
    euler_step,
    euler_step_jacobian,
    wrap_angle,
)


class EkfNumericError(RuntimeError):
    """Covariance blow-up or a singular innovation covariance."""


class MeasurementKind(Enum):
    POSE_ONLY = "pose"
    FULL = "full"


@dataclass(frozen=True)
class Measurement:
    """Measured pose (3-dim) or pose + body velocity (6-dim)."""

    value: np.ndarray
    kind: MeasurementKind

    def __post_init__(self):
        v = np.array(self.value, dtype=float)
        expected = 3 if self.kind is MeasurementKind.POSE_ONLY else 6
        if v.shape != (expected,):
            raise ValueError(
                f"{self.kind.value} measurement must have {expected} entries"
            )
        v.setflags(write=False)
        object.__setattr__(self, "value", v)


@dataclass(frozen=True)
class SensorNoise:
    """Sensor standard deviations used both to simulate measurement noise
    and to build the filter's R matrix."""

    pos: float = 0.02  # m
    heading: float = math.radians(0.5)  # rad
    vel: float = 0.01  # m/s
    yaw_rate: float = math.radians(0.1)  # rad/s

    def stds(self, kind: MeasurementKind = MeasurementKind.FULL) -> np.ndarray:
        full = np.array(
            [self.pos, self.pos, self.heading, self.vel, self.vel, self.yaw_rate]
        )
        return full[:3] if kind is MeasurementKind.POSE_ONLY else full

    def covariance(self, kind: MeasurementKind = MeasurementKind.FULL) -> np.ndarray:
        return np.diag(self.stds(kind) ** 2)


def default_process_noise() -> np.ndarray:
    """Per-step process noise: tiny on pose, small on velocity, strong on the
    bias random walk so the estimate converges within a docking run."""
    return np.diag([1e-6] * 3 + [1e-4] * 3 + [1.0] * 3)


def default_initial_covariance() -> np.ndarray:
    return np.diag([1e-4] * 3 + [1e-4] * 3 + [4e4] * 3)


@dataclass(frozen=True)
class ObserverState:
    """Augmented estimate x_hat = [eta, nu, b] with covariance P.

    The innovation of the most recent update is kept for logging.
    """

    x_hat: np.ndarray
    P: np.ndarray
    Q_proc: np.ndarray
    R_meas: np.ndarray
    innovation: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        x = np.array(self.x_hat, dtype=float)
        P = np.array(self.P, dtype=float)
        if x.shape != (9,) or P.shape != (9, 9):
            raise ValueError("observer state must be 9-dim with 9x9 covariance")
        if not np.all(np.isfinite(P)):
            raise EkfNumericError("observer covariance is not finite")
        P = 0.5 * (P + P.T)
        x.setflags(write=False)
        P.setflags(write=False)
        object.__setattr__(self, "x_hat", x)
        object.__setattr__(self, "P", P)

    @property
    def vessel_state(self) -> VesselState:
        return VesselState(eta=self.x_hat[:3], nu=self.x_hat[3:6])


def make_observer(
    init: Measurement | VesselState,
    Q_proc: np.ndarray | None = None,
    R_meas: np.ndarray | None = None,
    P0: np.ndarray | None = None,
) -> ObserverState:
    """Initialize a filter from the first measurement (or a known state),
    with a zero bias prior."""
    x = np.zeros(9)
    if isinstance(init, VesselState):
        x[:6] = init.q
    elif init.kind is MeasurementKind.FULL:
        x[:6] = init.value
    else:
        x[:3] = init.value
    return ObserverState(
        x_hat=x,
        P=default_initial_covariance() if P0 is None else P0,
        Q_proc=default_process_noise() if Q_proc is None else np.asarray(Q_proc, float),
        R_meas=SensorNoise().covariance() if R_meas is None else np.asarray(R_meas, float),
    )


def _tau_from_command(cmd, params: VesselParams) -> np.ndarray:
    if isinstance(cmd, FixedThrusterCmd):
        return allocate_fixed(cmd, params)
    if isinstance(cmd, AzimuthThrusterCmd):
        return allocate_azimuth(cmd, params)
    raise TypeError(f"unsupported thruster command {type(cmd).__name__}")


def augmented_jacobian(
    obs: ObserverState, params: VesselParams, dt: float
) -> np.ndarray:
    """9x9 Jacobian of the augmented Euler map [eta, nu, b] -> [eta+, nu+, b]
    at the current estimate."""
    state = obs.vessel_state
    bias = BiasForce(obs.x_hat[6:])
    A, Bb = euler_step_jacobian(params, state, bias, dt)
    F = np.eye(9)
    F[:6, :6] = A
    F[:6, 6:] = Bb
    return F


def ekf_predict(
    obs: ObserverState, cmd, params: VesselParams, dt: float
) -> ObserverState:
    """Propagate the estimate one control period.

    The eta/nu block follows the Euler map with the current bias estimate as
    the acting exogenous force; the bias block is held constant.  The
    covariance is propagated with the analytic Jacobian of that augmented map.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    state = obs.vessel_state
    bias = BiasForce(obs.x_hat[6:])
    tau = _tau_from_command(cmd, params)
    nxt = euler_step(params, state, tau, bias, PlantFidelity.LINEAR_LOW_SPEED, dt)

    F = augmented_jacobian(obs, params, dt)
    P = F @ obs.P @ F.T + obs.Q_proc
    if not np.all(np.isfinite(P)):
        raise EkfNumericError(
            f"covariance blow-up in predict (max |P| = {np.abs(P).max():.3e})"
        )
    x = np.concatenate([nxt.q, obs.x_hat[6:]])
    return replace(obs, x_hat=x, P=P, innovation=None)


def _measurement_matrix(kind: MeasurementKind) -> np.ndarray:
    m = 3 if kind is MeasurementKind.POSE_ONLY else 6
    H = np.zeros((m, 9))
    H[:, :m] = np.eye(m)
    return H


def ekf_update(obs: ObserverState, meas: Measurement) -> ObserverState:
    """Standard EKF correction; Joseph-form covariance update keeps P
    symmetric positive semidefinite.  Heading innovation is angle-wrapped."""
    H = _measurement_matrix(meas.kind)
    m = H.shape[0]
    R = obs.R_meas[:m, :m]
    innov = meas.value - H @ obs.x_hat
    innov[2] = wrap_angle(innov[2])
    S = H @ obs.P @ H.T + R
    try:
        K = np.linalg.solve(S, H @ obs.P).T
    except np.linalg.LinAlgError as exc:
        raise EkfNumericError(f"singular innovation covariance: {exc}") from exc
    x = obs.x_hat + K @ innov
    x[2] = wrap_angle(x[2])
    IKH = np.eye(9) - K @ H
    P = IKH @ obs.P @ IKH.T + K @ R @ K.T
    if not np.all(np.isfinite(P)):
        raise EkfNumericError("covariance blow-up in update")
    return replace(obs, x_hat=x, P=P, innovation=innov)


def bias_estimate(obs: ObserverState) -> BiasForce:
    """The inertial-frame bias block of the estimate."""
    return BiasForce(obs.x_hat[6:])
