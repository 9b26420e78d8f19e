"""3-DOF surface-vessel dynamics (surge, sway, yaw).

State convention used throughout the package:

    q = [eta, nu] in R^6
    eta = [x, y, psi]   position and heading in the inertial frame {e}
    nu  = [u, v, omega] velocities in the body frame {b}

The model is the standard low-speed maneuvering form

    M nu_dot + D_L nu = b_body + tau
    eta_dot = R(psi) nu

with an optional Coriolis term C(nu) nu on the left-hand side for
plant-fidelity studies.  The slowly-varying environmental force b is held
constant in the inertial frame and rotated into the body frame at every
evaluation.  Nonlinear damping is not modeled.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi


class PlantFidelity(enum.Enum):
    """Plant model variants: the low-speed linear model or the same model
    augmented with the rigid-body/added-mass Coriolis term."""

    LINEAR_LOW_SPEED = "linear"
    WITH_CORIOLIS = "coriolis"


def wrap_angle(theta: float) -> float:
    """Wrap an angle to the half-open interval (-pi, pi].

    Raises ValueError on non-finite input.
    """
    if not np.all(np.isfinite(theta)):
        raise ValueError(f"wrap_angle: non-finite angle {theta!r}")
    return float(math.pi - np.mod(math.pi - theta, TWO_PI))


def rotation_matrix(psi: float) -> np.ndarray:
    """Block-diagonal transform diag(R(psi), 1) from body to inertial frame.

    The upper-left 2x2 block is the planar rotation by heading psi; the yaw
    rate passes through unchanged.  Orthogonal with determinant 1.
    """
    if not math.isfinite(psi):
        raise ValueError(f"rotation_matrix: non-finite heading {psi!r}")
    c, s = math.cos(psi), math.sin(psi)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class VesselParams:
    """Inertia, damping, geometry and actuation limits of one vessel.

    Attributes
    ----------
    M : (3, 3) array
        Inertia matrix incl. added mass [kg, kg, kg m^2]; symmetric positive
        definite.
    D_L : (3, 3) array
        Linear damping matrix [N s/m, N s/m, N m s/rad]; positive definite.
    d : float
        Hull length parameter [m] (thruster moment arm along x_b).
    w : float
        Hull width parameter [m] (thruster moment arm along y_b).
    alpha : float or None
        Bow-thruster tilt angle [rad]; only set for the fixed-thruster hull.
    v_max : float
        Planar speed bound [m/s] used by the controller.
    """

    M: np.ndarray
    D_L: np.ndarray
    d: float
    w: float
    alpha: float | None
    v_max: float
    M_inv: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        M = np.array(self.M, dtype=float)
        D = np.array(self.D_L, dtype=float)
        if M.shape != (3, 3) or D.shape != (3, 3):
            raise ValueError("M and D_L must be 3x3")
        if not np.allclose(M, M.T):
            raise ValueError("inertia matrix M must be symmetric")
        if np.any(np.linalg.eigvalsh(M) <= 0.0):
            raise ValueError("inertia matrix M must be positive definite")
        # Positive definiteness of possibly asymmetric D_L via its symmetric part.
        if np.any(np.linalg.eigvalsh(0.5 * (D + D.T)) <= 0.0):
            raise ValueError("damping matrix D_L must be positive definite")
        if self.d <= 0.0 or self.w <= 0.0 or self.v_max <= 0.0:
            raise ValueError("d, w and v_max must be positive")
        M.setflags(write=False)
        D.setflags(write=False)
        Minv = np.linalg.inv(M)
        Minv.setflags(write=False)
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "D_L", D)
        object.__setattr__(self, "M_inv", Minv)


@dataclass(frozen=True)
class VesselState:
    """Pose eta = [x, y, psi] in {e} plus body velocity nu = [u, v, omega]."""

    eta: np.ndarray
    nu: np.ndarray

    def __post_init__(self):
        eta = np.array(self.eta, dtype=float)
        nu = np.array(self.nu, dtype=float)
        if eta.shape != (3,) or nu.shape != (3,):
            raise ValueError("eta and nu must be 3-vectors")
        if not (np.all(np.isfinite(eta)) and np.all(np.isfinite(nu))):
            raise ValueError("vessel state must be finite")
        eta[2] = wrap_angle(eta[2])
        eta.setflags(write=False)
        nu.setflags(write=False)
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "nu", nu)

    @property
    def q(self) -> np.ndarray:
        """Full state 6-vector [eta, nu]."""
        return np.concatenate([self.eta, self.nu])

    @classmethod
    def from_q(cls, q) -> "VesselState":
        q = np.asarray(q, dtype=float)
        return cls(eta=q[:3], nu=q[3:6])


@dataclass(frozen=True)
class BiasForce:
    """Lumped exogenous force [b_x (N), b_y (N), b_psi (N m)] in frame {e}.

    Treated as constant over one simulation (slowly varying current/wind).
    """

    f: np.ndarray

    def __post_init__(self):
        f = np.array(self.f, dtype=float)
        if f.shape != (3,):
            raise ValueError("bias force must be a 3-vector")
        if not np.all(np.isfinite(f)):
            raise ValueError("bias force must be finite")
        f.setflags(write=False)
        object.__setattr__(self, "f", f)

    @classmethod
    def zero(cls) -> "BiasForce":
        return cls(np.zeros(3))


def body_bias(bias: BiasForce, psi: float) -> np.ndarray:
    """Rotate an inertial-frame bias force into the body frame at heading psi.

    The yaw moment passes through unchanged.
    """
    return rotation_matrix(psi).T @ bias.f


def coriolis_matrix(params: VesselParams, nu) -> np.ndarray:
    """Skew-symmetric Coriolis matrix C(nu) built from the inertia entries.

    C13 = -(M22 v + M23 w), C23 = M11 u, completed skew-symmetrically, so
    nu^T C(nu) nu = 0 for all nu.  Zero at rest.
    """
    nu = np.asarray(nu, dtype=float)
    if not np.all(np.isfinite(nu)):
        raise ValueError("coriolis_matrix: non-finite velocity")
    M = params.M
    c13 = -(M[1, 1] * nu[1] + M[1, 2] * nu[2])
    c23 = M[0, 0] * nu[0]
    return np.array([[0.0, 0.0, c13], [0.0, 0.0, c23], [-c13, -c23, 0.0]])


def continuous_dynamics(
    params: VesselParams,
    state: VesselState,
    tau,
    bias: BiasForce,
    fidelity: PlantFidelity = PlantFidelity.LINEAR_LOW_SPEED,
) -> np.ndarray:
    """Time derivative [eta_dot, nu_dot] of the 3-DOF model.

    eta_dot = R(psi) nu
    nu_dot  = M^-1 (b_body + tau - D_L nu [- C(nu) nu])
    """
    tau = np.asarray(tau, dtype=float)
    if tau.shape != (3,) or not np.all(np.isfinite(tau)):
        raise ValueError("tau must be a finite 3-vector")
    psi = state.eta[2]
    R = rotation_matrix(psi)
    rhs = body_bias(bias, psi) + tau - params.D_L @ state.nu
    if fidelity is PlantFidelity.WITH_CORIOLIS:
        rhs = rhs - coriolis_matrix(params, state.nu) @ state.nu
    return np.concatenate([R @ state.nu, params.M_inv @ rhs])


def euler_step(
    params: VesselParams,
    state: VesselState,
    tau,
    bias: BiasForce,
    fidelity: PlantFidelity = PlantFidelity.LINEAR_LOW_SPEED,
    dt: float = 0.5,
) -> VesselState:
    """One forward-Euler step of length dt; heading re-wrapped to (-pi, pi].

    With fidelity LINEAR_LOW_SPEED this map is exactly the discrete
    prediction model used by the MPC.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    q = state.q + dt * continuous_dynamics(params, state, tau, bias, fidelity)
    return VesselState.from_q(q)


def simulate(
    params: VesselParams,
    state: VesselState,
    tau,
    bias: BiasForce,
    fidelity: PlantFidelity,
    dt: float,
    steps: int,
) -> VesselState:
    """Apply euler_step repeatedly with constant inputs."""
    for _ in range(steps):
        state = euler_step(params, state, tau, bias, fidelity, dt)
    return state


def euler_step_jacobian(
    params: VesselParams, state: VesselState, bias: BiasForce, dt: float
) -> tuple[np.ndarray, np.ndarray]:
    """Jacobians of the low-speed Euler map at the given state.

    Returns (A, Bb) with A = d q+ / d q (6x6) and Bb = d q+ / d b (6x3),
    b being the inertial-frame bias force.  The applied tau is an additive
    input here, so its Jacobian is just dt * M^-1 composed with the
    allocation Jacobian and is handled by the callers.
    """
    psi = state.eta[2]
    c, s = math.cos(psi), math.sin(psi)
    nu = state.nu
    R = rotation_matrix(psi)
    # d(R~)/dpsi and d(R~^T)/dpsi; the yaw row/column is constant.
    dR = np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])
    A = np.zeros((6, 6))
    A[:3, :3] = np.eye(3)
    A[:3, 2] += dt * (dR @ nu)
    A[:3, 3:] = dt * R
    A[3:, 2] = dt * (params.M_inv @ (dR.T @ bias.f))
    A[3:, 3:] = np.eye(3) - dt * (params.M_inv @ params.D_L)
    Bb = np.zeros((6, 3))
    Bb[3:, :] = dt * (params.M_inv @ R.T)
    return A, Bb


# Parameters of the two case-study hulls: a fixed-thruster vessel (four
# thrusters, bow pair tilted 15 deg) and an azimuth-thruster vessel.
USV1 = VesselParams(
    M=np.array([[1426.0, 0.0, 0.0], [0.0, 3250.0, 130.0], [0.0, 130.0, 7619.0]]),
    D_L=np.array([[343.0, 0.0, 0.0], [0.0, 825.0, 33.0], [0.0, 33.0, 1890.0]]),
    d=2.1,
    w=0.8,
    alpha=math.radians(15.0),
    v_max=3.3,
)

USV2 = VesselParams(
    M=np.array([[774.0, 0.0, 0.0], [0.0, 1625.0, 0.0], [0.0, 0.0, 3810.0]]),
    D_L=np.array([[704.0, 0.0, 0.0], [0.0, 412.0, 0.0], [0.0, 0.0, 945.0]]),
    d=1.5,
    w=0.85,
    alpha=None,
    v_max=3.0,
)

#: Docking contact distance between the two hull centers [m].
D_MIN_DEFAULT = 0.5 * (USV1.d + USV2.d)
