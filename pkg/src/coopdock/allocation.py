"""Thruster allocation: actuator commands -> body-frame generalized force tau.

Vessel 1 carries four fixed thrusters (two stern, two bow tilted by alpha),
so tau_1 = B(alpha, w_1, d_1) u_1 is linear.  Vessel 2 carries two azimuth
thrusters whose force direction rotates with the commanded angles, making
tau_2(u_2) nonlinear.  Sign conventions: positive stern force pushes the
vessel forward; azimuth angle 0 aligns thrust with +x_b and a positive angle
produces negative sway.  Angles are not normalized here so that commanded
angle trajectories stay continuous for the controller's rate constraints.

Input bounds are owned by the controller; allocation only maps forces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dynamics import VesselParams


@dataclass(frozen=True)
class FixedThrusterCmd:
    """Forces [f_stern_port, f_stern_stbd, f_bow_port, f_bow_stbd] in N."""

    forces: np.ndarray

    def __post_init__(self):
        f = np.array(self.forces, dtype=float)
        if f.shape != (4,):
            raise ValueError("fixed-thruster command must have 4 forces")
        if not np.all(np.isfinite(f)):
            raise ValueError("fixed-thruster command must be finite")
        f.setflags(write=False)
        object.__setattr__(self, "forces", f)


@dataclass(frozen=True)
class AzimuthThrusterCmd:
    """Forces [f_port, f_stbd] in N and azimuth angles [th_port, th_stbd] in rad."""

    forces: np.ndarray
    angles: np.ndarray

    def __post_init__(self):
        f = np.array(self.forces, dtype=float)
        a = np.array(self.angles, dtype=float)
        if f.shape != (2,) or a.shape != (2,):
            raise ValueError("azimuth command needs 2 forces and 2 angles")
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(a))):
            raise ValueError("azimuth command must be finite")
        f.setflags(write=False)
        a.setflags(write=False)
        object.__setattr__(self, "forces", f)
        object.__setattr__(self, "angles", a)


@dataclass(frozen=True)
class JointControl:
    """Joint 8-dim input of the two-vessel system, flattened as [u1, u2]."""

    usv1: FixedThrusterCmd
    usv2: AzimuthThrusterCmd

    def flatten(self) -> np.ndarray:
        return np.concatenate(
            [self.usv1.forces, self.usv2.forces, self.usv2.angles]
        )

    @classmethod
    def from_vector(cls, u) -> "JointControl":
        u = np.asarray(u, dtype=float)
        if u.shape != (8,):
            raise ValueError("joint control vector must have 8 entries")
        return cls(
            usv1=FixedThrusterCmd(u[:4]),
            usv2=AzimuthThrusterCmd(forces=u[4:6], angles=u[6:8]),
        )


def fixed_allocation_matrix(params: VesselParams) -> np.ndarray:
    """3x4 matrix B mapping the four fixed-thruster forces to tau."""
    if params.alpha is None:
        raise ValueError("fixed-thruster allocation needs the tilt angle alpha")
    sa, ca = math.sin(params.alpha), math.cos(params.alpha)
    d, w = params.d, params.w
    return np.array(
        [
            [1.0, 1.0, sa, sa],
            [0.0, 0.0, ca, -ca],
            [w, -w, d * ca + w * sa, -d * ca - w * sa],
        ]
    )


def allocate_fixed(cmd: FixedThrusterCmd, params: VesselParams) -> np.ndarray:
    """tau_1 = B u_1 for the fixed-thruster vessel (linear in the command)."""
    return fixed_allocation_matrix(params) @ cmd.forces


def allocate_azimuth(cmd: AzimuthThrusterCmd, params: VesselParams) -> np.ndarray:
    """tau_2 for the azimuth-thruster vessel.

    surge = f_p cos(th_p) + f_s cos(th_s)
    sway  = -f_p sin(th_p) - f_s sin(th_s)
    yaw   = w_2 (f_p cos(th_p) - f_s cos(th_s)) + d_2 (f_p sin(th_p) - f_s sin(th_s))
    """
    fp, fs = cmd.forces
    cp, sp = math.cos(cmd.angles[0]), math.sin(cmd.angles[0])
    cs, ss = math.cos(cmd.angles[1]), math.sin(cmd.angles[1])
    return np.array(
        [
            fp * cp + fs * cs,
            -fp * sp - fs * ss,
            params.w * (fp * cp - fs * cs) + params.d * (fp * sp - fs * ss),
        ]
    )


def azimuth_jacobian(cmd: AzimuthThrusterCmd, params: VesselParams) -> np.ndarray:
    """3x4 Jacobian of allocate_azimuth wrt [f_p, f_s, th_p, th_s]."""
    fp, fs = cmd.forces
    cp, sp = math.cos(cmd.angles[0]), math.sin(cmd.angles[0])
    cs, ss = math.cos(cmd.angles[1]), math.sin(cmd.angles[1])
    w, d = params.w, params.d
    return np.array(
        [
            [cp, cs, -fp * sp, -fs * ss],
            [-sp, -ss, -fp * cp, -fs * cs],
            [
                w * cp + d * sp,
                -w * cs - d * ss,
                fp * (-w * sp + d * cp),
                fs * (w * ss - d * cs),
            ],
        ]
    )


def joint_allocate(
    u: JointControl, p1: VesselParams, p2: VesselParams
) -> tuple[np.ndarray, np.ndarray]:
    """Apply both allocators, returning (tau_1, tau_2)."""
    return allocate_fixed(u.usv1, p1), allocate_azimuth(u.usv2, p2)
