"""Cooperative MPC docking of two autonomous surface vehicles.

Library layout:

- :mod:`coopdock.dynamics`    3-DOF vessel model and Euler integration
- :mod:`coopdock.allocation`  thruster commands -> body forces
- :mod:`coopdock.observer`    EKF estimating the environmental force bias
- :mod:`coopdock.nmpc`        centralized docking NMPC (multiple shooting + SQP)
- :mod:`coopdock.qp`          interior-point QP solver used by the SQP
- :mod:`coopdock.simulate`    closed-loop runs, scenarios and metrics
- :mod:`coopdock.config`      YAML scenario configuration
- :mod:`coopdock.cli`         command-line entry point
"""

from .allocation import (
    AzimuthThrusterCmd,
    FixedThrusterCmd,
    JointControl,
    allocate_azimuth,
    allocate_fixed,
    joint_allocate,
)
from .dynamics import (
    D_MIN_DEFAULT,
    USV1,
    USV2,
    BiasForce,
    PlantFidelity,
    VesselParams,
    VesselState,
    body_bias,
    continuous_dynamics,
    coriolis_matrix,
    euler_step,
    rotation_matrix,
    wrap_angle,
)

__version__ = "0.1.0"
