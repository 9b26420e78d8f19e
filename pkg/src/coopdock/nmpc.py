"""Centralized docking NMPC for the two-vessel system.

Each control period the controller solves a nonlinear program over the
joint state q = [q_1, q_2] in R^12 and joint input u = [u_1, u_2] in R^8:

    min  sum_{h=1..N} tracking(q(h)) + sum_{h=1..N-1} control(u(h))
    s.t. q(0) = q_k
         q(h+1) = f(q(h), u(h), b_hat)          forward-Euler joint model
         F_min <= u(h) <= F_max
         dF_min*dt <= u(h) - u(h-1) <= dF_max*dt   (u(-1) = applied input)
         |p_1(h) - p_2(h)| >= d_min                (collision, slack-relaxed)
         |[u_i, v_i](h)| <= v_max_i                (planar speed)

Transcription is direct multiple shooting: all horizon states are decision
variables tied by dynamics equality constraints.  The solver is an SQP with
a Gauss-Newton Hessian (the objective is a diagonal quadratic, so this is
its exact Hessian), an l1-merit backtracking line search, and the sparse
interior-point QP of :mod:`coopdock.qp` for the subproblems.  Derivatives
are analytic throughout.

Decision variables are scaled (states by [10 m, 10 m, pi, 3 m/s, 3 m/s,
1 rad/s], inputs by their force bounds) so that the solver tolerances mean
the same thing across units.  The collision constraint carries a
nonnegative slack with an exact (linear + quadratic) penalty: the linear
term dominates any attainable multiplier, so the slack is zero whenever the
hard problem is solvable and the relaxation only acts as a feasibility
safeguard from poor warm starts.

Headings inside the NLP are left unwrapped; the heading references are
moved to the branch nearest the current headings once per solve, keeping
the objective smooth across +-pi.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .allocation import fixed_allocation_matrix
from .dynamics import TWO_PI, USV1, USV2, BiasForce, VesselParams, wrap_angle
from .qp import solve_qp

NQ = 12  # joint state dimension
NU = 8  # joint input dimension


def _wrap_array(x: np.ndarray) -> np.ndarray:
    return math.pi - np.mod(math.pi - x, TWO_PI)


class InvalidReferenceError(ValueError):
    """Reference pose violates the docking-configuration conditions."""


@dataclass(frozen=True)
class ReferencePose:
    """Docking reference [x1, y1, psi1, x2, y2, psi2].

    A valid docking reference keeps the planar positions at least d_min
    apart and the headings opposed (psi1 = psi2 + pi).
    """

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != (6,) or not np.all(np.isfinite(v)):
            raise ValueError("reference pose must be a finite 6-vector")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def pose1(self) -> np.ndarray:
        return self.values[:3]

    @property
    def pose2(self) -> np.ndarray:
        return self.values[3:]

    def distance(self) -> float:
        return float(np.hypot(*(self.pose1[:2] - self.pose2[:2])))

    def heading_offset_error(self) -> float:
        """wrap(psi1 - psi2 - pi); zero for a valid docking configuration."""
        return wrap_angle(self.values[2] - self.values[5] - math.pi)

    @classmethod
    def docking(cls, center, axis_heading: float, d_min: float) -> "ReferencePose":
        """Stern-to-stern configuration centered at `center` with vessel 1's
        bow pointing along `axis_heading`; centers exactly d_min apart."""
        c = np.asarray(center, dtype=float)
        u = np.array([math.cos(axis_heading), math.sin(axis_heading)])
        p1 = c + 0.5 * d_min * u
        p2 = c - 0.5 * d_min * u
        return cls(
            np.array([p1[0], p1[1], wrap_angle(axis_heading),
                      p2[0], p2[1], wrap_angle(axis_heading - math.pi)])
        )

    @classmethod
    def docking_at_pose1(cls, pose1, d_min: float) -> "ReferencePose":
        """Docking configuration anchored at a fixed pose for vessel 1
        (vessel 2 is placed stern-to-stern behind it)."""
        x, y, psi = np.asarray(pose1, dtype=float)
        p2 = np.array([x, y]) - d_min * np.array([math.cos(psi), math.sin(psi)])
        return cls(np.array([x, y, wrap_angle(psi), p2[0], p2[1], wrap_angle(psi - math.pi)]))


@dataclass(frozen=True)
class MpcConfig:
    """Controller parameters: horizon, weights, bounds and solver knobs.

    The rate bounds dF_min/dF_max are per unit time; the per-step bound is
    obtained by multiplying with dt.
    """

    N: int = 50
    dt: float = 0.5
    Q1: np.ndarray = field(default_factory=lambda: np.eye(3) * 1e3)
    Q2: np.ndarray = field(default_factory=lambda: np.eye(3) * 1e3)
    Qu: np.ndarray = field(
        default_factory=lambda: np.diag(
            [1e-2, 1e-2, 1e-3, 1e-3, 1e-2, 1e-2, 1e-4, 1e-4]
        )
    )
    F_max: np.ndarray = field(
        default_factory=lambda: np.array(
            [1000.0, 1000.0, 170.0, 170.0, 100.0, 100.0, 6.28, 6.28]
        )
    )
    F_min: np.ndarray = field(
        default_factory=lambda: np.array(
            [-800.0, -80.0, -170.0, -170.0, -100.0, -100.0, -6.28, -6.28]
        )
    )
    dF_max: np.ndarray = field(
        default_factory=lambda: np.array([500.0, 500.0, 85.0, 85.0, 50.0, 50.0, 0.5, 0.5])
    )
    dF_min: np.ndarray = field(
        default_factory=lambda: np.array(
            [-400.0, -400.0, -85.0, -85.0, -50.0, -50.0, -0.5, -0.5]
        )
    )
    d_min: float = 1.8
    v_max_1: float = 3.3
    v_max_2: float = 3.0
    slack_weight: float = 1e6  # quadratic penalty on the collision slack
    slack_weight_l1: float = 1e4  # linear (exactness) term of the penalty
    max_iterations: int = 100
    kkt_tol: float = 1e-6
    feas_tol: float = 1e-6
    eq_tol: float = 1e-8
    qp_tol: float = 1e-8
    qp_max_iter: int = 50
    time_budget_s: float | None = None
    hessian: str = "exact"  # "exact" (convexified) or "gauss-newton"
    # Early-exit threshold for receding-horizon use: once feasible and the
    # scaled KKT residual falls below this (non-certifying) level, further
    # iterations buy little closed-loop benefit.  inf keeps iterating to
    # kkt_tol or the iteration cap.
    accept_kkt: float = math.inf

    def __post_init__(self):
        if self.N <= 1:
            raise ValueError("prediction horizon N must exceed 1")
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        if self.d_min <= 0.0:
            raise ValueError("d_min must be positive")
        for name in ("Q1", "Q2", "Qu"):
            Mx = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
            if Mx.ndim == 1:
                Mx = np.diag(Mx)
            if not np.allclose(Mx, np.diag(np.diag(Mx))):
                raise ValueError(f"{name} must be diagonal")
            if np.any(np.diag(Mx) <= 0.0):
                raise ValueError(f"{name} must be positive definite")
            object.__setattr__(self, name, Mx)
        for name in ("F_max", "F_min", "dF_max", "dF_min"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if np.any(self.F_min >= self.F_max):
            raise ValueError("F_min must be componentwise below F_max")


@dataclass
class WarmStart:
    """Initial guess for one solve: horizon states/inputs/slacks plus the
    multipliers of the previous solution (all in physical units)."""

    q_traj: np.ndarray  # (N+1, 12)
    u_traj: np.ndarray  # (N, 8)
    slacks: np.ndarray  # (N+1,)
    y_eq: np.ndarray | None = None
    z_in: np.ndarray | None = None
    step_fn: Callable | None = field(default=None, compare=False, repr=False)


@dataclass
class MpcSolution:
    """Result of one NMPC solve.

    q_pred is re-rolled through the exact prediction dynamics under u_seq,
    so q_pred[0] equals the supplied state and the dynamics defect is zero
    by construction (headings unwrapped).
    """

    u_seq: np.ndarray  # (N, 8)
    q_pred: np.ndarray  # (N+1, 12)
    cost: float  # tracking + control objective (no penalty terms)
    status: str  # "Optimal" | "MaxIter" | "Infeasible"
    kkt_residual: float
    max_constraint_violation: float
    solve_time: float
    iterations: int = 0
    slack_max: float = 0.0
    warm: WarmStart | None = None


@dataclass
class ResidualReport:
    """Per-family maximum constraint violations, in natural units."""

    dynamics_defect: float
    input_box: float  # N (or rad for the azimuth angle entries)
    rate_box: float
    collision: float  # m
    speed: float  # m/s

    def max_violation(self) -> float:
        return max(
            self.dynamics_defect, self.input_box, self.rate_box, self.collision, self.speed
        )

    def as_dict(self) -> dict:
        return {
            "dynamics_defect": self.dynamics_defect,
            "input_box": self.input_box,
            "rate_box": self.rate_box,
            "collision": self.collision,
            "speed": self.speed,
        }


def tracking_cost(q_joint, q_ref: ReferencePose, Q1, Q2) -> float:
    """Pose-error quadratic form for both vessels; heading errors wrapped."""
    q = np.asarray(q_joint, dtype=float)
    e1 = q[0:3] - q_ref.pose1
    e2 = q[6:9] - q_ref.pose2
    e1[2] = wrap_angle(e1[2])
    e2[2] = wrap_angle(e2[2])
    Q1 = np.atleast_2d(Q1)
    Q2 = np.atleast_2d(Q2)
    return float(e1 @ Q1 @ e1 + e2 @ Q2 @ e2)


def control_cost(u, Qu) -> float:
    """Control-effort quadratic form u' Qu u."""
    u = np.asarray(u, dtype=float)
    return float(u @ np.atleast_2d(Qu) @ u)


class _VesselModel:
    """Precomputed per-vessel quantities for the batch prediction model."""

    def __init__(self, params: VesselParams, b_hat: BiasForce, dt: float):
        self.params = params
        self.dt = dt
        self.b = b_hat.f
        self.Minv = params.M_inv
        self.M_invT = params.M_inv.T
        self.Ad_nu = np.eye(3) - dt * (params.M_inv @ params.D_L)  # d nu+/d nu
        self.dtMinv = dt * params.M_inv


def _azimuth_tau_batch(model: _VesselModel, U2: np.ndarray) -> np.ndarray:
    f_p, f_s = U2[:, 0], U2[:, 1]
    cp, sp_ = np.cos(U2[:, 2]), np.sin(U2[:, 2])
    cs, ss = np.cos(U2[:, 3]), np.sin(U2[:, 3])
    w, d = model.params.w, model.params.d
    return np.stack(
        [
            f_p * cp + f_s * cs,
            -f_p * sp_ - f_s * ss,
            w * (f_p * cp - f_s * cs) + d * (f_p * sp_ - f_s * ss),
        ],
        axis=1,
    )


def _azimuth_jac_batch(model: _VesselModel, U2: np.ndarray) -> np.ndarray:
    H = U2.shape[0]
    f_p, f_s = U2[:, 0], U2[:, 1]
    cp, sp_ = np.cos(U2[:, 2]), np.sin(U2[:, 2])
    cs, ss = np.cos(U2[:, 3]), np.sin(U2[:, 3])
    w, d = model.params.w, model.params.d
    J = np.zeros((H, 3, 4))
    J[:, 0, 0] = cp
    J[:, 0, 1] = cs
    J[:, 0, 2] = -f_p * sp_
    J[:, 0, 3] = -f_s * ss
    J[:, 1, 0] = -sp_
    J[:, 1, 1] = -ss
    J[:, 1, 2] = -f_p * cp
    J[:, 1, 3] = -f_s * cs
    J[:, 2, 0] = w * cp + d * sp_
    J[:, 2, 1] = -w * cs - d * ss
    J[:, 2, 2] = f_p * (-w * sp_ + d * cp)
    J[:, 2, 3] = f_s * (w * ss - d * cs)
    return J


class DockingNlp:
    """One NMPC problem instance (multiple-shooting transcription).

    Evaluation methods take and return quantities in the scaled decision
    space; `pack`/`unpack` convert between the scaled vector and physical
    (states, inputs, slacks) arrays.
    """

    def __init__(
        self,
        cfg: MpcConfig,
        q_k,
        u_prev,
        b_hat: tuple[BiasForce, BiasForce],
        q_ref: ReferencePose,
        params1: VesselParams = USV1,
        params2: VesselParams = USV2,
    ):
        self.cfg = cfg
        self.q_k = np.asarray(q_k, dtype=float).copy()
        self.u_prev = np.asarray(u_prev, dtype=float).copy()
        if self.q_k.shape != (NQ,) or self.u_prev.shape != (NU,):
            raise ValueError("q_k must be 12-dim and u_prev 8-dim")
        if np.any(self.u_prev > cfg.F_max + 1e-9) or np.any(self.u_prev < cfg.F_min - 1e-9):
            raise ValueError("u_prev violates the input bounds")
        verdict_dist = _ref_distance_ok(q_ref, cfg.d_min)
        verdict_heading = abs(q_ref.heading_offset_error()) <= 1e-9
        if not (verdict_dist and verdict_heading):
            raise InvalidReferenceError(
                f"reference violates docking conditions "
                f"(distance {q_ref.distance():.3f} m vs d_min {cfg.d_min}, "
                f"heading offset error {q_ref.heading_offset_error():.3e} rad)"
            )
        self.params1, self.params2 = params1, params2
        self.m1 = _VesselModel(params1, b_hat[0], cfg.dt)
        self.m2 = _VesselModel(params2, b_hat[1], cfg.dt)
        self.B1 = fixed_allocation_matrix(params1)
        self.b_hat = b_hat

        N = cfg.N
        self.N = N
        self.n_q = NQ * (N + 1)
        self.n_u = NU * N
        self.n_s = N + 1
        self.n = self.n_q + self.n_u + self.n_s
        self.off_u = self.n_q
        self.off_s = self.n_q + self.n_u
        self.m_eq = NQ * (N + 1)
        self.m_box = NU * N
        self.m_rate = NU * N
        self.m_col = N + 1
        self.m_speed = N + 1
        self.m_in = 2 * self.m_box + 2 * self.m_rate + 2 * self.m_col + 2 * self.m_speed

        # Heading references moved to the branch nearest the current headings.
        self.ref1 = q_ref.pose1.copy()
        self.ref2 = q_ref.pose2.copy()
        self.ref1[2] = self.q_k[2] + wrap_angle(q_ref.pose1[2] - self.q_k[2])
        self.ref2[2] = self.q_k[8] + wrap_angle(q_ref.pose2[2] - self.q_k[8])
        self.q_ref = q_ref

        # Variable scaling.
        state_scale = np.array([10.0, 10.0, math.pi, 3.0, 3.0, 1.0] * 2)
        u_scale = np.maximum(np.abs(cfg.F_min), np.abs(cfg.F_max))
        self.state_scale = state_scale
        self.u_scale = u_scale
        self.col_scale = np.concatenate(
            [np.tile(state_scale, N + 1), np.tile(u_scale, N), np.ones(N + 1)]
        )
        self.eq_row_scale = np.tile(1.0 / state_scale, N + 1)
        self.in_row_scale = np.concatenate(
            [
                np.tile(1.0 / u_scale, N),  # box upper
                np.tile(1.0 / u_scale, N),  # box lower
                np.tile(1.0 / u_scale, N),  # rate upper
                np.tile(1.0 / u_scale, N),  # rate lower
                np.ones(N + 1),  # collision [m]
                np.ones(N + 1),  # slack nonnegativity
                np.full(N + 1, 1.0 / (2.0 * cfg.v_max_1)),  # speed 1
                np.full(N + 1, 1.0 / (2.0 * cfg.v_max_2)),  # speed 2
            ]
        )

        self._build_objective_quadratic()
        self._build_eq_pattern()
        self._build_ineq_pattern()
        self._build_hessian_pattern()
        # Node-interleaved permutation making the QP's KKT system banded.
        perm = []
        for h in range(N + 1):
            perm.extend(range(NQ * h, NQ * h + NQ))
            if h < N:
                perm.extend(range(self.off_u + NU * h, self.off_u + NU * h + NU))
            perm.append(self.off_s + h)
            perm.extend(range(self.n + NQ * h, self.n + NQ * h + NQ))
        self._kkt_perm = np.array(perm)

    # -- variable layout ---------------------------------------------------

    def unpack(self, z_phys: np.ndarray):
        Q = z_phys[: self.n_q].reshape(self.N + 1, NQ)
        U = z_phys[self.off_u : self.off_s].reshape(self.N, NU)
        S = z_phys[self.off_s :]
        return Q, U, S

    def pack(self, Q, U, S) -> np.ndarray:
        return np.concatenate([np.ravel(Q), np.ravel(U), np.ravel(S)])

    def to_scaled(self, z_phys: np.ndarray) -> np.ndarray:
        return z_phys / self.col_scale

    def to_physical(self, z_scaled: np.ndarray) -> np.ndarray:
        return z_scaled * self.col_scale

    # -- objective ----------------------------------------------------------

    def _build_objective_quadratic(self):
        cfg = self.cfg
        N = self.N
        q1d, q2d = np.diag(cfg.Q1), np.diag(cfg.Q2)
        qud = np.diag(cfg.Qu)
        diag = np.zeros(self.n)
        node = np.concatenate([q1d, np.zeros(3), q2d, np.zeros(3)])
        for h in range(1, N + 1):
            diag[NQ * h : NQ * (h + 1)] = node
        for h in range(1, N):
            diag[self.off_u + NU * h : self.off_u + NU * (h + 1)] = qud
        diag[self.off_s :] = cfg.slack_weight
        self._obj_diag = diag  # J = z' diag(..) z + lin' z + const (physical)
        lin = np.zeros(self.n)
        ref_node = np.concatenate([self.ref1, np.zeros(3), self.ref2, np.zeros(3)])
        for h in range(1, N + 1):
            lin[NQ * h : NQ * (h + 1)] = -2.0 * node * ref_node
        lin[self.off_s :] = cfg.slack_weight_l1
        self._obj_lin = lin
        self._obj_const = float(N * (q1d @ self.ref1**2 + q2d @ self.ref2**2))
        # Scaled Gauss-Newton Hessian (constant, diagonal, PSD + small floor).
        self._hess_scaled = sp.diags(
            2.0 * diag * self.col_scale**2 + 1e-8, format="csc"
        )

    def eval_objective(self, z_scaled: np.ndarray) -> float:
        # Residual form: evaluates to exactly zero at the reference (the
        # expanded quadratic would lose ~1e-11 to cancellation there).
        Q, U, S = self.unpack(self.to_physical(z_scaled))
        cfg = self.cfg
        e1 = Q[1:, 0:3] - self.ref1
        e2 = Q[1:, 6:9] - self.ref2
        track = float((e1**2 @ np.diag(cfg.Q1)).sum() + (e2**2 @ np.diag(cfg.Q2)).sum())
        ctrl = float((U[1:] ** 2 @ np.diag(cfg.Qu)).sum())
        pen = float(cfg.slack_weight * S @ S + cfg.slack_weight_l1 * S.sum())
        return track + ctrl + pen

    def eval_objective_grad(self, z_scaled: np.ndarray) -> np.ndarray:
        z = self.to_physical(z_scaled)
        g = 2.0 * self._obj_diag * z + self._obj_lin
        return g * self.col_scale

    def tracking_control_cost(self, z_scaled: np.ndarray) -> float:
        """Objective without the slack penalty terms."""
        Q, U, S = self.unpack(self.to_physical(z_scaled))
        cfg = self.cfg
        return self.eval_objective(z_scaled) - float(
            cfg.slack_weight * S @ S + cfg.slack_weight_l1 * S.sum()
        )

    # -- Lagrangian Hessian ---------------------------------------------------

    def _build_hessian_pattern(self):
        N = self.N
        rows, cols = [], []
        rq = (NQ * np.arange(N + 1))[:, None, None] + np.arange(NQ)[:, None]
        cq = (NQ * np.arange(N + 1))[:, None, None] + np.arange(NQ)[None, None, :]
        rows.append(np.broadcast_to(rq, (N + 1, NQ, NQ)).ravel())
        cols.append(np.broadcast_to(cq, (N + 1, NQ, NQ)).ravel())
        ru = (self.off_u + NU * np.arange(N))[:, None, None] + np.arange(NU)[:, None]
        cu = (self.off_u + NU * np.arange(N))[:, None, None] + np.arange(NU)[None, None, :]
        rows.append(np.broadcast_to(ru, (N, NU, NU)).ravel())
        cols.append(np.broadcast_to(cu, (N, NU, NU)).ravel())
        rows.append(self.off_s + np.arange(N + 1))
        cols.append(self.off_s + np.arange(N + 1))
        self._hess_rows = np.concatenate(rows)
        self._hess_cols = np.concatenate(cols)
        # GN objective curvature split into the same blocks.
        q1d, q2d = np.diag(self.cfg.Q1), np.diag(self.cfg.Q2)
        qud = np.diag(self.cfg.Qu)
        gq = np.zeros((N + 1, NQ))
        gq[1:, 0:3] = 2.0 * q1d
        gq[1:, 6:9] = 2.0 * q2d
        self._gn_q = gq
        gu = np.zeros((N, NU))
        gu[1:] = 2.0 * qud
        self._gn_u = gu

    def eval_lagrangian_hessian(
        self,
        z_scaled: np.ndarray,
        y_scaled: np.ndarray,
        lam_scaled: np.ndarray,
        convexify: str = "mirror",
    ) -> sp.csc_matrix:
        """Exact Hessian of the Lagrangian in the scaled decision space.

        The dynamics, collision and speed constraints only couple variables
        within one node (and there are no state/input cross terms), so the
        Hessian is block diagonal over (q_h) and (u_h) blocks.  `convexify`
        selects the treatment of indefinite blocks: "mirror" flips negative
        eigenvalues, "clip" floors them, "none" returns the raw Hessian.
        """
        N = self.N
        cfg = self.cfg
        dt = cfg.dt
        Q, U, S = self.unpack(self.to_physical(z_scaled))
        yp = (y_scaled * self.eq_row_scale)[NQ:].reshape(N, NQ)
        lp = lam_scaled * self.in_row_scale

        Hq = np.zeros((N + 1, NQ, NQ))
        Hu = np.zeros((N, NU, NU))
        Hq[np.arange(N + 1)[:, None], np.arange(NQ), np.arange(NQ)] = self._gn_q
        Hu[np.arange(N)[:, None], np.arange(NU), np.arange(NU)] = self._gn_u

        # Dynamics curvature, -sum_r y_r d2F_r, at nodes 0..N-1.
        for m, o_q in ((self.m1, 0), (self.m2, 6)):
            psi = Q[:-1, o_q + 2]
            c, s = np.cos(psi), np.sin(psi)
            nu_u, nu_v = Q[:-1, o_q + 3], Q[:-1, o_q + 4]
            yv = yp[:, o_q : o_q + 6]
            bbxy = np.stack(
                [c * m.b[0] + s * m.b[1], -s * m.b[0] + c * m.b[1], np.zeros(N)],
                axis=1,
            )
            h_pp = -dt * (
                yv[:, 0] * (-c * nu_u + s * nu_v)
                + yv[:, 1] * (-s * nu_u - c * nu_v)
                - np.einsum("hi,hi->h", yv[:, 3:6], bbxy @ m.M_invT)
            )
            h_pu = -dt * (yv[:, 0] * (-s) + yv[:, 1] * c)
            h_pv = -dt * (yv[:, 0] * (-c) + yv[:, 1] * (-s))
            Hq[:-1, o_q + 2, o_q + 2] += h_pp
            Hq[:-1, o_q + 2, o_q + 3] += h_pu
            Hq[:-1, o_q + 3, o_q + 2] += h_pu
            Hq[:-1, o_q + 2, o_q + 4] += h_pv
            Hq[:-1, o_q + 4, o_q + 2] += h_pv

        # Azimuth allocation curvature (vessel 2 input block).
        w2, d2 = self.m2.params.w, self.m2.params.d
        f_p, f_s = U[:, 4], U[:, 5]
        cp, sp_ = np.cos(U[:, 6]), np.sin(U[:, 6])
        cs, ss = np.cos(U[:, 7]), np.sin(U[:, 7])
        ytau = yp[:, 9:12] @ (dt * self.m2.params.M_inv)  # weights on tau_2
        v_fp_tp = np.stack([-sp_, -cp, -w2 * sp_ + d2 * cp], axis=1)
        v_fs_ts = np.stack([-ss, -cs, w2 * ss - d2 * cs], axis=1)
        v_tp_tp = f_p[:, None] * np.stack([-cp, sp_, -w2 * cp - d2 * sp_], axis=1)
        v_ts_ts = f_s[:, None] * np.stack([-cs, ss, w2 * cs + d2 * ss], axis=1)
        h_fp_tp = -np.einsum("hi,hi->h", ytau, v_fp_tp)
        h_fs_ts = -np.einsum("hi,hi->h", ytau, v_fs_ts)
        Hu[:, 4, 6] += h_fp_tp
        Hu[:, 6, 4] += h_fp_tp
        Hu[:, 5, 7] += h_fs_ts
        Hu[:, 7, 5] += h_fs_ts
        Hu[:, 6, 6] += -np.einsum("hi,hi->h", ytau, v_tp_tp)
        Hu[:, 7, 7] += -np.einsum("hi,hi->h", ytau, v_ts_ts)

        # Collision curvature couples the two position pairs within a node.
        dist, unit = self._collision_terms(Q)
        mu_col = lp[self._row_col0 : self._row_col0 + N + 1]
        P2 = (np.eye(2)[None] - unit[:, :, None] * unit[:, None, :]) / np.maximum(
            dist, 1e-6
        )[:, None, None]
        blk = mu_col[:, None, None] * P2
        pos = np.array([0, 1, 6, 7])
        Hq[np.ix_(np.arange(N + 1), pos[:2], pos[:2])] -= blk
        Hq[np.ix_(np.arange(N + 1), pos[2:], pos[2:])] -= blk
        Hq[np.ix_(np.arange(N + 1), pos[:2], pos[2:])] += blk
        Hq[np.ix_(np.arange(N + 1), pos[2:], pos[:2])] += blk

        # Speed curvature.
        mu1 = lp[self._row_speed0 : self._row_speed0 + N + 1]
        mu2 = lp[self._row_speed0 + N + 1 :]
        for o_v, mu in ((3, mu1), (9, mu2)):
            Hq[:, o_v, o_v] += 2.0 * mu
            Hq[:, o_v + 1, o_v + 1] += 2.0 * mu

        # Scale, symmetrize, convexify blockwise.
        sq = self.state_scale
        su = self.u_scale
        Hq *= sq[None, :, None] * sq[None, None, :]
        Hu *= su[None, :, None] * su[None, None, :]
        Hq = 0.5 * (Hq + np.transpose(Hq, (0, 2, 1)))
        Hu = 0.5 * (Hu + np.transpose(Hu, (0, 2, 1)))
        if convexify != "none":
            # Mirroring keeps the curvature magnitude so the QP does not
            # treat saddle directions as free rides; clipping just floors.
            wq, Vq = np.linalg.eigh(Hq)
            wu, Vu = np.linalg.eigh(Hu)
            eps_h = 1e-7
            if convexify == "mirror":
                wq = np.maximum(np.abs(wq), eps_h)
                wu = np.maximum(np.abs(wu), eps_h)
            else:
                wq = np.clip(wq, eps_h, None)
                wu = np.clip(wu, eps_h, None)
            Hq = Vq @ (wq[:, :, None] * np.transpose(Vq, (0, 2, 1)))
            Hu = Vu @ (wu[:, :, None] * np.transpose(Vu, (0, 2, 1)))

        s_diag = np.full(N + 1, 2.0 * cfg.slack_weight)
        data = np.concatenate([Hq.ravel(), Hu.ravel(), s_diag])
        return sp.csc_matrix(
            (data, (self._hess_rows, self._hess_cols)), shape=(self.n, self.n)
        )

    # -- dynamics -----------------------------------------------------------

    def step_batch(self, Q: np.ndarray, U: np.ndarray) -> np.ndarray:
        """Joint Euler map applied to each row of (Q, U); headings unwrapped."""
        dt = self.cfg.dt
        out = np.empty_like(Q)
        for m, sl_q, sl_u, is_fixed in (
            (self.m1, slice(0, 6), slice(0, 4), True),
            (self.m2, slice(6, 12), slice(4, 8), False),
        ):
            q = Q[:, sl_q]
            eta, nu = q[:, :3], q[:, 3:]
            psi = eta[:, 2]
            c, s = np.cos(psi), np.sin(psi)
            if is_fixed:
                tau = U[:, sl_u] @ self.B1.T
            else:
                tau = _azimuth_tau_batch(m, U[:, sl_u])
            bb = np.stack(
                [
                    c * m.b[0] + s * m.b[1],
                    -s * m.b[0] + c * m.b[1],
                    np.full(len(psi), m.b[2]),
                ],
                axis=1,
            )
            eta_dot = np.stack(
                [c * nu[:, 0] - s * nu[:, 1], s * nu[:, 0] + c * nu[:, 1], nu[:, 2]],
                axis=1,
            )
            nu_next = nu + (bb + tau - nu @ m.params.D_L.T) @ m.dtMinv.T
            out[:, sl_q] = np.hstack([eta + dt * eta_dot, nu_next])
        return out

    def roll_out(self, q0: np.ndarray, U: np.ndarray) -> np.ndarray:
        """Forward simulation of the prediction model from q0 under U."""
        Q = np.empty((U.shape[0] + 1, NQ))
        Q[0] = q0
        for h in range(U.shape[0]):
            Q[h + 1] = self.step_batch(Q[h : h + 1], U[h : h + 1])[0]
        return Q

    def _jacobian_blocks(self, Q: np.ndarray, U: np.ndarray):
        """A (H,12,12) and B (H,12,8) blocks of the joint Euler map."""
        dt = self.cfg.dt
        H = Q.shape[0]
        A = np.zeros((H, NQ, NQ))
        Bm = np.zeros((H, NQ, NU))
        for m, o_q, o_u in ((self.m1, 0, 0), (self.m2, 6, 4)):
            q = Q[:, o_q : o_q + 6]
            nu = q[:, 3:]
            psi = q[:, 2]
            c, s = np.cos(psi), np.sin(psi)
            idx = np.arange(3)
            A[:, o_q + idx, o_q + idx] = 1.0
            A[:, o_q + 0, o_q + 2] = dt * (-s * nu[:, 0] - c * nu[:, 1])
            A[:, o_q + 1, o_q + 2] = dt * (c * nu[:, 0] - s * nu[:, 1])
            A[:, o_q + 0, o_q + 3] = dt * c
            A[:, o_q + 0, o_q + 4] = -dt * s
            A[:, o_q + 1, o_q + 3] = dt * s
            A[:, o_q + 1, o_q + 4] = dt * c
            A[:, o_q + 2, o_q + 5] = dt
            # d nu+/d psi through the body-frame bias rotation.
            dbb = np.stack(
                [-s * m.b[0] + c * m.b[1], -c * m.b[0] - s * m.b[1], np.zeros(H)],
                axis=1,
            )
            A[:, o_q + 3 : o_q + 6, o_q + 2] = dbb @ m.dtMinv.T
            A[:, o_q + 3 : o_q + 6, o_q + 3 : o_q + 6] = m.Ad_nu
            if o_u == 0:
                Bm[:, o_q + 3 : o_q + 6, o_u : o_u + 4] = m.dtMinv @ self.B1
            else:
                Jt = _azimuth_jac_batch(m, U[:, o_u : o_u + 4])
                Bm[:, o_q + 3 : o_q + 6, o_u : o_u + 4] = np.einsum(
                    "ij,hjk->hik", m.dtMinv, Jt
                )
        return A, Bm

    # -- equality constraints ------------------------------------------------

    def _build_eq_pattern(self):
        N = self.N
        rows, cols = [], []
        # q(0) = q_k.
        rows.append(np.arange(NQ))
        cols.append(np.arange(NQ))
        # Identity on q(h+1).
        r = NQ + np.arange(NQ * N)
        rows.append(r)
        cols.append(NQ + np.arange(NQ * N))
        # -A blocks on q(h).
        rr = (NQ * (np.arange(N) + 1))[:, None, None] + np.arange(NQ)[:, None]
        cc = (NQ * np.arange(N))[:, None, None] + np.arange(NQ)[None, None, :]
        rows.append(np.broadcast_to(rr, (N, NQ, NQ)).ravel())
        cols.append(np.broadcast_to(cc, (N, NQ, NQ)).ravel())
        # -B blocks on u(h).
        rr = (NQ * (np.arange(N) + 1))[:, None, None] + np.arange(NQ)[:, None]
        cc = (self.off_u + NU * np.arange(N))[:, None, None] + np.arange(NU)[None, None, :]
        rows.append(np.broadcast_to(rr, (N, NQ, NU)).ravel())
        cols.append(np.broadcast_to(cc, (N, NQ, NU)).ravel())
        self._eq_rows = np.concatenate(rows)
        self._eq_cols = np.concatenate(cols)
        self._eq_scale = self.eq_row_scale[self._eq_rows] * self.col_scale[self._eq_cols]

    def eval_eq(self, z_scaled: np.ndarray) -> np.ndarray:
        Q, U, _ = self.unpack(self.to_physical(z_scaled))
        c = np.empty(self.m_eq)
        c[:NQ] = Q[0] - self.q_k
        c[NQ:] = (Q[1:] - self.step_batch(Q[:-1], U)).ravel()
        return c * self.eq_row_scale

    def eval_eq_jac(self, z_scaled: np.ndarray) -> sp.csr_matrix:
        Q, U, _ = self.unpack(self.to_physical(z_scaled))
        A, B = self._jacobian_blocks(Q[:-1], U)
        data = np.concatenate(
            [np.ones(NQ), np.ones(NQ * self.N), -A.ravel(), -B.ravel()]
        )
        J = sp.csr_matrix(
            (data * self._eq_scale, (self._eq_rows, self._eq_cols)),
            shape=(self.m_eq, self.n),
        )
        return J

    # -- inequality constraints ----------------------------------------------

    def _build_ineq_pattern(self):
        N = self.N
        cfg = self.cfg
        off_u, off_s = self.off_u, self.off_s
        rows, cols, const = [], [], []
        r0 = 0
        u_idx = off_u + np.arange(NU * N)
        # Box upper / lower.
        rows += [r0 + np.arange(NU * N)]
        cols += [u_idx]
        const += [np.ones(NU * N)]
        r0 += self.m_box
        rows += [r0 + np.arange(NU * N)]
        cols += [u_idx]
        const += [-np.ones(NU * N)]
        r0 += self.m_box
        # Rate upper: u_h - u_{h-1}; h = 0 has only the u_0 entry.
        rate_rows = r0 + np.arange(NU * N)
        rows += [rate_rows, rate_rows[NU:]]
        cols += [u_idx, u_idx[:-NU]]
        const += [np.ones(NU * N), -np.ones(NU * (N - 1))]
        r0 += self.m_rate
        rate_rows = r0 + np.arange(NU * N)
        rows += [rate_rows, rate_rows[NU:]]
        cols += [u_idx, u_idx[:-NU]]
        const += [-np.ones(NU * N), np.ones(NU * (N - 1))]
        r0 += self.m_rate
        self._row_col0 = r0
        # Collision rows: 4 position entries (variable) + slack entry (const).
        col_rows = r0 + np.arange(N + 1)
        pos_cols = np.stack(
            [
                NQ * np.arange(N + 1) + 0,
                NQ * np.arange(N + 1) + 1,
                NQ * np.arange(N + 1) + 6,
                NQ * np.arange(N + 1) + 7,
            ],
            axis=1,
        )
        rows += [np.repeat(col_rows, 4)]
        cols += [pos_cols.ravel()]
        const += [np.full(4 * (N + 1), np.nan)]  # variable data
        rows += [col_rows]
        cols += [off_s + np.arange(N + 1)]
        const += [-np.ones(N + 1)]
        r0 += self.m_col
        # Slack nonnegativity.
        rows += [r0 + np.arange(N + 1)]
        cols += [off_s + np.arange(N + 1)]
        const += [-np.ones(N + 1)]
        r0 += self.m_col
        self._row_speed0 = r0
        # Speed rows: 2 velocity entries each (variable).
        sp_rows = r0 + np.arange(N + 1)
        v_cols = np.stack([NQ * np.arange(N + 1) + 3, NQ * np.arange(N + 1) + 4], axis=1)
        rows += [np.repeat(sp_rows, 2)]
        cols += [v_cols.ravel()]
        const += [np.full(2 * (N + 1), np.nan)]
        r0 += self.m_speed
        sp_rows = r0 + np.arange(N + 1)
        v_cols = np.stack([NQ * np.arange(N + 1) + 9, NQ * np.arange(N + 1) + 10], axis=1)
        rows += [np.repeat(sp_rows, 2)]
        cols += [v_cols.ravel()]
        const += [np.full(2 * (N + 1), np.nan)]

        self._in_rows = np.concatenate(rows)
        self._in_cols = np.concatenate(cols)
        self._in_const = np.concatenate(const)
        self._in_var_mask = np.isnan(self._in_const)
        self._in_scale = self.in_row_scale[self._in_rows] * self.col_scale[self._in_cols]
        # Bounds vector pieces reused every evaluation.
        self._box_hi = np.tile(cfg.F_max, N)
        self._box_lo = np.tile(cfg.F_min, N)
        self._rate_hi = np.tile(cfg.dF_max * cfg.dt, N)
        self._rate_lo = np.tile(cfg.dF_min * cfg.dt, N)

    def _collision_terms(self, Q: np.ndarray):
        d = Q[:, 0:2] - Q[:, 6:8]
        dist = np.hypot(d[:, 0], d[:, 1])
        safe = np.maximum(dist, 1e-9)
        unit = d / safe[:, None]
        return dist, unit

    def eval_ineq(self, z_scaled: np.ndarray) -> np.ndarray:
        Q, U, S = self.unpack(self.to_physical(z_scaled))
        cfg = self.cfg
        u_flat = U.ravel()
        du = U.copy()
        du[1:] -= U[:-1]
        du[0] -= self.u_prev
        dist, _ = self._collision_terms(Q)
        v1 = Q[:, 3] ** 2 + Q[:, 4] ** 2
        v2 = Q[:, 9] ** 2 + Q[:, 10] ** 2
        c = np.concatenate(
            [
                u_flat - self._box_hi,
                self._box_lo - u_flat,
                du.ravel() - self._rate_hi,
                self._rate_lo - du.ravel(),
                cfg.d_min - dist - S,
                -S,
                v1 - cfg.v_max_1**2,
                v2 - cfg.v_max_2**2,
            ]
        )
        return c * self.in_row_scale

    def eval_ineq_jac(self, z_scaled: np.ndarray) -> sp.csr_matrix:
        Q, _, _ = self.unpack(self.to_physical(z_scaled))
        _, unit = self._collision_terms(Q)
        var = np.concatenate(
            [
                np.stack([-unit[:, 0], -unit[:, 1], unit[:, 0], unit[:, 1]], axis=1).ravel(),
                2.0 * np.stack([Q[:, 3], Q[:, 4]], axis=1).ravel(),
                2.0 * np.stack([Q[:, 9], Q[:, 10]], axis=1).ravel(),
            ]
        )
        data = self._in_const.copy()
        data[self._in_var_mask] = var
        return sp.csr_matrix(
            (data * self._in_scale, (self._in_rows, self._in_cols)),
            shape=(self.m_in, self.n),
        )

    def active_candidates(self, z_scaled: np.ndarray) -> np.ndarray:
        """Mask of inequality rows worth giving to the QP: everything except
        collision rows whose predicted separation has a wide margin."""
        Q, _, _ = self.unpack(self.to_physical(z_scaled))
        dist, _ = self._collision_terms(Q)
        keep = np.ones(self.m_in, dtype=bool)
        far = dist > self.cfg.d_min + 3.0
        keep[self._row_col0 : self._row_col0 + self.N + 1] = ~far
        return keep

    # -- starting points -------------------------------------------------------

    def cold_start(self) -> WarmStart:
        N = self.N
        Q = np.tile(self.q_k, (N + 1, 1))
        U = np.tile(self.u_prev, (N, 1))
        dist, _ = self._collision_terms(Q)
        S = np.maximum(0.0, self.cfg.d_min - dist)
        return WarmStart(q_traj=Q, u_traj=U, slacks=S)

    def initial_vector(self, warm: WarmStart | None) -> np.ndarray:
        if warm is None:
            warm = self.cold_start()
        Q = np.array(warm.q_traj, dtype=float)
        U = np.array(warm.u_traj, dtype=float)
        S = np.array(warm.slacks, dtype=float)
        if Q.shape != (self.N + 1, NQ) or U.shape != (self.N, NU):
            raise ValueError("warm start has the wrong horizon shape")
        # Re-anchor the unwrapped heading branches to the current state.
        for j, qi in ((2, 2), (8, 8)):
            shift = (self.q_k[qi] - Q[0, j]) - wrap_angle(self.q_k[qi] - Q[0, j])
            Q[:, j] += shift
        return self.to_scaled(self.pack(Q, U, np.maximum(S, 0.0)))


def _ref_distance_ok(q_ref: ReferencePose, d_min: float) -> bool:
    return q_ref.distance() >= d_min - 1e-9


def build_problem(
    cfg: MpcConfig,
    q_k,
    u_prev,
    b_hat: tuple[BiasForce, BiasForce],
    q_ref: ReferencePose,
    params1: VesselParams = USV1,
    params2: VesselParams = USV2,
) -> DockingNlp:
    """Assemble the NLP for one control step; rejects invalid references."""
    return DockingNlp(cfg, q_k, u_prev, b_hat, q_ref, params1, params2)


def _kkt_residual(g, Je, Ji, ce, ci, y, lam):
    """Scaled KKT residual.

    Stationarity and complementarity are divided by a multiplier/gradient
    magnitude (IPOPT-style, threshold 100) so the 1e-6 tolerance stays
    meaningful when the tracking weights make gradients large; feasibility
    is absolute because the constraint rows are already scaled.
    """
    stat = g + Je.T @ y + Ji.T @ lam
    mag = np.abs(y).sum() + np.abs(lam).sum() + np.abs(g).sum()
    count = y.size + lam.size + g.size
    sd = max(1.0, (mag / max(count, 1)) / 100.0)
    r_stat = float(np.abs(stat).max()) / sd
    r_feas = max(
        float(np.abs(ce).max(initial=0.0)),
        float(np.maximum(ci, 0.0).max(initial=0.0)),
    )
    r_comp = float(np.abs(lam * ci).max(initial=0.0)) / sd
    return max(r_stat, r_comp), r_feas


def solve(nlp: DockingNlp, warm_start: WarmStart | None = None) -> MpcSolution:
    """SQP iteration on the docking NLP; returns the best iterate found.

    Status Optimal requires the scaled KKT residual and every constraint
    family (natural units) to be below the configured tolerances; MaxIter
    returns the best feasible-so-far iterate with its residuals; Infeasible
    means the slack-relaxed subproblem itself failed.
    """
    cfg = nlp.cfg
    t0 = time.perf_counter()
    z = nlp.initial_vector(warm_start)
    y = np.zeros(nlp.m_eq)
    lam = np.zeros(nlp.m_in)
    if (
        warm_start is not None
        and warm_start.y_eq is not None
        and warm_start.z_in is not None
        and warm_start.y_eq.shape == y.shape
        and warm_start.z_in.shape == lam.shape
    ):
        y = warm_start.y_eq.copy()
        lam = np.maximum(warm_start.z_in, 0.0)

    rho = 1.0
    status = "MaxIter"
    kkt = math.inf
    best = None
    best_score = (math.inf, math.inf)
    iterations = 0
    for it in range(cfg.max_iterations + 1):
        g = nlp.eval_objective_grad(z)
        ce = nlp.eval_eq(z)
        ci = nlp.eval_ineq(z)
        Je = nlp.eval_eq_jac(z)
        Ji = nlp.eval_ineq_jac(z)
        kkt, feas = _kkt_residual(g, Je, Ji, ce, ci, y, lam)
        viol = float(np.abs(ce).sum() + np.maximum(ci, 0.0).sum())
        merit = nlp.eval_objective(z) + rho * viol
        track = (z.copy(), y.copy(), lam.copy(), kkt, feas)
        # Iterates comfortably inside the feasibility tolerance compete on
        # the KKT residual alone.
        score = (0.0 if feas <= 10.0 * cfg.feas_tol else feas, kkt)
        if best is None or score < best_score:
            best, best_score = track, score
        if (
            kkt <= cfg.kkt_tol
            and feas <= cfg.feas_tol
            and float(np.abs(ce).max(initial=0.0)) <= cfg.eq_tol
        ):
            status = "Optimal"
            break
        if (
            it >= 1
            and math.isfinite(cfg.accept_kkt)
            and kkt <= cfg.accept_kkt
            and feas <= cfg.feas_tol
        ):
            break
        if it == cfg.max_iterations:
            break
        if cfg.time_budget_s is not None and time.perf_counter() - t0 > cfg.time_budget_s:
            break

        if cfg.hessian == "gauss-newton":
            H = nlp._hess_scaled
        else:
            H = nlp.eval_lagrangian_hessian(z, y, lam)
        # Drop collision rows that are far from active over the current
        # prediction; they rejoin automatically once trajectories approach.
        keep = nlp.active_candidates(z)
        # Warm-start the interior point once the iterates have settled (the
        # active set barely moves there); from far away a cold start is
        # more reliable.
        if feas <= 1e-2 and np.any(lam > 0):
            qp_s0, qp_z0 = np.maximum(-ci[keep], 1e-8), lam[keep]
        else:
            qp_s0 = qp_z0 = None
        res = solve_qp(
            H,
            g,
            Je,
            -ce,
            Ji[keep],
            -ci[keep],
            tol=cfg.qp_tol,
            max_iter=cfg.qp_max_iter,
            perm=nlp._kkt_perm,
            s0=qp_s0,
            z0=qp_z0,
        )
        iterations = it + 1
        if res.status == "failed":
            status = "Infeasible"
            break
        d, y_new = res.x, res.y
        lam_new = np.zeros(nlp.m_in)
        lam_new[keep] = res.z

        mult_inf = max(
            np.abs(y_new).max(initial=0.0), np.abs(lam_new).max(initial=0.0)
        )
        if rho < 1.1 * mult_inf:
            rho = 1.2 * mult_inf + 1.0
        elif rho > 10.0 * (1.2 * mult_inf + 1.0):
            # Stale penalty from an earlier iteration over-weights tiny
            # infeasibilities and blocks progress; let it decay.
            rho = max(1.2 * mult_inf + 1.0, 0.1 * rho)
        merit = nlp.eval_objective(z) + rho * viol
        descent = float(g @ d) - rho * viol
        noise = 1e-10 * max(1.0, abs(merit))
        alpha = 1.0
        accepted = False
        if float(np.abs(d).max()) <= 1e-8:
            # Numerically converged step: the KKT check decides, a merit
            # comparison at this scale is dominated by rounding.
            accepted = True
        while not accepted and alpha > 1e-10:
            z_try = z + alpha * d
            ce_t = nlp.eval_eq(z_try)
            ci_t = nlp.eval_ineq(z_try)
            viol_t = float(np.abs(ce_t).sum() + np.maximum(ci_t, 0.0).sum())
            merit_t = nlp.eval_objective(z_try) + rho * viol_t
            if merit_t <= merit + 1e-4 * alpha * min(descent, 0.0) + noise:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            # Merit changes at numerical-noise level near a solution: take
            # the full step unless it visibly degrades feasibility.
            ce_t = nlp.eval_eq(z + d)
            ci_t = nlp.eval_ineq(z + d)
            viol_full = float(np.abs(ce_t).sum() + np.maximum(ci_t, 0.0).sum())
            alpha = 1.0 if viol_full <= max(viol, cfg.feas_tol) else alpha
        z = z + alpha * d
        y, lam = y_new, lam_new

    # The warm-start payload carries the FINAL iterate so a tightly capped
    # solve keeps converging across control steps.  A non-certified solve
    # returns the final iterate while it is usable (the line search made it
    # the furthest-progressed plan); the best feasible-so-far iterate is
    # the fallback when the last step went somewhere infeasible.
    z_final, y_final, lam_final = z, y, lam
    if status != "Optimal" and best is not None:
        final_usable = feas <= 100.0 * cfg.feas_tol
        if not final_usable:
            z, y, lam, kkt, feas = best

    solve_time = time.perf_counter() - t0
    Q, U, S = nlp.unpack(nlp.to_physical(z))
    # Non-certified iterates may overshoot the input box by solver-tolerance
    # amounts; the applied sequence must respect the actuator limits.
    U = np.clip(U, cfg.F_min, cfg.F_max)
    q_pred = nlp.roll_out(nlp.q_k, U)
    report = _residuals(nlp, q_pred, U)
    max_cv = report.max_violation()
    slack_max = float(S.max(initial=0.0))
    if status == "Optimal" and (max_cv > cfg.feas_tol or slack_max > 1e-6):
        status = "MaxIter"
    Qf, Uf, Sf = nlp.unpack(nlp.to_physical(z_final))
    warm = WarmStart(
        q_traj=Qf,
        u_traj=np.clip(Uf, cfg.F_min, cfg.F_max),
        slacks=np.maximum(Sf, 0.0),
        y_eq=y_final,
        z_in=lam_final,
        step_fn=lambda q, u: nlp.step_batch(q[None, :], u[None, :])[0],
    )
    return MpcSolution(
        u_seq=U,
        q_pred=q_pred,
        cost=nlp.tracking_control_cost(z),
        status=status,
        kkt_residual=kkt,
        max_constraint_violation=max_cv,
        solve_time=solve_time,
        iterations=iterations,
        slack_max=slack_max,
        warm=warm,
    )


def _shift_segment(v: np.ndarray, width: int) -> np.ndarray:
    """Shift a per-node flat segment one node forward, duplicating the tail."""
    out = np.concatenate([v[width:], v[-width:]])
    return out


def shift_warm_start(prev: MpcSolution) -> WarmStart:
    """Receding-horizon shift: drop the first input, duplicate the last,
    advance the state trajectory one node and propagate the tail once
    through the prediction model.  Multipliers shift node-wise as well so
    the next solve starts with a consistent dual estimate."""
    if prev.warm is None:
        raise ValueError("solution carries no warm-start payload")
    w = prev.warm
    U = np.vstack([w.u_traj[1:], w.u_traj[-1]])
    Q = np.vstack([w.q_traj[1:], w.q_traj[-1]])
    if w.step_fn is not None:
        Q[-1] = w.step_fn(w.q_traj[-1], w.u_traj[-1])
    S = np.concatenate([w.slacks[1:], w.slacks[-1:]])
    y = lam = None
    if w.y_eq is not None and w.z_in is not None:
        N = U.shape[0]
        y = np.concatenate([w.y_eq[:NQ], _shift_segment(w.y_eq[NQ:], NQ)])
        segs = []
        off = 0
        for width, count in (
            (NU, N),  # box upper
            (NU, N),  # box lower
            (NU, N),  # rate upper
            (NU, N),  # rate lower
            (1, N + 1),  # collision
            (1, N + 1),  # slack bound
            (1, N + 1),  # speed vessel 1
            (1, N + 1),  # speed vessel 2
        ):
            seg = w.z_in[off : off + width * count]
            segs.append(_shift_segment(seg, width))
            off += width * count
        lam = np.concatenate(segs)
    return WarmStart(q_traj=Q, u_traj=U, slacks=S, y_eq=y, z_in=lam, step_fn=w.step_fn)


def _residuals(nlp: DockingNlp, q_pred: np.ndarray, u_seq: np.ndarray) -> ResidualReport:
    cfg = nlp.cfg
    defect0 = np.abs(q_pred[0] - nlp.q_k)
    defect0[2] = abs(wrap_angle(q_pred[0, 2] - nlp.q_k[2]))
    defect0[8] = abs(wrap_angle(q_pred[0, 8] - nlp.q_k[8]))
    step = nlp.step_batch(q_pred[:-1], u_seq)
    d = np.abs(q_pred[1:] - step)
    for j in (2, 8):
        d[:, j] = np.abs(_wrap_array(q_pred[1:, j] - step[:, j]))
    dyn = max(float(defect0.max()), float(d.max(initial=0.0)))
    box = max(
        float(np.maximum(u_seq - cfg.F_max, 0.0).max(initial=0.0)),
        float(np.maximum(cfg.F_min - u_seq, 0.0).max(initial=0.0)),
    )
    du = u_seq.copy()
    du[1:] -= u_seq[:-1]
    du[0] -= nlp.u_prev
    rate = max(
        float(np.maximum(du - cfg.dF_max * cfg.dt, 0.0).max(initial=0.0)),
        float(np.maximum(cfg.dF_min * cfg.dt - du, 0.0).max(initial=0.0)),
    )
    dist, _ = nlp._collision_terms(q_pred)
    collision = float(np.maximum(cfg.d_min - dist, 0.0).max(initial=0.0))
    sp1 = np.hypot(q_pred[:, 3], q_pred[:, 4]) - cfg.v_max_1
    sp2 = np.hypot(q_pred[:, 9], q_pred[:, 10]) - cfg.v_max_2
    speed = float(np.maximum(np.concatenate([sp1, sp2]), 0.0).max(initial=0.0))
    return ResidualReport(
        dynamics_defect=dyn, input_box=box, rate_box=rate, collision=collision, speed=speed
    )


def constraint_residuals(
    sol: MpcSolution,
    cfg: MpcConfig,
    q_k,
    u_prev,
    b_hat: tuple[BiasForce, BiasForce],
    params1: VesselParams = USV1,
    params2: VesselParams = USV2,
) -> ResidualReport:
    """Per-family maximum constraint violation of a solution, in natural
    units (forces in N, distances in m, speeds in m/s)."""
    nlp = DockingNlp.__new__(DockingNlp)
    # Light-weight: only the pieces _residuals touches.
    nlp.cfg = cfg
    nlp.q_k = np.asarray(q_k, dtype=float)
    nlp.u_prev = np.asarray(u_prev, dtype=float)
    nlp.m1 = _VesselModel(params1, b_hat[0], cfg.dt)
    nlp.m2 = _VesselModel(params2, b_hat[1], cfg.dt)
    nlp.B1 = fixed_allocation_matrix(params1)
    return _residuals(nlp, sol.q_pred, sol.u_seq)
