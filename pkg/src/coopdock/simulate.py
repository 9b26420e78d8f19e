"""Closed-loop docking simulation: plant + observer + controller + metrics.

One control period runs measurement -> per-vessel EKF update -> NMPC solve
(with the estimated bias pair, or zeros in the no-bias ablation) -> thruster
allocation -> plant step with the true bias.  The baseline mode re-anchors
the docking configuration at vessel 1's initial pose so that vessel 1 only
station-keeps while vessel 2 completes the docking.

Logged runs go to a CSV (one row per control step, final state appended)
and evaluation metrics to JSON; both formats are part of the public
interface and consumed by the plotting frontend.
"""

from __future__ import annotations

import io
import json
import math
import time
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .allocation import JointControl, joint_allocate
from .dynamics import (
    USV1,
    USV2,
    BiasForce,
    PlantFidelity,
    VesselParams,
    VesselState,
    euler_step,
    wrap_angle,
)
from .nmpc import (
    MpcConfig,
    MpcSolution,
    ReferencePose,
    build_problem,
    control_cost,
    shift_warm_start,
    solve,
    tracking_cost,
)
from .observer import (
    Measurement,
    MeasurementKind,
    ObserverState,
    SensorNoise,
    bias_estimate,
    ekf_predict,
    ekf_update,
    make_observer,
)


class ControllerMode(Enum):
    COOPERATIVE = "coop"
    BASELINE = "baseline"
    COOPERATIVE_NO_BIAS = "coop-nobias"


@dataclass(frozen=True)
class ReferenceVerdict:
    """Outcome of the docking-configuration validation."""

    valid: bool
    violations: tuple[str, ...] = ()

    def __bool__(self) -> bool:
        return self.valid


def validate_reference(q_ref: ReferencePose, d_min: float) -> ReferenceVerdict:
    """Check the two docking conditions: planar reference distance >= d_min
    and opposed headings (psi_1 = psi_2 + pi)."""
    violations = []
    dist = q_ref.distance()
    if not dist >= d_min - 1e-9:
        violations.append(
            f"reference distance {dist:.6f} m is below the minimum distance "
            f"{d_min:.6f} m"
        )
    off = q_ref.heading_offset_error()
    if not abs(off) <= 1e-9:
        violations.append(
            f"reference headings are not opposed: wrap(psi1 - psi2 - pi) = "
            f"{off:.3e} rad"
        )
    return ReferenceVerdict(valid=not violations, violations=tuple(violations))


def current_to_bias(
    speed: float, heading: float, drag: tuple[float, float]
) -> tuple[BiasForce, BiasForce]:
    """Map a water current to a per-vessel constant inertial-frame force.

    The magnitude model is drag_i * speed along the current direction; the
    default drag coefficients equal each hull's surge damping.
    """
    if speed < 0.0:
        raise ValueError("current speed must be nonnegative")
    d = np.array([math.cos(heading), math.sin(heading), 0.0])
    return (
        BiasForce(drag[0] * speed * d),
        BiasForce(drag[1] * speed * d),
    )


DEFAULT_DRAG = (float(USV1.D_L[0, 0]), float(USV2.D_L[0, 0]))


@dataclass(frozen=True)
class Scenario:
    """One closed-loop experiment definition."""

    name: str
    q_init: np.ndarray  # joint 12-vector
    current_speed: float
    current_heading: float
    reference: ReferencePose
    mode: ControllerMode = ControllerMode.COOPERATIVE
    steps: int = 200
    seed: int = 0
    drag: tuple[float, float] = DEFAULT_DRAG
    noise: SensorNoise | None = None  # None: noiseless measurements
    plant_fidelity: PlantFidelity = PlantFidelity.LINEAR_LOW_SPEED
    plant_substeps: int = 1

    def __post_init__(self):
        q = np.array(self.q_init, dtype=float)
        if q.shape != (12,):
            raise ValueError("q_init must be a 12-vector")
        q.setflags(write=False)
        object.__setattr__(self, "q_init", q)
        if self.steps < 1:
            raise ValueError("duration must be at least one step")
        if self.current_speed < 0.0:
            raise ValueError("current speed must be nonnegative")

    def effective_reference(self, d_min: float) -> ReferencePose:
        """The reference actually given to the controller: in baseline mode
        the docking configuration is anchored at vessel 1's initial pose."""
        if self.mode is ControllerMode.BASELINE:
            return ReferencePose.docking_at_pose1(self.q_init[:3], d_min)
        return self.reference


@dataclass
class StepRecord:
    time: float
    q: np.ndarray  # joint state (12,)
    u: np.ndarray  # applied input (8,)
    b_true: np.ndarray  # (6,) both vessels
    b_hat: np.ndarray  # (6,)
    status: str
    kkt: float
    solve_time: float
    iterations: int = 0
    tracking: float = 0.0
    control: float = 0.0


@dataclass
class RunLog:
    """Per-step records of one closed-loop run (length steps + 1; the final
    record carries the terminal state with the last applied input)."""

    scenario: Scenario
    q_ref: ReferencePose  # reference used by the controller
    dt: float
    records: list[StepRecord] = field(default_factory=list)
    error: str | None = None

    @property
    def states(self) -> np.ndarray:
        return np.array([r.q for r in self.records])

    @property
    def inputs(self) -> np.ndarray:
        return np.array([r.u for r in self.records])

    @property
    def times(self) -> np.ndarray:
        return np.array([r.time for r in self.records])


CSV_COLUMNS = (
    ["time_s"]
    + ["x1", "y1", "psi1", "u1", "v1", "w1", "x2", "y2", "psi2", "u2", "v2", "w2"]
    + [f"u{i}" for i in range(8)]
    + [f"b_true{i}" for i in range(6)]
    + [f"b_hat{i}" for i in range(6)]
    + ["solver_status", "kkt", "solve_time_s"]
)


def write_csv(log: RunLog, fh: io.TextIOBase) -> None:
    """RunLog CSV: header row, then one row per record with floats printed
    to 12 significant digits."""
    fh.write(",".join(CSV_COLUMNS) + "\n")
    for r in log.records:
        vals = [r.time, *r.q, *r.u, *r.b_true, *r.b_hat]
        row = ",".join(f"{v:.12g}" for v in vals)
        fh.write(f"{row},{r.status},{r.kkt:.12g},{r.solve_time:.12g}\n")


def read_csv(fh: io.TextIOBase) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Parse a RunLog CSV back into (numeric matrix, header, status column).

    The numeric matrix holds every column except solver_status.
    """
    header = fh.readline().strip().split(",")
    if header != CSV_COLUMNS:
        raise ValueError("unexpected RunLog CSV header")
    status_col = CSV_COLUMNS.index("solver_status")
    rows, statuses = [], []
    for line in fh:
        parts = line.strip().split(",")
        if not line.strip():
            continue
        statuses.append(parts[status_col])
        rows.append(
            [float(v) for v in parts[:status_col] + parts[status_col + 1 :]]
        )
    return np.array(rows), np.array(header), statuses


@dataclass(frozen=True)
class Metrics:
    """Evaluation metrics of one run (docking_time is None when the run
    never settles inside the tolerance set)."""

    J_tilde: float
    delta_J_rel: float | None
    docking_time: float | None
    l1: float
    l2: float

    def to_dict(self, scenario: str = "", mode: str = "") -> dict:
        return {
            "scenario": scenario,
            "mode": mode,
            "J_tilde": self.J_tilde,
            "delta_J_rel": self.delta_J_rel,
            "docking_time_s": self.docking_time,
            "l1_m": self.l1,
            "l2_m": self.l2,
        }


def metrics_json(metrics: Metrics, scenario: str, mode: str) -> str:
    return json.dumps(metrics.to_dict(scenario, mode), indent=2) + "\n"


def _measure(state: VesselState, noise: SensorNoise | None, rng) -> Measurement:
    q = state.q.copy()
    if noise is not None:
        q += rng.normal(size=6) * noise.stds(MeasurementKind.FULL)
        q[2] = wrap_angle(q[2])
    return Measurement(q, MeasurementKind.FULL)


def _plant_step(
    params: VesselParams,
    state: VesselState,
    tau,
    bias: BiasForce,
    scenario: Scenario,
    dt: float,
) -> VesselState:
    n = max(1, scenario.plant_substeps)
    for _ in range(n):
        state = euler_step(params, state, tau, bias, scenario.plant_fidelity, dt / n)
    return state


def run_closed_loop(
    scenario: Scenario,
    cfg: MpcConfig,
    params1: VesselParams = USV1,
    params2: VesselParams = USV2,
    observer_kwargs: dict | None = None,
    progress=None,
) -> RunLog:
    """Simulate the scenario for its configured number of steps.

    Per step: measure the plant, update the per-vessel EKFs, solve the NMPC
    from the estimated joint state with the estimated bias pair (zeros in
    the no-bias ablation), apply the first input through the thruster
    allocation, and advance the plant with the true bias.  If a solve fails
    the shifted previous input is applied and the failure is logged.
    """
    q_ref = scenario.effective_reference(cfg.d_min)
    verdict = validate_reference(q_ref, cfg.d_min)
    if not verdict:
        raise ValueError("; ".join(verdict.violations))

    rng = np.random.default_rng(scenario.seed)
    b1, b2 = current_to_bias(
        scenario.current_speed, scenario.current_heading, scenario.drag
    )
    b_true = np.concatenate([b1.f, b2.f])
    plant1 = VesselState.from_q(scenario.q_init[:6])
    plant2 = VesselState.from_q(scenario.q_init[6:])

    obs_kwargs = observer_kwargs or {}
    obs1 = obs2 = None
    u_prev = np.zeros(8)
    warm = None
    prev_sol: MpcSolution | None = None
    log = RunLog(scenario=scenario, q_ref=q_ref, dt=cfg.dt)

    use_bias = scenario.mode is not ControllerMode.COOPERATIVE_NO_BIAS
    zero_pair = (BiasForce.zero(), BiasForce.zero())

    for k in range(scenario.steps):
        meas1 = _measure(plant1, scenario.noise, rng)
        meas2 = _measure(plant2, scenario.noise, rng)
        if k == 0:
            obs1 = make_observer(meas1, **obs_kwargs)
            obs2 = make_observer(meas2, **obs_kwargs)
        else:
            jc = JointControl.from_vector(u_prev)
            obs1 = ekf_predict(obs1, jc.usv1, params1, cfg.dt)
            obs2 = ekf_predict(obs2, jc.usv2, params2, cfg.dt)
        obs1 = ekf_update(obs1, meas1)
        obs2 = ekf_update(obs2, meas2)
        b_hat_pair = (bias_estimate(obs1), bias_estimate(obs2))
        b_hat = np.concatenate([b_hat_pair[0].f, b_hat_pair[1].f])

        q_k = np.concatenate([obs1.x_hat[:6], obs2.x_hat[:6]])
        controller_bias = b_hat_pair if use_bias else zero_pair
        status, kkt, solve_time, iterations = "Fallback", math.nan, 0.0, 0
        try:
            nlp = build_problem(
                cfg, q_k, u_prev, controller_bias, q_ref, params1, params2
            )
            sol = solve(nlp, warm)
            status, kkt = sol.status, sol.kkt_residual
            solve_time, iterations = sol.solve_time, sol.iterations
        except Exception as exc:  # unrecoverable numeric failure
            log.error = f"step {k}: {exc}"
            break
        if sol.status == "Infeasible" and prev_sol is not None:
            u_star = prev_sol.u_seq[min(1, len(prev_sol.u_seq) - 1)].copy()
        else:
            u_star = sol.u_seq[0].copy()
            warm = shift_warm_start(sol)
            prev_sol = sol

        track = tracking_cost(
            np.concatenate([plant1.q, plant2.q]), q_ref, cfg.Q1, cfg.Q2
        )
        ctrl = control_cost(u_star, cfg.Qu)
        log.records.append(
            StepRecord(
                time=k * cfg.dt,
                q=np.concatenate([plant1.q, plant2.q]),
                u=u_star,
                b_true=b_true.copy(),
                b_hat=b_hat,
                status=status,
                kkt=kkt,
                solve_time=solve_time,
                iterations=iterations,
                tracking=track,
                control=ctrl,
            )
        )
        if progress is not None:
            progress(k, scenario.steps, status, solve_time)

        tau1, tau2 = joint_allocate(
            JointControl.from_vector(u_star), params1, params2
        )
        plant1 = _plant_step(params1, plant1, tau1, b1, scenario, cfg.dt)
        plant2 = _plant_step(params2, plant2, tau2, b2, scenario, cfg.dt)
        u_prev = u_star

    # Terminal record: final state with the last applied input.
    if log.records:
        last = log.records[-1]
        q_final = np.concatenate([plant1.q, plant2.q])
        log.records.append(
            StepRecord(
                time=len(log.records) * cfg.dt,
                q=q_final,
                u=last.u.copy(),
                b_true=b_true.copy(),
                b_hat=last.b_hat.copy(),
                status=last.status,
                kkt=last.kkt,
                solve_time=last.solve_time,
                iterations=last.iterations,
                tracking=tracking_cost(q_final, q_ref, cfg.Q1, cfg.Q2),
                control=control_cost(last.u, cfg.Qu),
            )
        )
    return log


def realized_cost(log: RunLog, q_ref: ReferencePose, Q1, Q2, Qu) -> float:
    """Accumulated tracking + control cost over the whole run (the final
    record reuses the last applied input)."""
    total = 0.0
    for r in log.records:
        total += tracking_cost(r.q, q_ref, Q1, Q2) + control_cost(r.u, Qu)
    return total


def relative_gain(J_baseline: float, J_controller: float) -> float:
    """(J_baseline - J_controller) / J_baseline."""
    if not J_baseline > 0.0:
        raise ValueError("baseline cost must be positive")
    return (J_baseline - J_controller) / J_baseline


def _within_tolerance(q, q_ref: ReferencePose, pos_tol: float, head_tol: float):
    d1 = math.hypot(q[0] - q_ref.values[0], q[1] - q_ref.values[1])
    d2 = math.hypot(q[6] - q_ref.values[3], q[7] - q_ref.values[4])
    h1 = abs(wrap_angle(q[2] - q_ref.values[2]))
    h2 = abs(wrap_angle(q[8] - q_ref.values[5]))
    return d1 < pos_tol and d2 < pos_tol and h1 < head_tol and h2 < head_tol


def docking_time(
    log: RunLog,
    q_ref: ReferencePose,
    pos_tol: float = 0.5,
    head_tol: float = math.radians(10.0),
) -> float | None:
    """Earliest time after which both vessels stay within the position and
    heading tolerances of their references until the end of the run."""
    if pos_tol <= 0.0 or head_tol <= 0.0:
        raise ValueError("tolerances must be positive")
    ok = [
        _within_tolerance(r.q, q_ref, pos_tol, head_tol) for r in log.records
    ]
    if not ok or not ok[-1]:
        return None
    k = len(ok)
    while k > 0 and ok[k - 1]:
        k -= 1
    return k * log.dt


def path_length(log: RunLog) -> tuple[float, float]:
    """Total planar distance traveled by each vessel."""
    q = log.states
    if len(q) < 2:
        return 0.0, 0.0
    d1 = np.hypot(np.diff(q[:, 0]), np.diff(q[:, 1])).sum()
    d2 = np.hypot(np.diff(q[:, 6]), np.diff(q[:, 7])).sum()
    return float(d1), float(d2)


def min_separation(log: RunLog) -> float:
    """Smallest inter-vessel center distance over the run."""
    q = log.states
    return float(np.hypot(q[:, 0] - q[:, 6], q[:, 1] - q[:, 7]).min())


def evaluate(
    log: RunLog,
    cfg: MpcConfig,
    J_baseline: float | None = None,
    pos_tol: float = 0.5,
    head_tol: float = math.radians(10.0),
) -> Metrics:
    """Compute the metrics of one run, optionally relative to a baseline."""
    J = realized_cost(log, log.q_ref, cfg.Q1, cfg.Q2, cfg.Qu)
    gain = relative_gain(J_baseline, J) if J_baseline is not None else None
    l1, l2 = path_length(log)
    return Metrics(
        J_tilde=J,
        delta_J_rel=gain,
        docking_time=docking_time(log, log.q_ref, pos_tol, head_tol),
        l1=l1,
        l2=l2,
    )
