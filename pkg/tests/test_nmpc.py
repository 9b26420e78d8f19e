import math

import numpy as np
import pytest

from coopdock.dynamics import USV1, USV2, BiasForce, rotation_matrix, wrap_angle
from coopdock.nmpc import (
    InvalidReferenceError,
    MpcConfig,
    ReferencePose,
    build_problem,
    constraint_residuals,
    control_cost,
    shift_warm_start,
    solve,
    tracking_cost,
)

ZERO_BIAS = (BiasForce.zero(), BiasForce.zero())
CFG10 = MpcConfig(N=10)


def docking_reference(center=(0.0, 0.5), heading=math.pi, d_min=1.8):
    return ReferencePose.docking(np.asarray(center, float), heading, d_min)


def equilibrium_state(ref: ReferencePose) -> np.ndarray:
    q = np.zeros(12)
    q[:3] = ref.pose1
    q[6:9] = ref.pose2
    return q


REF10 = docking_reference()
Q_EQ = equilibrium_state(REF10)


class TestCosts:
    def test_zero_at_reference(self):
        assert tracking_cost(Q_EQ, REF10, CFG10.Q1, CFG10.Q2) == 0.0

    def test_unit_offset(self):
        q = Q_EQ.copy()
        q[0] += 1.0
        assert tracking_cost(q, REF10, CFG10.Q1, CFG10.Q2) == pytest.approx(1000.0)

    def test_heading_error_wraps(self):
        ref = ReferencePose(np.array([0.0, 0.0, -math.pi + 0.1, 5.0, 0.0, 0.1]))
        q = np.zeros(12)
        q[2] = math.pi - 0.1
        q[6:9] = ref.pose2
        # wrapped difference is 0.2 rad, not 2*pi - 0.2
        assert tracking_cost(q, ref, CFG10.Q1, CFG10.Q2) == pytest.approx(
            0.2**2 * 1000.0
        )

    def test_control_cost_zero(self):
        assert control_cost(np.zeros(8), CFG10.Qu) == 0.0

    def test_control_cost_first_entry(self):
        u = np.zeros(8)
        u[0] = 10.0
        assert control_cost(u, CFG10.Qu) == pytest.approx(1.0)

    def test_control_cost_even(self):
        rng = np.random.default_rng(30)
        for _ in range(20):
            u = rng.normal(scale=50.0, size=8)
            assert control_cost(-u, CFG10.Qu) == pytest.approx(control_cost(u, CFG10.Qu))


class TestProblemConstruction:
    def test_decision_variable_count_n50(self):
        cfg = MpcConfig(N=50)
        ref = docking_reference()
        nlp = build_problem(cfg, Q_EQ, np.zeros(8), ZERO_BIAS, ref)
        # 12 states per node over N+1 nodes plus 8 inputs over N nodes.
        assert nlp.n_q + nlp.n_u == 12 * 51 + 8 * 50 == 1012

    def test_collision_constraint_count(self):
        cfg = MpcConfig(N=50)
        nlp = build_problem(cfg, Q_EQ, np.zeros(8), ZERO_BIAS, docking_reference())
        assert nlp.m_col == 51

    def test_rate_bound_value(self):
        cfg = MpcConfig(N=50)
        assert cfg.dF_max[0] * cfg.dt == pytest.approx(250.0)

    def test_rejects_invalid_reference_distance(self):
        bad = ReferencePose(np.array([0.0, 0.0, 0.0, 1.0, 0.0, -math.pi]))
        with pytest.raises(InvalidReferenceError):
            build_problem(CFG10, Q_EQ, np.zeros(8), ZERO_BIAS, bad)

    def test_rejects_invalid_reference_heading(self):
        bad = ReferencePose(np.array([0.0, 0.0, 0.0, 5.0, 0.0, 0.0]))
        with pytest.raises(InvalidReferenceError):
            build_problem(CFG10, Q_EQ, np.zeros(8), ZERO_BIAS, bad)

    def test_rejects_out_of_bounds_u_prev(self):
        u = np.zeros(8)
        u[0] = 2000.0
        with pytest.raises(ValueError):
            build_problem(CFG10, Q_EQ, u, ZERO_BIAS, REF10)

    def test_rejects_small_horizon(self):
        with pytest.raises(ValueError):
            MpcConfig(N=1)


def random_feasible_point(nlp, rng):
    """Inputs inside box and rate bounds, states rolled through the
    dynamics, nonnegative slacks: feasible for every constraint family as
    long as the vessels stay apart."""
    cfg = nlp.cfg
    U = np.empty((nlp.N, 8))
    u = nlp.u_prev.copy()
    for h in range(nlp.N):
        lo = np.maximum(cfg.F_min, u + cfg.dF_min * cfg.dt)
        hi = np.minimum(cfg.F_max, u + cfg.dF_max * cfg.dt)
        u = rng.uniform(0.2, 0.8, size=8) * (hi - lo) + lo
        U[h] = u
    Q = nlp.roll_out(nlp.q_k, U)
    S = rng.uniform(0.0, 0.01, size=nlp.N + 1)
    return nlp.to_scaled(nlp.pack(Q, U, S))


class TestDerivatives:
    def test_objective_and_constraint_derivatives_match_fd(self):
        # 20 random feasible points of the N = 10 problem; central
        # differences vs the analytic derivatives.
        rng = np.random.default_rng(31)
        q0 = Q_EQ.copy()
        q0[0] -= 6.0
        q0[7] += 5.0
        nlp = build_problem(CFG10, q0, np.zeros(8), ZERO_BIAS, REF10)
        h = 1e-6
        for _ in range(20):
            z = random_feasible_point(nlp, rng)
            g = nlp.eval_objective_grad(z)
            Je = nlp.eval_eq_jac(z)
            Ji = nlp.eval_ineq_jac(z)
            v = rng.normal(size=nlp.n)
            v /= np.linalg.norm(v)
            fd_obj = (nlp.eval_objective(z + h * v) - nlp.eval_objective(z - h * v)) / (
                2 * h
            )
            err = abs(fd_obj - g @ v) / max(1.0, abs(g @ v))
            assert err < 1e-5
            fd_eq = (nlp.eval_eq(z + h * v) - nlp.eval_eq(z - h * v)) / (2 * h)
            assert np.abs(Je @ v - fd_eq).max() / max(1.0, np.abs(fd_eq).max()) < 1e-5
            fd_in = (nlp.eval_ineq(z + h * v) - nlp.eval_ineq(z - h * v)) / (2 * h)
            assert np.abs(Ji @ v - fd_in).max() / max(1.0, np.abs(fd_in).max()) < 1e-5


class TestSolve:
    def test_reference_equilibrium(self):
        sol = solve(build_problem(CFG10, Q_EQ, np.zeros(8), ZERO_BIAS, REF10))
        assert sol.status == "Optimal"
        assert np.abs(sol.u_seq).max() < 1e-4
        assert sol.cost <= 1e-6

    def test_optimal_solutions_satisfy_constraints(self):
        rng = np.random.default_rng(32)
        for trial in range(5):
            q0 = Q_EQ.copy()
            q0[0] += rng.uniform(-2.0, 0.0)
            q0[7] += rng.uniform(0.0, 2.0)
            q0[2] = wrap_angle(q0[2] + rng.uniform(-0.3, 0.3))
            nlp = build_problem(CFG10, q0, np.zeros(8), ZERO_BIAS, REF10)
            sol = solve(nlp)
            assert sol.status == "Optimal"
            report = constraint_residuals(sol, CFG10, q0, np.zeros(8), ZERO_BIAS)
            assert report.max_violation() <= 1e-6

    def test_station_keeping_force_balance(self):
        # Closed loop against a known bias: at the plant equilibrium the
        # applied force balances the body-frame bias.
        from coopdock.allocation import JointControl, joint_allocate
        from coopdock.dynamics import PlantFidelity, VesselState, euler_step

        bias1 = BiasForce([100.0 * math.cos(math.pi), 100.0 * math.sin(math.pi), 0.0])
        b_pair = (bias1, BiasForce.zero())
        s1 = VesselState.from_q(Q_EQ[:6])
        s2 = VesselState.from_q(Q_EQ[6:])
        u_prev = np.zeros(8)
        warm = None
        for _ in range(40):
            q_k = np.concatenate([s1.q, s2.q])
            sol = solve(build_problem(CFG10, q_k, u_prev, b_pair, REF10), warm)
            u_prev = sol.u_seq[0]
            warm = shift_warm_start(sol)
            tau1, tau2 = joint_allocate(JointControl.from_vector(u_prev), USV1, USV2)
            s1 = euler_step(USV1, s1, tau1, bias1, PlantFidelity.LINEAR_LOW_SPEED, CFG10.dt)
            s2 = euler_step(
                USV2, s2, tau2, BiasForce.zero(), PlantFidelity.LINEAR_LOW_SPEED, CFG10.dt
            )
        tau1, _ = joint_allocate(JointControl.from_vector(u_prev), USV1, USV2)
        target = -(rotation_matrix(s1.eta[2]).T @ bias1.f)
        assert np.linalg.norm(tau1 - target) / np.linalg.norm(target) < 0.01

    def test_objective_gradient_fd_at_feasible_point(self):
        rng = np.random.default_rng(33)
        nlp = build_problem(CFG10, Q_EQ, np.zeros(8), ZERO_BIAS, REF10)
        z = random_feasible_point(nlp, rng)
        g = nlp.eval_objective_grad(z)
        h = 1e-6
        for _ in range(5):
            v = rng.normal(size=nlp.n)
            v /= np.linalg.norm(v)
            fd = (nlp.eval_objective(z + h * v) - nlp.eval_objective(z - h * v)) / (2 * h)
            assert abs(fd - g @ v) / max(1.0, abs(g @ v)) < 1e-5


class TestWarmStart:
    def test_constant_sequence_shifts_to_itself(self):
        sol = solve(build_problem(CFG10, Q_EQ, np.zeros(8), ZERO_BIAS, REF10))
        ws = shift_warm_start(sol)
        np.testing.assert_allclose(ws.u_traj, sol.u_seq, atol=1e-6)

    def test_shifted_trajectory_satisfies_dynamics(self):
        q0 = Q_EQ.copy()
        q0[0] -= 2.0
        nlp = build_problem(CFG10, q0, np.zeros(8), ZERO_BIAS, REF10)
        sol = solve(nlp)
        ws = shift_warm_start(sol)
        defects = ws.q_traj[1:] - nlp.step_batch(ws.q_traj[:-1], ws.u_traj)
        assert np.abs(defects).max() < 1e-8

    def test_warm_started_resolve_is_quick(self):
        sol = solve(build_problem(CFG10, Q_EQ, np.zeros(8), ZERO_BIAS, REF10))
        ws = shift_warm_start(sol)
        sol2 = solve(build_problem(CFG10, Q_EQ, sol.u_seq[0], ZERO_BIAS, REF10), ws)
        assert sol2.status == "Optimal"
        assert sol2.iterations <= 3


class TestResiduals:
    def test_equilibrium_residuals_tiny(self):
        sol = solve(build_problem(CFG10, Q_EQ, np.zeros(8), ZERO_BIAS, REF10))
        report = constraint_residuals(sol, CFG10, Q_EQ, np.zeros(8), ZERO_BIAS)
        assert report.max_violation() <= 1e-8

    def test_constructed_input_violation(self):
        sol = solve(build_problem(CFG10, Q_EQ, np.zeros(8), ZERO_BIAS, REF10))
        bad = sol.u_seq.copy()
        bad[3, 0] = CFG10.F_max[0] + 10.0
        from dataclasses import replace

        corrupted = replace(sol, u_seq=bad)
        report = constraint_residuals(corrupted, CFG10, Q_EQ, np.zeros(8), ZERO_BIAS)
        assert report.input_box == pytest.approx(10.0)

    def test_constructed_collision_violation(self):
        sol = solve(build_problem(CFG10, Q_EQ, np.zeros(8), ZERO_BIAS, REF10))
        q_bad = sol.q_pred.copy()
        # Move vessel 2 so the pair sits at d_min - 0.1.
        q_bad[5, 6] = q_bad[5, 0] + (CFG10.d_min - 0.1)
        q_bad[5, 7] = q_bad[5, 1]
        from dataclasses import replace

        corrupted = replace(sol, q_pred=q_bad)
        report = constraint_residuals(corrupted, CFG10, Q_EQ, np.zeros(8), ZERO_BIAS)
        assert report.collision == pytest.approx(0.1, abs=1e-9)


class TestInvariances:
    def test_translation_invariance(self):
        q0 = Q_EQ.copy()
        q0[0] -= 2.0
        q0[7] += 1.0
        sol_a = solve(build_problem(CFG10, q0, np.zeros(8), ZERO_BIAS, REF10))

        offset = np.array([13.0, -7.0])
        q_t = q0.copy()
        q_t[[0, 6]] += offset[0]
        q_t[[1, 7]] += offset[1]
        vals = REF10.values.copy()
        vals[[0, 3]] += offset[0]
        vals[[1, 4]] += offset[1]
        sol_b = solve(build_problem(CFG10, q_t, np.zeros(8), ZERO_BIAS, ReferencePose(vals)))
        assert sol_a.status == sol_b.status == "Optimal"
        np.testing.assert_allclose(sol_b.u_seq, sol_a.u_seq, atol=1e-6)
        shift = np.zeros(12)
        shift[[0, 6]] = offset[0]
        shift[[1, 7]] = offset[1]
        np.testing.assert_allclose(sol_b.q_pred, sol_a.q_pred + shift, atol=1e-5)

    def test_rotation_equivariance(self):
        phi = 0.7
        R = rotation_matrix(phi)[:2, :2]
        q0 = Q_EQ.copy()
        q0[0] -= 2.0
        q0[7] += 1.0
        bias = (BiasForce([40.0, -10.0, 0.0]), BiasForce([-20.0, 5.0, 0.0]))
        sol_a = solve(build_problem(CFG10, q0, np.zeros(8), bias, REF10))

        def rotate_state(q):
            out = q.copy()
            for o in (0, 6):
                out[o : o + 2] = R @ q[o : o + 2]
                out[o + 2] = wrap_angle(q[o + 2] + phi)
            return out

        q_r = rotate_state(q0)
        vals = REF10.values.copy()
        vals[0:2] = R @ vals[0:2]
        vals[3:5] = R @ vals[3:5]
        vals[2] = wrap_angle(vals[2] + phi)
        vals[5] = wrap_angle(vals[5] + phi)
        bias_r = (
            BiasForce(np.concatenate([R @ bias[0].f[:2], [bias[0].f[2]]])),
            BiasForce(np.concatenate([R @ bias[1].f[:2], [bias[1].f[2]]])),
        )
        sol_b = solve(build_problem(CFG10, q_r, np.zeros(8), bias_r, ReferencePose(vals)))
        assert sol_a.status == sol_b.status == "Optimal"
        assert sol_b.cost == pytest.approx(sol_a.cost, rel=1e-5, abs=1e-5)
        for h in range(0, CFG10.N + 1, 3):
            for o in (0, 6):
                np.testing.assert_allclose(
                    sol_b.q_pred[h, o : o + 2],
                    R @ sol_a.q_pred[h, o : o + 2],
                    atol=1e-4,
                )

    def test_receding_horizon_cost_stays_zero_at_equilibrium(self):
        u_prev = np.zeros(8)
        warm = None
        total = 0.0
        for _ in range(20):
            sol = solve(build_problem(CFG10, Q_EQ, u_prev, ZERO_BIAS, REF10), warm)
            u_prev = sol.u_seq[0]
            warm = shift_warm_start(sol)
            total += tracking_cost(Q_EQ, REF10, CFG10.Q1, CFG10.Q2) + control_cost(
                u_prev, CFG10.Qu
            )
        assert total <= 1e-6
