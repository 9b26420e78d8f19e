import math

import numpy as np
import pytest

from coopdock.dynamics import (
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
    simulate,
    wrap_angle,
)

REST = VesselState(eta=np.zeros(3), nu=np.zeros(3))
ZERO_BIAS = BiasForce.zero()
LINEAR = PlantFidelity.LINEAR_LOW_SPEED


class TestRotationMatrix:
    def test_identity_at_zero(self):
        np.testing.assert_allclose(rotation_matrix(0.0), np.eye(3))

    def test_half_turn(self):
        np.testing.assert_allclose(
            rotation_matrix(math.pi), np.diag([-1.0, -1.0, 1.0]), atol=1e-15
        )

    def test_composition(self):
        a, b = 0.3, 0.4
        np.testing.assert_allclose(
            rotation_matrix(a) @ rotation_matrix(b),
            rotation_matrix(a + b),
            atol=1e-14,
        )

    def test_orthogonal_unit_determinant(self):
        rng = np.random.default_rng(0)
        for psi in rng.uniform(-50.0, 50.0, size=1000):
            R = rotation_matrix(psi)
            np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
            assert abs(np.linalg.det(R) - 1.0) < 1e-12

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            rotation_matrix(math.nan)


class TestWrapAngle:
    def test_zero(self):
        assert wrap_angle(0.0) == 0.0

    def test_three_pi(self):
        assert wrap_angle(3 * math.pi) == pytest.approx(math.pi)

    def test_minus_pi_maps_to_pi(self):
        assert wrap_angle(-math.pi) == pytest.approx(math.pi)

    def test_congruence(self):
        rng = np.random.default_rng(1)
        for theta in rng.uniform(-40.0, 40.0, size=200):
            w = wrap_angle(theta)
            assert -math.pi < w <= math.pi
            assert math.isclose(
                math.remainder(w - theta, 2 * math.pi), 0.0, abs_tol=1e-9
            )

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            wrap_angle(math.inf)


class TestBodyBias:
    def test_aligned_heading(self):
        np.testing.assert_allclose(
            body_bias(BiasForce([100.0, 0.0, 0.0]), 0.0), [100.0, 0.0, 0.0]
        )

    def test_quarter_turn(self):
        np.testing.assert_allclose(
            body_bias(BiasForce([100.0, 0.0, 0.0]), math.pi / 2),
            [0.0, -100.0, 0.0],
            atol=1e-12,
        )

    def test_yaw_component_invariant(self):
        for psi in (0.0, 0.7, -2.0, 3.0):
            assert body_bias(BiasForce([0.0, 0.0, 5.0]), psi)[2] == pytest.approx(5.0)


class TestCoriolis:
    def test_zero_at_rest(self):
        np.testing.assert_allclose(coriolis_matrix(USV1, np.zeros(3)), np.zeros((3, 3)))

    def test_workless(self):
        nu = np.array([1.0, 0.5, 0.2])
        C = coriolis_matrix(USV1, nu)
        assert abs(nu @ C @ nu) < 1e-12

    def test_workless_random(self):
        # Tolerance relative to the term magnitude (entries of C are O(1e3)).
        rng = np.random.default_rng(2)
        for _ in range(100):
            nu = rng.normal(size=3)
            C = coriolis_matrix(USV2, nu)
            scale = max(1.0, np.abs(C).max() * (nu @ nu))
            assert abs(nu @ C @ nu) < 1e-12 * scale
            np.testing.assert_array_equal(C, -C.T)

    def test_linear_scaling(self):
        nu = np.array([1.0, 0.0, 0.0])
        np.testing.assert_allclose(
            coriolis_matrix(USV1, 2 * nu), 2 * coriolis_matrix(USV1, nu)
        )


class TestContinuousDynamics:
    def test_equilibrium(self):
        dq = continuous_dynamics(USV1, REST, np.zeros(3), ZERO_BIAS, LINEAR)
        np.testing.assert_allclose(dq, np.zeros(6))

    def test_surge_acceleration_matches_inertia(self):
        # M11 = 1426 kg, so 1426 N of surge force accelerates at 1 m/s^2.
        dq = continuous_dynamics(USV1, REST, [1426.0, 0.0, 0.0], ZERO_BIAS, LINEAR)
        np.testing.assert_allclose(dq, [0, 0, 0, 1.0, 0, 0], atol=1e-12)

    def test_steady_surge_force_balance(self):
        # D_L,11 = 343 N s/m: at 1 m/s surge the damping exactly cancels tau.
        state = VesselState(eta=np.zeros(3), nu=[1.0, 0.0, 0.0])
        dq = continuous_dynamics(USV1, state, [343.0, 0.0, 0.0], ZERO_BIAS, LINEAR)
        np.testing.assert_allclose(dq[3:], np.zeros(3), atol=1e-12)
        np.testing.assert_allclose(dq[:3], [1.0, 0.0, 0.0], atol=1e-12)

    def test_equilibrium_iff_zero_velocity_and_balanced_force(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            bias = BiasForce(rng.normal(scale=100.0, size=3))
            psi = rng.uniform(-math.pi, math.pi)
            state = VesselState(eta=[0.0, 0.0, psi], nu=np.zeros(3))
            tau = -body_bias(bias, psi)
            dq = continuous_dynamics(USV1, state, tau, bias, LINEAR)
            np.testing.assert_allclose(dq, np.zeros(6), atol=1e-9)
            # Unbalanced force at rest must accelerate.
            dq = continuous_dynamics(USV1, state, tau + [1.0, 0, 0], bias, LINEAR)
            assert np.linalg.norm(dq[3:]) > 1e-5


class TestEulerStep:
    def test_rest_fixed_point(self):
        out = euler_step(USV1, REST, np.zeros(3), ZERO_BIAS, LINEAR, dt=0.5)
        np.testing.assert_allclose(out.q, REST.q)

    def test_single_step_from_rest(self):
        out = euler_step(USV1, REST, [1426.0, 0.0, 0.0], ZERO_BIAS, LINEAR, dt=0.5)
        np.testing.assert_allclose(out.nu, [0.5, 0.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(out.eta, np.zeros(3), atol=1e-12)

    def test_rejects_bad_dt(self):
        with pytest.raises(ValueError):
            euler_step(USV1, REST, np.zeros(3), ZERO_BIAS, LINEAR, dt=0.0)

    def test_first_order_convergence(self):
        # Richardson check: halving dt roughly halves the endpoint error
        # relative to a fine reference integration (dt = 0.001).
        tau = [200.0, 50.0, 30.0]
        bias = BiasForce([40.0, -20.0, 5.0])
        start = VesselState(eta=[0.0, 0.0, 0.3], nu=[0.2, 0.0, 0.05])

        def endpoint(dt):
            steps = round(10.0 / dt)
            return simulate(USV1, start, tau, bias, LINEAR, dt, steps).q

        ref = endpoint(0.001)
        err_coarse = np.linalg.norm(endpoint(0.2) - ref)
        err_fine = np.linalg.norm(endpoint(0.1) - ref)
        assert err_coarse / err_fine == pytest.approx(2.0, rel=0.15)

    def test_steady_state_velocity(self):
        # nu_ss = D_L^-1 tau after a long constant-force run.
        tau = np.array([343.0, 100.0, 250.0])
        nu_ss = np.linalg.solve(USV1.D_L, tau)
        final = simulate(USV1, REST, tau, ZERO_BIAS, LINEAR, dt=0.01, steps=10_000)
        np.testing.assert_allclose(final.nu, nu_ss, rtol=1e-6)

    def test_bias_frame_invariance(self):
        # Rotating the initial heading and the inertial bias together only
        # rotates the resulting path.
        phi = 0.9
        bias = BiasForce([60.0, -30.0, 0.0])
        Rphi = rotation_matrix(phi)
        bias_rot = BiasForce(Rphi @ bias.f)
        a = VesselState(eta=[0.0, 0.0, 0.4], nu=[0.3, 0.1, 0.0])
        b = VesselState(eta=[0.0, 0.0, 0.4 + phi], nu=[0.3, 0.1, 0.0])
        tau = [120.0, 15.0, 8.0]
        qa = simulate(USV2, a, tau, bias, LINEAR, 0.1, 200)
        qb = simulate(USV2, b, tau, bias_rot, LINEAR, 0.1, 200)
        np.testing.assert_allclose(qb.eta[:2], Rphi[:2, :2] @ qa.eta[:2], atol=1e-9)
        assert wrap_angle(qb.eta[2] - qa.eta[2] - phi) == pytest.approx(0.0, abs=1e-9)
        np.testing.assert_allclose(qb.nu, qa.nu, atol=1e-9)

    def test_coriolis_changes_turning_response(self):
        state = VesselState(eta=np.zeros(3), nu=[1.5, 0.0, 0.3])
        lin = euler_step(USV1, state, np.zeros(3), ZERO_BIAS, LINEAR, 0.5)
        cor = euler_step(
            USV1, state, np.zeros(3), ZERO_BIAS, PlantFidelity.WITH_CORIOLIS, 0.5
        )
        assert not np.allclose(lin.nu, cor.nu)


class TestVesselParamsValidation:
    def test_table_values_load(self):
        assert USV1.M[0, 0] == 1426.0
        assert USV2.D_L[0, 0] == 704.0
        assert USV1.alpha == pytest.approx(math.radians(15.0))

    def test_rejects_asymmetric_inertia(self):
        M = np.array([[100.0, 5.0, 0.0], [0.0, 100.0, 0.0], [0.0, 0.0, 100.0]])
        with pytest.raises(ValueError):
            VesselParams(M=M, D_L=np.eye(3), d=1.0, w=1.0, alpha=None, v_max=1.0)

    def test_rejects_indefinite_damping(self):
        with pytest.raises(ValueError):
            VesselParams(
                M=np.eye(3), D_L=-np.eye(3), d=1.0, w=1.0, alpha=None, v_max=1.0
            )

    def test_rejects_nonpositive_geometry(self):
        with pytest.raises(ValueError):
            VesselParams(M=np.eye(3), D_L=np.eye(3), d=0.0, w=1.0, alpha=None, v_max=1.0)


class TestVesselState:
    def test_wraps_heading_on_construction(self):
        s = VesselState(eta=[0.0, 0.0, 3 * math.pi], nu=np.zeros(3))
        assert s.eta[2] == pytest.approx(math.pi)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            VesselState(eta=[0.0, math.nan, 0.0], nu=np.zeros(3))

    def test_q_roundtrip(self):
        s = VesselState(eta=[1.0, 2.0, 0.5], nu=[0.1, 0.2, 0.3])
        np.testing.assert_allclose(VesselState.from_q(s.q).q, s.q)
