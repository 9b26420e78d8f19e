"""QP solver tests.

Small problems are checked against a brute-force active-set enumeration
oracle (exhaustive over subsets of inequality constraints), larger random
problems against direct verification of the KKT conditions.
"""

import itertools

import numpy as np
import pytest
import scipy.sparse as sp

from coopdock.qp import solve_qp


def brute_force_qp(P, q, A, b, G, h):
    """Enumerate active sets of 'G x <= h'; return the best KKT point.

    Exponential in the number of inequalities: test-sized problems only.
    """
    n = q.shape[0]
    m_eq = 0 if A is None else A.shape[0]
    m_in = h.shape[0]
    best_x, best_obj = None, np.inf
    for r in range(m_in + 1):
        for act in itertools.combinations(range(m_in), r):
            act = list(act)
            C = G[act]
            k = m_eq + len(act)
            KKT = np.zeros((n + k, n + k))
            KKT[:n, :n] = P
            rhs = np.concatenate(
                [-q, b if m_eq else np.zeros(0), h[act]]
            )
            rows = []
            if m_eq:
                rows.append(A)
            if act:
                rows.append(C)
            if rows:
                E = np.vstack(rows)
                KKT[:n, n:] = E.T
                KKT[n:, :n] = E
            try:
                sol = np.linalg.solve(KKT, rhs)
            except np.linalg.LinAlgError:
                continue
            x = sol[:n]
            lam = sol[n + m_eq:]
            if np.any(G @ x - h > 1e-9):
                continue
            if np.any(lam < -1e-9):
                continue
            obj = 0.5 * x @ P @ x + q @ x
            if obj < best_obj - 1e-12:
                best_obj, best_x = obj, x
    return best_x, best_obj


def as_sparse(M):
    return sp.csc_matrix(np.atleast_2d(M))


class TestKnownSolutions:
    def test_inactive_constraints_give_unconstrained_minimum(self):
        c = np.array([1.0, -2.0, 0.5])
        res = solve_qp(
            sp.identity(3, format="csc"),
            -c,
            None,
            None,
            as_sparse(np.eye(3)),
            np.full(3, 10.0),
        )
        assert res.status == "optimal"
        np.testing.assert_allclose(res.x, c, atol=1e-7)

    def test_box_projection(self):
        c = np.array([2.0, -0.3, -5.0, 0.9])
        G = np.vstack([np.eye(4), -np.eye(4)])
        h = np.ones(8)
        res = solve_qp(sp.identity(4, format="csc"), -c, None, None, as_sparse(G), h)
        assert res.status == "optimal"
        np.testing.assert_allclose(res.x, np.clip(c, -1.0, 1.0), atol=1e-7)

    def test_equality_constrained_mean(self):
        n = 5
        A = as_sparse(np.ones((1, n)))
        res = solve_qp(
            sp.identity(n, format="csc"),
            np.zeros(n),
            A,
            np.array([1.0]),
            as_sparse(np.eye(n)),
            np.full(n, 10.0),
        )
        assert res.status == "optimal"
        np.testing.assert_allclose(res.x, np.full(n, 1.0 / n), atol=1e-8)

    def test_active_constraint_multiplier(self):
        # min 1/2 x^2 - 3x s.t. x <= 0: optimum x = 0 with multiplier 3.
        res = solve_qp(
            sp.identity(1, format="csc"),
            np.array([-3.0]),
            None,
            None,
            as_sparse([[1.0]]),
            np.array([0.0]),
        )
        assert res.status == "optimal"
        assert res.x[0] == pytest.approx(0.0, abs=1e-7)
        assert res.z[0] == pytest.approx(3.0, abs=1e-6)


class TestAgainstBruteForce:
    @pytest.mark.parametrize("seed", range(12))
    def test_random_small_qp(self, seed):
        rng = np.random.default_rng(seed)
        n, m_in = 3, 5
        L = rng.normal(size=(n, n))
        P = L @ L.T + 0.5 * np.eye(n)
        q = rng.normal(size=n)
        G = rng.normal(size=(m_in, n))
        h = rng.uniform(0.2, 1.5, size=m_in)
        x_star, obj_star = brute_force_qp(P, q, None, None, G, h)
        assert x_star is not None
        res = solve_qp(as_sparse(P), q, None, None, as_sparse(G), h)
        assert res.status == "optimal"
        obj = 0.5 * res.x @ P @ res.x + q @ res.x
        assert obj == pytest.approx(obj_star, abs=1e-6)
        np.testing.assert_allclose(res.x, x_star, atol=1e-5)

    @pytest.mark.parametrize("seed", range(6))
    def test_random_small_qp_with_equalities(self, seed):
        rng = np.random.default_rng(100 + seed)
        n, m_eq, m_in = 4, 1, 4
        L = rng.normal(size=(n, n))
        P = L @ L.T + 0.5 * np.eye(n)
        q = rng.normal(size=n)
        A = rng.normal(size=(m_eq, n))
        b = rng.normal(size=m_eq)
        G = rng.normal(size=(m_in, n))
        # Make the equality-feasible point strictly feasible for some margin.
        x_feas = np.linalg.lstsq(A, b, rcond=None)[0]
        h = G @ x_feas + rng.uniform(0.2, 1.0, size=m_in)
        x_star, obj_star = brute_force_qp(P, q, A, b, G, h)
        assert x_star is not None
        res = solve_qp(as_sparse(P), q, as_sparse(A), b, as_sparse(G), h)
        assert res.status == "optimal"
        obj = 0.5 * res.x @ P @ res.x + q @ res.x
        assert obj == pytest.approx(obj_star, abs=1e-6)


class TestKktCertificates:
    @pytest.mark.parametrize("seed", range(5))
    def test_medium_random_qp_satisfies_kkt(self, seed):
        rng = np.random.default_rng(200 + seed)
        n, m_eq, m_in = 60, 12, 90
        P = sp.diags(rng.uniform(0.5, 3.0, size=n), format="csc")
        q = rng.normal(size=n)
        A = sp.csc_matrix(rng.normal(size=(m_eq, n)))
        b = rng.normal(size=m_eq)
        G = sp.csc_matrix(rng.normal(size=(m_in, n)) * (rng.random((m_in, n)) < 0.3))
        h = rng.uniform(0.1, 2.0, size=m_in)
        res = solve_qp(P, q, A, b, G, h)
        assert res.status == "optimal"
        x, y, z = res.x, res.y, res.z
        stat = P @ x + q + A.T @ y + G.T @ z
        slack = h - G @ x
        assert np.abs(stat).max() < 1e-6 * max(1.0, np.abs(q).max())
        assert np.abs(A @ x - b).max() < 1e-7
        assert slack.min() > -1e-7
        assert np.all(z > -1e-9)
        assert np.abs(z * slack).max() < 1e-6

    def test_semidefinite_objective_with_regularizing_constraints(self):
        # Flat direction in P handled by the interior-point regularization.
        P = sp.diags([1.0, 0.0], format="csc")
        q = np.array([0.0, 1.0])
        G = as_sparse(np.vstack([np.eye(2), -np.eye(2)]))
        h = np.ones(4)
        res = solve_qp(P, q, None, None, G, h)
        assert res.status == "optimal"
        np.testing.assert_allclose(res.x, [0.0, -1.0], atol=1e-6)
