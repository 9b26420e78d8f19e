"""Sparse convex-QP solver (Mehrotra predictor-corrector interior point).

Solves problems of the form

    min  1/2 x' P x + q' x
    s.t. A x  = b
         G x <= h

with P positive semidefinite.  Each interior-point iteration factorizes the
regularized KKT system

    [ P + G' W G + dp*I   A' ] [dx]   [rhs_x]
    [ A                 -dd*I ] [dy] = [rhs_y],   W = diag(z / s),

via scipy's sparse LU; the factorization is reused for the affine
predictor, the Mehrotra corrector and up to two extra centrality
correctors.  Callers with a banded problem structure can pass `perm`, a
symmetric permutation of the KKT system, so the LU runs without a
fill-reducing analysis (the docking NLP orders its variables by horizon
node this way).

After the interior point stops, an active-set polish re-solves the KKT
equations of the apparently-active constraints, which recovers the exact
solution and machine-precision multipliers whenever the guessed active set
verifies.  All inputs are expected to be pre-scaled so absolute tolerances
are meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

_SPLU_BANDED = {"permc_spec": "NATURAL", "options": {"SymmetricMode": True}}


@dataclass
class QpResult:
    x: np.ndarray
    y: np.ndarray  # equality multipliers
    z: np.ndarray  # inequality multipliers (>= 0)
    status: str  # "optimal" | "max_iter" | "failed"
    iterations: int
    primal_residual: float
    dual_residual: float
    gap: float
    polished: bool = False


def _max_step(v: np.ndarray, dv: np.ndarray, tau: float = 0.995) -> float:
    """Largest alpha in (0, 1] keeping v + alpha*dv >= (1 - tau)*v > 0."""
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return min(1.0, float(tau * np.min(-v[neg] / dv[neg])))


class _KktSolver:
    """Factorization wrapper with the optional banded permutation."""

    def __init__(self, perm: np.ndarray | None):
        self.perm = perm
        self.iperm = np.argsort(perm) if perm is not None else None
        self.lu = None

    def factor(self, KKT: sp.csc_matrix) -> bool:
        try:
            if self.perm is not None:
                KKT = KKT[self.perm][:, self.perm].tocsc()
                self.lu = splu(KKT, **_SPLU_BANDED)
            else:
                self.lu = splu(KKT)
            return True
        except RuntimeError:
            self.lu = None
            return False

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        if self.perm is None:
            return self.lu.solve(rhs)
        return self.lu.solve(rhs[self.perm])[self.iperm]


def _active_set_solve(P, q, A, b, G, h, act, reg, max_pass=4):
    """Primal-dual active-set iteration from a guessed working set.

    Solves the equality-constrained KKT system of the working set, drops
    rows whose multiplier comes back negative and adds violated rows, until
    the KKT conditions verify.  Returns (x, y, z) or None if no clean
    working set emerged within the pass budget.
    """
    n = q.shape[0]
    m_eq = 0 if A is None else A.shape[0]
    for _ in range(max_pass):
        Ga = G[act]
        k = m_eq + act.size
        top = P + reg * sp.identity(n, format="csc")
        if k:
            rows = sp.vstack([A, Ga], format="csc") if m_eq else Ga.tocsc()
            KKT = sp.bmat(
                [[top, rows.T], [rows, -reg * sp.identity(k, format="csc")]],
                format="csc",
            )
        else:
            KKT = top
        rhs = np.concatenate([-q, b if m_eq else np.zeros(0), h[act]])
        try:
            lu = splu(KKT)
        except RuntimeError:
            return None
        sol = lu.solve(rhs)
        for _ in range(2):  # iterative refinement vs the unregularized system
            res = rhs - KKT @ sol
            res[:n] += reg * sol[:n]
            res[n:] -= reg * sol[n:]
            sol = sol + lu.solve(res)
        x_p = sol[:n]
        y_p = sol[n : n + m_eq]
        za = sol[n + m_eq :]
        neg = za < -1e-8
        slack = h - G @ x_p
        viol = np.flatnonzero(slack < -1e-9)
        if not np.any(neg) and slack.min(initial=0.0) >= -1e-7:
            z_p = np.zeros(len(h))
            z_p[act] = np.maximum(za, 0.0)
            return x_p, y_p, z_p
        new_act = np.union1d(act[~neg], viol)
        if new_act.size == act.size and np.array_equal(new_act, act):
            return None
        act = new_act
    return None


def solve_qp(
    P: sp.spmatrix,
    q: np.ndarray,
    A: sp.spmatrix | None,
    b: np.ndarray | None,
    G: sp.spmatrix,
    h: np.ndarray,
    tol: float = 1e-8,
    max_iter: int = 50,
    reg: float = 1e-9,
    perm: np.ndarray | None = None,
    polish: bool = True,
    s0: np.ndarray | None = None,
    z0: np.ndarray | None = None,
    warm_active: np.ndarray | None = None,
) -> QpResult:
    """Solve the QP; see module docstring for the problem form.

    The returned multipliers satisfy the sign convention z >= 0 for
    G x <= h.  `perm` optionally permutes the (n + m_eq) KKT system into
    banded form.  (s0, z0) warm-start the interior point.  `warm_active`
    (row indices of the guessed active set) short-circuits the interior
    point entirely when the guess verifies after a few working-set passes,
    which is the common case across receding-horizon re-solves.
    """
    n = q.shape[0]
    m_in = h.shape[0]
    m_eq = 0 if A is None else A.shape[0]
    P = sp.csc_matrix(P)
    G = sp.csc_matrix(G)
    if A is not None:
        A = sp.csc_matrix(A)

    if warm_active is not None:
        ws = _active_set_solve(P, q, A, b, G, h, np.asarray(warm_active), reg, max_pass=6)
        if ws is not None:
            x, y, z = ws
            r_dual = P @ x + q + G.T @ z + (A.T @ y if m_eq else 0.0)
            pr = max(
                float(np.abs(A @ x - b).max()) if m_eq else 0.0,
                float(np.maximum(G @ x - h, 0.0).max(initial=0.0)),
            )
            du = float(np.abs(r_dual).max())
            if du <= max(tol * (1.0 + float(np.abs(q).max())), 1e-9) and pr <= max(
                tol, 20.0 * reg
            ):
                gap = float(np.abs(z * (G @ x - h)).max(initial=0.0))
                return QpResult(x, y, z, "optimal", 0, pr, du, gap, polished=True)

    x = np.zeros(n)
    y = np.zeros(m_eq)
    if s0 is not None and z0 is not None:
        s = np.maximum(s0, 1e-4)
        z = np.maximum(z0, 1e-4)
    else:
        s = np.maximum(1.0, np.abs(G @ x - h))
        z = np.ones(m_in)

    kkt = _KktSolver(perm if m_eq else None)
    best = None
    delta = reg
    status = "max_iter"
    q_scale = 1.0 + float(np.abs(q).max())
    ptol = max(tol, 20.0 * reg)
    pr = du = mu = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        r_dual = P @ x + q + G.T @ z + (A.T @ y if m_eq else 0.0)
        r_eq = (A @ x - b) if m_eq else np.zeros(0)
        r_in = G @ x + s - h
        mu = float(s @ z) / m_in

        pr = max(
            float(np.abs(r_eq).max()) if m_eq else 0.0,
            float(np.maximum(G @ x - h, 0.0).max(initial=0.0)),
        )
        du = float(np.abs(r_dual).max())
        if best is None or max(pr, du / q_scale, mu) < max(
            best[3], best[4] / q_scale, best[5]
        ):
            best = (x.copy(), y.copy(), z.copy(), pr, du, mu)
        if pr <= ptol and du <= tol * q_scale and mu <= tol:
            status = "optimal"
            break
        if mu <= 1e-13 and pr <= 100.0 * ptol:
            # Complementarity at the double-precision floor: stop before the
            # scaling matrix z/s breaks down.
            status = "optimal" if pr <= 10.0 * ptol else "max_iter"
            break

        W = z / s
        ok = False
        while not ok:
            H = (P + G.T @ (G.multiply(W[:, None]))).tocsc()
            H = H + sp.identity(n, format="csc") * delta
            if m_eq:
                KKT = sp.bmat(
                    [[H, A.T], [A, -delta * sp.identity(m_eq, format="csc")]],
                    format="csc",
                )
            else:
                KKT = H
            ok = kkt.factor(KKT)
            if not ok:
                delta *= 2.0
                if delta > 1e-2:
                    bx, by, bz, bpr, bdu, bmu = best
                    return QpResult(bx, by, bz, "failed", it, bpr, bdu, bmu)

        def newton(r_c, rd, re, ri):
            rhs_x = -rd + G.T @ (r_c / s - W * ri)
            rhs = np.concatenate([rhs_x, -re]) if m_eq else rhs_x
            sol = kkt.solve(rhs)
            dx = sol[:n]
            dy = sol[n:] if m_eq else np.zeros(0)
            ds = -ri - G @ dx
            dz = -(r_c + z * ds) / s
            return dx, dy, ds, dz

        # Affine predictor.
        dxa, dya, dsa, dza = newton(s * z, r_dual, r_eq, r_in)
        ap = _max_step(s, dsa)
        ad = _max_step(z, dza)
        mu_aff = float((s + ap * dsa) @ (z + ad * dza)) / m_in
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0

        # Mehrotra corrector.
        r_c = s * z + dsa * dza - sigma * mu
        dx, dy, ds, dz = newton(r_c, r_dual, r_eq, r_in)
        ap = _max_step(s, ds)
        ad = _max_step(z, dz)

        # Extra centrality correctors (reuse the factorization) while the
        # step is being cut short.
        for _ in range(2):
            if min(ap, ad) >= 0.9:
                break
            se = s + min(1.0, ap + 0.1) * ds
            ze = z + min(1.0, ad + 0.1) * dz
            v = se * ze
            target = np.clip(v, 0.1 * sigma * mu, 10.0 * sigma * mu)
            dx2, dy2, ds2, dz2 = newton(
                v - target, np.zeros(n), np.zeros(m_eq), np.zeros(m_in)
            )
            ap2 = _max_step(s, ds + ds2)
            ad2 = _max_step(z, dz + dz2)
            if min(ap2, ad2) <= min(ap, ad):
                break
            dx, dy, ds, dz = dx + dx2, dy + dy2, ds + ds2, dz + dz2
            ap, ad = ap2, ad2

        x = x + ap * dx
        s = s + ap * ds
        z = z + ad * dz
        if m_eq:
            y = y + ad * dy

        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(z))):
            bx, by, bz, bpr, bdu, bmu = best
            return QpResult(bx, by, bz, "failed", it, bpr, bdu, bmu)

    if status != "optimal":
        x, y, z, pr, du, mu = best
        s = np.maximum(h - G @ x, 1e-12)
    polished = False
    if polish:
        pol = _active_set_solve(P, q, A, b, G, h, np.flatnonzero(z > s), reg)
        if pol is not None:
            x_p, y_p, z_p = pol
            r_dual_p = P @ x_p + q + G.T @ z_p + (A.T @ y_p if m_eq else 0.0)
            if float(np.abs(r_dual_p).max()) <= max(du, 1e-9):
                x, y, z = x_p, y_p, z_p
                du = float(np.abs(r_dual_p).max())
                pr = max(
                    float(np.abs(A @ x - b).max()) if m_eq else 0.0,
                    float(np.maximum(G @ x - h, 0.0).max(initial=0.0)),
                )
                mu = float(np.abs(z * (G @ x - h)).max(initial=0.0))
                polished = True
                if status == "max_iter" and pr <= ptol and mu <= tol:
                    status = "optimal"
    return QpResult(x, y, z, status, it, pr, du, mu, polished)
