"""Independent slow-but-sure solvers used as test oracles."""

import numpy as np
from scipy.linalg import cho_factor, cho_solve


def dual_pg_solve(P, q, A, b, max_iters=200_000, gap_tol=1e-9):
    """Projected gradient ascent on the dual of min 0.5 z'Pz + q'z, Az <= b.

    Requires P positive definite and a strictly feasible primal point
    (Slater), so the dual optimum is attained.  Completely independent of
    the operator-splitting path: plain gradient steps with a 1/L step size
    and clipping at zero.  Returns (z, lam).
    """
    P = np.asarray(P, dtype=float)
    q = np.asarray(q, dtype=float)
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    chol = cho_factor(P)
    if A.shape[0] == 0:
        return -cho_solve(chol, q), np.zeros(0)
    APinvAT = A @ cho_solve(chol, A.T)
    L = np.linalg.eigvalsh(APinvAT).max()
    step = 1.0 / max(L, 1e-12)

    lam = np.zeros(A.shape[0])
    for it in range(max_iters):
        x = -cho_solve(chol, q + A.T @ lam)
        grad = A @ x - b
        lam_new = np.maximum(lam + step * grad, 0.0)
        if it % 200 == 0:
            # Duality gap between the best feasible-ish primal value and the
            # dual value certifies convergence.
            dual_val = 0.5 * x @ P @ x + q @ x + lam_new @ (A @ x - b)
            viol = np.maximum(A @ x - b, 0.0)
            primal_val = 0.5 * x @ P @ x + q @ x
            if np.abs(viol).max() < 1e-9 and abs(primal_val - dual_val) < gap_tol * max(1.0, abs(primal_val)):
                lam = lam_new
                break
        lam = lam_new
    x = -cho_solve(chol, q + A.T @ lam)
    return x, lam


def random_feasible_qp(rng, n=8, mcon=12, definite=True):
    """Random strictly feasible inequality QP with PD (or PSD) quadratic."""
    G = rng.standard_normal((n + 3, n))
    P = G.T @ G
    if definite:
        P = P + 0.1 * np.eye(n)
    q = rng.standard_normal(n)
    A = rng.standard_normal((mcon, n))
    z0 = rng.standard_normal(n)
    b = A @ z0 + np.abs(rng.standard_normal(mcon)) + 0.1
    return P, q, A, b
