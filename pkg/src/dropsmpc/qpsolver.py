"""Dense convex QP solver by operator splitting.

Solves  minimize 0.5 z'Pz + q'z  subject to  A z <= b  with P symmetric
PSD, by ADMM on the consensus form (z, s = Az): a regularized linear solve
alternates with projection onto the constraint slab, with over-relaxation
and an adaptive step parameter.  Problem data are Ruiz-equilibrated once;
the regularized normal matrix is factorized once per step-parameter value
and reused across iterations.  All arithmetic is deterministic: identical
inputs and settings give bit-identical iterates.

Optimality is declared from unscaled KKT residuals (stationarity, primal
feasibility, complementary slackness), so an "optimal" flag certifies the
returned point rather than internal consensus errors.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .smpc import QuadraticProgram

RHO_MIN, RHO_MAX = 1e-6, 1e6
ADAPT_RATIO = 5.0
INFEAS_TOL = 1e-7
CHECKPOINT = 100


class Status(Enum):
    OPTIMAL = "optimal"
    MAX_ITERATIONS = "max_iterations"
    INFEASIBLE = "infeasible"


@dataclass(frozen=True)
class SolverSettings:
    """Iteration limits, tolerances and warm-start data."""

    max_iterations: int = 20000
    tolerance: float = 1e-7
    step: float = 1.0           # initial ADMM step parameter rho
    adaptive_step: bool = True
    sigma: float = 1e-6         # proximal regularization of the linear solve
    alpha: float = 1.6          # over-relaxation
    check_every: int = 25
    scaling_iterations: int = 10
    warm_start: tuple = None    # (z, y) from a previous related solve

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.step <= 0:
            raise ValueError("step parameter must be positive")


@dataclass(frozen=True)
class Solution:
    """Solver output; `checkpoints` holds (iteration, window displacement, rho)."""

    z: np.ndarray
    multipliers: np.ndarray
    objective: float
    status: Status
    primal_residual: float
    dual_residual: float
    comp_slackness: float
    iterations: int
    checkpoints: tuple = ()
    step_updates: tuple = ()


def check_kkt(qp: QuadraticProgram, z: np.ndarray, multipliers: np.ndarray):
    """KKT residual triple (stationarity, primal feasibility, complementarity).

    Returns (||Pz + q + A'lam||_inf, ||(Az - b)_+||_inf, |lam'(Az - b)|).
    """
    z = np.asarray(z, dtype=float).reshape(-1)
    lam = np.asarray(multipliers, dtype=float).reshape(-1)
    if z.size != qp.n or lam.size != qp.n_constraints:
        raise ValueError(
            f"point/multiplier sizes {z.size}/{lam.size} do not match "
            f"QP sizes {qp.n}/{qp.n_constraints}")
    stat = qp.P @ z + qp.q
    if qp.n_constraints:
        stat = stat + qp.A.T @ lam
        slack = qp.A @ z - qp.b
        prim = float(np.maximum(slack, 0.0).max())
        comp = float(abs(lam @ slack))
    else:
        prim, comp = 0.0, 0.0
    return float(np.abs(stat).max()), prim, comp


def _ruiz_equilibrate(P, q, A, iters):
    """Symmetric Ruiz scaling of [[P, A'], [A, 0]] plus cost normalization."""
    n, mcon = P.shape[0], A.shape[0]
    D = np.ones(n)
    E = np.ones(mcon)
    Ps, As = P.copy(), A.copy()
    for _ in range(iters):
        col_p = np.abs(Ps).max(axis=0) if n else np.zeros(0)
        col_a = np.abs(As).max(axis=0) if mcon else np.zeros(n)
        dn = np.sqrt(np.maximum(col_p, col_a))
        dn[dn < 1e-12] = 1.0
        de = np.sqrt(np.abs(As).max(axis=1)) if mcon else np.zeros(0)
        de[de < 1e-12] = 1.0
        Ps = Ps / dn[:, None] / dn[None, :]
        As = As / de[:, None] / dn[None, :]
        D /= dn
        E /= de
    # Cost scaling evens out the objective against the constraints.
    gamma = max(np.abs(Ps).max() if n else 0.0, np.abs(D * q).max(), 1e-12)
    c = 1.0 / gamma
    return D, E, c


def solve(qp: QuadraticProgram, settings: SolverSettings = None) -> Solution:
    """Run the splitting iteration on a QP until the KKT residuals certify it."""
    st = settings or SolverSettings()
    P, q, A, b = qp.P, qp.q, qp.A, qp.b
    n, mcon = qp.n, qp.n_constraints
    if P.shape != (n, n):
        raise ValueError(f"P is {P.shape}, expected {(n, n)}")

    D, E, c = _ruiz_equilibrate(P, q, A, st.scaling_iterations)
    Ps = c * (P * D[:, None] * D[None, :])
    qs = c * (D * q)
    As = np.ascontiguousarray(A * E[:, None] * D[None, :]) if mcon else np.zeros((0, n))
    AsT = np.ascontiguousarray(As.T)
    bs = E * b if mcon else np.zeros(0)

    rho = st.step
    sigma = st.sigma
    eye = np.eye(n)

    def factor_inverse(rho_val):
        K = Ps + sigma * eye
        if mcon:
            K = K + rho_val * (AsT @ As)
        return cho_solve(cho_factor(K, check_finite=False), eye, check_finite=False)

    Kinv = factor_inverse(rho)

    x = np.zeros(n)
    zc = np.zeros(mcon)
    y = np.zeros(mcon)
    if st.warm_start is not None:
        z0, y0 = st.warm_start
        z0 = np.asarray(z0, dtype=float).reshape(-1)
        y0 = np.asarray(y0, dtype=float).reshape(-1)
        if z0.size != n or y0.size != mcon:
            raise ValueError(
                f"warm start sizes {z0.size}/{y0.size} do not match QP "
                f"sizes {n}/{mcon}")
        x = z0 / D
        if mcon:
            y = c * (y0 / E)
            zc = As @ x

    status = Status.MAX_ITERATIONS
    checkpoints = []
    step_updates = []
    res = (np.inf, np.inf, np.inf)
    it = 0
    alpha, am = st.alpha, 1.0 - st.alpha
    x_mark = x.copy()
    v_mark = zc + y / rho

    for it in range(1, st.max_iterations + 1):
        y_old = y
        rhs = sigma * x - qs
        if mcon:
            rhs = rhs + AsT @ (rho * zc - y)
            x_t = Kinv @ rhs
            zt = As @ x_t
            v = alpha * zt + am * zc + y / rho
            zc = np.minimum(v, bs)
            y = rho * (v - zc)
        else:
            x_t = Kinv @ rhs
        x = alpha * x_t + am * x

        if it % st.check_every == 0 or it == st.max_iterations:
            xu = D * x
            yu = (E * y) / c if mcon else np.zeros(0)
            res = check_kkt(qp, xu, yu)
            if max(res) <= st.tolerance:
                status = Status.OPTIMAL
                break
            if mcon and _primal_infeasible(As, bs, y - y_old):
                status = Status.INFEASIBLE
                break

        if it % CHECKPOINT == 0:
            # Window displacement of the splitting iterate; non-increasing
            # between consecutive checkpoints while rho stays fixed.
            v_cur = zc + y / rho
            disp = np.sqrt(sigma * np.sum((x - x_mark) ** 2)
                           + rho * np.sum((v_cur - v_mark) ** 2))
            checkpoints.append((it, float(disp), rho))
            if st.adaptive_step and mcon:
                new_rho = _adapt_rho(rho, Ps, qs, As, AsT, x, zc, y)
                if new_rho != rho:
                    rho = new_rho
                    Kinv = factor_inverse(rho)
                    step_updates.append(it)
            x_mark = x.copy()
            v_mark = zc + y / rho

    xu = D * x
    yu = (E * y) / c if mcon else np.zeros(0)
    if status is not Status.INFEASIBLE:
        res = check_kkt(qp, xu, yu)
        if max(res) <= st.tolerance:
            status = Status.OPTIMAL
    return Solution(
        z=xu, multipliers=yu, objective=qp.objective_value(xu), status=status,
        primal_residual=res[1], dual_residual=res[0], comp_slackness=res[2],
        iterations=it, checkpoints=tuple(checkpoints), step_updates=tuple(step_updates),
    )


def _primal_infeasible(As, bs, delta_y) -> bool:
    """Certificate dy >= 0, A'dy ~ 0, b'dy < 0, scaled by ||dy||."""
    nrm = np.abs(delta_y).max() if delta_y.size else 0.0
    if nrm <= 0:
        return False
    dy = delta_y / nrm
    if dy.min() < -INFEAS_TOL:
        return False
    return (np.abs(As.T @ dy).max() <= INFEAS_TOL
            and bs @ dy < -INFEAS_TOL)


def _adapt_rho(rho, Ps, qs, As, AsT, x, zc, y):
    """Rebalance the step parameter from the scaled consensus/dual residuals.

    The consensus residual ||Ax - z|| (not the constraint violation, which
    vanishes on interior iterates) is what trades off against the dual
    residual as rho changes.
    """
    Ax = As @ x
    r_cons = np.abs(Ax - zc).max()
    denom_p = max(np.abs(Ax).max(), np.abs(zc).max(), 1e-12)
    dual_vec = Ps @ x + qs + AsT @ y
    denom_d = max(np.abs(Ps @ x).max(), np.abs(qs).max(),
                  np.abs(AsT @ y).max(), 1e-12)
    ratio = (r_cons / denom_p + 1e-16) / (np.abs(dual_vec).max() / denom_d + 1e-16)
    if ratio > ADAPT_RATIO or ratio < 1.0 / ADAPT_RATIO:
        return float(np.clip(rho * np.sqrt(ratio), RHO_MIN, RHO_MAX))
    return rho
