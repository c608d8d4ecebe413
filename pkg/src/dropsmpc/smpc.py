"""Receding-horizon controller synthesis as a convex QP.

Decision variables are the stacked offset eta (length Nm) and the strictly
lower block triangular feedback gain Theta (Nm x (N-1)d) acting on
saturated reconstructed noise.  The expected cost over dropouts and noise
is quadratic in (eta, Theta); the hard input bound becomes exact row-wise
l1 constraints; drift-based stability constraints act on the first
kappa*m entries of eta.  Structural zeros of Theta are removed from the
variable vector, and the l1 rows are linearized exactly with one auxiliary
bound variable per remaining entry.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .channel import ProtocolMoments
from .lifting import CostBlocks, LiftedDynamics, constant_term_pieces
from .model import LinearSystem, ReachabilityData
from .moments import NoiseMoments

PSD_TOL = 1e-8


class RotationMode(Enum):
    """Coordinate frame of the drift constraints.

    ROTATING conditions on y_t = (A_o')^t x_o and rotates the constraint
    rows with the same power, matching the subsampled-coordinates analysis
    that the mean-square-boundedness argument runs in.  FIXED uses the
    plain time-invariant form.  The two coincide at t = 0.
    """

    ROTATING = "rotating"
    FIXED = "fixed"


@dataclass(frozen=True)
class PolicyParams:
    """Offset vector eta and feedback gain Theta of one optimized interval."""

    eta: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "eta", np.asarray(self.eta, dtype=float).reshape(-1))
        object.__setattr__(self, "theta", np.atleast_2d(np.asarray(self.theta, dtype=float)))

    def stacked_controls(self, e_stack: np.ndarray) -> np.ndarray:
        """Nominal stacked control eta + Theta e for a saturated-noise stack."""
        if self.theta.shape[1] == 0:
            return self.eta.copy()
        return self.eta + self.theta @ np.asarray(e_stack, dtype=float).reshape(-1)


def default_gain_mask(N: int, m: int, d: int) -> np.ndarray:
    """Strictly lower block triangular support of Theta: block row l sees blocks < l."""
    mask = np.zeros((N * m, (N - 1) * d), dtype=bool)
    for i in range(N * m):
        mask[i, : (i // m) * d] = True
    return mask


def row_usage(policy: PolicyParams, phi_max: float) -> np.ndarray:
    """Worst-case magnitude per control row: |eta_i| + phi_max * ||Theta_i||_1."""
    theta_l1 = np.abs(policy.theta).sum(axis=1) if policy.theta.shape[1] else 0.0
    return np.abs(policy.eta) + phi_max * theta_l1


def enforce_row_bounds(policy: PolicyParams, phi_max: float, u_max: float) -> PolicyParams:
    """Rescale rows so the tightened bound holds exactly in floating point.

    Solver output is feasible only to its tolerance; a row breaching the
    bound is shrunk multiplicatively (repeating with a tiny margin if
    rounding leaves it a few ulp over).
    """
    eta = policy.eta.copy()
    theta = policy.theta.copy()
    shrink = 1.0
    for _ in range(8):
        usage = row_usage(PolicyParams(eta, theta), phi_max)
        over = usage > u_max
        if not np.any(over):
            return PolicyParams(eta, theta)
        scale = np.ones_like(usage)
        scale[over] = (u_max / usage[over]) * shrink
        eta = eta * scale
        if theta.shape[1]:
            theta = theta * scale[:, None]
        shrink = 1.0 - 1e-12
    raise RuntimeError("row-bound enforcement did not converge")


@dataclass(frozen=True)
class StabilityConfig:
    """Drift-constraint parameters; zeta must sit strictly inside ]0, zeta_max[."""

    r: float
    epsilon: float
    zeta: float
    zeta_max: float
    rotation: RotationMode = RotationMode.ROTATING

    def __post_init__(self):
        if not self.r > 0:
            raise ValueError(f"r must be positive, got {self.r}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not 0.0 < self.zeta < self.zeta_max:
            raise ValueError(
                f"zeta={self.zeta} must lie strictly inside ]0, {self.zeta_max}[")


def zeta_upper_bound(sys: LinearSystem, reach: ReachabilityData) -> float:
    """Largest drift magnitude compatible with the input bound: u_max / (sqrt(d_o) sigma1(R+))."""
    s1 = np.linalg.svd(reach.R_kappa_pinv, compute_uv=False)[0]
    return sys.u_max / (np.sqrt(sys.d_o) * s1)


def stability_config(sys: LinearSystem, reach: ReachabilityData, r: float,
                     epsilon: float, zeta: float = None,
                     rotation: RotationMode = RotationMode.ROTATING) -> StabilityConfig:
    """Build a StabilityConfig, defaulting zeta to 99% of its upper bound."""
    zmax = zeta_upper_bound(sys, reach)
    if zeta is None:
        zeta = 0.99 * zmax
    return StabilityConfig(r=r, epsilon=epsilon, zeta=zeta, zeta_max=zmax,
                           rotation=rotation)


def sat_inf(z: np.ndarray, r: float, zeta: float) -> np.ndarray:
    """Component-wise saturation: slope zeta/r inside [-r, r], clipped to +/- zeta."""
    if not (r > 0 and zeta > 0):
        raise ValueError("r and zeta must be positive")
    z = np.asarray(z, dtype=float)
    return np.clip(z * (zeta / r), -zeta, zeta)


def _rotations(sys: LinearSystem, t_abs: int, kappa: int, mode: RotationMode):
    """Conditioning frame T and constraint frame for the drift rows.

    Returns (T, W_frame) with the drift rows W_frame @ R_kappa acting on the
    first kappa*m offsets whenever |(T x_o)_j| >= r + eps.
    """
    AoT = sys.A_o.T
    if mode is RotationMode.ROTATING:
        T = np.linalg.matrix_power(AoT, t_abs)
        frame = np.linalg.matrix_power(AoT, t_abs + kappa)
    else:
        T = np.eye(sys.d_o)
        frame = np.linalg.matrix_power(AoT, kappa)
    return T, frame


def build_stability_constraints(x_t: np.ndarray, t_abs: int, sys: LinearSystem,
                                reach: ReachabilityData, cfg: StabilityConfig):
    """Drift rows on the first kappa*m offsets at a recalculation instant.

    Returns a list of (w, rhs) meaning w . eta_{1:kappa m} <= rhs.  A
    component of the (possibly rotated) orthogonal state beyond r+epsilon
    in magnitude contributes one row pushing its expected displacement
    toward the origin by at least zeta.
    """
    kappa = reach.kappa
    if t_abs % kappa != 0:
        raise ValueError(f"t_abs={t_abs} is not a recalculation instant (kappa={kappa})")
    x_o = np.asarray(x_t, dtype=float).reshape(-1)[: sys.d_o]
    if sys.d_o == 0:
        return []
    T, frame = _rotations(sys, t_abs, kappa, cfg.rotation)
    y = T @ x_o
    W = frame @ reach.R_kappa
    rows = []
    threshold = cfg.r + cfg.epsilon
    for j in range(sys.d_o):
        if y[j] >= threshold:
            rows.append((W[j].copy(), -cfg.zeta))
        elif y[j] <= -threshold:
            rows.append((-W[j].copy(), -cfg.zeta))
    return rows


def fallback_policy(x_t: np.ndarray, t_abs: int, sys: LinearSystem,
                    reach: ReachabilityData, cfg: StabilityConfig, N: int) -> PolicyParams:
    """Zero-gain offset sequence that satisfies every constraint at this instant.

    The first kappa*m offsets steer the (rotated) orthogonal state by
    exactly the saturated drift; remaining offsets and the gain are zero.
    Its sup-norm is bounded by sigma1(R_kappa^+) sqrt(d_o) zeta <= u_max.
    """
    kappa = reach.kappa
    if t_abs % kappa != 0:
        raise ValueError(f"t_abs={t_abs} is not a recalculation instant (kappa={kappa})")
    m = sys.m
    eta = np.zeros(N * m)
    theta = np.zeros((N * m, (N - 1) * sys.d))
    if sys.d_o > 0:
        x_o = np.asarray(x_t, dtype=float).reshape(-1)[: sys.d_o]
        if cfg.rotation is RotationMode.ROTATING:
            tau = t_abs // kappa
            back = np.linalg.matrix_power(sys.A_o.T, kappa * tau)
            fwd = np.linalg.matrix_power(sys.A_o, kappa * (tau + 1))
        else:
            back = np.eye(sys.d_o)
            fwd = np.linalg.matrix_power(sys.A_o, kappa)
        eta[: kappa * m] = -reach.R_kappa_pinv @ fwd @ sat_inf(back @ x_o, cfg.r, cfg.zeta)
    return PolicyParams(eta=eta, theta=theta)


@dataclass(frozen=True)
class VariableLayout:
    """Mapping between QP coordinates and policy entries.

    z = [eta | free Theta entries | eta bound auxiliaries | Theta bound
    auxiliaries]; theta_coords[k] holds the (row, col) of free entry k.
    """

    N: int
    m: int
    d: int
    gain_mask: np.ndarray
    theta_coords: np.ndarray

    @property
    def n_eta(self) -> int:
        return self.N * self.m

    @property
    def n_theta(self) -> int:
        return self.theta_coords.shape[0]

    @property
    def n(self) -> int:
        return 2 * (self.n_eta + self.n_theta)


def variable_layout(N: int, m: int, d: int, gain_mask=None) -> VariableLayout:
    full = default_gain_mask(N, m, d)
    if gain_mask is None:
        gain_mask = full
    else:
        gain_mask = np.asarray(gain_mask, dtype=bool)
        if gain_mask.shape != full.shape:
            raise ValueError(f"gain mask must be {full.shape}, got {gain_mask.shape}")
        if np.any(gain_mask & ~full):
            raise ValueError("gain mask enables entries outside the strictly "
                             "lower block triangular support")
    coords = np.argwhere(gain_mask)
    return VariableLayout(N=N, m=m, d=d, gain_mask=gain_mask, theta_coords=coords)


@dataclass(frozen=True)
class ObjectivePieces:
    """State-independent parts of the expected-cost objective.

    The per-instant objective is 0.5 z'Pz + q(x)'z + c(x) with only the eta
    part of q and the constant depending on the measured state.
    """

    layout: VariableLayout
    P: np.ndarray
    q_theta: np.ndarray
    lin_eta: np.ndarray
    H: np.ndarray
    trace_const: float


def control_kernel(lifted: LiftedDynamics, costs: CostBlocks) -> np.ndarray:
    """Kernel calB' calQ calB + calR weighting the delivered stacked controls."""
    return lifted.calB.T @ costs.calQ @ lifted.calB + costs.calR


def precompute_objective(lifted: LiftedDynamics, costs: CostBlocks,
                         pm: ProtocolMoments, nm: NoiseMoments,
                         gain_mask=None) -> ObjectivePieces:
    """Assemble the fixed quadratic/linear pieces of the objective."""
    N, d, m = lifted.N, lifted.d, lifted.m
    layout = variable_layout(N, m, d, gain_mask)
    n_eta, n_th = layout.n_eta, layout.n_theta

    if pm.mu.shape != (n_eta, n_eta):
        raise ValueError(f"protocol moments are {pm.mu.shape}, expected {(n_eta, n_eta)}")
    ne = (N - 1) * d
    if nm.Sigma_e.shape != (ne, ne):
        raise ValueError(f"Sigma_e is {nm.Sigma_e.shape}, expected {(ne, ne)}")

    P = np.zeros((layout.n, layout.n))
    P[:n_eta, :n_eta] = 2.0 * pm.Sigma
    if n_th:
        rows = layout.theta_coords[:, 0]
        cols = layout.theta_coords[:, 1]
        # Quadratic kernel of vec(Theta): K[(i,j),(i',j')] = Sigma_S[i,i'] Sigma_e[j,j'].
        K = pm.Sigma_S[np.ix_(rows, rows)] * nm.Sigma_e[np.ix_(cols, cols)]
        P[n_eta : n_eta + n_th, n_eta : n_eta + n_th] = 2.0 * K

    core = P[: n_eta + n_th, : n_eta + n_th]
    lo = np.linalg.eigvalsh(0.5 * (core + core.T)).min()
    if lo < -PSD_TOL:
        raise ValueError(
            f"assembled quadratic form has eigenvalue {lo:.3e} < -{PSD_TOL:g}; "
            "moment matrices are inconsistent")

    C = pm.mu_S.T @ lifted.calB.T @ costs.calQ @ lifted.calD @ nm.Sigma_e_prime
    q_theta = 2.0 * C[layout.theta_coords[:, 0], layout.theta_coords[:, 1]]
    lin_eta = 2.0 * pm.mu.T @ lifted.calB.T @ costs.calQ @ lifted.calA
    H, trace_const = constant_term_pieces(lifted, costs, nm.Sigma_W)
    return ObjectivePieces(layout=layout, P=P, q_theta=q_theta, lin_eta=lin_eta,
                           H=H, trace_const=trace_const)


def objective_vectors(pieces: ObjectivePieces, x_t: np.ndarray):
    """State-dependent (q, constant) of the objective at measured state x_t."""
    x_t = np.asarray(x_t, dtype=float).reshape(-1)
    layout = pieces.layout
    q = np.zeros(layout.n)
    q[: layout.n_eta] = pieces.lin_eta @ x_t
    q[layout.n_eta : layout.n_eta + layout.n_theta] = pieces.q_theta
    const = float(x_t @ pieces.H @ x_t + pieces.trace_const)
    return q, const


def build_objective(x_t: np.ndarray, lifted: LiftedDynamics, costs: CostBlocks,
                    pm: ProtocolMoments, nm: NoiseMoments, gain_mask=None):
    """Expected cost as (P, q, constant) over [eta | free Theta entries].

    The value at a policy z is 0.5 z'Pz + q'z + constant; the constant is
    the policy-independent term, so the zero policy scores exactly it.
    """
    pieces = precompute_objective(lifted, costs, pm, nm, gain_mask)
    q, const = objective_vectors(pieces, x_t)
    k = pieces.layout.n_eta + pieces.layout.n_theta
    return pieces.P[:k, :k].copy(), q[:k].copy(), const


def objective_value_of_policy(pieces: ObjectivePieces, x_t, policy: PolicyParams) -> float:
    """Evaluate the expected cost at a concrete (eta, Theta)."""
    layout = pieces.layout
    z = np.zeros(layout.n)
    z[: layout.n_eta] = policy.eta
    if layout.n_theta:
        z[layout.n_eta : layout.n_eta + layout.n_theta] = policy.theta[
            layout.theta_coords[:, 0], layout.theta_coords[:, 1]]
    q, const = objective_vectors(pieces, x_t)
    return float(0.5 * z @ pieces.P @ z + q @ z + const)


def build_input_constraints(layout: VariableLayout, phi_max: float, u_max: float):
    """Exact linearization of |eta_i| + phi_max ||Theta_i||_1 <= u_max.

    Every eta entry and free Theta entry gets an auxiliary upper bound on
    its magnitude; one row per control coordinate then caps the weighted
    sum of auxiliaries.  Returns (A, b) with rows meaning A z <= b.
    """
    if not (phi_max > 0 and u_max > 0):
        raise ValueError("phi_max and u_max must be positive")
    n_eta, n_th, n = layout.n_eta, layout.n_theta, layout.n
    a_eta0 = n_eta + n_th
    a_th0 = a_eta0 + n_eta

    n_rows = 2 * n_eta + 2 * n_th + n_eta
    A = np.zeros((n_rows, n))
    b = np.zeros(n_rows)
    r = 0
    for i in range(n_eta):
        A[r, i], A[r, a_eta0 + i] = 1.0, -1.0
        A[r + 1, i], A[r + 1, a_eta0 + i] = -1.0, -1.0
        r += 2
    for k in range(n_th):
        A[r, n_eta + k], A[r, a_th0 + k] = 1.0, -1.0
        A[r + 1, n_eta + k], A[r + 1, a_th0 + k] = -1.0, -1.0
        r += 2
    for i in range(n_eta):
        A[r, a_eta0 + i] = 1.0
        in_row = layout.theta_coords[:, 0] == i
        A[r, a_th0 : a_th0 + n_th][in_row] = phi_max
        b[r] = u_max
        r += 1
    return A, b


@dataclass(frozen=True)
class QuadraticProgram:
    """Dense QP: minimize 0.5 z'Pz + q'z + constant subject to A z <= b."""

    P: np.ndarray
    q: np.ndarray
    A: np.ndarray
    b: np.ndarray
    constant: float = 0.0
    layout: VariableLayout = None

    @property
    def n(self) -> int:
        return self.q.size

    @property
    def n_constraints(self) -> int:
        return self.b.size

    def objective_value(self, z: np.ndarray) -> float:
        z = np.asarray(z, dtype=float).reshape(-1)
        return float(0.5 * z @ self.P @ z + self.q @ z + self.constant)

    def violation(self, z: np.ndarray) -> float:
        """Largest constraint violation (0 if feasible)."""
        if self.b.size == 0:
            return 0.0
        return float(np.maximum(self.A @ z - self.b, 0.0).max())

    def policy_from_z(self, z: np.ndarray) -> PolicyParams:
        lay = self.layout
        if lay is None:
            raise ValueError("this QP carries no variable layout")
        z = np.asarray(z, dtype=float).reshape(-1)
        eta = z[: lay.n_eta].copy()
        theta = np.zeros((lay.n_eta, (lay.N - 1) * lay.d))
        if lay.n_theta:
            theta[lay.theta_coords[:, 0], lay.theta_coords[:, 1]] = \
                z[lay.n_eta : lay.n_eta + lay.n_theta]
        return PolicyParams(eta=eta, theta=theta)

    def policy_to_z(self, policy: PolicyParams) -> np.ndarray:
        """Embed a policy, setting each auxiliary to the magnitude it bounds."""
        lay = self.layout
        z = np.zeros(lay.n)
        z[: lay.n_eta] = policy.eta
        th = policy.theta[lay.theta_coords[:, 0], lay.theta_coords[:, 1]] \
            if lay.n_theta else np.zeros(0)
        z[lay.n_eta : lay.n_eta + lay.n_theta] = th
        a_eta0 = lay.n_eta + lay.n_theta
        z[a_eta0 : a_eta0 + lay.n_eta] = np.abs(policy.eta)
        z[a_eta0 + lay.n_eta :] = np.abs(th)
        return z


def assemble_qp(pieces: ObjectivePieces, x_t, input_constraints,
                stability_constraints) -> QuadraticProgram:
    """Stack objective, input rows and drift rows into one QP over z."""
    layout = pieces.layout
    q, const = objective_vectors(pieces, x_t)
    A_in, b_in = input_constraints
    if A_in.shape[1] != layout.n:
        raise ValueError(f"input constraints built for n={A_in.shape[1]}, "
                         f"objective has n={layout.n}")
    rows = [A_in]
    rhs = [b_in]
    km = len(stability_constraints[0][0]) if stability_constraints else 0
    for w, r in stability_constraints:
        row = np.zeros(layout.n)
        row[: km] = w
        rows.append(row[None, :])
        rhs.append(np.array([r]))
    A = np.vstack(rows) if rows else np.zeros((0, layout.n))
    b = np.concatenate(rhs) if rhs else np.zeros(0)
    return QuadraticProgram(P=pieces.P, q=q, A=A, b=b, constant=const, layout=layout)


def write_qp_text(qp: QuadraticProgram, path) -> None:
    """Dump dense P, q, A, b in a plain-text format for external cross-checks."""
    with open(path, "w") as fh:
        fh.write(f"dropsmpc-qp 1 {qp.n} {qp.n_constraints}\n")
        for row in qp.P:
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")
        fh.write(" ".join(f"{v:.17g}" for v in qp.q) + "\n")
        for row in qp.A:
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")
        fh.write(" ".join(f"{v:.17g}" for v in qp.b) + "\n")


def read_qp_text(path) -> QuadraticProgram:
    """Read the plain-text QP format written by :func:`write_qp_text`."""
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 4 or header[0] != "dropsmpc-qp" or header[1] != "1":
            raise ValueError(f"not a dropsmpc-qp v1 file: {path}")
        n, mcon = int(header[2]), int(header[3])

        def parse_line():
            return np.array(fh.readline().split(), dtype=float)

        P = np.vstack([parse_line() for _ in range(n)]) if n else np.zeros((0, 0))
        q = parse_line()
        A = np.vstack([parse_line() for _ in range(mcon)]) if mcon else np.zeros((0, n))
        b = parse_line() if mcon else np.zeros(0)
    if P.shape != (n, n) or q.size != n or A.shape != (mcon, n) or b.size != mcon:
        raise ValueError(f"malformed QP file {path}")
    return QuadraticProgram(P=P, q=q, A=A, b=b)
