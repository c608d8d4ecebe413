"""Closed-loop simulation over the erasure channel.

Each path runs the receding-horizon loop: every kappa steps the controller
measures the state, solves the protocol's QP (falling back to the
always-feasible drift policy if the solver gives up), transmits per the
protocol, and the actuator applies whatever survived the channel.  The
controller reconstructs the plant noise from consecutive measured states
and acknowledgements, which is what feeds the saturated-feedback terms.

Paths use independent RNG streams derived from (master seed, path index),
so results do not depend on execution order or worker count.
"""

import dataclasses
import multiprocessing
from dataclasses import dataclass, field

import numpy as np

from . import qpsolver
from .channel import IIDChannel, Protocol, exact_protocol_moments
from .lifting import build_cost_blocks, build_state_lift
from .model import LinearSystem, NoiseModel, reachability_data
from .moments import NoiseMoments, SaturationSpec, estimate_noise_moments, saturate
from .qpsolver import SolverSettings, Status
from .smpc import (PolicyParams, StabilityConfig, assemble_qp,
                   build_input_constraints, build_stability_constraints,
                   control_kernel, enforce_row_bounds, fallback_policy,
                   precompute_objective)


@dataclass(frozen=True)
class SimConfig:
    """Everything one closed-loop experiment needs.

    `design_channel` is the i.i.d. channel the controller assumes when
    computing dropout moments; the simulated `channel` may differ (e.g. a
    network-state channel), in which case the mismatch is deliberate.
    """

    sys: LinearSystem
    noise: NoiseModel
    channel: object
    protocol: Protocol
    N: int
    kappa: int
    Q: np.ndarray
    Q_f: np.ndarray
    R: np.ndarray
    stability: StabilityConfig
    saturation: SaturationSpec
    horizon: int
    paths: int
    seed: int
    x0: np.ndarray
    design_channel: IIDChannel
    moment_samples: int = 1_000_000
    moment_seed: int = 0
    solver: SolverSettings = SolverSettings()
    gain_mask: np.ndarray = None
    workers: int = 1
    noise_moments: NoiseMoments = None   # pass to reuse a cached estimate

    def __post_init__(self):
        if self.kappa > self.N:
            raise ValueError(f"horizon N={self.N} must be at least kappa={self.kappa}")
        if self.horizon % self.kappa != 0:
            raise ValueError(
                f"simulation horizon {self.horizon} must be a multiple of "
                f"kappa={self.kappa}")
        if self.paths < 1:
            raise ValueError("need at least one path")


@dataclass
class ActuatorState:
    """Buffered offset blocks at the actuator; cleared every recalculation."""

    kappa: int
    m: int
    buffer: np.ndarray = None
    present: np.ndarray = None

    def __post_init__(self):
        self.reset()

    def reset(self):
        self.buffer = np.zeros(self.kappa * self.m)
        self.present = np.zeros(self.kappa, dtype=bool)

    @property
    def filled(self) -> bool:
        return bool(self.present.any())

    def store(self, start_block: int, values: np.ndarray):
        values = np.asarray(values, dtype=float).reshape(-1)
        n_blocks = values.size // self.m
        self.buffer[start_block * self.m : start_block * self.m + values.size] = values
        self.present[start_block : start_block + n_blocks] = True

    def get(self, block: int):
        if self.present[block]:
            return self.buffer[block * self.m : (block + 1) * self.m].copy()
        return None


@dataclass(frozen=True)
class Payload:
    """Content of one channel use; all of it is lost together on a dropout."""

    control: np.ndarray = None
    feedback: np.ndarray = None
    burst: tuple = None        # (start_block, stacked offset blocks)


def transmit_payload(protocol: Protocol, policy: PolicyParams, fb: np.ndarray,
                     ell: int, kappa: int, m: int, buffer_filled: bool) -> Payload:
    """Controller-side packet for step ell of the interval.

    fb is the weighted saturated-feedback sum for this step (zero at ell=0).
    For the retry protocol the remaining offset blocks ride along until the
    first acknowledged success, and never at the last in-interval step.
    """
    eta_blk = policy.eta[ell * m : (ell + 1) * m]
    if protocol is Protocol.PER_STEP:
        return Payload(control=eta_blk + fb)
    if protocol is Protocol.BURST:
        if ell == 0:
            return Payload(burst=(0, policy.eta[: kappa * m].copy()))
        return Payload(feedback=fb)
    burst = None
    if not buffer_filled and ell <= kappa - 2:
        burst = (ell + 1, policy.eta[(ell + 1) * m : kappa * m].copy())
    return Payload(control=eta_blk + fb, burst=burst)


def actuator_step(protocol: Protocol, state: ActuatorState, payload: Payload,
                  ell: int, nu: int) -> np.ndarray:
    """Apply one step of the actuator logic; nu=0 means the packet was lost."""
    m = state.m
    if protocol is Protocol.PER_STEP:
        return payload.control.copy() if nu else np.zeros(m)
    if protocol is Protocol.BURST:
        if ell == 0:
            if nu:
                state.store(*payload.burst)
            blk = state.get(0)
            return blk if blk is not None else np.zeros(m)
        base = state.get(ell)
        u = base if base is not None else np.zeros(m)
        if nu:
            u = u + payload.feedback
        return u
    # retry protocol
    if nu:
        if payload.burst is not None:
            state.store(*payload.burst)
        return payload.control.copy()
    blk = state.get(ell)
    return blk if blk is not None else np.zeros(m)


@dataclass
class InstantInfo:
    """Per-recalculation diagnostics."""

    t: int
    status: str
    iterations: int
    warm: bool
    fallback_used: bool
    fallback_violation: float
    stability_rows: int


@dataclass
class SimulationRecord:
    """One closed-loop path: trajectories plus solver diagnostics."""

    path: int
    states: np.ndarray        # (T+1, d)
    controls: np.ndarray      # (T, m) applied controls
    dropouts: np.ndarray      # (T,)
    noises: np.ndarray        # (T, d) true process noise
    stage_costs: np.ndarray   # (T,)
    energy: float             # mean ||u||^2 over stages
    recon_error: float        # max |reconstructed - true| noise entry
    instants: list = field(default_factory=list)


@dataclass(frozen=True)
class Metrics:
    """Path-averaged closed-loop summaries."""

    avg_state_norm: np.ndarray    # length T+1
    actuator_energy: float
    avg_cost_per_stage: float
    empirical_msb: float
    solver_fallbacks: int = 0
    infeasible_instants: int = 0
    max_fallback_violation: float = 0.0


@dataclass(frozen=True)
class RunContext:
    """Precomputed synthesis data shared by every path of one experiment."""

    cfg: SimConfig
    pieces: object
    input_cons: tuple
    reach: object
    n_input_rows: int


def prepare(cfg: SimConfig) -> RunContext:
    """Build moments, objective pieces and static constraints for a config."""
    sys = cfg.sys
    lifted = build_state_lift(sys, cfg.N)
    costs = build_cost_blocks(cfg.Q, cfg.Q_f, cfg.R, cfg.N)
    reach = reachability_data(sys)
    if reach.kappa != cfg.kappa:
        raise ValueError(
            f"configured recalculation interval {cfg.kappa} differs from the "
            f"reachability index {reach.kappa}")
    M = control_kernel(lifted, costs)
    pm = exact_protocol_moments(cfg.protocol, cfg.design_channel, M, cfg.N,
                                sys.m, cfg.kappa)
    nm = cfg.noise_moments
    if nm is None:
        nm = estimate_noise_moments(cfg.noise, cfg.saturation, cfg.N,
                                    cfg.moment_samples, cfg.moment_seed)
    pieces = precompute_objective(lifted, costs, pm, nm, cfg.gain_mask)
    A_in, b_in = build_input_constraints(pieces.layout, cfg.saturation.phi_max,
                                         sys.u_max)
    return RunContext(cfg=cfg, pieces=pieces, input_cons=(A_in, b_in),
                      reach=reach, n_input_rows=b_in.size)


def _solve_instant(ctx: RunContext, x, t_abs, warm):
    """Assemble and solve the QP at one recalculation instant.

    Returns (policy, solution, qp, fallback_violation, used_fallback).
    The fallback policy is always substituted into the constraints as the
    feasibility certificate; it also replaces the solver output when the
    solver fails to certify optimality.
    """
    cfg = ctx.cfg
    stab = build_stability_constraints(x, t_abs, cfg.sys, ctx.reach, cfg.stability)
    qp = assemble_qp(ctx.pieces, x, ctx.input_cons, stab)

    settings = cfg.solver
    if warm is not None:
        z_prev, y_prev = warm
        y_new = np.zeros(qp.n_constraints)
        k = min(y_prev.size, qp.n_constraints)
        y_new[:k] = y_prev[:k]
        settings = dataclasses.replace(settings, warm_start=(z_prev, y_new))
    sol = qpsolver.solve(qp, settings)

    fb = fallback_policy(x, t_abs, cfg.sys, ctx.reach, cfg.stability, cfg.N)
    fb_violation = qp.violation(qp.policy_to_z(fb))

    if sol.status is Status.OPTIMAL:
        policy = enforce_row_bounds(qp.policy_from_z(sol.z),
                                    cfg.saturation.phi_max, cfg.sys.u_max)
        used_fallback = False
    else:
        policy = fb
        used_fallback = True
    return policy, sol, qp, fb_violation, used_fallback


def simulate_path(ctx: RunContext, path: int) -> SimulationRecord:
    """Run one closed-loop path with its own deterministic RNG streams."""
    cfg = ctx.cfg
    sys, kappa, N, m, d = cfg.sys, cfg.kappa, cfg.N, cfg.sys.m, cfg.sys.d
    T = cfg.horizon

    ss = np.random.SeedSequence([cfg.seed, path])
    noise_seq, chan_seq = ss.spawn(2)
    noise_rng = np.random.default_rng(noise_seq)
    sampler = cfg.channel.sampler(np.random.default_rng(chan_seq))

    x = np.asarray(cfg.x0, dtype=float).reshape(-1).copy()
    states = np.empty((T + 1, d))
    controls = np.empty((T, m))
    dropouts = np.empty(T, dtype=int)
    noises = np.empty((T, d))
    stage_costs = np.empty(T)
    states[0] = x

    Q, R = np.atleast_2d(cfg.Q), np.atleast_2d(cfg.R)
    act = ActuatorState(kappa=kappa, m=m)
    instants = []
    recon_err = 0.0
    warm = None

    for t0 in range(0, T, kappa):
        policy, sol, qp, fb_viol, used_fb = _solve_instant(ctx, x, t0, warm)
        warm = (sol.z, sol.multipliers)
        instants.append(InstantInfo(
            t=t0, status=sol.status.value, iterations=sol.iterations,
            warm=t0 > 0, fallback_used=used_fb, fallback_violation=fb_viol,
            stability_rows=qp.n_constraints - ctx.n_input_rows))

        e_stack = np.zeros((N - 1) * d)
        act.reset()
        for ell in range(kappa):
            rows = slice(ell * m, (ell + 1) * m)
            fb_term = (policy.theta[rows] @ e_stack
                       if policy.theta.shape[1] else np.zeros(m))
            payload = transmit_payload(cfg.protocol, policy, fb_term, ell,
                                       kappa, m, act.filled)
            nu = sampler.draw()
            u_a = actuator_step(cfg.protocol, act, payload, ell, nu)
            # Tightened rows already bound u mathematically; the clip only
            # removes floating-point dust so the hard bound holds exactly.
            u_a = np.clip(u_a, -sys.u_max, sys.u_max)

            w = cfg.noise.sample(noise_rng, 1)[0]
            nominal = sys.A @ x + sys.B @ u_a
            x_next = nominal + w
            # Acknowledgements make u_a known at the controller, so the
            # reconstruction below is what the feedback terms actually use.
            w_rec = x_next - nominal
            recon_err = max(recon_err, float(np.abs(w_rec - w).max()))
            if ell < N - 1:
                e_stack[ell * d : (ell + 1) * d] = saturate(cfg.saturation, w_rec)

            t = t0 + ell
            controls[t] = u_a
            dropouts[t] = nu
            noises[t] = w
            stage_costs[t] = float(x @ Q @ x + u_a @ R @ u_a)
            states[t + 1] = x_next
            x = x_next

    energy = float(np.mean(np.sum(controls ** 2, axis=1)))
    return SimulationRecord(
        path=path, states=states, controls=controls, dropouts=dropouts,
        noises=noises, stage_costs=stage_costs, energy=energy,
        recon_error=recon_err, instants=instants)


_POOL_CTX = None


def _pool_init(ctx):
    global _POOL_CTX
    _POOL_CTX = ctx


def _pool_path(path):
    return simulate_path(_POOL_CTX, path)


def run_paths(cfg: SimConfig, ctx: RunContext = None):
    """Simulate all paths of a config; returns (records, metrics)."""
    if ctx is None:
        ctx = prepare(cfg)
    if cfg.workers > 1 and cfg.paths > 1:
        mp = multiprocessing.get_context("fork")
        with mp.Pool(processes=cfg.workers, initializer=_pool_init,
                     initargs=(ctx,)) as pool:
            records = pool.map(_pool_path, range(cfg.paths))
    else:
        records = [simulate_path(ctx, p) for p in range(cfg.paths)]
    return records, compute_metrics(records)


def compute_metrics(records) -> Metrics:
    """Aggregate path records into the reported metrics."""
    if not records:
        raise ValueError("no simulation records")
    norms = np.stack([np.linalg.norm(r.states, axis=1) for r in records])
    sq = norms ** 2
    costs = np.stack([r.stage_costs for r in records])
    energy = float(np.mean([r.energy for r in records]))
    fallbacks = sum(1 for r in records for ii in r.instants if ii.fallback_used)
    infeasible = sum(
        1 for r in records for ii in r.instants
        if ii.status == Status.INFEASIBLE.value)
    max_fb = max((ii.fallback_violation for r in records for ii in r.instants),
                 default=0.0)
    return Metrics(
        avg_state_norm=norms.mean(axis=0),
        actuator_energy=energy,
        avg_cost_per_stage=float(costs.mean()),
        empirical_msb=float(sq.mean(axis=0).max()),
        solver_fallbacks=fallbacks,
        infeasible_instants=infeasible,
        max_fallback_violation=float(max_fb),
    )


def replay_states(sys: LinearSystem, x0, controls, noises) -> np.ndarray:
    """Re-step the plant recursion from logged inputs and noises."""
    T = controls.shape[0]
    states = np.empty((T + 1, sys.d))
    x = np.asarray(x0, dtype=float).reshape(-1).copy()
    states[0] = x
    for t in range(T):
        x = (sys.A @ x + sys.B @ controls[t]) + noises[t]
        states[t + 1] = x
    return states


def tail_slope(series, window: int, max_lag: int = 25):
    """Least-squares slope of the last `window` points with a serial-
    correlation-robust (Newey-West) standard error.

    Returns (slope, standard_error).  The plain OLS standard error would
    understate the uncertainty badly here because consecutive closed-loop
    averages are correlated.
    """
    y = np.asarray(series, dtype=float)[-window:]
    n = y.size
    if n < 8:
        raise ValueError("window too short for a trend estimate")
    t = np.arange(n, dtype=float)
    t = t - t.mean()
    X = np.column_stack([np.ones(n), t])
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ beta

    lag = min(max_lag, n - 2)
    xt = X * resid[:, None]
    S = xt.T @ xt / n
    for l in range(1, lag + 1):
        w = 1.0 - l / (lag + 1.0)
        G = xt[l:].T @ xt[:-l] / n
        S = S + w * (G + G.T)
    XtX = X.T @ X
    cov = n * np.linalg.solve(XtX, np.linalg.solve(XtX, S).T)
    se = float(np.sqrt(max(cov[1, 1], 0.0)))
    return float(beta[1]), se
