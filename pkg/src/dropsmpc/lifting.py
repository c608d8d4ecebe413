"""Stacked-horizon dynamics and cost blocks.

Over a horizon of N steps the states, controls and noises satisfy

    x_stack = calA x_t + calB u_stack + calD w_stack,

with x_stack of length (N+1)d, u_stack of length Nm and w_stack of length
Nd.  Everything is stored dense; horizons here are short.
"""

from dataclasses import dataclass

import numpy as np

from .model import DimensionError, LinearSystem


@dataclass(frozen=True)
class LiftedDynamics:
    """Block matrices calA, calB, calD of the stacked recursion."""

    calA: np.ndarray
    calB: np.ndarray
    calD: np.ndarray
    N: int
    d: int
    m: int


@dataclass(frozen=True)
class CostBlocks:
    """Block-diagonal stage/terminal weights calQ = diag(Q,...,Q,Q_f), calR = diag(R,...,R)."""

    calQ: np.ndarray
    calR: np.ndarray
    Q: np.ndarray
    Q_f: np.ndarray
    R: np.ndarray
    N: int


def build_state_lift(sys: LinearSystem, N: int) -> LiftedDynamics:
    """Assemble the stacked-horizon matrices for a horizon of N >= 1 steps."""
    if N < 1:
        raise ValueError(f"horizon N must be >= 1, got {N}")
    A, B, d, m = sys.A, sys.B, sys.d, sys.m

    powers = [np.eye(d)]
    for _ in range(N):
        powers.append(A @ powers[-1])

    calA = np.vstack(powers)
    calB = np.zeros(((N + 1) * d, N * m))
    calD = np.zeros(((N + 1) * d, N * d))
    for i in range(1, N + 1):
        for j in range(i):
            calB[i * d : (i + 1) * d, j * m : (j + 1) * m] = powers[i - 1 - j] @ B
            calD[i * d : (i + 1) * d, j * d : (j + 1) * d] = powers[i - 1 - j]
    return LiftedDynamics(calA=calA, calB=calB, calD=calD, N=N, d=d, m=m)


def build_cost_blocks(Q, Q_f, R, N: int) -> CostBlocks:
    """Assemble calQ and calR; rejects asymmetric weights, indefinite Q/Q_f, non-PD R."""
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    Q_f = np.atleast_2d(np.asarray(Q_f, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if N < 1:
        raise ValueError(f"horizon N must be >= 1, got {N}")
    if Q.shape != Q_f.shape or Q.shape[0] != Q.shape[1]:
        raise DimensionError(f"Q {Q.shape} and Q_f {Q_f.shape} must be square and equal-sized")
    if R.shape[0] != R.shape[1]:
        raise DimensionError(f"R must be square, got {R.shape}")
    for name, M in (("Q", Q), ("Q_f", Q_f), ("R", R)):
        if np.abs(M - M.T).max() > 1e-12:
            raise ValueError(f"{name} must be symmetric")
    for name, M in (("Q", Q), ("Q_f", Q_f)):
        lo = np.linalg.eigvalsh(M).min()
        if lo < -1e-12:
            raise ValueError(f"{name} must be PSD, min eigenvalue {lo:g}")
    if np.linalg.eigvalsh(R).min() < 1e-12:
        raise ValueError("R must be positive definite")

    calQ = np.kron(np.eye(N + 1), Q)
    d = Q.shape[0]
    calQ[N * d :, N * d :] = Q_f
    calR = np.kron(np.eye(N), R)
    return CostBlocks(calQ=calQ, calR=calR, Q=Q, Q_f=Q_f, R=R, N=N)


def constant_term(lifted: LiftedDynamics, costs: CostBlocks, x_t: np.ndarray,
                  Sigma_W: np.ndarray) -> float:
    """Policy-independent part of the expected cost at state x_t.

    Equals x_t' calA' calQ calA x_t + trace(calD' calQ calD Sigma_W); the
    trace part does not depend on the state, so cache it via
    :func:`constant_term_pieces` when evaluating repeatedly.
    """
    H, trace_part = constant_term_pieces(lifted, costs, Sigma_W)
    x_t = np.asarray(x_t, dtype=float).reshape(-1)
    return float(x_t @ H @ x_t + trace_part)


def constant_term_pieces(lifted: LiftedDynamics, costs: CostBlocks, Sigma_W: np.ndarray):
    """Return (calA' calQ calA, trace(calD' calQ calD Sigma_W))."""
    Sigma_W = np.asarray(Sigma_W, dtype=float)
    if np.abs(Sigma_W - Sigma_W.T).max() > 1e-9:
        raise ValueError("Sigma_W must be symmetric")
    H = lifted.calA.T @ costs.calQ @ lifted.calA
    DQD = lifted.calD.T @ costs.calQ @ lifted.calD
    return H, float(np.trace(DQD @ Sigma_W))
