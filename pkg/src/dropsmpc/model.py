"""Plant model: block-decomposed linear dynamics and reachability objects.

The plant matrix is supplied already split into an orthogonal block (all
eigenvalues on the unit circle, semi-simple) and a strictly Schur-stable
block.  This module only verifies that structure and derives the
reachability matrix / index of the orthogonal part, which the stability
constraints and the fallback input are built on.
"""

from dataclasses import dataclass

import numpy as np

# Default tolerances for structural checks; rank decisions use a relative
# singular-value threshold.
ORTHO_TOL = 1e-9
SCHUR_MARGIN = 1e-9
RANK_RTOL = 1e-9
PINV_RTOL = 1e-12


class DimensionError(ValueError):
    """Shape mismatch between supplied matrices, naming the offending dims."""


@dataclass(frozen=True)
class LinearSystem:
    """Discrete-time plant x+ = A x + B u_applied + w with |u|_inf <= u_max.

    A must be block diagonal: an orthogonal d_o x d_o block followed by a
    Schur-stable d_s x d_s block (d = d_o + d_s).  The structure is checked
    by :func:`verify_decomposition`, not by the constructor.
    """

    A: np.ndarray
    B: np.ndarray
    u_max: float
    d_o: int
    d_s: int

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        B = np.asarray(self.B, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise DimensionError(f"A must be square, got {A.shape}")
        if B.ndim != 2 or B.shape[0] != A.shape[0]:
            raise DimensionError(
                f"B row count {B.shape[0] if B.ndim == 2 else B.shape} "
                f"does not match state dimension {A.shape[0]}"
            )
        if self.d_o < 0 or self.d_s < 0 or self.d_o + self.d_s != A.shape[0]:
            raise DimensionError(
                f"block sizes d_o={self.d_o}, d_s={self.d_s} do not add up "
                f"to d={A.shape[0]}"
            )
        if not self.u_max > 0:
            raise ValueError(f"u_max must be positive, got {self.u_max}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def d(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def A_o(self) -> np.ndarray:
        return self.A[: self.d_o, : self.d_o]

    @property
    def A_s(self) -> np.ndarray:
        return self.A[self.d_o :, self.d_o :]

    @property
    def B_o(self) -> np.ndarray:
        return self.B[: self.d_o, :]


@dataclass(frozen=True)
class NoiseModel:
    """Zero-mean i.i.d. Gaussian process noise with a fixed covariance."""

    covariance: np.ndarray

    def __post_init__(self):
        cov = np.asarray(self.covariance, dtype=float)
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
            raise DimensionError(f"covariance must be square, got {cov.shape}")
        if np.abs(cov - cov.T).max() > 1e-12:
            raise ValueError("covariance must be symmetric")
        eigs = np.linalg.eigvalsh(cov)
        if eigs.min() < -1e-12:
            raise ValueError(f"covariance must be PSD, min eigenvalue {eigs.min():g}")
        object.__setattr__(self, "covariance", cov)
        # Cholesky-like factor for sampling; eigh handles the PSD-singular case.
        w, V = np.linalg.eigh(cov)
        factor = V * np.sqrt(np.clip(w, 0.0, None))
        object.__setattr__(self, "_factor", factor)

    @property
    def dim(self) -> int:
        return self.covariance.shape[0]

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Draw `size` i.i.d. noise vectors, shape (size, d)."""
        z = rng.standard_normal((size, self.dim))
        return z @ self._factor.T


@dataclass(frozen=True)
class ReachabilityData:
    """Reachability matrix of the orthogonal block and its pseudo-inverse."""

    kappa: int
    R_kappa: np.ndarray
    R_kappa_pinv: np.ndarray


@dataclass(frozen=True)
class DecompositionReport:
    """Result of :func:`verify_decomposition`."""

    ok: bool
    orthogonality_residual: float
    schur_spectral_radius: float
    off_block_residual: float
    messages: tuple

    def __str__(self):
        status = "pass" if self.ok else "FAIL"
        lines = [
            f"decomposition check: {status}",
            f"  orthogonality residual : {self.orthogonality_residual:.3e}",
            f"  Schur spectral radius  : {self.schur_spectral_radius:.6f}",
            f"  off-block residual     : {self.off_block_residual:.3e}",
        ]
        lines += [f"  - {m}" for m in self.messages]
        return "\n".join(lines)


def verify_decomposition(sys: LinearSystem, tol: float = ORTHO_TOL) -> DecompositionReport:
    """Check the orthogonal/Schur block structure of the plant matrix.

    Passes iff the top-left d_o block is orthogonal within `tol`, the
    bottom-right d_s block has spectral radius < 1 - `tol`, and the
    off-diagonal blocks vanish.  A pass certifies the plant is Lyapunov
    stable with semi-simple unit-circle eigenvalues.
    """
    A_o, A_s = sys.A_o, sys.A_s
    messages = []

    if sys.d_o > 0:
        ortho_res = np.abs(A_o.T @ A_o - np.eye(sys.d_o)).max()
    else:
        ortho_res = 0.0
    if ortho_res > tol:
        messages.append(
            f"top-left {sys.d_o}x{sys.d_o} block is not orthogonal "
            f"(residual {ortho_res:.3e} > {tol:g})"
        )

    if sys.d_s > 0:
        radius = np.abs(np.linalg.eigvals(A_s)).max()
    else:
        radius = 0.0
    if radius >= 1.0 - SCHUR_MARGIN:
        messages.append(
            f"bottom-right {sys.d_s}x{sys.d_s} block is not Schur stable "
            f"within margin (spectral radius {radius:.9f})"
        )

    off = 0.0
    if sys.d_o > 0 and sys.d_s > 0:
        off = max(
            np.abs(sys.A[: sys.d_o, sys.d_o :]).max(),
            np.abs(sys.A[sys.d_o :, : sys.d_o]).max(),
        )
    if off > tol:
        messages.append(f"off-diagonal blocks are nonzero (max |entry| {off:.3e})")

    return DecompositionReport(
        ok=not messages,
        orthogonality_residual=float(ortho_res),
        schur_spectral_radius=float(radius),
        off_block_residual=float(off),
        messages=tuple(messages),
    )


def reachability_matrix(A_o: np.ndarray, M: np.ndarray, k: int) -> np.ndarray:
    """Return [A_o^(k-1) M | A_o^(k-2) M | ... | M]."""
    A_o = np.asarray(A_o, dtype=float)
    M = np.asarray(M, dtype=float)
    if k < 1:
        raise ValueError(f"step count k must be >= 1, got {k}")
    if A_o.ndim != 2 or A_o.shape[0] != A_o.shape[1]:
        raise DimensionError(f"A_o must be square, got {A_o.shape}")
    if M.shape[0] != A_o.shape[0]:
        raise DimensionError(
            f"M has {M.shape[0]} rows but A_o is {A_o.shape[0]}x{A_o.shape[1]}"
        )
    blocks = []
    power = M
    for _ in range(k):
        blocks.append(power)
        power = A_o @ power
    return np.hstack(blocks[::-1])


def reachability_index(A_o: np.ndarray, B_o: np.ndarray, rank_rtol: float = RANK_RTOL) -> int:
    """Smallest k such that the k-step reachability matrix has full row rank.

    Rank is decided from singular values with the relative threshold
    `rank_rtol * sigma_max`.  Raises if the pair is not reachable within
    d_o steps (Cayley-Hamilton bounds the index by d_o).
    """
    d_o = np.asarray(A_o).shape[0]
    if d_o == 0:
        raise ValueError("orthogonal block is empty; no reachability index exists")
    for k in range(1, d_o + 1):
        R = reachability_matrix(A_o, B_o, k)
        sv = np.linalg.svd(R, compute_uv=False)
        rank = int(np.count_nonzero(sv > rank_rtol * sv[0])) if sv.size else 0
        if rank == d_o:
            return k
    raise ValueError(f"pair not reachable within {d_o} steps")


def pseudo_inverse(M: np.ndarray, rtol: float = PINV_RTOL) -> np.ndarray:
    """Moore-Penrose pseudo-inverse via SVD with relative cutoff rtol*sigma_max."""
    M = np.asarray(M, dtype=float)
    if M.size == 0 or not np.any(M):
        return np.zeros(M.T.shape)
    return np.linalg.pinv(M, rcond=rtol)


def reachability_data(sys: LinearSystem, rank_rtol: float = RANK_RTOL) -> ReachabilityData:
    """Compute kappa, R_kappa and R_kappa^+ for the orthogonal subsystem."""
    kappa = reachability_index(sys.A_o, sys.B_o, rank_rtol)
    R = reachability_matrix(sys.A_o, sys.B_o, kappa)
    return ReachabilityData(kappa=kappa, R_kappa=R, R_kappa_pinv=pseudo_inverse(R))
