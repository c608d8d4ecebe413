"""Erasure-channel models and per-protocol selection-matrix moments.

The control channel drops each packet independently (i.i.d. Bernoulli) or
according to a finite network-state Markov chain that modulates the success
probability.  Three transmission protocols determine how dropouts act on
the stacked control vector; each one has an Nm x Nm diagonal selection
matrix whose first kappa blocks carry the dropout factors:

  per-step ("tp1")  block l gets nu_{t+l}
  burst    ("tp2")  every block gets nu_t (offsets travel once, together)
  retry    ("tp3")  block l gets rho_{t+l} = 1 iff any of nu_t..nu_{t+l} is 1

Blocks beyond kappa are identity: they model the unused tail of the
horizon, which sees no channel.  Feedback terms are transmitted per step
under every protocol, so they are always weighted by the per-step matrix.
"""

import warnings
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

MAX_ENUM_KAPPA = 24


class Protocol(Enum):
    """Transmission protocol; values are the wire/config names."""

    PER_STEP = "tp1"
    BURST = "tp2"
    RETRY = "tp3"

    @classmethod
    def parse(cls, name: str) -> "Protocol":
        key = str(name).strip().lower().replace("_", "-")
        aliases = {
            "tp1": cls.PER_STEP, "per-step": cls.PER_STEP, "sequential": cls.PER_STEP,
            "tp2": cls.BURST, "burst": cls.BURST,
            "tp3": cls.RETRY, "retry": cls.RETRY, "repetitive": cls.RETRY,
        }
        if key not in aliases:
            raise ValueError(f"unknown protocol {name!r} (expected tp1/tp2/tp3)")
        return aliases[key]


@dataclass(frozen=True)
class IIDChannel:
    """I.i.d. Bernoulli dropouts with success probability p in ]0, 1]."""

    p: float

    def __post_init__(self):
        if not 0.0 < self.p <= 1.0:
            raise ValueError(f"success probability must be in ]0, 1], got {self.p}")

    def sampler(self, rng: np.random.Generator) -> "DropoutSampler":
        return _IIDSampler(self.p, rng)


@dataclass(frozen=True)
class MarkovChannel:
    """Network-state channel: a Markov chain over states with per-state success probs.

    At each step the network state first makes a transition, then the
    dropout is Bernoulli with that state's success probability.
    """

    success_probs: np.ndarray
    transitions: np.ndarray
    initial_state: int = 0

    def __post_init__(self):
        ps = np.asarray(self.success_probs, dtype=float).reshape(-1)
        P = np.asarray(self.transitions, dtype=float)
        n = ps.size
        if P.shape != (n, n):
            raise ValueError(f"transition matrix {P.shape} does not match {n} states")
        if np.any(ps <= 0.0) or np.any(ps > 1.0):
            raise ValueError("per-state success probabilities must be in ]0, 1]")
        if np.any(P < 0) or np.abs(P.sum(axis=1) - 1.0).max() > 1e-12:
            raise ValueError("transition matrix rows must be nonnegative and sum to 1")
        if not 0 <= self.initial_state < n:
            raise ValueError(f"initial state {self.initial_state} out of range")
        object.__setattr__(self, "success_probs", ps)
        object.__setattr__(self, "transitions", P)

    @property
    def n_states(self) -> int:
        return self.success_probs.size

    def stationary_distribution(self) -> np.ndarray:
        """Stationary distribution of the network-state chain (left eigenvector)."""
        P = self.transitions
        w, V = np.linalg.eig(P.T)
        i = int(np.argmin(np.abs(w - 1.0)))
        pi = np.real(V[:, i])
        pi = np.abs(pi)
        return pi / pi.sum()

    def sampler(self, rng: np.random.Generator) -> "DropoutSampler":
        return _MarkovSampler(self, rng)


class DropoutSampler:
    """Stateful per-path dropout stream; draw() returns 0 (lost) or 1."""

    def draw(self) -> int:
        raise NotImplementedError


class _IIDSampler(DropoutSampler):
    def __init__(self, p, rng):
        self.p = p
        self.rng = rng

    def draw(self) -> int:
        return int(self.rng.random() < self.p)


class _MarkovSampler(DropoutSampler):
    def __init__(self, channel: MarkovChannel, rng):
        self.channel = channel
        self.rng = rng
        self.state = channel.initial_state
        self._cum = np.cumsum(channel.transitions, axis=1)

    def draw(self) -> int:
        self.state = int(np.searchsorted(self._cum[self.state], self.rng.random()))
        return int(self.rng.random() < self.channel.success_probs[self.state])


def sample_dropouts(channel, horizon: int, rng: np.random.Generator) -> np.ndarray:
    """Draw a dropout sequence nu_0..nu_{horizon-1} from the channel."""
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    sampler = channel.sampler(rng)
    return np.array([sampler.draw() for _ in range(horizon)], dtype=int)


@dataclass(frozen=True)
class DropoutPattern:
    """One realization of the kappa in-interval dropouts and its probability."""

    nu: tuple
    probability: float


def iid_patterns(p: float, kappa: int):
    """All 2^kappa dropout patterns with their i.i.d. Bernoulli probabilities."""
    patterns = []
    for code in range(2 ** kappa):
        nu = tuple((code >> i) & 1 for i in range(kappa))
        prob = float(np.prod([p if b else 1.0 - p for b in nu]))
        patterns.append(DropoutPattern(nu=nu, probability=prob))
    return patterns


def rho_sequence(nu) -> np.ndarray:
    """Offset-availability indicators under retry: rho_l = 1 iff any nu_0..nu_l is 1."""
    nu = np.asarray(nu, dtype=int)
    return np.maximum.accumulate(nu)


def _check_nu(nu, kappa, N):
    nu = np.asarray(nu, dtype=int).reshape(-1)
    if not np.all((nu == 0) | (nu == 1)):
        raise ValueError("dropout vector must be binary")
    if nu.size < kappa:
        raise ValueError(f"need {kappa} dropout values, got {nu.size}")
    if kappa > N:
        raise ValueError(f"kappa={kappa} exceeds horizon N={N}")
    return nu


def _diag_selection(factors, m):
    return np.diag(np.repeat(np.asarray(factors, dtype=float), m))


def build_selection_S(nu, N: int, m: int) -> np.ndarray:
    """Per-step selection: block l is nu_{t+l} I_m for l < kappa, identity after."""
    kappa = np.asarray(nu).size
    nu = _check_nu(nu, kappa, N)
    factors = np.concatenate([nu.astype(float), np.ones(N - kappa)])
    return _diag_selection(factors, m)


def build_selection_K(nu, N: int, m: int, kappa: int) -> np.ndarray:
    """Burst selection: the first kappa blocks all share the single dropout nu_t."""
    nu = _check_nu(nu, 1, N)
    if kappa > N:
        raise ValueError(f"kappa={kappa} exceeds horizon N={N}")
    factors = np.concatenate([np.full(kappa, float(nu[0])), np.ones(N - kappa)])
    return _diag_selection(factors, m)


def build_selection_G(nu, N: int, m: int, kappa: int) -> np.ndarray:
    """Retry selection: block l carries rho_{t+l}; identity beyond kappa."""
    nu = _check_nu(nu, kappa, N)
    rho = rho_sequence(nu[:kappa]).astype(float)
    factors = np.concatenate([rho, np.ones(N - kappa)])
    return _diag_selection(factors, m)


def build_selection(protocol: Protocol, nu, N: int, m: int, kappa: int) -> np.ndarray:
    if protocol is Protocol.PER_STEP:
        return build_selection_S(np.asarray(nu)[:kappa], N, m)
    if protocol is Protocol.BURST:
        return build_selection_K(nu, N, m, kappa)
    return build_selection_G(nu, N, m, kappa)


def _factors(protocol: Protocol, nu_rows: np.ndarray, N: int, kappa: int) -> np.ndarray:
    """Diagonal scalars of the selection matrix, one row per sampled pattern."""
    n = nu_rows.shape[0]
    f = np.ones((n, N))
    if protocol is Protocol.PER_STEP:
        f[:, :kappa] = nu_rows
    elif protocol is Protocol.BURST:
        f[:, :kappa] = nu_rows[:, [0]]
    else:
        f[:, :kappa] = np.maximum.accumulate(nu_rows, axis=1)
    return f


@dataclass(frozen=True)
class ProtocolMoments:
    """First/second moments of the selection matrices entering the objective.

    mu     = E[X]           for the protocol's own matrix X in {S, K, G}
    Sigma  = E[X' M X]
    mu_S   = E[S],  Sigma_S = E[S' M S]: the per-step moments, needed for the
    feedback terms under every protocol.
    """

    protocol: Protocol
    mu: np.ndarray
    Sigma: np.ndarray
    mu_S: np.ndarray
    Sigma_S: np.ndarray

    def __post_init__(self):
        for name, S in (("Sigma", self.Sigma), ("Sigma_S", self.Sigma_S)):
            if np.abs(S - S.T).max() > 1e-9:
                raise ValueError(f"{name} must be symmetric")
            if np.linalg.eigvalsh(S).min() < -1e-9:
                raise ValueError(f"{name} must be PSD")
        dg = np.diag(self.mu)
        if dg.min() < -1e-12 or dg.max() > 1.0 + 1e-12:
            raise ValueError("diagonal of mu must lie in [0, 1]")


def _expand_blocks(C: np.ndarray, m: int) -> np.ndarray:
    """Lift an N x N scalar-factor matrix to Nm x Nm by m-fold block repetition."""
    return np.repeat(np.repeat(C, m, axis=0), m, axis=1)


def _moments_from_factors(protocol, fX, fS, M, N, m, weights=None) -> ProtocolMoments:
    if weights is None:
        # Plain averages reduce by sum-then-divide so that degenerate cases
        # (all factors equal) reproduce the enumerated moments bit-exactly.
        n = fX.shape[0]
        Ef, EfS = fX.mean(axis=0), fS.mean(axis=0)
        Eff, EffS = fX.T @ fX / n, fS.T @ fS / n
    else:
        Ef = weights @ fX
        Eff = (fX * weights[:, None]).T @ fX
        EfS = weights @ fS
        EffS = (fS * weights[:, None]).T @ fS
    mu = _diag_selection(Ef, m)
    Sigma = _expand_blocks(Eff, m) * M
    mu_S = _diag_selection(EfS, m)
    Sigma_S = _expand_blocks(EffS, m) * M
    # Empirical/enumerated second moments are symmetric up to rounding only.
    Sigma = 0.5 * (Sigma + Sigma.T)
    Sigma_S = 0.5 * (Sigma_S + Sigma_S.T)
    return ProtocolMoments(protocol=protocol, mu=mu, Sigma=Sigma, mu_S=mu_S, Sigma_S=Sigma_S)


def exact_protocol_moments(protocol: Protocol, channel: IIDChannel, M: np.ndarray,
                           N: int, m: int, kappa: int) -> ProtocolMoments:
    """Exact moments by enumeration of all 2^kappa dropout patterns (i.i.d. channel).

    M is the positive-semidefinite kernel the second moment is taken
    against (the stacked control weight calB' calQ calB + calR).
    """
    if not isinstance(channel, IIDChannel):
        raise TypeError("exact enumeration needs an i.i.d. channel; "
                        "use mc_protocol_moments for network-state channels")
    if kappa > MAX_ENUM_KAPPA:
        raise ValueError(
            f"kappa={kappa} would enumerate 2^{kappa} patterns; "
            "use mc_protocol_moments instead")
    if kappa > N:
        raise ValueError(f"kappa={kappa} exceeds horizon N={N}")
    M = np.asarray(M, dtype=float)
    if M.shape != (N * m, N * m):
        raise ValueError(f"kernel M must be {N * m}x{N * m}, got {M.shape}")

    patterns = iid_patterns(channel.p, kappa)
    nu_rows = np.array([pat.nu for pat in patterns], dtype=float)
    weights = np.array([pat.probability for pat in patterns])
    fX = _factors(protocol, nu_rows, N, kappa)
    fS = _factors(Protocol.PER_STEP, nu_rows, N, kappa)
    return _moments_from_factors(protocol, fX, fS, M, N, m, weights=weights)


def mc_protocol_moments(protocol: Protocol, channel, M: np.ndarray, N: int, m: int,
                        kappa: int, samples: int, seed: int) -> ProtocolMoments:
    """Monte Carlo twin of :func:`exact_protocol_moments`; also serves Markov channels.

    For a network-state channel each sample's initial state is drawn from
    the stationary distribution, so the estimate reflects long-run interval
    statistics.  Deterministic for a given seed.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    if kappa > N:
        raise ValueError(f"kappa={kappa} exceeds horizon N={N}")
    M = np.asarray(M, dtype=float)
    rng = np.random.default_rng(seed)

    if isinstance(channel, IIDChannel):
        nu_rows = (rng.random((samples, kappa)) < channel.p).astype(float)
    elif isinstance(channel, MarkovChannel):
        pi = channel.stationary_distribution()
        state = rng.choice(channel.n_states, size=samples, p=pi)
        cum = np.cumsum(channel.transitions, axis=1)
        nu_rows = np.empty((samples, kappa))
        for l in range(kappa):
            u = rng.random(samples)
            state = (u[:, None] > cum[state]).sum(axis=1)
            nu_rows[:, l] = rng.random(samples) < channel.success_probs[state]
    else:
        raise TypeError(f"unsupported channel type {type(channel).__name__}")

    fX = _factors(protocol, nu_rows, N, kappa)
    fS = _factors(Protocol.PER_STEP, nu_rows, N, kappa)
    return _moments_from_factors(protocol, fX, fS, M, N, m)
