"""Saturated-noise moment matrices.

The feedback part of the policy acts on saturated reconstructed noise, so
the objective needs E[e(w) e(w)'], E[w e(w)'] and E[w w'].  The first two
have no closed form for the sigmoid map and are estimated by seeded Monte
Carlo (chunked so the result is independent of how work is partitioned);
the last one is exact for i.i.d. noise.  Estimates can be cached on disk,
keyed by everything they depend on.
"""

import hashlib
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import NoiseModel

CHUNK = 1 << 16
MIN_RECOMMENDED_SAMPLES = 10_000


@dataclass(frozen=True)
class SaturationSpec:
    """Component-wise odd bounded map applied to reconstructed noise.

    kind "sigmoid": xi -> (1 - exp(-xi)) / (1 + exp(-xi)), supremum 1 (phi_max
    is forced to 1).  kind "clamp": clip to [-phi_max, phi_max].
    """

    kind: str = "sigmoid"
    phi_max: float = 1.0

    def __post_init__(self):
        if self.kind not in ("sigmoid", "clamp"):
            raise ValueError(f"unknown saturation kind {self.kind!r}")
        if self.kind == "sigmoid":
            object.__setattr__(self, "phi_max", 1.0)
        elif not self.phi_max > 0:
            raise ValueError(f"phi_max must be positive, got {self.phi_max}")


def saturate(spec: SaturationSpec, w: np.ndarray) -> np.ndarray:
    """Apply the saturation map component-wise."""
    w = np.asarray(w, dtype=float)
    if spec.kind == "sigmoid":
        # (1 - e^-x)/(1 + e^-x) == tanh(x/2), which is overflow-safe.
        return np.tanh(0.5 * w)
    return np.clip(w, -spec.phi_max, spec.phi_max)


@dataclass(frozen=True)
class NoiseMoments:
    """Estimated saturated-noise moments over one horizon.

    Sigma_e       E[e(w) e(w)'],  (N-1)d x (N-1)d
    Sigma_e_prime E[w e(w)'],     Nd x (N-1)d  (w stacks N steps)
    Sigma_W       E[w w'],        Nd x Nd, exact block diagonal
    """

    Sigma_e: np.ndarray
    Sigma_e_prime: np.ndarray
    Sigma_W: np.ndarray
    N: int
    samples: int
    seed: int


def moment_cache_key(noise: NoiseModel, spec: SaturationSpec, N: int,
                     samples: int, seed: int) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(noise.covariance).tobytes())
    h.update(f"|{spec.kind}|{spec.phi_max!r}|{N}|{samples}|{seed}".encode())
    return h.hexdigest()[:16]


def estimate_noise_moments(noise: NoiseModel, spec: SaturationSpec, N: int,
                           samples: int = 1_000_000, seed: int = 0,
                           cache_dir=None) -> NoiseMoments:
    """Estimate the saturated-noise moment matrices for an N-step horizon.

    Sampling is split into fixed-size chunks with per-chunk derived seeds
    and reduced in chunk order, so the result is bit-identical no matter
    how many workers compute the chunks.  If `cache_dir` is given, a
    previously stored estimate with the same key is reused.
    """
    if N < 1:
        raise ValueError(f"horizon N must be >= 1, got {N}")
    if samples < 1:
        raise ValueError("samples must be >= 1")
    if samples < MIN_RECOMMENDED_SAMPLES:
        warnings.warn(
            f"noise-moment estimate from only {samples} samples; "
            f"expect relative errors around {samples ** -0.5:.1e}",
            stacklevel=2,
        )

    path = None
    if cache_dir is not None:
        key = moment_cache_key(noise, spec, N, samples, seed)
        path = Path(cache_dir) / f"noise_moments_{key}.npz"
        if path.exists():
            return load_noise_moments(path)

    d = noise.dim
    ne = (N - 1) * d
    Se = np.zeros((ne, ne))
    Sep = np.zeros((N * d, ne))

    n_chunks = (samples + CHUNK - 1) // CHUNK
    children = np.random.SeedSequence(seed).spawn(n_chunks)
    done = 0
    for c in range(n_chunks):
        size = min(CHUNK, samples - done)
        done += size
        rng = np.random.default_rng(children[c])
        w = noise.sample(rng, size * N).reshape(size, N * d)
        e = saturate(spec, w[:, :ne])
        Se += e.T @ e
        Sep += w.T @ e

    Sigma_e = Se / samples
    Sigma_e = 0.5 * (Sigma_e + Sigma_e.T)
    Sigma_e_prime = Sep / samples
    Sigma_W = np.kron(np.eye(N), noise.covariance)
    mom = NoiseMoments(Sigma_e=Sigma_e, Sigma_e_prime=Sigma_e_prime,
                       Sigma_W=Sigma_W, N=N, samples=samples, seed=seed)
    if path is not None:
        save_noise_moments(mom, path)
    return mom


def save_noise_moments(mom: NoiseMoments, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, Sigma_e=mom.Sigma_e, Sigma_e_prime=mom.Sigma_e_prime,
             Sigma_W=mom.Sigma_W, N=mom.N, samples=mom.samples, seed=mom.seed)


def load_noise_moments(path) -> NoiseMoments:
    with np.load(path) as z:
        return NoiseMoments(
            Sigma_e=z["Sigma_e"], Sigma_e_prime=z["Sigma_e_prime"],
            Sigma_W=z["Sigma_W"], N=int(z["N"]), samples=int(z["samples"]),
            seed=int(z["seed"]),
        )
