import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dropsmpc.model import NoiseModel
from dropsmpc.moments import (NoiseMoments, SaturationSpec,
                              estimate_noise_moments, load_noise_moments,
                              moment_cache_key, saturate, save_noise_moments)


class TestSaturate:
    def test_zero_maps_to_zero(self):
        spec = SaturationSpec(kind="sigmoid")
        assert np.array_equal(saturate(spec, np.zeros(4)), np.zeros(4))

    def test_sigmoid_limits(self):
        spec = SaturationSpec(kind="sigmoid")
        x = np.array([10.0])
        expected = (1 - np.exp(-10.0)) / (1 + np.exp(-10.0))
        assert saturate(spec, x)[0] == pytest.approx(expected, abs=1e-15)
        assert saturate(spec, x)[0] > 0.9999
        assert abs(saturate(spec, np.array([1e6]))[0]) <= 1.0

    def test_clamp(self):
        spec = SaturationSpec(kind="clamp", phi_max=2.0)
        assert np.array_equal(saturate(spec, np.array([3.0, -0.5])),
                              np.array([2.0, -0.5]))

    def test_sigmoid_forces_unit_bound(self):
        spec = SaturationSpec(kind="sigmoid", phi_max=5.0)
        assert spec.phi_max == 1.0

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            SaturationSpec(kind="tanh")

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=8),
           st.sampled_from(["sigmoid", "clamp"]))
    def test_odd_and_bounded(self, w, kind):
        spec = SaturationSpec(kind=kind, phi_max=1.5)
        w = np.array(w)
        assert np.array_equal(saturate(spec, -w), -saturate(spec, w))
        assert np.abs(saturate(spec, w)).max() <= spec.phi_max


class TestEstimateNoiseMoments:
    def test_zero_covariance_gives_zero_moments(self):
        nm = estimate_noise_moments(NoiseModel(np.zeros((2, 2))),
                                    SaturationSpec(), N=3, samples=20_000, seed=0)
        assert not nm.Sigma_e.any()
        assert not nm.Sigma_e_prime.any()
        assert not nm.Sigma_W.any()

    def test_sigma_w_exact_block_diagonal(self):
        cov = np.array([[2.0, 0.5], [0.5, 1.0]])
        nm = estimate_noise_moments(NoiseModel(cov), SaturationSpec(), N=3,
                                    samples=20_000, seed=0)
        assert np.array_equal(nm.Sigma_W, np.kron(np.eye(3), cov))

    def test_scalar_sigmoid_two_seed_agreement(self):
        # Independent estimates with different seeds as oracles of each other.
        noise = NoiseModel(np.eye(1))
        samples = 400_000
        a = estimate_noise_moments(noise, SaturationSpec(), N=2,
                                   samples=samples, seed=1)
        b = estimate_noise_moments(noise, SaturationSpec(), N=2,
                                   samples=samples, seed=2)
        tol = 3.0 * samples ** -0.5
        assert abs(a.Sigma_e[0, 0] - b.Sigma_e[0, 0]) < tol
        assert abs(a.Sigma_e_prime[0, 0] - b.Sigma_e_prime[0, 0]) < tol
        # E[xi phi(xi)] > 0 for an odd increasing map of a symmetric variable.
        assert a.Sigma_e_prime[0, 0] > 0.1
        assert a.Sigma_e_prime[1, 0] == pytest.approx(0.0, abs=tol)

    def test_benchmark_moments_block_structure(self, rot3_noise):
        samples = 200_000
        nm = estimate_noise_moments(rot3_noise, SaturationSpec(), N=4,
                                    samples=samples, seed=3)
        bound = 5.0 * samples ** -0.5
        # Temporal independence kills every off-diagonal time block.
        for i in range(3):
            for j in range(3):
                blk = nm.Sigma_e[3 * i : 3 * (i + 1), 3 * j : 3 * (j + 1)]
                if i != j:
                    assert np.abs(blk).max() < bound
                else:
                    assert np.linalg.eigvalsh(blk).min() > 0
        diag = nm.Sigma_e_prime[:9][np.arange(9), np.arange(9)]
        assert np.all(diag > 0)

    def test_bit_identical_given_seed(self, rot3_noise):
        a = estimate_noise_moments(rot3_noise, SaturationSpec(), N=3,
                                   samples=150_000, seed=5)
        b = estimate_noise_moments(rot3_noise, SaturationSpec(), N=3,
                                   samples=150_000, seed=5)
        assert np.array_equal(a.Sigma_e, b.Sigma_e)
        assert np.array_equal(a.Sigma_e_prime, b.Sigma_e_prime)

    def test_warns_below_recommended_samples(self):
        with pytest.warns(UserWarning, match="samples"):
            estimate_noise_moments(NoiseModel(np.eye(1)), SaturationSpec(),
                                   N=2, samples=100, seed=0)

    def test_psd_and_symmetric(self, rot3_noise):
        nm = estimate_noise_moments(rot3_noise, SaturationSpec(), N=3,
                                    samples=50_000, seed=6)
        assert np.abs(nm.Sigma_e - nm.Sigma_e.T).max() < 1e-15
        assert np.linalg.eigvalsh(nm.Sigma_e).min() > -1e-9


class TestCache:
    def test_roundtrip(self, tmp_path, rot3_noise):
        nm = estimate_noise_moments(rot3_noise, SaturationSpec(), N=3,
                                    samples=20_000, seed=7)
        p = tmp_path / "m.npz"
        save_noise_moments(nm, p)
        back = load_noise_moments(p)
        assert np.array_equal(back.Sigma_e, nm.Sigma_e)
        assert np.array_equal(back.Sigma_e_prime, nm.Sigma_e_prime)
        assert back.samples == nm.samples and back.seed == nm.seed

    def test_cache_dir_reuse(self, tmp_path, rot3_noise):
        kw = dict(noise=rot3_noise, spec=SaturationSpec(), N=3,
                  samples=20_000, seed=8, cache_dir=tmp_path)
        a = estimate_noise_moments(**kw)
        files = list(tmp_path.glob("noise_moments_*.npz"))
        assert len(files) == 1
        b = estimate_noise_moments(**kw)
        assert np.array_equal(a.Sigma_e, b.Sigma_e)

    def test_key_depends_on_inputs(self, rot3_noise):
        spec = SaturationSpec()
        k1 = moment_cache_key(rot3_noise, spec, 3, 1000, 0)
        assert k1 != moment_cache_key(rot3_noise, spec, 4, 1000, 0)
        assert k1 != moment_cache_key(rot3_noise, spec, 3, 2000, 0)
        assert k1 != moment_cache_key(rot3_noise, spec, 3, 1000, 1)
        assert k1 != moment_cache_key(NoiseModel(np.eye(3)), spec, 3, 1000, 0)
        assert k1 != moment_cache_key(rot3_noise,
                                      SaturationSpec(kind="clamp", phi_max=1.0),
                                      3, 1000, 0)
