import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dropsmpc.channel import (IIDChannel, MarkovChannel, Protocol,
                              build_selection, build_selection_G,
                              build_selection_K, build_selection_S,
                              exact_protocol_moments, iid_patterns,
                              mc_protocol_moments, rho_sequence,
                              sample_dropouts)


class TestSampling:
    def test_iid_p_one_all_successes(self):
        nu = sample_dropouts(IIDChannel(1.0), 50, np.random.default_rng(0))
        assert np.all(nu == 1)

    def test_iid_empirical_rate(self):
        nu = sample_dropouts(IIDChannel(0.8), 100_000, np.random.default_rng(1))
        assert abs(nu.mean() - 0.8) < 0.005

    def test_markov_stationary_rate(self):
        # Two-state chain; long-run success rate from the stationary law.
        chan = MarkovChannel(success_probs=[0.8, 0.4],
                             transitions=[[0.7, 0.3], [0.9, 0.1]])
        P = np.asarray(chan.transitions)
        w, V = np.linalg.eig(P.T)
        pi = np.abs(np.real(V[:, np.argmin(np.abs(w - 1))]))
        pi /= pi.sum()
        expected = pi @ np.array([0.8, 0.4])
        assert np.allclose(chan.stationary_distribution(), pi)

        nu = sample_dropouts(chan, 100_000, np.random.default_rng(2))
        assert abs(nu.mean() - expected) < 0.01

    def test_markov_validation(self):
        with pytest.raises(ValueError, match="sum to 1"):
            MarkovChannel(success_probs=[0.5], transitions=[[0.9]])
        with pytest.raises(ValueError, match="]0, 1]"):
            MarkovChannel(success_probs=[0.0], transitions=[[1.0]])

    def test_iid_probability_range(self):
        with pytest.raises(ValueError):
            IIDChannel(0.0)
        with pytest.raises(ValueError):
            IIDChannel(1.2)

    def test_pattern_probabilities_sum_to_one(self):
        for p in (0.3, 0.8, 1.0):
            pats = iid_patterns(p, 4)
            assert len(pats) == 16
            assert abs(sum(q.probability for q in pats) - 1.0) < 1e-12


class TestSelectionMatrices:
    def test_all_successes_are_identity(self):
        for proto in Protocol:
            X = build_selection(proto, [1, 1], N=3, m=2, kappa=2)
            assert np.array_equal(X, np.eye(6))

    def test_per_step_structure(self):
        X = build_selection_S([1, 0], N=3, m=2)
        assert np.array_equal(np.diag(X), [1, 1, 0, 0, 1, 1])

    def test_per_step_total_loss_single_step(self):
        assert np.array_equal(build_selection_S([0], N=1, m=2), np.zeros((2, 2)))

    def test_burst_structure(self):
        X = build_selection_K([0], N=3, m=1, kappa=2)
        assert np.array_equal(np.diag(X), [0, 0, 1])
        assert np.array_equal(build_selection_K([0], N=2, m=1, kappa=2),
                              np.zeros((2, 2)))

    def test_retry_recovers_after_first_drop(self):
        X = build_selection_G([0, 1], N=3, m=1, kappa=2)
        assert np.array_equal(np.diag(X), [0, 1, 1])
        X = build_selection_G([0, 0], N=3, m=1, kappa=2)
        assert np.array_equal(np.diag(X), [0, 0, 1])

    def test_kappa_larger_than_horizon_rejected(self):
        with pytest.raises(ValueError, match="exceeds"):
            build_selection_S([1, 1, 1], N=2, m=1)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(0, 1), min_size=1, max_size=8))
    def test_rho_is_first_success_indicator(self, nu):
        rho = rho_sequence(nu)
        assert np.all(np.diff(rho) >= 0)
        seen = 0
        for l, v in enumerate(nu):
            seen = max(seen, v)
            assert rho[l] == seen

    def test_example_control_sequences(self):
        # N=3, kappa=2, scalar controls: compare the matrix form against the
        # per-step formulas written out by hand for every dropout pattern.
        N, m, kappa, d = 3, 1, 2, 1
        rng = np.random.default_rng(5)
        eta = rng.standard_normal(3)
        th10, th20, th21 = rng.standard_normal(3)
        theta = np.zeros((3, 2))
        theta[1, 0] = th10
        theta[2, 0], theta[2, 1] = th20, th21
        e = rng.standard_normal(2)

        for nu0, nu1 in itertools.product((0, 1), repeat=2):
            nu = [nu0, nu1]
            fb = theta @ e
            by_hand = {
                Protocol.PER_STEP: [
                    nu0 * eta[0],
                    nu1 * eta[1] + nu1 * th10 * e[0],
                    eta[2] + th20 * e[0] + th21 * e[1],
                ],
                Protocol.BURST: [
                    nu0 * eta[0],
                    nu0 * eta[1] + nu1 * th10 * e[0],
                    eta[2] + th20 * e[0] + th21 * e[1],
                ],
                Protocol.RETRY: [
                    nu0 * eta[0],
                    (nu1 + (1 - nu1) * nu0) * eta[1] + nu1 * th10 * e[0],
                    eta[2] + th20 * e[0] + th21 * e[1],
                ],
            }
            S = build_selection(Protocol.PER_STEP, nu, N, m, kappa)
            for proto, expected in by_hand.items():
                X = build_selection(proto, nu, N, m, kappa)
                u_a = X @ eta + S @ fb
                assert np.allclose(u_a, expected, atol=1e-12), (proto, nu)


class TestExactMoments:
    def test_no_dropouts_degenerate(self, rot3, rot3_costs):
        M = np.eye(4)
        for proto in Protocol:
            pm = exact_protocol_moments(proto, IIDChannel(1.0), M, N=4, m=1, kappa=3)
            assert np.array_equal(pm.mu, np.eye(4))
            assert np.allclose(pm.Sigma, M, atol=1e-15)

    def test_per_step_second_moments(self):
        # The scalar dropout moments are E[nu_i^2]=p and E[nu_i nu_j]=p^2;
        # they multiply the corresponding entries of the kernel M, so the
        # identity kernel keeps only the diagonal.
        pm = exact_protocol_moments(Protocol.PER_STEP, IIDChannel(0.5),
                                    np.eye(2), N=2, m=1, kappa=2)
        assert np.allclose(pm.Sigma, np.diag([0.5, 0.5]), atol=1e-15)
        pm1 = exact_protocol_moments(Protocol.PER_STEP, IIDChannel(0.5),
                                     np.ones((2, 2)), N=2, m=1, kappa=2)
        assert np.allclose(pm1.Sigma, [[0.5, 0.25], [0.25, 0.5]], atol=1e-15)

    def test_retry_mean_is_first_success_probability(self):
        pm = exact_protocol_moments(Protocol.RETRY, IIDChannel(0.5),
                                    np.eye(2), N=2, m=1, kappa=2)
        assert pm.mu[1, 1] == pytest.approx(1 - 0.5 ** 2)
        assert pm.mu[0, 0] == pytest.approx(0.5)

    def test_matches_explicit_matrix_average(self):
        # Oracle: build every selection matrix explicitly and average.
        rng = np.random.default_rng(9)
        N, m, kappa, p = 3, 2, 2, 0.35
        G = rng.standard_normal((N * m, N * m))
        M = G @ G.T
        for proto in Protocol:
            pm = exact_protocol_moments(proto, IIDChannel(p), M, N, m, kappa)
            mu = np.zeros((N * m, N * m))
            Sig = np.zeros((N * m, N * m))
            for pat in iid_patterns(p, kappa):
                X = build_selection(proto, pat.nu, N, m, kappa)
                mu += pat.probability * X
                Sig += pat.probability * X.T @ M @ X
            assert np.abs(pm.mu - mu).max() < 1e-12
            assert np.abs(pm.Sigma - Sig).max() < 1e-12

    def test_markov_channel_refused(self):
        chan = MarkovChannel(success_probs=[0.8, 0.4],
                             transitions=[[0.7, 0.3], [0.9, 0.1]])
        with pytest.raises(TypeError, match="i.i.d"):
            exact_protocol_moments(Protocol.PER_STEP, chan, np.eye(2), 2, 1, 2)

    def test_huge_kappa_refused(self):
        with pytest.raises(ValueError, match="mc_protocol_moments"):
            exact_protocol_moments(Protocol.PER_STEP, IIDChannel(0.5),
                                   np.eye(30), N=30, m=1, kappa=30)


class TestMonteCarloMoments:
    def test_p_one_exact(self):
        M = np.ones((3, 3))
        ex = exact_protocol_moments(Protocol.BURST, IIDChannel(1.0), M, 3, 1, 2)
        mc = mc_protocol_moments(Protocol.BURST, IIDChannel(1.0), M, 3, 1, 2,
                                 samples=100, seed=0)
        assert np.array_equal(ex.mu, mc.mu)
        assert np.array_equal(ex.Sigma, mc.Sigma)

    def test_agreement_with_enumeration(self):
        rng = np.random.default_rng(2)
        G = rng.standard_normal((3, 3))
        M = G @ G.T
        samples = 100_000
        bound = 5.0 * samples ** -0.5 * np.linalg.norm(M, 2)
        for proto in Protocol:
            ex = exact_protocol_moments(proto, IIDChannel(0.8), M, 3, 1, 2)
            mc = mc_protocol_moments(proto, IIDChannel(0.8), M, 3, 1, 2,
                                     samples=samples, seed=3)
            assert np.abs(ex.Sigma - mc.Sigma).max() < bound
            assert np.abs(ex.mu - mc.mu).max() < bound

    def test_markov_mean_between_state_rates(self):
        chan = MarkovChannel(success_probs=[0.8, 0.4],
                             transitions=[[0.7, 0.3], [0.9, 0.1]])
        pm = mc_protocol_moments(Protocol.PER_STEP, chan, np.eye(3), 3, 1, 2,
                                 samples=100_000, seed=4)
        diag = np.diag(pm.mu)[:2]
        assert np.all(diag > 0.4) and np.all(diag < 0.8)

    def test_deterministic_given_seed(self):
        a = mc_protocol_moments(Protocol.RETRY, IIDChannel(0.6), np.eye(2),
                                2, 1, 2, samples=5000, seed=7)
        b = mc_protocol_moments(Protocol.RETRY, IIDChannel(0.6), np.eye(2),
                                2, 1, 2, samples=5000, seed=7)
        assert np.array_equal(a.Sigma, b.Sigma)
        assert np.array_equal(a.mu, b.mu)
