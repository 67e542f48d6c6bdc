"""Tests for the running-consensus recursion and the benchmark detectors."""

import math

import numpy as np
import pytest

from consdetect.core.detectors import (
    closed_form_state,
    centralized_error_probability,
    consensus_step,
    decide,
    eta_sample,
    initial_state,
    log_centralized_error_probability,
    log_no_cooperation_error_probability,
    no_cooperation_error_probability,
)
from consdetect.core.errors import DomainError
from consdetect.core.gaussian import RngSeed, q_function
from consdetect.core.models import LinkFailureMetropolis, ObservationModel
from consdetect.core.network import geometric_supergraph, sample_weight
from consdetect.core.observation import derive_stats, equivalent_uncorrelated_model, llr, sensor_llrs


@pytest.fixture
def stats():
    """Three independent sensors with different SNRs."""
    model = ObservationModel.from_arrays(np.zeros(3), np.array([1.0, 0.5, 2.0]), np.diag([1.0, 0.5, 2.0]))
    return derive_stats(model)


@pytest.fixture
def link_model():
    """Random link failures on a 6-node geometric supergraph."""
    return LinkFailureMetropolis(graph=geometric_supergraph(6, 0.7, 0.5, RngSeed(master_seed=12)))


def _run(etas, weights):
    state = initial_state(etas[0])
    for w, eta in zip(weights, etas[1:]):
        state = consensus_step(state, w, eta)
    return state


class TestRecursion:
    """The running consensus update and its closed form."""

    def test_initial_state(self):
        """x(1) = eta(1)."""
        state = initial_state(np.array([0.5, -1.0]))
        assert state.k == 1
        np.testing.assert_array_equal(state.x, [0.5, -1.0])

    def test_identity_weights_average_in_time(self):
        """With W = I every sensor keeps the running mean of its own increments."""
        etas = np.random.default_rng(0).standard_normal((8, 3))
        state = _run(list(etas), [np.eye(3)] * 7)
        assert state.k == 8
        np.testing.assert_allclose(state.x, etas.mean(axis=0), atol=1e-12)

    def test_closed_form_matches_recursion(self, link_model):
        """Unrolling the recursion gives the closed form for k = 2..10."""
        gen = np.random.default_rng(1)
        etas = list(gen.standard_normal((10, 6)))
        weights = [sample_weight(link_model, RngSeed(master_seed=99, stream_index=s)) for s in range(9)]
        for k in range(2, 11):
            expected = closed_form_state(weights[: k - 1], etas[:k])
            np.testing.assert_allclose(_run(etas[:k], weights[: k - 1]).x, expected, atol=1e-12)

    def test_closed_form_random_instances(self):
        """Closed form and recursion agree on 100 random instances with N <= 5 and k <= 20."""
        gen = np.random.default_rng(31)
        for _ in range(100):
            n = int(gen.integers(1, 6))
            k = int(gen.integers(2, 21))
            etas = list(gen.normal(scale=3.0, size=(k, n)))
            weights = []
            for _ in range(k - 1):
                w = gen.random((n, n))
                weights.append(w / w.sum(axis=1, keepdims=True))
            np.testing.assert_allclose(_run(etas, weights).x, closed_form_state(weights, etas), rtol=1e-10, atol=1e-12)

    def test_mirrored_noise_negates_trajectory(self, stats):
        """Noise z under H0 and -z under H1 give exactly opposite states at every step."""
        gen = np.random.default_rng(8)
        noise = gen.standard_normal((15, 3)) @ np.linalg.cholesky(stats.s_eta).T
        eta_h0 = list(stats.m_eta0 + noise)
        eta_h1 = list(stats.m_eta1 - noise)
        for a, b in zip(eta_h0, eta_h1):
            np.testing.assert_array_equal(b, -a)

        weights = [w / w.sum(axis=1, keepdims=True) for w in gen.random((14, 3, 3))]
        h0 = initial_state(eta_h0[0])
        h1 = initial_state(eta_h1[0])
        for w, a, b in zip(weights, eta_h0[1:], eta_h1[1:]):
            h0 = consensus_step(h0, w, a)
            h1 = consensus_step(h1, w, b)
            np.testing.assert_array_equal(h1.x, -h0.x)

    def test_single_fused_sensor_is_centralized(self):
        """N = 1 with W = J decides on the sign of the summed network LLRs."""
        model = equivalent_uncorrelated_model(1, 0.05)
        stats = derive_stats(model)
        gen = np.random.default_rng(13)
        ys = model.mean0 + gen.normal(scale=math.sqrt(model.covariance[0, 0]), size=(40, 1))
        etas = [sensor_llrs(stats, model, y) for y in ys]
        fused = np.ones((1, 1))

        state = initial_state(etas[0])
        total = llr(model, ys[0])
        assert decide(state).decisions[0] == int(total > 0)
        for y, eta in zip(ys[1:], etas[1:]):
            state = consensus_step(state, fused, eta)
            total += llr(model, y)
            assert state.x[0] * state.k == pytest.approx(total, abs=1e-9)
            assert decide(state).decisions[0] == int(total > 0)

    def test_preserves_network_mean(self, link_model):
        """Doubly stochastic weights keep the network average equal to the centralized statistic."""
        gen = np.random.default_rng(2)
        etas = list(gen.standard_normal((20, 6)))
        weights = [sample_weight(link_model, RngSeed(master_seed=5, stream_index=s)) for s in range(19)]
        state = _run(etas, weights)
        assert state.x.mean() == pytest.approx(np.mean(etas), abs=1e-12)

    def test_dimension_mismatch(self):
        """W and eta must match the state size."""
        state = initial_state(np.zeros(3))
        with pytest.raises(DomainError):
            consensus_step(state, np.eye(2), np.zeros(3))
        with pytest.raises(DomainError):
            consensus_step(state, np.eye(3), np.zeros(2))

    def test_closed_form_arguments(self):
        """The closed form needs k >= 2 and k - 1 matrices."""
        with pytest.raises(DomainError):
            closed_form_state([], [np.zeros(2)])
        with pytest.raises(DomainError):
            closed_form_state([np.eye(2)] * 2, [np.zeros(2)] * 2)

    def test_decide(self):
        """Sensors decide H1 when x_i > 0 and H0 otherwise."""
        record = decide(initial_state(np.array([0.1, 0.0, -2.0])))
        assert record.k == 1
        assert record.decisions.tolist() == [1, 0, 0]


class TestEtaSample:
    """LLR increment draws."""

    def test_moments(self, stats):
        """Sample mean and covariance match m_eta and S_eta."""
        draws = eta_sample(stats, 1, RngSeed(master_seed=3), size=100_000)
        np.testing.assert_allclose(draws.mean(axis=0), stats.m_eta1, atol=0.03)
        np.testing.assert_allclose(np.cov(draws.T), stats.s_eta, atol=0.05)

    def test_hypothesis_sign(self, stats):
        """Increments are centered at -v*delta/2 under H0."""
        draws = eta_sample(stats, 0, RngSeed(master_seed=4), size=50_000)
        assert np.all(draws.mean(axis=0) < 0)

    def test_single_draw(self, stats):
        """Without size a single N-vector is returned."""
        assert eta_sample(stats, 0, RngSeed(master_seed=0)).shape == (3,)

    def test_singular_covariance(self):
        """A sensor with no signal has a zero increment."""
        model = ObservationModel.from_arrays(np.zeros(2), np.array([1.0, 0.0]), np.eye(2))
        draws = eta_sample(derive_stats(model), 0, RngSeed(master_seed=1), size=100)
        np.testing.assert_allclose(draws[:, 1], 0.0, atol=1e-12)


class TestBenchmarks:
    """Centralized and no-cooperation error probabilities."""

    def test_centralized_value(self):
        """C_tot = 0.1 and k = 100 give Q(sqrt(20)), about 3.87e-6."""
        stats = derive_stats(equivalent_uncorrelated_model(20, 0.005))
        assert centralized_error_probability(stats, 100) == pytest.approx(3.87e-6, rel=0.01)
        assert log_centralized_error_probability(stats, 100) == pytest.approx(
            math.log(centralized_error_probability(stats, 100)), rel=1e-10
        )

    def test_centralized_decays_at_c_tot(self):
        """-log P_e / k approaches C_tot."""
        stats = derive_stats(equivalent_uncorrelated_model(4, 0.05))
        k = 100_000
        assert -log_centralized_error_probability(stats, k) / k == pytest.approx(0.2, rel=1e-3)

    def test_no_cooperation(self, stats):
        """A lone sensor decays at its own Chernoff information."""
        model = ObservationModel.from_arrays(np.zeros(2), np.array([1.0, 2.0]), np.eye(2))
        assert no_cooperation_error_probability(model, 2, 4) == pytest.approx(q_function(2.0))
        assert log_no_cooperation_error_probability(model, 1, 4) == pytest.approx(math.log(q_function(1.0)))

    def test_centralized_beats_no_cooperation(self):
        """Pooling all sensors never loses."""
        model = ObservationModel.from_arrays(np.zeros(3), np.ones(3), np.eye(3))
        stats = derive_stats(model)
        for k in (1, 10, 50):
            assert centralized_error_probability(stats, k) < no_cooperation_error_probability(model, 1, k)

    def test_k_positive(self, stats):
        """k starts at 1."""
        with pytest.raises(DomainError):
            centralized_error_probability(stats, 0)
