"""Tests for the Markov fading channel and the traffic sources."""

import numpy as np
import pytest

from channel_traffic import (ChannelModel, ChannelState, TrafficMode, TrafficModel,
                             birth_death_mean, birth_death_transition, channel_next, departure_prob,
                             initial_channel_state, rayleigh_gain_grid, sample_arrivals,
                             sample_packet_sizes, snr_db_to_power, stationary_dist)
from sim_errors import ConfigurationError, ContractViolationError, ReducibleChainError


def test_rayleigh_grid_is_increasing_with_unit_mean():
    grid = rayleigh_gain_grid(8)
    assert grid.shape == (8,)
    assert np.all(np.diff(grid) > 0)
    assert grid.mean() == pytest.approx(1.0)


@pytest.mark.parametrize("levels", [1, 2, 5, 8])
def test_birth_death_transition_row_stochastic(levels):
    P = birth_death_transition(levels, 0.7)
    assert np.allclose(P.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(P >= 0)


def test_channel_model_rejects_bad_matrices():
    with pytest.raises(ConfigurationError):
        ChannelModel(np.array([1.0, 2.0]), np.array([[0.5, 0.6], [0.5, 0.5]]))
    with pytest.raises(ConfigurationError):
        ChannelModel(np.array([1.0, 2.0]), np.eye(3))
    with pytest.raises(ReducibleChainError):
        ChannelModel(np.array([1.0, 2.0]), np.eye(2))


def test_identity_chain_keeps_state_forever():
    model = ChannelModel(np.array([0.5, 2.0]), np.eye(2), require_irreducible=False)
    state = ChannelState.from_indices(model, [[0, 1], [1, 0]])
    rng = np.random.default_rng(0)
    for _ in range(100):
        state = channel_next(model, state, rng)
    assert state.indices.tolist() == [[0, 1], [1, 0]]


def test_single_state_grid_is_constant():
    model = ChannelModel(np.array([1.3]), np.ones((1, 1)))
    state = initial_channel_state(model, 2, 3, np.random.default_rng(1))
    nxt = channel_next(model, state, np.random.default_rng(2))
    assert np.all(nxt.gains == 1.3)


def test_channel_next_transition_frequencies():
    P = np.array([[0.9, 0.1], [0.1, 0.9]])
    model = ChannelModel(np.array([0.5, 1.5]), P)
    rng = np.random.default_rng(7)
    state = ChannelState.from_indices(model, [[0]])
    counts = np.zeros((2, 2))
    for _ in range(100_000):
        nxt = channel_next(model, state, rng)
        counts[state.indices[0, 0], nxt.indices[0, 0]] += 1
        state = nxt
    freq = counts / counts.sum(axis=1, keepdims=True)
    for i in range(2):
        sigma = np.sqrt(P[i, 0] * P[i, 1] / counts[i].sum())
        assert abs(freq[i, 1] - P[i, 1]) < 4 * sigma


def test_channel_next_shared_subcarriers():
    model = ChannelModel(rayleigh_gain_grid(4), birth_death_transition(4, 0.2),
                         independent_subcarriers=False)
    rng = np.random.default_rng(5)
    state = initial_channel_state(model, 3, 4, rng)
    for _ in range(50):
        state = channel_next(model, state, rng)
        assert np.all(state.indices == state.indices[:, :1])


def test_channel_state_index_bounds():
    model = ChannelModel.rayleigh(3)
    with pytest.raises(ContractViolationError):
        ChannelState.from_indices(model, [[3]])


@pytest.mark.parametrize("P, expected", [
    (np.array([[0.9, 0.1], [0.1, 0.9]]), [0.5, 0.5]),
    (np.array([[0.5, 0.5], [0.25, 0.75]]), [1 / 3, 2 / 3]),
])
def test_stationary_dist(P, expected):
    model = ChannelModel(np.array([1.0, 2.0]), P)
    pi = stationary_dist(model)
    assert np.allclose(pi, expected)
    assert np.allclose(pi @ P, pi)


def test_stationary_dist_rejects_identity():
    model = ChannelModel(np.array([1.0, 2.0]), np.eye(2), require_irreducible=False)
    with pytest.raises(ReducibleChainError):
        stationary_dist(model)


def test_birth_death_transition_has_uniform_stationary_law():
    model = ChannelModel.rayleigh(8, 0.9)
    assert np.allclose(stationary_dist(model), 1 / 8)


def test_empirical_occupancy_matches_stationary_law():
    P = np.array([[0.5, 0.5], [0.25, 0.75]])
    model = ChannelModel(np.array([1.0, 2.0]), P)
    rng = np.random.default_rng(42)
    state = initial_channel_state(model, 1, 1, rng)
    visits = np.zeros(2)
    for _ in range(100_000):
        visits[state.indices[0, 0]] += 1
        state = channel_next(model, state, rng)
    assert visits / visits.sum() == pytest.approx([1 / 3, 2 / 3], abs=0.01)


def test_zero_rate_never_arrives():
    traffic = TrafficModel(TrafficMode.POISSON_PACKET, 0.0)
    rng = np.random.default_rng(0)
    assert sum(sample_arrivals(traffic, rng, 3).sum() for _ in range(1000)) == 0


def test_packet_arrival_probability():
    """3 packets/s with 1 ms slots gives one arrival per slot with probability 0.003"""
    traffic = TrafficModel(TrafficMode.POISSON_PACKET, 3.0, slot_seconds=1e-3)
    assert traffic.arrival_prob == pytest.approx(0.003)
    rng = np.random.default_rng(2024)
    hits = (rng.random(1_000_000) < traffic.arrival_prob).sum()
    n = 1_000_000
    sigma = np.sqrt(n * 0.003 * 0.997)
    assert abs(hits - n * 0.003) < 4 * sigma


def test_sample_arrivals_packet_counts_are_binary():
    traffic = TrafficModel(TrafficMode.POISSON_PACKET, 100.0, slot_seconds=1e-3)
    rng = np.random.default_rng(0)
    draws = np.concatenate([sample_arrivals(traffic, rng, 4) for _ in range(500)])
    assert set(np.unique(draws)) <= {0.0, 1.0}


def test_packet_sizes_mean():
    traffic = TrafficModel(TrafficMode.POISSON_PACKET, 3.0, mean_packet_bits=5000.0)
    sizes = sample_packet_sizes(traffic, np.random.default_rng(9), 100_000)
    assert sizes.mean() == pytest.approx(5000.0, rel=0.02)


def test_bit_mode_respects_bound():
    traffic = TrafficModel(TrafficMode.BIT, 200.0, max_arrival=1000.0)
    rng = np.random.default_rng(3)
    draws = np.concatenate([sample_arrivals(traffic, rng, 2) for _ in range(5000)])
    assert draws.max() <= 1000.0
    assert draws.mean() == pytest.approx(200.0, rel=0.1)


def test_packet_mode_rejects_large_lambda_tau():
    with pytest.raises(ConfigurationError):
        TrafficModel(TrafficMode.POISSON_PACKET, 1000.0, slot_seconds=1e-3)


@pytest.mark.parametrize("mu, tau, expected", [
    (0.0, 1e-3, 0.0),
    (3.0, 1e-3, 0.003),
])
def test_departure_prob_first_order(mu, tau, expected):
    assert departure_prob(mu, tau) == pytest.approx(expected)


def test_departure_prob_exact_form():
    assert departure_prob(3.0, 1e-3, exact=True) == pytest.approx(1 - np.exp(-0.003))
    assert departure_prob(3.0, 1e-3, exact=True) == pytest.approx(0.0029955, abs=1e-7)


def test_departure_prob_rejects_large_product():
    with pytest.raises(ContractViolationError):
        departure_prob(1500.0, 1e-3)


def test_birth_death_mean_distribution():
    mean, pi = birth_death_mean(0.1, 0.3, 4)
    assert pi.sum() == pytest.approx(1.0)
    assert np.all(pi >= 0)
    assert mean == pytest.approx(pi @ np.arange(5))
    # no arrivals means an empty queue
    mean0, _ = birth_death_mean(0.0, 0.3, 4)
    assert mean0 == pytest.approx(0.0)


def test_snr_db_to_power():
    assert snr_db_to_power(10.0) == pytest.approx(10.0)
    assert snr_db_to_power(0.0) == pytest.approx(1.0)
