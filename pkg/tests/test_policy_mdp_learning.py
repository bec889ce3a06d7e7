"""Tests for the step-size schedule and the per-link potential and Q-factor learners."""

import numpy as np
import pytest

from channel_traffic import ChannelModel, ChannelState, stationary_dist
from model_core import CostWeights, QueueState, SystemState
from policy_mdp_learning import (PotentialLearningPolicy, PotentialObservation, PotentialTable,
                                 QFactorLearningPolicy, QFactorTable, ReferenceCache,
                                 approx_q_action, approx_v_action, full_power_potential,
                                 full_power_service_prob, learn_q_update, learn_v_update,
                                 max_order_statistic, queue_prior, step_size)
from sim_errors import ConfigurationError, ContractViolationError


def _static_channel():
    return ChannelModel(np.array([1.0]), np.array([[1.0]]))


def _two_state_channel():
    return ChannelModel(np.array([0.5, 2.0]), np.array([[0.7, 0.3], [0.3, 0.7]]))


def _state(model, indices, lengths, cap):
    csi = ChannelState.from_indices(model, np.asarray(indices))
    return SystemState(csi, QueueState(np.asarray(lengths, dtype=float), cap))


def test_step_size_first_visit_is_one():
    assert step_size(1) == 1.0
    assert step_size(1, 0.6) == 1.0
    assert step_size(4, 1.0) == pytest.approx(0.25)


def test_step_size_series_conditions():
    k = np.arange(1, 1_000_001)
    assert np.sum(1.0 / k) > 14.0
    assert np.sum(1.0 / k ** 2) < 2.0


@pytest.mark.parametrize("exponent", [0.4, 0.5, 1.2])
def test_step_size_rejects_bad_exponent(exponent):
    with pytest.raises(ConfigurationError):
        step_size(1, exponent)


def test_step_size_needs_positive_count():
    with pytest.raises(ContractViolationError):
        step_size(0)


def test_max_order_statistic():
    pi = np.array([0.2, 0.3, 0.5])
    assert max_order_statistic(pi, 1) == pytest.approx(pi)
    assert max_order_statistic(pi, 0).tolist() == [1.0, 0.0, 0.0]
    pmf = max_order_statistic(pi, 3)
    assert pmf.sum() == pytest.approx(1.0)
    assert pmf[0] == pytest.approx(0.2 ** 3)


def test_flat_potential_gives_idle_slot():
    model = _two_state_channel()
    tbl = PotentialTable(model, 2, 2, 4)
    chi = _state(model, [[0, 1], [1, 1]], [3, 2], 4)
    action = approx_v_action(chi, tbl, CostWeights.uniform(2, power=0.5), service_scale=0.1)
    assert not action.s.any()


def test_potential_differential_example():
    """dV = 10, service scale 0.1, gamma 0.5, |H|^2 = 1: water level 2, p = 1"""
    model = _static_channel()
    tbl = PotentialTable(model, 1, 1, 3)
    tbl.set_value(0, 0, 1, 10.0)
    chi = _state(model, [[0]], [1], 3)
    action = approx_v_action(chi, tbl, CostWeights.uniform(1, power=0.5), service_scale=0.1)
    assert action.s[0, 0]
    assert action.p[0, 0] == pytest.approx(1.0)


def test_empty_queue_gets_no_allocation():
    model = _static_channel()
    tbl = PotentialTable(model, 1, 1, 3)
    tbl.set_value(0, 0, 1, 10.0)
    chi = _state(model, [[0]], [0], 3)
    assert not approx_v_action(chi, tbl, CostWeights.uniform(1, power=0.5), 0.1).s.any()


def test_longer_queue_wins_with_convex_potential():
    model = _static_channel()
    rng = np.random.default_rng(2)
    weights = CostWeights.uniform(2, power=0.2)
    for _ in range(100):
        tbl = PotentialTable(model, 2, 1, 6)
        increments = np.sort(rng.random(6) * 20)
        for link in range(2):
            for q, value in enumerate(np.cumsum(increments), start=1):
                tbl.set_value(link, 0, q, float(value))
        lengths = rng.choice(7, size=2, replace=False)
        action = approx_v_action(_state(model, [[0], [0]], lengths, 6), tbl, weights, 0.1)
        if action.s.any():
            assert action.winners[0] == int(np.argmax(lengths))


def test_learn_v_first_visit_sets_relative_value():
    model = _static_channel()
    tbl = PotentialTable(model, 2, 1, 3)
    obs = PotentialObservation(np.array([0, 0]), np.array([2.0, 0.0]), np.array([2.0, 0.0]),
                               np.array([3.0, 0.0]))
    cache = ReferenceCache(np.array([0, 0]), np.array([0.0, 0.0]), 1.0)
    learn_v_update(tbl, obs, cache)
    assert tbl.values[0, 0, 2] == pytest.approx(2.0)
    assert tbl.counts[0, 0, 2] == 1
    assert tbl.values[0, 0, 0] == 0.0


def test_learn_v_fixed_point_leaves_entry_unchanged():
    model = _static_channel()
    tbl = PotentialTable(model, 2, 1, 3)
    tbl.set_value(0, 0, 2, 2.0)
    obs = PotentialObservation(np.array([0, 0]), np.array([2.0, 0.0]), np.array([1.0, 0.0]),
                               np.array([3.0, 0.0]))
    cache = ReferenceCache(np.array([0, 0]), np.array([0.0, 0.0]), 1.0)
    learn_v_update(tbl, obs, cache)
    assert tbl.values[0, 0, 2] == pytest.approx(2.0)


def test_learn_v_needs_exactly_one_link_off_reference():
    model = _static_channel()
    tbl = PotentialTable(model, 2, 1, 3)
    cache = ReferenceCache(np.array([0, 0]), np.array([0.0, 0.0]), 0.0)
    for lengths in ([0.0, 0.0], [1.0, 2.0]):
        obs = PotentialObservation(np.array([0, 0]), np.array(lengths), np.array(lengths), np.zeros(2))
        with pytest.raises(ContractViolationError):
            learn_v_update(tbl, obs, cache)


def test_potential_reference_entries_stay_pinned():
    model = _two_state_channel()
    cap = 4
    tbl = PotentialTable(model, 2, 1, cap, reference_csi="any")
    policy = PotentialLearningPolicy(tbl, CostWeights.uniform(2, power=0.5), service_scale=0.1)
    rng = np.random.default_rng(3)
    for t in range(20000):
        # keep most slots near the reference states so updates fire
        lengths = rng.integers(0, cap + 1, 2) * (rng.random(2) < 0.5)
        chi = _state(model, rng.integers(0, 2, (2, 1)), lengths, cap)
        policy.observe(chi, policy.act(chi), rng.integers(0, cap + 1, 2), t)
    assert tbl.counts.sum() > 0
    assert np.all(tbl.values[:, :, 0] == 0.0)


def test_learning_tracker_reports_quiet_table():
    model = _static_channel()
    tbl = PotentialTable(model, 1, 1, 2, window=5)
    policy = PotentialLearningPolicy(tbl, CostWeights.uniform(1, power=0.5), 0.1, trace_every=2)
    chi = _state(model, [[0]], [0], 2)
    for t in range(5):
        policy.observe(chi, policy.act(chi), np.array([0]), t)
    assert tbl.tracker.converged
    assert [row["slot"] for row in policy.trace] == [0, 2, 4]


def test_full_power_service_prob():
    model = _static_channel()
    assert full_power_service_prob(model, 3.0, 1, 0.1) == pytest.approx(0.2)
    assert full_power_service_prob(model, 6.0, 2, 0.1) == pytest.approx(0.4)
    assert full_power_service_prob(model, 3.0, 1, 10.0) == 1.0


def test_full_power_potential_single_slot_buffer():
    """N_Q = 1, b = 0.1, d = 0.5, cost 6 when full: h(1) = 6 / (b + d(1 - b))"""
    h = full_power_potential(0.1, 0.5, 1, queue_weight=1.0, drop_weight=5.0, busy_cost=0.0)
    assert h[0] == 0.0
    assert h[1] == pytest.approx(6.0 / 0.55)


def test_full_power_potential_grows_with_queue():
    h = full_power_potential(0.05, 0.1, 4, queue_weight=1.0, drop_weight=5.0, busy_cost=1.3)
    assert h[0] == 0.0
    assert np.all(np.diff(h) > 0)
    assert np.all(full_power_potential(0.0, 0.1, 4, 1.0, 5.0, 1.3) == 0.0)


def test_warm_started_potential_serves_nonempty_queues():
    model = _two_state_channel()
    weights = CostWeights.uniform(2, queue=1.0, drop=5.0, power=0.05)
    prior = queue_prior(model, 1, 3, arrival_prob=0.05, service_scale=0.02, power_budget=26.9,
                        weights=weights)
    tbl = PotentialTable(model, 2, 1, 3).warm_start(prior)
    assert np.all(tbl.values[:, :, 0] == 0.0)
    assert np.array_equal(tbl.expected, tbl.values)
    for indices in ([[0], [1]], [[1], [0]], [[0], [0]]):
        for lengths in ([1, 0], [0, 2], [3, 3]):
            action = approx_v_action(_state(model, indices, lengths, 3), tbl, weights, 0.02)
            assert action.s.any()
            assert np.all(action.p[action.s] > 0)


def test_warm_start_keeps_reference_entries_at_zero():
    with pytest.raises(ContractViolationError):
        PotentialTable(_static_channel(), 1, 1, 2).warm_start(np.array([1.0, 2.0, 3.0]))
    with pytest.raises(ContractViolationError):
        QFactorTable(_static_channel(), 1, 1, 2).warm_start(np.array([1.0, 2.0, 3.0]))


def test_learning_policies_need_a_power_price():
    model = _static_channel()
    free = CostWeights.uniform(1, power=0.0)
    with pytest.raises(ConfigurationError, match="positive power price"):
        PotentialLearningPolicy(PotentialTable(model, 1, 1, 3), free, 0.1)
    with pytest.raises(ConfigurationError, match="positive power price"):
        QFactorLearningPolicy(QFactorTable(model, 1, 1, 3), free, 0.1)
    tbl = PotentialTable(model, 1, 1, 3)
    tbl.set_value(0, 0, 1, 10.0)
    with pytest.raises(ConfigurationError, match="positive power price"):
        approx_v_action(_state(model, [[0]], [1], 3), tbl, free, 0.1)


def test_q_identical_tables_favour_first_link():
    model = _two_state_channel()
    tbl = QFactorTable(model, 2, 3, 4)
    chi = _state(model, [[0, 1, 0], [0, 1, 0]], [2, 2], 4)
    action = approx_q_action(chi, tbl, CostWeights.uniform(2, power=0.5), service_scale=0.1)
    assert action.winners.tolist() == [0, 0, 0]
    assert np.all(action.p == 0)


def test_q_hand_built_argmin():
    model = _two_state_channel()
    tbl = QFactorTable(model, 2, 2, 3)
    tbl.values[0, 0, 1, 1], tbl.values[1, 0, 1, 1] = 5.0, 2.0
    tbl.values[0, 1, 1, 1], tbl.values[1, 1, 1, 1] = 1.0, 4.0
    chi = _state(model, [[0, 1], [0, 1]], [1, 1], 3)
    action = approx_q_action(chi, tbl, CostWeights.uniform(2, power=0.5), 0.1)
    assert action.winners.tolist() == [1, 0]


def test_q_empty_queues_are_not_eligible():
    model = _two_state_channel()
    tbl = QFactorTable(model, 2, 2, 3)
    tbl.values[1] = 10.0
    chi = _state(model, [[0, 1], [0, 1]], [0, 2], 3)
    action = approx_q_action(chi, tbl, CostWeights.uniform(2, power=0.5), 0.1)
    assert action.winners.tolist() == [1, 1]
    empty = _state(model, [[0, 1], [0, 1]], [0, 0], 3)
    assert not approx_q_action(empty, tbl, CostWeights.uniform(2, power=0.5), 0.1).s.any()


def test_q_single_link_always_wins():
    tbl = QFactorTable(_two_state_channel(), 1, 2, 3)
    assert tbl.win_prob.tolist() == [1.0, 1.0]
    assert tbl.max_gain_pmf.sum() == pytest.approx(1.0)


def test_q_win_probability_two_links():
    model = _two_state_channel()
    tbl = QFactorTable(model, 2, 1, 3)
    pi = stationary_dist(model)
    assert tbl.win_prob[0] == pytest.approx(pi[0])
    assert tbl.win_prob[1] == pytest.approx(1.0)


def test_learn_q_first_visit_and_fixed_point():
    tbl = QFactorTable(_two_state_channel(), 2, 1, 3)
    learn_q_update(tbl, 0, 1, 2, 1, cost=3.5, next_length=1, reference_next_length=0)
    assert tbl.values[0, 1, 2, 1] == pytest.approx(3.5)
    learn_q_update(tbl, 0, 1, 2, 1, cost=3.5, next_length=1, reference_next_length=0)
    assert tbl.values[0, 1, 2, 1] == pytest.approx(3.5)
    assert tbl.counts[0, 1, 2, 1] == 2


def test_learn_q_refuses_reference_cell():
    tbl = QFactorTable(_two_state_channel(), 1, 1, 3)
    with pytest.raises(ContractViolationError):
        learn_q_update(tbl, 0, 0, 0, 0, cost=1.0, next_length=0, reference_next_length=0)


def test_q_reference_cell_stays_pinned():
    model = _two_state_channel()
    cap = 3
    tbl = QFactorTable(model, 2, 2, cap)
    policy = QFactorLearningPolicy(tbl, CostWeights.uniform(2, power=0.5, drop=1.0), 0.1, trace_every=500)
    rng = np.random.default_rng(5)
    for t in range(5000):
        chi = _state(model, rng.integers(0, 2, (2, 2)), rng.integers(0, cap + 1, 2), cap)
        policy.observe(chi, policy.act(chi), rng.integers(0, cap + 1, 2), t)
    assert tbl.counts.sum() > 0
    assert np.all(tbl.values[:, 0, 0, 0] == 0.0)
    assert len(policy.trace) == 10


def test_q_bid_is_the_gain_from_serving():
    """link 0's served and idle cells agree; serving link 1 lowers its Q-factor by 4, so link 1 wins"""
    model = _two_state_channel()
    tbl = QFactorTable(model, 2, 1, 4)
    tbl.values[0, 0, 1] = [2.0, 2.0]
    tbl.values[1, 0, 3] = [9.0, 5.0]
    action = approx_q_action(_state(model, [[0], [0]], [1, 3], 4), tbl, CostWeights.uniform(2, power=0.5), 0.1)
    assert action.winners.tolist() == [1]


def test_q_empty_queue_reads_idle_cell():
    tbl = QFactorTable(_two_state_channel(), 2, 1, 3)
    tbl.values[0, :, 0, 1] = 50.0
    tbl.values[0, 1, 0, 0] = 1.0
    assert tbl.nu(0)[:, 0].tolist() == [0.0, 1.0]


def test_q_warm_start_splits_prior_over_subcarriers():
    tbl = QFactorTable(_two_state_channel(), 2, 2, 3).warm_start(np.array([0.0, 4.0, 10.0, 20.0]))
    assert tbl.values[1, 1, 2].tolist() == [5.0, 5.0]
    assert np.all(tbl.values[:, :, 0] == 0.0)
    assert tbl.delta_nu_bar(0, np.array([0, 1]), 2).sum() == pytest.approx(6.0)
