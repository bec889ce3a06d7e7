"""Tests for queue dynamics, actions, stage cost and metric accounting."""

import numpy as np
import pytest

from channel_traffic import ChannelState
from model_core import (Action, CostWeights, Discipline, MetricsAccumulator, Packet, PacketBuffer,
                        QueueState, QueueUnits, SystemState, link_rates, littles_delay,
                        metrics_finalize, queue_step, stage_cost)
from sim_errors import ContractViolationError, UndefinedDelayError


def _state(lengths, cap=5, gains=None):
    lengths = np.asarray(lengths, dtype=float)
    n = lengths.size
    gains = np.ones((n, 1)) if gains is None else np.asarray(gains, dtype=float)
    indices = np.zeros(gains.shape, dtype=np.int64)
    return SystemState(ChannelState(indices, gains), QueueState(lengths, cap))


@pytest.mark.parametrize("q, served, arrivals, expected, dropped", [
    (3, 2, 1, 2, 0),
    (5, 0, 2, 5, 2),
    (0, 4, 0, 0, 0),
])
def test_queue_step_examples(q, served, arrivals, expected, dropped):
    """Service first, then arrivals, overflow above N_Q is dropped"""
    nxt, lost = queue_step(QueueState(np.array([q]), 5), [served], [arrivals])
    assert nxt.lengths[0] == expected
    assert lost[0] == dropped


def test_queue_step_rejects_negative_amounts():
    q = QueueState(np.array([1.0]), 5)
    with pytest.raises(ContractViolationError):
        queue_step(q, [-1.0], [0.0])
    with pytest.raises(ContractViolationError):
        queue_step(q, [0.0], [-0.5])


def test_queue_step_keeps_destination_queues_empty():
    q = QueueState.empty((3,), 10, destination_mask=np.array([False, True, False]))
    nxt, _ = queue_step(q, [0, 0, 0], [2, 4, 1])
    assert nxt.lengths.tolist() == [2, 0, 1]


def test_queue_step_fluid_never_exceeds_cap():
    rng = np.random.default_rng(3)
    q = QueueState.empty((4,), 7.3)
    for _ in range(500):
        q, dropped = queue_step(q, rng.random(4) * 3, rng.random(4) * 4)
        assert np.all(q.lengths >= 0) and np.all(q.lengths <= 7.3)
        assert np.all(dropped >= 0)


def test_queue_state_validates_bounds():
    with pytest.raises(ContractViolationError):
        QueueState(np.array([6.0]), 5)
    with pytest.raises(ContractViolationError):
        QueueState(np.array([-1.0]), 5)
    with pytest.raises(ContractViolationError):
        QueueState(np.array([1.0, 2.0]), 5, destination_mask=np.array([False, True]))


@pytest.mark.parametrize("qbar, dbar, lam, expected", [
    (2.0, 0.0, 4.0, 0.5),
    (3.0, 0.25, 2.0, 2.0),
])
def test_littles_delay(qbar, dbar, lam, expected):
    assert littles_delay(qbar, dbar, lam) == pytest.approx(expected)


def test_littles_delay_with_dropping_hundred_packets():
    """100 packets enter over 100 slots, 10 dropped, total sojourn 90 slots"""
    slots = 100
    qbar = 90 / slots
    assert littles_delay(qbar, 10 / 100, 100 / slots) == pytest.approx(1.0)


@pytest.mark.parametrize("dbar, lam", [(1.0, 1.0), (0.0, 0.0)])
def test_littles_delay_undefined(dbar, lam):
    with pytest.raises(UndefinedDelayError):
        littles_delay(1.0, dbar, lam)


def test_action_validation():
    with pytest.raises(ContractViolationError):
        Action(np.array([[True], [True]]), np.zeros((2, 1)))
    with pytest.raises(ContractViolationError):
        Action(np.array([[False]]), np.array([[1.0]]))
    with pytest.raises(ContractViolationError):
        Action(np.array([[True]]), np.array([[-1.0]]))
    idle = Action.idle(2, 3)
    assert idle.winners.tolist() == [-1, -1, -1]


def test_link_rates_sum_over_assigned_subcarriers():
    s = np.array([[True, False], [False, True]])
    p = np.array([[1.0, 0.0], [0.0, 3.0]])
    gains = np.array([[1.0, 5.0], [2.0, 1.0]])
    rates = link_rates(Action(s, p), gains, bandwidth_hz=10.0)
    assert rates == pytest.approx([10.0 * 1.0, 10.0 * 2.0])


def test_stage_cost_zero_state():
    chi = _state([0.0, 0.0])
    assert stage_cost(chi, Action.idle(2, 1), CostWeights.uniform(2, drop=10.0, power=0.5)) == 0.0


def test_stage_cost_full_queue_with_power():
    """Q = N_Q with nu=1, eta=10 and power 2 at gamma=0.5 costs N_Q + 10 + 1"""
    chi = _state([5.0])
    action = Action(np.array([[True]]), np.array([[2.0]]))
    w = CostWeights.uniform(1, queue=1.0, drop=10.0, power=0.5)
    assert stage_cost(chi, action, w) == pytest.approx(5 + 10 + 1)


def test_stage_cost_queue_only_and_linear_in_weights():
    chi = _state([2.0, 3.0])
    action = Action(np.array([[True], [False]]), np.array([[1.5], [0.0]]))
    base = CostWeights.uniform(2, queue=1.0, drop=0.0, power=0.0)
    assert stage_cost(chi, action, base) == pytest.approx(5.0)
    w = CostWeights.uniform(2, queue=1.0, drop=2.0, power=0.4)
    doubled = w.scaled(queue=2.0, drop=1.0, power=1.0)
    assert stage_cost(chi, action, doubled) - stage_cost(chi, action, w) == pytest.approx(5.0)


def test_stage_cost_throughput_utility():
    chi = _state([1.0])
    action = Action(np.array([[True]]), np.array([[1.0]]))
    w = CostWeights(np.array([1.0]), np.array([0.0]), np.array([0.0]), np.array([0.5]))
    assert stage_cost(chi, action, w, rates=np.array([4.0])) == pytest.approx(1.0 - 2.0)


def test_cost_weights_nonnegative():
    with pytest.raises(ContractViolationError):
        CostWeights.uniform(2, queue=-1.0)


@pytest.mark.parametrize("discipline, first", [(Discipline.FIFO, 0), (Discipline.LIFO, 2)])
def test_packet_buffer_discipline(discipline, first):
    buf = PacketBuffer(3, discipline)
    for t in range(3):
        assert buf.push(Packet(arrival_slot=t, size_bits=1.0))
    assert not buf.push(Packet(arrival_slot=9, size_bits=1.0))
    assert len(buf) == 3
    assert buf.pop().arrival_slot == first


def test_metrics_finalize_single_and_constant_samples():
    acc = MetricsAccumulator(1, 1, 1, buffer_cap=10)
    acc.record_slot([4.0], [0.0], [0.0], [0.0], [0.0])
    assert metrics_finalize(acc).qbar[0] == 4.0

    acc = MetricsAccumulator(2, 2, 2, buffer_cap=10)
    for _ in range(50):
        acc.record_slot([3.0, 7.0], [1.0, 2.0], [0.5, 0.0], [0.0, 0.0], [0.0, 0.0])
    report = metrics_finalize(acc)
    assert report.qbar.tolist() == [3.0, 7.0]
    assert report.pbar.tolist() == [1.0, 2.0]
    assert report.slots == 50
    assert np.isnan(report.delay_littles)


def test_metrics_finalize_matches_direct_recomputation():
    rng = np.random.default_rng(11)
    lengths = rng.integers(0, 6, size=(200, 2)).astype(float)
    offered = rng.integers(0, 2, size=(200, 2)).astype(float)
    dropped = offered * (lengths == 5)
    acc = MetricsAccumulator(2, 2, 2, buffer_cap=5, units=QueueUnits.PACKET)
    for t in range(200):
        acc.record_slot(lengths[t], [0, 0], [0, 0], offered[t], dropped[t])
    report = metrics_finalize(acc)
    assert np.allclose(report.qbar, lengths.mean(axis=0))
    assert np.allclose(report.drop_slot_fraction, (lengths == 5).mean(axis=0))
    assert np.allclose(report.drop_ratio, dropped.sum(axis=0) / offered.sum(axis=0))
    assert np.allclose(report.drop_rate, report.drop_ratio)
    total_ratio = dropped.sum() / offered.sum()
    expected = lengths.mean(axis=0).sum() / ((1 - total_ratio) * offered.mean(axis=0).sum())
    assert report.delay_littles == pytest.approx(expected)


def test_metrics_fluid_drop_rate_is_slot_fraction():
    acc = MetricsAccumulator(1, 1, 1, buffer_cap=2.0, units=QueueUnits.FLUID)
    acc.record_slot([2.0], [0], [0], [1.0], [0.5])
    acc.record_slot([1.0], [0], [0], [1.0], [0.0])
    report = metrics_finalize(acc)
    assert report.drop_rate[0] == pytest.approx(0.5)
    assert report.drop_ratio[0] == pytest.approx(0.25)


def test_metrics_finalize_empty_accumulator():
    with pytest.raises(ContractViolationError):
        metrics_finalize(MetricsAccumulator(1, 1, 1, buffer_cap=5))
