"""Tests for effective bandwidth/capacity, rate targets and the CSI-only water-filling policy."""

import math

import numpy as np
import pytest

from channel_traffic import ChannelModel, ChannelState
from model_core import QueueState, SystemState
from policy_rate_constraint import (QosSpec, RateConstraintPolicy, RatePolicyParams,
                                    allocate_rate_constraint, effective_bandwidth, effective_capacity,
                                    qos_report, rate_target, stationary_power_and_rate,
                                    tune_multipliers)
from sim_errors import ConfigurationError, ContractViolationError, InfeasibleTargetError


def _csi(gains):
    gains = np.asarray(gains, dtype=float)
    return ChannelState(np.zeros(gains.shape, dtype=np.int64), gains)


def _two_state_channel():
    return ChannelModel(np.array([0.5, 2.0]), np.array([[0.8, 0.2], [0.2, 0.8]]))


@pytest.mark.parametrize("theta", [1e-3, 0.1, 1.0])
def test_effective_bandwidth_constant_source(theta):
    assert effective_bandwidth(np.full(640, 3.0), theta) == pytest.approx(3.0)


def test_effective_bandwidth_bernoulli_closed_form():
    trace = np.tile([0.0, 2.0], 500)
    value = effective_bandwidth(trace, 1.0, block_lengths=(1,))
    assert value == pytest.approx(math.log(0.5 * (1 + math.e ** 2)))
    assert value == pytest.approx(1.5514, abs=1e-4)


def test_effective_bandwidth_small_theta_tends_to_mean():
    trace = np.random.default_rng(4).exponential(2.0, 4096)
    assert effective_bandwidth(trace, 1e-8) == pytest.approx(trace[:4096].mean(), rel=1e-5)


def test_effective_bandwidth_at_least_mean():
    trace = np.random.default_rng(5).poisson(3.0, 8000).astype(float)
    assert effective_bandwidth(trace, 0.5) >= trace.mean()


def test_effective_bandwidth_overflow_guidance():
    with pytest.raises(ContractViolationError, match="rescale"):
        effective_bandwidth(np.full(64, 1e308), 10.0, block_lengths=(1,))


def test_effective_bandwidth_preconditions():
    with pytest.raises(ContractViolationError):
        effective_bandwidth(np.ones(10), 0.0)
    with pytest.raises(ContractViolationError):
        effective_bandwidth(np.array([]), 1.0)


def test_effective_capacity_examples():
    assert effective_capacity([2.5], 0.7) == pytest.approx(2.5)
    value = effective_capacity([0.0, 2.0], 1.0, probs=[0.5, 0.5])
    assert value == pytest.approx(-math.log(0.5 * (1 + math.exp(-2))))
    assert value == pytest.approx(0.5662, abs=1e-4)


def test_effective_capacity_non_increasing_in_theta():
    thetas = np.linspace(0.05, 5.0, 40)
    values = [effective_capacity([0.0, 2.0], t, probs=[0.5, 0.5]) for t in thetas]
    assert np.all(np.diff(values) <= 1e-12)
    assert values[0] <= 1.0


def test_rate_target_examples():
    assert rate_target(1.0, 1.0, 1.0) == pytest.approx((4 + math.sqrt(8)) / 4)
    assert rate_target(1.0, 1.0, 1.0) == pytest.approx(1.7071, abs=1e-4)
    assert rate_target(1e6, 1.0, 5000.0) == pytest.approx(5000.0, rel=1e-5)


@pytest.mark.parametrize("d_lambda", [0.1, 0.5, 1.0, 5.0, 20.0, 100.0])
def test_rate_target_exceeds_offered_load(d_lambda):
    lam, bits = 3.0, 5000.0
    assert rate_target(d_lambda / lam, lam, bits) > lam * bits


def test_rate_target_decreases_with_looser_delay():
    targets = [rate_target(d, 3.0, 5000.0) for d in (0.01, 0.05, 0.1, 0.5, 1.0)]
    assert np.all(np.diff(targets) < 0)


def test_rate_target_preconditions():
    with pytest.raises(ContractViolationError):
        rate_target(0.0, 1.0, 1.0)


@pytest.mark.parametrize("delay_target", [float("inf"), float("nan")])
def test_rate_target_rejects_non_finite_delay(delay_target):
    with pytest.raises(ContractViolationError, match="no real rate"):
        rate_target(delay_target, 1.0, 1.0)


def test_qos_spec_validation():
    QosSpec(d_max=0.1, epsilon=0.01, theta=1e-3, delay_target=0.05)
    with pytest.raises(ConfigurationError):
        QosSpec(epsilon=1.0)
    with pytest.raises(ConfigurationError):
        QosSpec(theta=0.0)


def test_allocation_water_level_example():
    """nu=1, gamma=2 and |H|^2 = 4 give water level 1 and p = 0.75"""
    params = RatePolicyParams(np.array([1.0]), np.array([2.0]), np.array([0.0]))
    action = allocate_rate_constraint(_csi([[4.0]]), params)
    assert action.s[0, 0]
    assert action.p[0, 0] == pytest.approx(0.75)


def test_allocation_idle_below_inverse_gain():
    params = RatePolicyParams(np.array([0.0, 0.0]), np.array([2.0, 2.0]), np.zeros(2))
    action = allocate_rate_constraint(_csi([[1.5], [2.0]]), params)
    assert not action.s.any()
    assert np.all(action.p == 0)


def test_allocation_tie_goes_to_lowest_link():
    params = RatePolicyParams.uniform(3, nu=0.5, gamma=0.5)
    action = allocate_rate_constraint(_csi(np.full((3, 4), 2.0)), params)
    assert action.winners.tolist() == [0, 0, 0, 0]


def test_allocation_kkt_condition():
    rng = np.random.default_rng(8)
    for _ in range(200):
        params = RatePolicyParams(rng.random(3) * 2, rng.random(3) + 0.1, np.zeros(3))
        gains = rng.exponential(1.0, (3, 4))
        action = allocate_rate_constraint(_csi(gains), params)
        threshold = (params.gamma / (1 + params.nu))[:, None]
        active = action.s
        assert np.array_equal(action.p[active] > 0, (gains > threshold)[active])


def test_rate_policy_ignores_queue_state():
    params = RatePolicyParams.uniform(2, nu=0.2, gamma=0.3)
    policy = RateConstraintPolicy(params)
    csi = _csi([[1.0, 3.0], [2.0, 0.5]])
    first = policy.act(SystemState(csi, QueueState(np.array([0.0, 4.0]), 5)))
    second = policy.act(SystemState(csi, QueueState(np.array([4.0, 0.0]), 5)))
    assert first == second


def test_stationary_power_and_rate_single_link():
    params = RatePolicyParams.uniform(1, gamma=1.0)
    power, rate = stationary_power_and_rate(params, _two_state_channel(), 1, 1, bandwidth_hz=1.0)
    # level 1: only the strong state transmits, p = 0.5, rate log2(2)
    assert power[0] == pytest.approx(0.25)
    assert rate[0] == pytest.approx(0.5)


def test_tune_multipliers_power_trace():
    """Gains 0.5 / 2.0, budget 1, gamma0 = 1, kappa0 = 1"""
    model = _two_state_channel()

    def evaluate(params, epoch):
        return stationary_power_and_rate(params, model, 1, 1)

    params, trajectory = tune_multipliers(evaluate, RatePolicyParams.uniform(1, gamma=1.0),
                                          power_budget=1.0, kappa0=1.0)
    assert len(trajectory) == 6
    assert trajectory["gamma_0"].tolist()[:3] == pytest.approx([1.0, 0.25, 0.75])
    assert trajectory["power_0"].iloc[-1] == pytest.approx(0.99537, abs=1e-4)
    assert abs(trajectory["power_0"].iloc[-1] - 1.0) < 0.02
    assert params.gamma[0] > 0
    assert params.nu[0] == 0.0


def test_tune_multipliers_slack_rate_keeps_nu_zero():
    model = _two_state_channel()
    initial = RatePolicyParams(np.array([0.0]), np.array([0.2]), np.array([1e-6]))
    params, trajectory = tune_multipliers(lambda p, k: stationary_power_and_rate(p, model, 1, 1),
                                          initial, power_budget=None)
    assert len(trajectory) == 1
    assert params.nu[0] == 0.0


def test_tune_multipliers_fixed_point():
    model = _two_state_channel()
    start = RatePolicyParams(np.array([0.5]), np.array([0.4]), np.array([0.0]))
    power, rate = stationary_power_and_rate(start, model, 1, 1)
    start = RatePolicyParams(start.nu, start.gamma, rate)
    params, trajectory = tune_multipliers(lambda p, k: stationary_power_and_rate(p, model, 1, 1),
                                          start, power_budget=power)
    assert len(trajectory) == 1
    assert params.gamma[0] == start.gamma[0]
    assert params.nu[0] == start.nu[0]


def test_tune_multipliers_rate_constraint_binding():
    model = _two_state_channel()
    initial = RatePolicyParams(np.array([0.0]), np.array([1.0]), np.array([1.5]))
    params, _ = tune_multipliers(lambda p, k: stationary_power_and_rate(p, model, 1, 1),
                                 initial, power_budget=None, max_epochs=5000)
    _, rate = stationary_power_and_rate(params, model, 1, 1)
    assert params.nu[0] > 0
    assert abs(rate[0] - 1.5) / 1.5 < 0.02


def test_tune_multipliers_infeasible():
    model = _two_state_channel()
    initial = RatePolicyParams(np.array([0.0]), np.array([1.0]), np.array([50.0]))
    with pytest.raises(InfeasibleTargetError) as err:
        tune_multipliers(lambda p, k: stationary_power_and_rate(p, model, 1, 1),
                         initial, power_budget=0.01, max_epochs=30)
    assert "rate" in err.value.residuals


def test_qos_report_constant_processes():
    report = qos_report(np.full(64, 1.0), np.full(64, 2.0), theta=0.5)
    assert report["effective_bandwidth"] == pytest.approx(1.0)
    assert report["effective_capacity"] == pytest.approx(2.0)
    assert report["qos_satisfied"]
