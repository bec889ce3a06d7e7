"""
Delay control through an equivalent average-rate constraint.

The delay target of each link is turned into a rate target, and a CSI-only
water-filling policy is tuned by Lagrange multipliers to meet that rate under
an average power budget. The effective bandwidth / effective capacity pair
used to reason about delay-violation exponents lives here too.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import logsumexp

from channel_traffic import ChannelModel, ChannelState, stationary_dist
from model_core import Action, SystemState
from sim_errors import ConfigurationError, ContractViolationError, InfeasibleTargetError
from water_filling import assign_max_bids, bid_matrix

logger = logging.getLogger(__name__)

DEFAULT_BLOCK_LENGTHS = (1, 8, 64)
MIN_BLOCKS = 8


@dataclass(frozen=True)
class QosSpec:
    """Statistical QoS requirement of one link: Pr[delay > d_max] <= epsilon, mean delay target."""

    d_max: float = 0.1
    epsilon: float = 0.01
    theta: float = 1e-3
    delay_target: float = 0.05

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ConfigurationError(f"violation probability must be in (0, 1), got {self.epsilon}")
        if self.theta <= 0:
            raise ConfigurationError(f"QoS exponent must be positive, got {self.theta}")
        if self.delay_target <= 0 or self.d_max <= 0:
            raise ConfigurationError("delay bound and delay target must be positive")


@dataclass(frozen=True, eq=False)
class RatePolicyParams:
    nu: np.ndarray
    gamma: np.ndarray
    rate_target: np.ndarray

    def __post_init__(self):
        for name in ("nu", "gamma", "rate_target"):
            values = np.atleast_1d(np.asarray(getattr(self, name), dtype=np.float64))
            object.__setattr__(self, name, values)
        if np.any(self.nu < 0) or np.any(self.gamma < 0):
            raise ContractViolationError("multipliers must be nonnegative")

    @classmethod
    def uniform(cls, n_links: int, nu: float = 0.0, gamma: float = 1.0,
                rate_target: float = 0.0) -> "RatePolicyParams":
        return cls(np.full(n_links, nu), np.full(n_links, gamma), np.full(n_links, rate_target))

    @property
    def water_level(self) -> np.ndarray:
        return (1.0 + self.nu) / self.gamma

    def replace(self, nu=None, gamma=None) -> "RatePolicyParams":
        return RatePolicyParams(self.nu if nu is None else nu,
                                self.gamma if gamma is None else gamma,
                                self.rate_target)


def effective_bandwidth(trace, theta: float,
                        block_lengths: Sequence[int] = DEFAULT_BLOCK_LENGTHS) -> float:
    """
    Empirical effective bandwidth (1/(theta t)) log E[exp(theta A(t))].

    A(t) are sums over non-overlapping blocks of t slots. The estimate for the
    longest block length with at least MIN_BLOCKS blocks is reported (the
    shortest one if the trace is too short for any).

    Args:
        trace: per-slot arrival amounts
        theta: QoS exponent in 1/(trace units)
        block_lengths: candidate block lengths in slots

    Returns:
        float: effective bandwidth in trace units per slot
    """
    trace = np.asarray(trace, dtype=np.float64).ravel()
    if theta <= 0:
        raise ContractViolationError(f"theta must be positive, got {theta}")
    if trace.size == 0:
        raise ContractViolationError("effective bandwidth needs a nonempty trace")

    lengths = sorted(int(t) for t in block_lengths if 0 < int(t) <= trace.size)
    if not lengths:
        raise ContractViolationError(f"no block length in {tuple(block_lengths)} fits a trace of {trace.size}")
    usable = [t for t in lengths if trace.size // t >= MIN_BLOCKS] or lengths[:1]
    t = usable[-1]

    n_blocks = trace.size // t
    blocks = trace[:n_blocks * t].reshape(n_blocks, t).sum(axis=1)
    scaled = theta * blocks
    if not np.all(np.isfinite(scaled)):
        raise ContractViolationError(
            "theta * A overflows; rescale the trace (e.g. kbits instead of bits) or lower theta"
        )
    log_mgf = logsumexp(scaled) - math.log(n_blocks)
    return float(log_mgf / (theta * t))


def effective_capacity(rates, theta: float, probs=None) -> float:
    """
    Effective capacity -(1/theta) log E[exp(-theta R)] of an uncorrelated service process.

    Args:
        rates: service-rate support points (or raw samples when probs is None)
        theta: QoS exponent
        probs: probabilities of the support points

    Returns:
        float
    """
    rates = np.asarray(rates, dtype=np.float64).ravel()
    if theta <= 0:
        raise ContractViolationError(f"theta must be positive, got {theta}")
    if rates.size == 0:
        raise ContractViolationError("effective capacity needs at least one rate")
    if probs is None:
        log_mean = logsumexp(-theta * rates) - math.log(rates.size)
    else:
        probs = np.asarray(probs, dtype=np.float64).ravel()
        if probs.shape != rates.shape or np.any(probs < 0):
            raise ContractViolationError("probs must be nonnegative and match rates")
        log_mean = logsumexp(-theta * rates, b=probs / probs.sum())
    return float(-log_mean / theta)


def rate_target(delay_target: float, lambda_bar: float, mean_packet_bits: float) -> float:
    """
    Average rate (bits/s) that meets a mean delay target for Poisson packets.

    Args:
        delay_target: D in seconds
        lambda_bar: arrival rate in packets/s
        mean_packet_bits: mean packet size in bits
    """
    if delay_target <= 0 or lambda_bar <= 0 or mean_packet_bits <= 0:
        raise ContractViolationError("delay target, arrival rate and packet size must be positive")
    x = delay_target * lambda_bar
    b = 2.0 * x + 2.0
    discriminant = b * b - 8.0 * x
    if not discriminant > 0:
        raise ContractViolationError(f"no real rate meets delay target {delay_target} at {lambda_bar} packets/s")
    return (b + math.sqrt(discriminant)) / (4.0 * delay_target) * mean_packet_bits


def allocate_rate_constraint(h: ChannelState, params: RatePolicyParams) -> Action:
    """Water-filling at level (1 + nu)/gamma, winner-take-all per subcarrier."""
    bids, powers = bid_matrix(1.0 + params.nu, params.gamma, h.gains)
    return assign_max_bids(bids, powers)


def stationary_power_and_rate(params: RatePolicyParams, model: ChannelModel, n_links: int,
                              n_subcarriers: int, bandwidth_hz: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    """
    Exact long-run power and rate per link of the CSI-only policy.

    Every joint gain combination of one subcarrier is enumerated with its
    stationary probability; subcarriers are identically distributed, so the
    per-subcarrier expectation is scaled by their count.

    Returns:
        (average power per link, average rate per link)
    """
    pi = stationary_dist(model)
    grids = np.indices((model.n_levels,) * n_links).reshape(n_links, -1)
    gains = model.gains[grids]
    weights = np.prod(pi[grids], axis=0)

    action = allocate_rate_constraint(ChannelState(grids, gains), params)
    spectral = np.where(action.s, np.log2(1.0 + action.p * gains), 0.0)
    power = n_subcarriers * (action.p @ weights)
    rate = n_subcarriers * bandwidth_hz * (spectral @ weights)
    return power, rate


def _relative(excess: np.ndarray, scale: np.ndarray) -> np.ndarray:
    return np.divide(excess, scale, out=np.zeros_like(excess), where=scale > 0)


def tune_multipliers(evaluate: Callable[[RatePolicyParams, int], Tuple[np.ndarray, np.ndarray]],
                     initial: RatePolicyParams,
                     power_budget: Optional[np.ndarray] = None,
                     kappa0: float = 1.0,
                     tolerance: float = 0.02,
                     max_epochs: int = 2000,
                     gamma_floor: float = 1e-6) -> Tuple[RatePolicyParams, pd.DataFrame]:
    """
    Projected subgradient search for (gamma, nu).

    Each epoch evaluates the current multipliers (exactly or by a short
    simulation on a frozen random stream) and moves gamma by the relative
    power excess and nu by the relative rate shortfall, with step kappa0/k.
    A constraint counts as met when its relative residual is within the
    tolerance, or when it is slack with its multiplier at the lower bound.

    Args:
        evaluate: callable (params, epoch) -> (power per link, rate per link)
        initial: starting multipliers, carrying the rate targets
        power_budget: per-link average power budget, None for unconstrained
        kappa0: initial step size
        tolerance: relative residual accepted as converged
        max_epochs: epochs before giving up
        gamma_floor: smallest admissible power price

    Returns:
        (tuned RatePolicyParams, trajectory DataFrame with one row per epoch)
    """
    params = initial.replace(gamma=np.maximum(initial.gamma, gamma_floor))
    n_links = params.gamma.size
    budget = None if power_budget is None else np.broadcast_to(
        np.asarray(power_budget, dtype=np.float64), (n_links,))
    if budget is not None and np.all(np.isinf(budget)):
        budget = None
    if budget is not None and np.any(budget <= 0):
        raise ConfigurationError("power budgets must be positive")
    trajectory: List[Dict[str, float]] = []

    for epoch in range(1, max_epochs + 1):
        power, rate = evaluate(params, epoch)
        power = np.asarray(power, dtype=np.float64)
        rate = np.asarray(rate, dtype=np.float64)

        if budget is None:
            power_residual = np.zeros(n_links)
        else:
            finite = np.isfinite(budget)
            safe_budget = np.where(finite, budget, 1.0)
            power_residual = np.where(finite, (power - safe_budget) / safe_budget, 0.0)
        rate_residual = _relative(params.rate_target - rate, params.rate_target)

        row = {"epoch": epoch}
        for l in range(n_links):
            row.update({f"gamma_{l}": params.gamma[l], f"nu_{l}": params.nu[l],
                        f"power_{l}": power[l], f"rate_{l}": rate[l],
                        f"power_residual_{l}": power_residual[l],
                        f"rate_residual_{l}": rate_residual[l]})
        trajectory.append(row)

        power_ok = (np.abs(power_residual) < tolerance) | (
            (power_residual <= 0) & (params.gamma <= gamma_floor))
        rate_ok = (np.abs(rate_residual) < tolerance) | ((rate_residual <= 0) & (params.nu <= 0))
        if budget is None:
            power_ok = np.ones(n_links, dtype=bool)
        if np.all(power_ok) and np.all(rate_ok):
            logger.info("multipliers converged after %d epochs", epoch)
            return params, pd.DataFrame(trajectory)

        kappa = kappa0 / epoch
        gamma = params.gamma
        if budget is not None:
            gamma = np.maximum(gamma + kappa * np.clip(power_residual, -1.0, 1.0), gamma_floor)
        nu = np.maximum(params.nu + kappa * np.clip(rate_residual, -1.0, 1.0), 0.0)
        params = params.replace(nu=nu, gamma=gamma)
        logger.debug("epoch %d: gamma=%s nu=%s", epoch, gamma, nu)

    raise InfeasibleTargetError(
        f"multipliers did not converge in {max_epochs} epochs",
        residuals={"power": power_residual.tolist(), "rate": rate_residual.tolist()},
    )


def qos_report(arrival_trace, service_trace, theta: float,
               block_lengths: Sequence[int] = DEFAULT_BLOCK_LENGTHS) -> Dict[str, float]:
    """Compare the arrivals' effective bandwidth with the service's effective capacity."""
    e_b = effective_bandwidth(arrival_trace, theta, block_lengths)
    e_c = effective_capacity(service_trace, theta)
    return {"effective_bandwidth": e_b, "effective_capacity": e_c, "qos_satisfied": bool(e_c >= e_b)}


class RateConstraintPolicy:
    """CSI-only policy; queue lengths never influence the action."""

    name = "rate_constraint"

    def __init__(self, params: RatePolicyParams):
        self.params = params

    def act(self, chi: SystemState) -> Action:
        return allocate_rate_constraint(chi.csi, self.params)

    def observe(self, chi: SystemState, action: Action, next_lengths: np.ndarray, slot: int):
        pass
