"""
Finite-state Markov fading channels and exogenous traffic sources.

Gains are stored as gain powers |H|^2 of a unit-mean Rayleigh channel, so a
transmit power p in unit-noise linear units gives SNR p * |H|^2.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np
from scipy import stats
from scipy.sparse.csgraph import connected_components

from sim_errors import ConfigurationError, ContractViolationError, ReducibleChainError

logger = logging.getLogger(__name__)

ROW_SUM_TOLERANCE = 1e-12


def rayleigh_gain_grid(levels: int = 8) -> np.ndarray:
    """
    Quantize unit-mean Rayleigh gain power into equal-probability bins.

    Each level is the conditional mean of the exponential law inside its bin,
    so the grid keeps the unit mean.

    Args:
        levels: number of grid points

    Returns:
        np.ndarray of increasing gain powers
    """
    if levels < 1:
        raise ConfigurationError(f"channel grid needs at least one level, got {levels}")
    edges = stats.expon.ppf(np.linspace(0.0, 1.0, levels + 1))
    lo, hi = edges[:-1], edges[1:]
    open_bin = np.isinf(hi)
    hi_finite = np.where(open_bin, 0.0, hi)
    # E[X | lo < X < hi] for X ~ Exp(1); the last bin is open-ended
    tail = np.where(open_bin, 0.0, (hi_finite + 1.0) * np.exp(-hi_finite))
    mass = np.exp(-lo) - np.where(open_bin, 0.0, np.exp(-hi_finite))
    return ((lo + 1.0) * np.exp(-lo) - tail) / mass


def birth_death_transition(levels: int, persistence: float = 0.9) -> np.ndarray:
    """Symmetric adjacent-level chain; boundary overflow stays put, so the stationary law is uniform."""
    if not 0.0 <= persistence <= 1.0:
        raise ConfigurationError(f"persistence must be in [0, 1], got {persistence}")
    if levels == 1:
        return np.ones((1, 1))
    move = (1.0 - persistence) / 2.0
    P = np.zeros((levels, levels))
    for k in range(levels):
        if k > 0:
            P[k, k - 1] = move
        if k < levels - 1:
            P[k, k + 1] = move
        P[k, k] = 1.0 - P[k].sum()
    return P


def _is_irreducible(P: np.ndarray) -> bool:
    n_components, _ = connected_components(P > 0, directed=True, connection="strong")
    return n_components == 1


@dataclass(frozen=True, eq=False)
class ChannelModel:
    """Gain grid plus a row-stochastic transition matrix shared by every (link, subband)."""

    gains: np.ndarray
    transition: np.ndarray
    independent_subcarriers: bool = True
    require_irreducible: bool = True

    def __post_init__(self):
        gains = np.asarray(self.gains, dtype=np.float64)
        P = np.asarray(self.transition, dtype=np.float64)
        if gains.ndim != 1 or gains.size == 0:
            raise ConfigurationError("channel grid must be a nonempty 1-D sequence")
        if np.any(gains < 0):
            raise ConfigurationError("gain powers must be nonnegative")
        if P.shape != (gains.size, gains.size):
            raise ConfigurationError(
                f"transition matrix must be {gains.size}x{gains.size}, got {P.shape}"
            )
        if np.any(P < 0) or np.any(np.abs(P.sum(axis=1) - 1.0) > ROW_SUM_TOLERANCE):
            raise ConfigurationError("transition matrix must be row-stochastic")
        if self.require_irreducible and not _is_irreducible(P):
            raise ReducibleChainError("channel transition matrix is reducible")
        object.__setattr__(self, "gains", gains)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "_cdf", np.cumsum(P, axis=1))

    @classmethod
    def rayleigh(cls, levels: int = 8, persistence: float = 0.9,
                 independent_subcarriers: bool = True) -> "ChannelModel":
        return cls(rayleigh_gain_grid(levels), birth_death_transition(levels, persistence),
                   independent_subcarriers)

    @property
    def n_levels(self) -> int:
        return self.gains.size

    def draw_next(self, indices: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        u = rng.random(indices.shape)
        nxt = (self._cdf[indices] < u[..., None]).sum(axis=-1)
        return np.minimum(nxt, self.n_levels - 1)


@dataclass(frozen=True, eq=False)
class ChannelState:
    """Grid index per (link, subcarrier) and the matching gain powers."""

    indices: np.ndarray
    gains: np.ndarray

    @classmethod
    def from_indices(cls, model: ChannelModel, indices) -> "ChannelState":
        indices = np.asarray(indices, dtype=np.int64)
        if indices.ndim != 2:
            raise ContractViolationError(f"channel state must be (links, subcarriers), got {indices.shape}")
        if np.any(indices < 0) or np.any(indices >= model.n_levels):
            raise ContractViolationError("channel index outside the grid")
        return cls(indices, model.gains[indices])


def channel_gains(model: ChannelModel, state: ChannelState) -> np.ndarray:
    return model.gains[state.indices]


def channel_next(m: ChannelModel, s: ChannelState, rng: np.random.Generator) -> ChannelState:
    """Advance every (link, subcarrier) component by one draw from its row of P."""
    if m.independent_subcarriers:
        indices = m.draw_next(s.indices, rng)
    else:
        # one fading process per link, shared by all of its subcarriers
        per_link = m.draw_next(s.indices[:, 0], rng)
        indices = np.repeat(per_link[:, None], s.indices.shape[1], axis=1)
    return ChannelState(indices, m.gains[indices])


def stationary_dist(m: ChannelModel) -> np.ndarray:
    """Stationary law pi of the channel chain (pi P = pi, sum pi = 1)."""
    P = m.transition
    if not _is_irreducible(P):
        raise ReducibleChainError("stationary distribution is not unique for a reducible chain")
    n = P.shape[0]
    A = P.T - np.eye(n)
    A[-1, :] = 1.0
    b = np.zeros(n)
    b[-1] = 1.0
    pi = np.linalg.solve(A, b)
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def initial_channel_state(m: ChannelModel, n_links: int, n_subcarriers: int,
                          rng: np.random.Generator) -> ChannelState:
    """Draw a starting state from the stationary law (uniform over states for reducible chains)."""
    try:
        pi = stationary_dist(m)
    except ReducibleChainError:
        pi = np.full(m.n_levels, 1.0 / m.n_levels)
    shape = (n_links, n_subcarriers) if m.independent_subcarriers else (n_links, 1)
    indices = rng.choice(m.n_levels, size=shape, p=pi)
    if not m.independent_subcarriers:
        indices = np.repeat(indices, n_subcarriers, axis=1)
    return ChannelState(indices, m.gains[indices])


class TrafficMode(str, Enum):
    BIT = "bit"
    POISSON_PACKET = "poisson_packet"


@dataclass(frozen=True)
class TrafficModel:
    """
    Exogenous arrivals for one queue.

    BIT mode: mean_rate is bits per slot; a burst of max_arrival bits arrives
    with probability mean_rate / max_arrival, so arrivals never exceed the bound.
    POISSON_PACKET mode: mean_rate is packets/s; a packet arrives in a slot with
    probability mean_rate * slot_seconds, with an exponential size of mean
    mean_packet_bits.
    """

    mode: TrafficMode
    mean_rate: float
    slot_seconds: float = 1e-3
    mean_packet_bits: float = 5000.0
    max_arrival: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "mode", TrafficMode(self.mode))
        if self.mean_rate < 0:
            raise ConfigurationError(f"mean arrival rate must be nonnegative, got {self.mean_rate}")
        if self.slot_seconds <= 0:
            raise ConfigurationError("slot length must be positive")
        if self.mode is TrafficMode.BIT:
            bound = self.mean_rate if self.max_arrival is None else self.max_arrival
            if bound < self.mean_rate:
                raise ConfigurationError(
                    f"max_arrival {bound} is below the mean rate {self.mean_rate}"
                )
            object.__setattr__(self, "max_arrival", float(bound))
        else:
            if self.mean_packet_bits <= 0:
                raise ConfigurationError("mean packet size must be positive")
            if self.arrival_prob >= 1.0:
                raise ConfigurationError(
                    f"lambda*tau = {self.arrival_prob} must be well below 1 in packet mode"
                )

    @property
    def arrival_prob(self) -> float:
        if self.mode is TrafficMode.POISSON_PACKET:
            return self.mean_rate * self.slot_seconds
        if self.max_arrival == 0:
            return 0.0
        return self.mean_rate / self.max_arrival

    @property
    def per_slot_bound(self) -> float:
        """Largest amount one slot can bring (bits in BIT mode, packets otherwise)."""
        return float(self.max_arrival) if self.mode is TrafficMode.BIT else 1.0


def sample_arrivals(t: TrafficModel, rng: np.random.Generator, n_queues: int = 1) -> np.ndarray:
    """One slot of arrivals per queue: bits in BIT mode, packet counts (0/1) in packet mode."""
    hits = rng.random(n_queues) < t.arrival_prob
    if t.mode is TrafficMode.BIT:
        return np.where(hits, t.max_arrival, 0.0)
    return hits.astype(np.float64)


def sample_packet_sizes(t: TrafficModel, rng: np.random.Generator, count: int) -> np.ndarray:
    return rng.exponential(t.mean_packet_bits, size=count)


def departure_prob(mu_bar, tau: float, exact: bool = False):
    """
    Per-slot departure probability for packet service rate mu_bar (packets/s).

    Returns mu_bar * tau, or 1 - exp(-mu_bar * tau) when exact is set.
    Accepts scalars or arrays.
    """
    x = np.asarray(mu_bar, dtype=np.float64) * tau
    if np.any(x < 0):
        raise ContractViolationError("service rate and slot length must be nonnegative")
    if np.any(x >= 1.0):
        raise ContractViolationError(
            f"mu_bar*tau = {np.max(x):.4g} >= 1; shorten the slot or cap the power"
        )
    prob = -np.expm1(-x) if exact else x
    return float(prob) if np.ndim(prob) == 0 else prob


def birth_death_mean(arrival_prob: float, service_prob: float, buffer_cap: int) -> Tuple[float, np.ndarray]:
    """
    Stationary mean of a finite birth-death queue with per-slot birth and death
    probabilities, service applied before arrival.

    Returns:
        (mean length, stationary distribution over 0..buffer_cap)
    """
    a, d = arrival_prob, service_prob
    n = buffer_cap + 1
    P = np.zeros((n, n))
    for q in range(n):
        after_service = [(q - 1, d), (q, 1.0 - d)] if q > 0 else [(q, 1.0)]
        for mid, w in after_service:
            if mid < buffer_cap:
                P[q, mid + 1] += w * a
                P[q, mid] += w * (1.0 - a)
            else:
                P[q, mid] += w
    A = P.T - np.eye(n)
    A[-1, :] = 1.0
    b = np.zeros(n)
    b[-1] = 1.0
    pi = np.linalg.solve(A, b)
    return float(pi @ np.arange(n)), pi


def snr_db_to_power(snr_db: float) -> float:
    return math.pow(10.0, snr_db / 10.0)
