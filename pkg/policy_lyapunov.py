"""
Queue-aware max-weight policies and Lyapunov drift diagnostics.

M-LWDF weights each link's rate by its queue length and prices power with a
per-link multiplier. EECA minimizes drift-plus-penalty with a single
tradeoff parameter V.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from model_core import Action, SystemState
from sim_errors import ConfigurationError, ContractViolationError
from water_filling import assign_max_bids, bid_matrix

logger = logging.getLogger(__name__)

DRIFT_BINS = 20


@dataclass(frozen=True, eq=False)
class LyapunovParams:
    V: float = 1.0
    gamma: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.V < 0:
            raise ConfigurationError(f"V must be nonnegative, got {self.V}")
        if self.gamma is not None:
            gamma = np.atleast_1d(np.asarray(self.gamma, dtype=np.float64))
            if np.any(gamma < 0):
                raise ConfigurationError("power multipliers must be nonnegative")
            object.__setattr__(self, "gamma", gamma)

    @classmethod
    def uniform(cls, n_links: int, gamma: float = 1.0, V: float = 1.0) -> "LyapunovParams":
        return cls(V=V, gamma=np.full(n_links, gamma))


@dataclass
class DriftDiagnostics:
    B: float
    epsilon: float
    drift: np.ndarray
    mean_backlog: float

    @property
    def backlog_bound(self) -> float:
        """B / epsilon, the time-average backlog bound implied by negative drift."""
        return self.B / self.epsilon if self.epsilon > 0 else float("inf")

    @property
    def bound_holds(self) -> bool:
        """No negative drift (epsilon <= 0) certifies nothing, so the bound fails."""
        if self.epsilon <= 0:
            return False
        return self.mean_backlog <= self.backlog_bound


def allocate_mlwdf(chi: SystemState, params: LyapunovParams) -> Action:
    """Bid Q log2(1 + |H|^2 p) - gamma p at water level Q/gamma."""
    if params.gamma is None:
        raise ContractViolationError("M-LWDF needs per-link power multipliers")
    bids, powers = bid_matrix(chi.qsi.lengths, params.gamma, chi.gains)
    return assign_max_bids(bids, powers)


def allocate_eeca(chi: SystemState, params: LyapunovParams) -> Action:
    """Bid 2Q log2(1 + |H|^2 p) - V p at water level 2Q/V."""
    if params.V <= 0:
        raise ContractViolationError("EECA needs V > 0")
    lengths = chi.qsi.lengths
    bids, powers = bid_matrix(2.0 * lengths, np.full(lengths.shape, params.V), chi.gains)
    return assign_max_bids(bids, powers)


def lyapunov_value(lengths) -> np.ndarray:
    """L(Q) = sum Q^2, per row when given a (slots, queues) trace."""
    lengths = np.asarray(lengths, dtype=np.float64)
    return np.sum(lengths ** 2, axis=-1)


def drift_bound_B(mu_out_max, lambda_max, mu_in_max=None) -> float:
    """
    B = sum_n ((mu_out_max)^2 + (lambda_max + mu_in_max)^2).

    Args:
        mu_out_max: per-node largest service per slot
        lambda_max: per-node largest exogenous arrival per slot
        mu_in_max: per-node largest endogenous arrival per slot (0 for single hop)

    Returns:
        float
    """
    mu_out = np.atleast_1d(np.asarray(mu_out_max, dtype=np.float64))
    lam = np.broadcast_to(np.asarray(lambda_max, dtype=np.float64), mu_out.shape)
    mu_in = np.zeros_like(mu_out) if mu_in_max is None else np.broadcast_to(
        np.asarray(mu_in_max, dtype=np.float64), mu_out.shape)
    if not (np.all(np.isfinite(mu_out)) and np.all(np.isfinite(lam)) and np.all(np.isfinite(mu_in))):
        raise ConfigurationError("drift bound needs finite rate caps and arrival bounds")
    if np.any(mu_out < 0) or np.any(lam < 0) or np.any(mu_in < 0):
        raise ConfigurationError("rate caps and arrival bounds must be nonnegative")
    return float(np.sum(mu_out ** 2 + (lam + mu_in) ** 2))


def max_service_per_slot(max_gain: float, max_power: float, n_subcarriers: int,
                         bandwidth_hz: float, slot_seconds: float) -> float:
    """Largest amount one link can serve in a slot when it holds every subcarrier."""
    return slot_seconds * bandwidth_hz * n_subcarriers * float(np.log2(1.0 + max_power * max_gain))


def measure_drift(trace, B: float, bins: int = DRIFT_BINS) -> DriftDiagnostics:
    """
    One-slot drift samples and an empirical negative-drift slope.

    The drift samples are grouped by the backlog sum Q(t); epsilon is the
    largest slope for which every group's mean drift stays below
    B - epsilon * sum Q.

    Args:
        trace: queue lengths per slot, shaped (slots, queues)
        B: drift-bound constant
        bins: number of backlog groups

    Returns:
        DriftDiagnostics
    """
    trace = np.asarray(trace, dtype=np.float64)
    if trace.ndim == 1:
        trace = trace[:, None]
    if trace.shape[0] < 2:
        raise ContractViolationError("drift needs at least two slots")
    lyap = lyapunov_value(trace)
    drift = np.diff(lyap)
    backlog = trace[:-1].sum(axis=1)
    mean_backlog = float(trace.sum(axis=1).mean())

    active = backlog > 0
    if not np.any(active):
        return DriftDiagnostics(B=B, epsilon=float("inf"), drift=drift, mean_backlog=mean_backlog)

    edges = np.unique(np.quantile(backlog[active], np.linspace(0.0, 1.0, bins + 1)))
    group = np.clip(np.searchsorted(edges, backlog[active], side="right") - 1, 0, max(len(edges) - 2, 0))
    slopes = []
    for g in np.unique(group):
        members = group == g
        level = backlog[active][members].mean()
        slopes.append((B - drift[active][members].mean()) / level)
    epsilon = max(float(min(slopes)), 0.0)
    logger.debug("drift groups=%d epsilon=%.4g", len(slopes), epsilon)
    return DriftDiagnostics(B=B, epsilon=epsilon, drift=drift, mean_backlog=mean_backlog)


class MlwdfPolicy:
    name = "mlwdf"

    def __init__(self, params: LyapunovParams):
        self.params = params

    def act(self, chi: SystemState) -> Action:
        return allocate_mlwdf(chi, self.params)

    def observe(self, chi: SystemState, action: Action, next_lengths: np.ndarray, slot: int):
        pass


class EecaPolicy:
    name = "eeca"

    def __init__(self, params: LyapunovParams):
        self.params = params

    def act(self, chi: SystemState) -> Action:
        return allocate_eeca(chi, self.params)

    def observe(self, chi: SystemState, action: Action, next_lengths: np.ndarray, slot: int):
        pass
