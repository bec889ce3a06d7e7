"""
Distributed online learning of per-link value functions.

PotentialTable learns per-link potentials V_l(H_l, Q_l) whose sum
approximates the global potential; updates happen only in representative
states, where every link but one sits at its reference local state.
QFactorTable learns per-link, per-subcarrier Q-factors q_l(H, Q, s) and
updates every slot from purely local observations.

Both tables hold a reference entry pinned to 0, count visits per entry and
use the step size 1/k^a.
"""

import logging
from dataclasses import dataclass
from functools import reduce
from typing import Dict, List, Optional

import numpy as np

from channel_traffic import ChannelModel, stationary_dist
from model_core import Action, CostWeights, SystemState
from sim_errors import ConfigurationError, ContractViolationError
from water_filling import assign_max_bids, assign_min_bids, bid_matrix, water_filling_power

logger = logging.getLogger(__name__)

DEFAULT_STEP_EXPONENT = 0.85
TRACE_SAMPLE_ENTRIES = 3


def validate_step_exponent(exponent: float) -> float:
    if not 0.5 < exponent <= 1.0:
        raise ConfigurationError(
            f"step-size exponent must lie in (0.5, 1] for sum(e_k) = inf and sum(e_k^2) < inf, got {exponent}"
        )
    return float(exponent)


def step_size(k: int, exponent: float = DEFAULT_STEP_EXPONENT) -> float:
    """Robbins-Monro step 1/k^a for the k-th visit (k >= 1)."""
    validate_step_exponent(exponent)
    if k < 1:
        raise ContractViolationError(f"visit count must be >= 1, got {k}")
    return 1.0 / k ** exponent


def per_link_costs(chi: SystemState, action: Action, weights: CostWeights) -> np.ndarray:
    """Each link's share of the stage cost: nu Q + eta 1[Q = N_Q] + gamma * power."""
    lengths = chi.qsi.lengths
    return (weights.queue * lengths + weights.drop * chi.qsi.at_cap
            + weights.power * action.power_per_link)


def require_power_price(weights: CostWeights) -> CostWeights:
    if np.any(weights.power <= 0):
        raise ConfigurationError(
            f"learning policies need a positive power price on every link, got {weights.power.tolist()}"
        )
    return weights


def full_power_service_prob(channel: ChannelModel, power_budget: float, n_subcarriers: int,
                            service_scale: float) -> float:
    """Departure probability of a link that spreads its whole budget evenly over its subcarriers."""
    pi = stationary_dist(channel)
    per_subcarrier = power_budget / n_subcarriers
    rate = n_subcarriers * float(pi @ np.log2(1.0 + channel.gains * per_subcarrier))
    return min(service_scale * rate, 1.0)


def full_power_potential(arrival_prob: float, service_prob: float, buffer_cap: int,
                         queue_weight: float, drop_weight: float, busy_cost: float) -> np.ndarray:
    """
    Relative values h(Q) of one queue served with a fixed probability whenever it is nonempty.

    Solves h + theta = c + P h with h(0) = 0 on the birth-death chain of
    Q' = min(N_Q, max(Q - served, 0) + arrival), where the stage cost is
    c(Q) = nu Q + eta 1[Q = N_Q] + busy_cost 1[Q > 0].

    Args:
        arrival_prob: per-slot packet arrival probability
        service_prob: per-slot departure probability of a nonempty queue
        buffer_cap: N_Q
        queue_weight: nu
        drop_weight: eta
        busy_cost: power cost paid in every slot with a nonempty queue

    Returns:
        np.ndarray: h(0..N_Q), all zero when nothing arrives
    """
    if not 0.0 <= arrival_prob <= 1.0 or not 0.0 <= service_prob <= 1.0:
        raise ContractViolationError("arrival and service probabilities must lie in [0, 1]")
    n = buffer_cap + 1
    if arrival_prob == 0.0:
        return np.zeros(n)
    b, d = arrival_prob, service_prob

    P = np.zeros((n, n))
    P[0, 1] = b
    for q in range(1, n):
        P[q, q - 1] = d * (1.0 - b)
        if q < buffer_cap:
            P[q, q + 1] = b * (1.0 - d)
    P[np.arange(n), np.arange(n)] = 1.0 - P.sum(axis=1)

    q = np.arange(n, dtype=np.float64)
    cost = queue_weight * q + drop_weight * (q == buffer_cap) + busy_cost * (q > 0)
    A = np.zeros((n + 1, n + 1))
    A[:n, :n] = np.eye(n) - P
    A[:n, n] = 1.0
    A[n, 0] = 1.0
    solution = np.linalg.solve(A, np.concatenate([cost, [0.0]]))
    return solution[:n]


def queue_prior(channel: ChannelModel, n_subcarriers: int, buffer_cap: int, arrival_prob: float,
                service_scale: float, power_budget: float, weights: CostWeights) -> np.ndarray:
    """Full-power potential of every link, shape (links, N_Q + 1)."""
    d = full_power_service_prob(channel, power_budget, n_subcarriers, service_scale)
    return np.stack([
        full_power_potential(arrival_prob, d, buffer_cap, float(weights.queue[l]), float(weights.drop[l]),
                             float(weights.power[l]) * power_budget)
        for l in range(weights.queue.size)
    ])


def max_order_statistic(pi: np.ndarray, n: int) -> np.ndarray:
    """Distribution over grid indices of the largest of n i.i.d. draws from pi (index 0 when n = 0)."""
    if n == 0:
        pmf = np.zeros_like(pi)
        pmf[0] = 1.0
        return pmf
    cdf = np.cumsum(pi) ** n
    return np.diff(np.concatenate([[0.0], cdf]))


@dataclass
class PotentialObservation:
    """One slot seen by the potential learner: local states at t, next queues, per-link costs."""

    channel_index: np.ndarray
    lengths: np.ndarray
    next_lengths: np.ndarray
    link_costs: np.ndarray


@dataclass
class ReferenceCache:
    """Local channel indices, next queue lengths and cost cached at the last reference visit."""

    channel_index: np.ndarray
    next_lengths: np.ndarray
    cost: float


class _LearningTracker:
    def __init__(self, delta: float, window: int):
        self.delta = delta
        self.window = window
        self.quiet_slots = 0
        self.last_change = 0.0

    def record(self, change: float):
        self.last_change = change
        self.quiet_slots = self.quiet_slots + 1 if change < self.delta else 0

    @property
    def converged(self) -> bool:
        return self.quiet_slots >= self.window


class PotentialTable:
    """
    Per-link potentials over local states (H_l, Q_l).

    H_l is the joint grid index of the link's subcarriers. The conditional
    expectation E[V_l(H', Q) | H] is cached and refreshed incrementally after
    every update.
    """

    def __init__(self, channel: ChannelModel, n_links: int, n_subcarriers: int, buffer_cap: int,
                 step_exponent: float = DEFAULT_STEP_EXPONENT, reference_csi: str = "fixed",
                 reference_channel: int = 0, delta: float = 1e-3, window: int = 10000):
        self.channel = channel
        self.n_links = n_links
        self.n_subcarriers = n_subcarriers
        self.buffer_cap = buffer_cap
        self.step_exponent = validate_step_exponent(step_exponent)
        self.local_shape = (channel.n_levels,) * n_subcarriers
        n_local = channel.n_levels ** n_subcarriers

        self.values = np.zeros((n_links, n_local, buffer_cap + 1))
        self.expected = np.zeros_like(self.values)
        self.counts = np.zeros(self.values.shape, dtype=np.int64)

        if reference_csi not in ("fixed", "any"):
            raise ConfigurationError(f"reference_csi must be 'fixed' or 'any', got {reference_csi!r}")
        self.reference_csi = reference_csi
        self.reference = np.zeros((n_local, buffer_cap + 1), dtype=bool)
        if reference_csi == "fixed":
            ref = np.ravel_multi_index((reference_channel,) * n_subcarriers, self.local_shape)
            self.reference[ref, 0] = True
        else:
            self.reference[:, 0] = True
        self.cache: Optional[ReferenceCache] = None
        self.tracker = _LearningTracker(delta, window)
        logger.warning("potential learning assumes the reference state is reachable from every state")

    def local_index(self, channel_indices: np.ndarray) -> np.ndarray:
        """Joint subcarrier grid index per link from a (links, subcarriers) index array."""
        return np.ravel_multi_index(tuple(np.asarray(channel_indices).T), self.local_shape)

    def is_reference(self, h: np.ndarray, q: np.ndarray) -> np.ndarray:
        return self.reference[h, q.astype(np.int64)]

    def delta_v(self, h: np.ndarray, q: np.ndarray) -> np.ndarray:
        """E[V_l(H', Q_l) | H_l] - E[V_l(H', Q_l - 1) | H_l], zero for empty queues."""
        q = q.astype(np.int64)
        links = np.arange(self.n_links)
        upper = self.expected[links, h, q]
        lower = self.expected[links, h, np.maximum(q - 1, 0)]
        return np.where(q > 0, upper - lower, 0.0)

    def expectation_sum(self, h: np.ndarray, q: np.ndarray) -> float:
        return float(self.expected[np.arange(self.n_links), h, q.astype(np.int64)].sum())

    def _transition_column(self, h: int) -> np.ndarray:
        # Pr[H' = h | H] for every current local state H
        digits = np.unravel_index(h, self.local_shape)
        return reduce(np.kron, [self.channel.transition[:, d] for d in digits])

    def set_value(self, link: int, h: int, q: int, value: float):
        change = value - self.values[link, h, q]
        self.values[link, h, q] = value
        self.expected[link, :, q] += change * self._transition_column(h)

    def warm_start(self, prior: np.ndarray) -> "PotentialTable":
        """Start every channel state of each link from a queue-only potential prior[l, Q]."""
        prior = np.broadcast_to(np.asarray(prior, dtype=np.float64), (self.n_links, self.buffer_cap + 1))
        if np.any(prior[:, 0] != 0.0):
            raise ContractViolationError("a potential prior must vanish at Q = 0, where the references sit")
        self.values[:] = prior[:, None, :]
        # transition rows sum to 1, so a channel-flat table is its own expectation
        self.expected[:] = prior[:, None, :]
        return self

    def norm(self) -> float:
        return float(np.max(np.abs(self.values)))

    def trace_row(self, slot: int) -> Dict[str, float]:
        ref_h = int(np.argmax(self.reference[:, 0]))
        row = {"slot": slot, "table_norm": self.norm(), "last_change": self.tracker.last_change}
        for q in range(1, min(self.buffer_cap, TRACE_SAMPLE_ENTRIES) + 1):
            row[f"v_link0_h{ref_h}_q{q}"] = float(self.values[0, ref_h, q])
        return row


def approx_v_action(chi: SystemState, tbl: PotentialTable, weights: CostWeights,
                    service_scale: float) -> Action:
    """
    Water-filling on learned potential differentials.

    Link l's water level is service_scale * dV_l(Q_l) / gamma_l with
    service_scale = tau * bandwidth / mean packet bits; empty queues and
    nonpositive differentials get no allocation. A zero power price leaves
    the water level unbounded and is rejected.
    """
    require_power_price(weights)
    h = tbl.local_index(chi.csi.indices)
    diff = tbl.delta_v(h, chi.qsi.lengths)
    weight = np.maximum(service_scale * diff, 0.0)
    bids, powers = bid_matrix(weight, weights.power, chi.gains)
    return assign_max_bids(bids, powers)


def learn_v_update(tbl: PotentialTable, obs: PotentialObservation,
                   cache: ReferenceCache) -> PotentialTable:
    """
    Move the off-reference link's entry toward the observed relative value.

    The target is g_l + sum_l' E[V_l'(H', Q_l'(t+1)) | H_l'(t)] minus the
    same expression evaluated at the cached reference visit.
    """
    off = ~tbl.is_reference(obs.channel_index, obs.lengths)
    if off.sum() != 1:
        raise ContractViolationError(
            f"potential updates need exactly one link off its reference state, got {int(off.sum())}"
        )
    link = int(np.argmax(off))
    h = int(obs.channel_index[link])
    q = int(obs.lengths[link])

    target = obs.link_costs[link] + tbl.expectation_sum(obs.channel_index, obs.next_lengths)
    baseline = cache.cost + tbl.expectation_sum(cache.channel_index, cache.next_lengths)
    tbl.counts[link, h, q] += 1
    eps = step_size(int(tbl.counts[link, h, q]), tbl.step_exponent)
    current = tbl.values[link, h, q]
    tbl.set_value(link, h, q, current + eps * (target - baseline - current))
    return tbl


class PotentialLearningPolicy:
    """Acts on the potential table and trains it from the slots it observes."""

    name = "approx_v"

    def __init__(self, table: PotentialTable, weights: CostWeights, service_scale: float,
                 trace_every: int = 0):
        self.table = table
        self.weights = require_power_price(weights)
        self.service_scale = service_scale
        self.trace_every = trace_every
        self.trace: List[Dict[str, float]] = []

    def act(self, chi: SystemState) -> Action:
        return approx_v_action(chi, self.table, self.weights, self.service_scale)

    def observe(self, chi: SystemState, action: Action, next_lengths: np.ndarray, slot: int):
        tbl = self.table
        h = tbl.local_index(chi.csi.indices)
        lengths = chi.qsi.lengths
        off = ~tbl.is_reference(h, lengths)
        costs = per_link_costs(chi, action, self.weights)
        change = 0.0

        if not np.any(off):
            tbl.cache = ReferenceCache(h.copy(), np.asarray(next_lengths).copy(), float(costs.sum()))
        elif off.sum() == 1 and tbl.cache is not None:
            link = int(np.argmax(off))
            old = tbl.values[link, h[link], int(lengths[link])]
            obs = PotentialObservation(h, lengths, np.asarray(next_lengths), costs)
            learn_v_update(tbl, obs, tbl.cache)
            change = abs(tbl.values[link, h[link], int(lengths[link])] - old)

        tbl.tracker.record(change)
        if self.trace_every and slot % self.trace_every == 0:
            self.trace.append(tbl.trace_row(slot))


class QFactorTable:
    """
    Per-link, per-subcarrier Q-factors q_l(h, Q, s) over gain level, queue
    length and the assignment bit.

    The reference cell (h_ref, Q=0, s=0) stays at 0. The winning probability
    Pr[|H| >= H*] against the best of the other L-1 links comes from the exact
    order statistic of the stationary gain law.
    """

    def __init__(self, channel: ChannelModel, n_links: int, n_subcarriers: int, buffer_cap: int,
                 step_exponent: float = DEFAULT_STEP_EXPONENT, reference_channel: int = 0,
                 delta: float = 1e-3, window: int = 10000):
        self.channel = channel
        self.n_links = n_links
        self.n_subcarriers = n_subcarriers
        self.buffer_cap = buffer_cap
        self.step_exponent = validate_step_exponent(step_exponent)
        self.reference_channel = reference_channel

        shape = (n_links, channel.n_levels, buffer_cap + 1, 2)
        self.values = np.zeros(shape)
        self.counts = np.zeros(shape, dtype=np.int64)
        self.cache: List[Optional[int]] = [None] * n_links

        order = np.argsort(channel.gains, kind="stable")
        pi = stationary_dist(channel)
        pmf_sorted = max_order_statistic(pi[order], n_links - 1)
        self.max_gain_pmf = np.zeros_like(pmf_sorted)
        self.max_gain_pmf[order] = pmf_sorted
        # Pr[g_h >= H*] for every level h
        self.win_prob = np.array([self.max_gain_pmf[channel.gains <= g].sum() for g in channel.gains])
        self.tracker = _LearningTracker(delta, window)

    def nu(self, link: int) -> np.ndarray:
        """
        nu_l(h, Q): Q-factor averaged over the winning indicator, shape (levels, N_Q + 1).

        An empty queue is never served, so its s = 1 cell is read as the s = 0 one.
        """
        w = self.win_prob[:, None]
        idle = self.values[link, :, :, 0]
        served = self.values[link, :, :, 1].copy()
        served[:, 0] = idle[:, 0]
        return w * served + (1.0 - w) * idle

    def warm_start(self, prior: np.ndarray) -> "QFactorTable":
        """Split a queue-only potential prior[l, Q] evenly over the subcarrier cells."""
        prior = np.broadcast_to(np.asarray(prior, dtype=np.float64), (self.n_links, self.buffer_cap + 1))
        if np.any(prior[:, 0] != 0.0):
            raise ContractViolationError("a potential prior must vanish at Q = 0, where the reference cell sits")
        self.values[:] = (prior / self.n_subcarriers)[:, None, :, None]
        return self

    def advantage(self, link: int, h: np.ndarray, q: int) -> np.ndarray:
        """q_l(h, Q, 1) - q_l(h, Q, 0): change of the link's Q-factor sum when it takes subcarrier h."""
        return self.values[link, h, q, 1] - self.values[link, h, q, 0]

    def nu_bar(self, link: int) -> np.ndarray:
        """E[nu_l(H', Q) | H = h] via the channel transition rows."""
        return self.channel.transition @ self.nu(link)

    def delta_nu_bar(self, link: int, h: np.ndarray, q: int) -> np.ndarray:
        if q <= 0:
            return np.zeros(np.shape(h))
        table = self.nu_bar(link)
        return table[h, q] - table[h, q - 1]

    def norm(self) -> float:
        return float(np.max(np.abs(self.values)))

    def trace_row(self, slot: int) -> Dict[str, float]:
        row = {"slot": slot, "table_norm": self.norm(), "last_change": self.tracker.last_change}
        for q in range(1, min(self.buffer_cap, TRACE_SAMPLE_ENTRIES) + 1):
            row[f"q_link0_h{self.reference_channel}_q{q}_s1"] = float(
                self.values[0, self.reference_channel, q, 1])
        return row


def approx_q_action(chi: SystemState, tbl: QFactorTable, weights: CostWeights,
                    service_scale: float) -> Action:
    """
    Each subcarrier goes to the nonempty queue whose Q-factor sum drops most.

    Giving subcarrier m to link l changes sum_l q_l by
    q_l(H_lm, Q_l, 1) - q_l(H_lm, Q_l, 0), so the lowest such bid wins; with
    equal idle cells this is the lowest q_l(H_lm, Q_l, 1). The winner's power
    is water-filling at level service_scale * sum_m dnu_l(H_lm, Q_l) / gamma_l.
    """
    require_power_price(weights)
    indices = chi.csi.indices
    lengths = chi.qsi.lengths.astype(np.int64)
    bids = np.stack([tbl.advantage(l, indices[l], int(lengths[l])) for l in range(tbl.n_links)])

    weight = np.zeros(tbl.n_links)
    for l in range(tbl.n_links):
        weight[l] = max(service_scale * float(tbl.delta_nu_bar(l, indices[l], int(lengths[l])).sum()), 0.0)
    level = weight / np.asarray(weights.power, dtype=np.float64)
    powers = water_filling_power(level, chi.gains)
    return assign_min_bids(bids, powers, eligible=lengths > 0)


def learn_q_update(tbl: QFactorTable, link: int, h: int, q: int, s: int, cost: float,
                   next_length: int, reference_next_length: int) -> QFactorTable:
    """
    Move cell (h, q, s) of one link toward cost + nu_bar(h, Q') minus the
    reference term nu_bar(h_ref, Q'_ref) cached at the last reference-cell visit.
    """
    if (h, q, s) == (tbl.reference_channel, 0, 0):
        raise ContractViolationError("the reference cell is pinned and never updated")
    nu_bar = tbl.nu_bar(link)
    target = cost + nu_bar[h, next_length]
    baseline = nu_bar[tbl.reference_channel, reference_next_length]
    tbl.counts[link, h, q, s] += 1
    eps = step_size(int(tbl.counts[link, h, q, s]), tbl.step_exponent)
    current = tbl.values[link, h, q, s]
    tbl.values[link, h, q, s] = current + eps * (target - baseline - current)
    return tbl


class QFactorLearningPolicy:
    """Acts on the Q-factor table and trains it from local per-subcarrier observations."""

    name = "approx_q"

    def __init__(self, table: QFactorTable, weights: CostWeights, service_scale: float,
                 trace_every: int = 0):
        self.table = table
        self.weights = require_power_price(weights)
        self.service_scale = service_scale
        self.trace_every = trace_every
        self.trace: List[Dict[str, float]] = []

    def act(self, chi: SystemState) -> Action:
        return approx_q_action(chi, self.table, self.weights, self.service_scale)

    def observe(self, chi: SystemState, action: Action, next_lengths: np.ndarray, slot: int):
        tbl = self.table
        n_sub = tbl.n_subcarriers
        lengths = chi.qsi.lengths.astype(np.int64)
        next_lengths = np.asarray(next_lengths).astype(np.int64)
        at_cap = chi.qsi.at_cap
        change = 0.0

        for l in range(tbl.n_links):
            cells: Dict[tuple, List[float]] = {}
            for m in range(n_sub):
                key = (int(chi.csi.indices[l, m]), int(lengths[l]), int(action.s[l, m]))
                cells.setdefault(key, []).append(float(action.p[l, m]))

            reference_key = (tbl.reference_channel, 0, 0)
            cached = tbl.cache[l]
            if cached is not None:
                for (h, q, s), powers in cells.items():
                    if (h, q, s) == reference_key:
                        continue
                    cost = (self.weights.queue[l] * q + self.weights.drop[l] * at_cap[l]) / n_sub \
                        + self.weights.power[l] * float(np.mean(powers))
                    old = tbl.values[l, h, q, s]
                    learn_q_update(tbl, l, h, q, s, cost, int(next_lengths[l]), cached)
                    change = max(change, abs(tbl.values[l, h, q, s] - old))
            if reference_key in cells:
                tbl.cache[l] = int(next_lengths[l])

        tbl.tracker.record(change)
        if self.trace_every and slot % self.trace_every == 0:
            self.trace.append(tbl.trace_row(slot))
