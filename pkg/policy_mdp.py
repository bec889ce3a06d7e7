"""
Exact average-cost MDP for small single-hop instances.

The state is the joint channel grid index of every (link, subcarrier) plus
every queue length; queues follow the controlled birth-death kernel (one
arrival or one departure per slot). Relative value iteration gives the
optimal average cost and a greedy policy used as an oracle for the other
policies.
"""

import itertools
import logging
from dataclasses import dataclass, field
from functools import reduce
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy.sparse.csgraph import connected_components

from channel_traffic import ChannelModel, ChannelState, departure_prob
from model_core import Action, CostWeights, QueueState, SystemState, link_rates, stage_cost
from sim_errors import ContractViolationError, ConvergenceError

logger = logging.getLogger(__name__)

ROW_SUM_TOLERANCE = 1e-9
DEFAULT_POWER_FRACTIONS = (0.0, 0.5, 1.0, 2.0)


@dataclass(eq=False)
class MdpInstance:
    """State and action enumeration with the full kernel P[s, a, s'] and cost g[s, a]."""

    channel: ChannelModel
    n_links: int
    n_subcarriers: int
    buffer_cap: int
    arrival_prob: float
    service_scale: float
    power_levels: np.ndarray
    weights: CostWeights
    exact_departure: bool = False
    states: np.ndarray = field(default=None, repr=False)
    actions: List[Action] = field(default_factory=list, repr=False)
    transition: np.ndarray = field(default=None, repr=False)
    cost: np.ndarray = field(default=None, repr=False)

    @property
    def n_states(self) -> int:
        return self.states.shape[0]

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    @property
    def n_queue_states(self) -> int:
        return (self.buffer_cap + 1) ** self.n_links

    def channel_part(self, s: int) -> np.ndarray:
        return self.states[s, :self.n_links * self.n_subcarriers].reshape(self.n_links, self.n_subcarriers)

    def queue_part(self, s: int) -> np.ndarray:
        return self.states[s, self.n_links * self.n_subcarriers:]

    def system_state(self, s: int) -> SystemState:
        csi = ChannelState.from_indices(self.channel, self.channel_part(s))
        return SystemState(csi, QueueState(self.queue_part(s).astype(np.float64), self.buffer_cap))

    def state_index(self, channel_indices: np.ndarray, lengths: np.ndarray) -> int:
        c = np.ravel_multi_index(np.asarray(channel_indices, dtype=np.int64).ravel(),
                                 (self.channel.n_levels,) * (self.n_links * self.n_subcarriers))
        q = np.ravel_multi_index(np.asarray(lengths, dtype=np.int64).ravel(),
                                 (self.buffer_cap + 1,) * self.n_links)
        return int(c * self.n_queue_states + q)

    def kernel_row(self, s: int, action: Action) -> np.ndarray:
        """Next-state distribution from state s under any (possibly continuous-power) action."""
        channel = self.channel_part(s)
        lengths = self.queue_part(s)
        channel_row = reduce(np.kron, [self.channel.transition[h] for h in channel.ravel()])

        rates = link_rates(action, self.channel.gains[channel])
        try:
            death = departure_prob(self.service_scale * rates, 1.0, exact=self.exact_departure)
        except ContractViolationError as e:
            raise ContractViolationError(f"action too aggressive for the slot length: {e}") from e
        death = np.atleast_1d(death)

        queue_rows = []
        for l in range(self.n_links):
            row = np.zeros(self.buffer_cap + 1)
            q = int(lengths[l])
            birth = self.arrival_prob if q < self.buffer_cap else 0.0
            leave = death[l] if q > 0 else 0.0
            stay = 1.0 - birth - leave
            if stay < -ROW_SUM_TOLERANCE:
                raise ContractViolationError(
                    f"negative self-probability {stay:.4g}: action too aggressive for the slot length"
                )
            row[q] = max(stay, 0.0)
            if birth:
                row[q + 1] = birth
            if leave:
                row[q - 1] = leave
            queue_rows.append(row)
        return np.kron(channel_row, reduce(np.kron, queue_rows))


def _enumerate_actions(n_links: int, n_subcarriers: int, power_levels: np.ndarray) -> List[Action]:
    # per subcarrier: idle, or one link at one positive power level
    choices = [None] + [(l, p) for l in range(n_links) for p in power_levels if p > 0]
    actions = []
    for combo in itertools.product(choices, repeat=n_subcarriers):
        s = np.zeros((n_links, n_subcarriers), dtype=bool)
        p = np.zeros((n_links, n_subcarriers))
        for m, choice in enumerate(combo):
            if choice is not None:
                s[choice[0], m] = True
                p[choice[0], m] = choice[1]
        actions.append(Action(s, p))
    return actions


def build_instance(channel: ChannelModel, n_links: int, n_subcarriers: int, buffer_cap: int,
                   arrival_prob: float, service_scale: float, mean_power: float,
                   weights: CostWeights,
                   power_fractions: Sequence[float] = DEFAULT_POWER_FRACTIONS,
                   exact_departure: bool = False) -> MdpInstance:
    """
    Enumerate states and actions and build the birth-death kernel.

    Args:
        channel: channel model shared by every (link, subcarrier)
        n_links: number of links
        n_subcarriers: number of subcarriers (subbands)
        buffer_cap: N_Q in packets
        arrival_prob: per-slot packet arrival probability lambda * tau
        service_scale: tau * bandwidth / mean packet bits, so that the departure
            probability is service_scale * rate in bits/s/Hz
        mean_power: P used to build the power grid
        weights: stage-cost weights
        power_fractions: power grid as multiples of mean_power
        exact_departure: use 1 - exp(-mu tau) instead of mu tau

    Returns:
        MdpInstance
    """
    if arrival_prob < 0 or arrival_prob >= 1:
        raise ContractViolationError(f"arrival probability must be in [0, 1), got {arrival_prob}")
    power_levels = np.unique(np.asarray(power_fractions, dtype=np.float64) * mean_power)
    if power_levels[0] != 0.0:
        power_levels = np.concatenate([[0.0], power_levels])

    n_channel = n_links * n_subcarriers
    channel_grid = itertools.product(range(channel.n_levels), repeat=n_channel)
    states = np.array([c + q for c in channel_grid
                       for q in itertools.product(range(buffer_cap + 1), repeat=n_links)],
                      dtype=np.int64)

    inst = MdpInstance(channel=channel, n_links=n_links, n_subcarriers=n_subcarriers,
                       buffer_cap=buffer_cap, arrival_prob=arrival_prob,
                       service_scale=service_scale, power_levels=power_levels,
                       weights=weights, exact_departure=exact_departure, states=states)
    inst.actions = _enumerate_actions(n_links, n_subcarriers, power_levels)

    S, A = inst.n_states, inst.n_actions
    inst.transition = np.zeros((S, A, S))
    inst.cost = np.zeros((S, A))
    for s in range(S):
        chi = inst.system_state(s)
        for a, action in enumerate(inst.actions):
            inst.transition[s, a] = inst.kernel_row(s, action)
            inst.cost[s, a] = stage_cost(chi, action, weights)

    row_sums = inst.transition.sum(axis=2)
    if np.any(np.abs(row_sums - 1.0) > ROW_SUM_TOLERANCE):
        raise ContractViolationError(f"kernel rows off by up to {np.max(np.abs(row_sums - 1.0)):.3g}")
    logger.info("built MDP instance with %d states and %d actions", S, A)
    return inst


def recurrent_class_count(P: np.ndarray) -> int:
    """Number of closed communicating classes of a stochastic matrix."""
    graph = P > 0
    n_comp, labels = connected_components(graph, directed=True, connection="strong")
    closed = 0
    for c in range(n_comp):
        members = labels == c
        if not np.any(graph[np.ix_(members, ~members)]):
            closed += 1
    return closed


def policy_matrix(inst: MdpInstance, actions: Sequence[Action]):
    """Transition matrix and cost vector of a stationary policy given one Action per state."""
    P = np.array([inst.kernel_row(s, a) for s, a in enumerate(actions)])
    g = np.array([stage_cost(inst.system_state(s), a, inst.weights) for s, a in enumerate(actions)])
    return P, g


def validate_unichain(inst: MdpInstance, rng: np.random.Generator, n_policies: int = 20) -> bool:
    """Sample deterministic policies and check that each induces a single recurrent class."""
    for _ in range(n_policies):
        choice = rng.integers(inst.n_actions, size=inst.n_states)
        P = inst.transition[np.arange(inst.n_states), choice]
        if recurrent_class_count(P) != 1:
            return False
    return True


@dataclass
class RviResult:
    theta: float
    values: np.ndarray
    policy: np.ndarray
    residuals: List[float]
    reference_state: int

    @property
    def sweeps(self) -> int:
        return len(self.residuals)

    def greedy_actions(self, inst: MdpInstance) -> List[Action]:
        return [inst.actions[a] for a in self.policy]


def relative_value_iteration(inst: MdpInstance, tol: float = 1e-9, max_sweeps: int = 200000,
                             reference_state: int = 0, validate: bool = True,
                             seed: int = 0) -> RviResult:
    """
    Relative value iteration for the average-cost Bellman equation.

    Stops when the span of T V - V drops below tol. V is pinned to 0 at the
    reference state; the greedy policy breaks ties toward the lowest action
    index.

    Returns:
        RviResult with theta, the potential vector and the greedy policy
    """
    if validate and not validate_unichain(inst, np.random.default_rng(seed)):
        logger.warning("instance is not unichain for every sampled policy; "
                       "theta may depend on the initial state")

    values = np.zeros(inst.n_states)
    residuals: List[float] = []
    for sweep in range(max_sweeps):
        q_values = inst.cost + inst.transition @ values
        updated = q_values.min(axis=1)
        diff = updated - values
        span = float(diff.max() - diff.min())
        if residuals and span > residuals[-1] * (1 + 1e-9) + 1e-15:
            logger.warning("Bellman span increased at sweep %d: %.3g -> %.3g", sweep, residuals[-1], span)
        residuals.append(span)
        values = updated - updated[reference_state]
        if span < tol:
            theta = float((diff.max() + diff.min()) / 2.0)
            policy = np.argmin(inst.cost + inst.transition @ values, axis=1)
            logger.info("RVI converged in %d sweeps, theta=%.6g", sweep + 1, theta)
            return RviResult(theta, values, policy, residuals, reference_state)

    raise ConvergenceError(f"RVI did not reach span {tol} in {max_sweeps} sweeps", residuals)


def evaluate_policy(inst: MdpInstance, actions: Sequence[Action]) -> float:
    """Exact long-run average cost of a stationary policy (unichain assumed)."""
    P, g = policy_matrix(inst, actions)
    n = P.shape[0]
    A = np.vstack([P.T - np.eye(n), np.ones((1, n))])
    b = np.zeros(n + 1)
    b[-1] = 1.0
    pi, *_ = np.linalg.lstsq(A, b, rcond=None)
    return float(pi @ g)


def quantize_action(inst: MdpInstance, action: Action) -> Action:
    """Snap every power to the nearest level of the instance grid."""
    levels = inst.power_levels
    nearest = levels[np.abs(action.p[..., None] - levels).argmin(axis=-1)]
    return Action(action.s, np.where(action.s, nearest, 0.0))


def simulate_chain(inst: MdpInstance, actions: Sequence[Action], n_slots: int,
                   rng: np.random.Generator, start_state: int = 0) -> float:
    """Monte-Carlo average cost of a stationary policy on the instance kernel."""
    P, g = policy_matrix(inst, actions)
    cdf = np.cumsum(P, axis=1)
    draws = rng.random(n_slots)
    state = start_state
    total = 0.0
    for u in draws:
        total += g[state]
        state = min(int(np.searchsorted(cdf[state], u, side="right")), inst.n_states - 1)
    return total / n_slots


def policy_actions(inst: MdpInstance, decide: Callable[[SystemState], Action]) -> List[Action]:
    """Tabulate any state-feedback policy over the instance's states."""
    return [decide(inst.system_state(s)) for s in range(inst.n_states)]


class OraclePolicy:
    """Plays the RVI-greedy action of the state the simulator is in."""

    name = "oracle"

    def __init__(self, inst: MdpInstance, result: RviResult):
        self.inst = inst
        self.result = result

    def act(self, chi: SystemState) -> Action:
        s = self.inst.state_index(chi.csi.indices, chi.qsi.lengths)
        return self.inst.actions[self.result.policy[s]]

    def observe(self, chi: SystemState, action: Action, next_lengths: np.ndarray, slot: int):
        pass
