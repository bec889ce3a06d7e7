"""
Core system model: queue state and dynamics, control actions, per-stage cost,
and the delay/drop/power/throughput bookkeeping shared by every policy.

Queue amounts are bits in FLUID mode and packets in PACKET mode. Delays are
reported in slots; multiply by the slot length to get seconds.
"""

import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Deque, Optional, Tuple

import numpy as np

from channel_traffic import ChannelState
from sim_errors import ContractViolationError, UndefinedDelayError

logger = logging.getLogger(__name__)


class QueueUnits(str, Enum):
    FLUID = "fluid"
    PACKET = "packet"


class Discipline(str, Enum):
    FIFO = "fifo"
    LIFO = "lifo"


@dataclass(frozen=True, eq=False)
class QueueState:
    """Per-(node, commodity) backlog with a common buffer cap N_Q."""

    lengths: np.ndarray
    buffer_cap: float
    discipline: Discipline = Discipline.FIFO
    destination_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        lengths = np.asarray(self.lengths, dtype=np.float64)
        object.__setattr__(self, "lengths", lengths)
        if self.buffer_cap <= 0:
            raise ContractViolationError(f"buffer_cap must be positive, got {self.buffer_cap}")
        if np.any(lengths < 0) or np.any(lengths > self.buffer_cap):
            raise ContractViolationError(
                f"queue lengths must lie in [0, {self.buffer_cap}], got {lengths}"
            )
        if self.destination_mask is not None:
            mask = np.asarray(self.destination_mask, dtype=bool)
            if mask.shape != lengths.shape:
                raise ContractViolationError("destination_mask shape does not match lengths")
            if np.any(lengths[mask] != 0):
                raise ContractViolationError("destination queues must be empty")
            object.__setattr__(self, "destination_mask", mask)

    @classmethod
    def empty(cls, shape, buffer_cap: float, discipline: Discipline = Discipline.FIFO,
              destination_mask: Optional[np.ndarray] = None) -> "QueueState":
        return cls(np.zeros(shape), buffer_cap, discipline, destination_mask)

    @property
    def at_cap(self) -> np.ndarray:
        return self.lengths >= self.buffer_cap

    def with_lengths(self, lengths: np.ndarray) -> "QueueState":
        return QueueState(lengths, self.buffer_cap, self.discipline, self.destination_mask)


@dataclass(frozen=True)
class SystemState:
    """The control state chi = (CSI, QSI) of a single-hop system."""

    csi: ChannelState
    qsi: QueueState

    def __post_init__(self):
        if self.csi.indices.shape[0] != self.qsi.lengths.shape[0]:
            raise ContractViolationError(
                f"CSI covers {self.csi.indices.shape[0]} links but QSI covers "
                f"{self.qsi.lengths.shape[0]}"
            )

    @property
    def n_links(self) -> int:
        return self.csi.indices.shape[0]

    @property
    def n_subcarriers(self) -> int:
        return self.csi.indices.shape[1]

    @property
    def gains(self) -> np.ndarray:
        return self.csi.gains


@dataclass(frozen=True, eq=False)
class Action:
    """Subcarrier assignment s and transmit power p, both shaped (links, subcarriers)."""

    s: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.s, dtype=bool)
        p = np.asarray(self.p, dtype=np.float64)
        if s.shape != p.shape or s.ndim != 2:
            raise ContractViolationError(f"s and p must share a 2-D shape, got {s.shape} and {p.shape}")
        if np.any(p < 0):
            raise ContractViolationError("power must be nonnegative")
        if np.any(s.sum(axis=0) > 1):
            raise ContractViolationError("a subcarrier can be assigned to at most one link")
        if np.any((p > 0) & ~s):
            raise ContractViolationError("positive power on an unassigned subcarrier")
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "p", p)

    @classmethod
    def idle(cls, n_links: int, n_subcarriers: int) -> "Action":
        return cls(np.zeros((n_links, n_subcarriers), dtype=bool),
                   np.zeros((n_links, n_subcarriers)))

    @property
    def power_per_link(self) -> np.ndarray:
        return self.p.sum(axis=1)

    @property
    def winners(self) -> np.ndarray:
        """Winning link per subcarrier, -1 where idle."""
        assigned = self.s.any(axis=0)
        return np.where(assigned, self.s.argmax(axis=0), -1)

    def __eq__(self, other):
        if not isinstance(other, Action):
            return NotImplemented
        return np.array_equal(self.s, other.s) and np.array_equal(self.p, other.p)

    __hash__ = None


def link_rates(action: Action, gains: np.ndarray, bandwidth_hz: float = 1.0) -> np.ndarray:
    """
    Per-link data rate sum_m s * log2(1 + p |H|^2), scaled by the subband bandwidth.

    Args:
        action: subcarrier and power allocation
        gains: gain powers |H|^2 shaped like the action
        bandwidth_hz: bandwidth of one subband (1.0 gives bits/s/Hz)

    Returns:
        np.ndarray of per-link rates
    """
    gains = np.asarray(gains, dtype=np.float64)
    if gains.shape != action.p.shape:
        raise ContractViolationError(f"gains shape {gains.shape} != action shape {action.p.shape}")
    per_subcarrier = np.where(action.s, np.log2(1.0 + action.p * gains), 0.0)
    return bandwidth_hz * per_subcarrier.sum(axis=1)


@dataclass(frozen=True, eq=False)
class CostWeights:
    """Weights of the unified Lagrangian: nu (queue), eta (drop), gamma (power), xi (throughput)."""

    queue: np.ndarray
    drop: np.ndarray
    power: np.ndarray
    throughput: np.ndarray

    def __post_init__(self):
        for name in ("queue", "drop", "power", "throughput"):
            values = np.atleast_1d(np.asarray(getattr(self, name), dtype=np.float64))
            if np.any(values < 0):
                raise ContractViolationError(f"cost weight '{name}' must be nonnegative")
            object.__setattr__(self, name, values)

    @classmethod
    def uniform(cls, n: int, queue: float = 1.0, drop: float = 0.0, power: float = 0.0,
                throughput: float = 0.0) -> "CostWeights":
        return cls(np.full(n, queue), np.full(n, drop), np.full(n, power), np.full(n, throughput))

    def scaled(self, queue: float = 1.0, drop: float = 1.0, power: float = 1.0) -> "CostWeights":
        return CostWeights(self.queue * queue, self.drop * drop, self.power * power, self.throughput)


def queue_step(q: QueueState, served, arrivals) -> Tuple[QueueState, np.ndarray]:
    """
    Advance every queue by one slot.

    Service is applied before arrivals; whatever exceeds the buffer cap after
    the arrivals is dropped. Destination queues stay at zero.

    Returns:
        (next QueueState, dropped amount per queue)
    """
    served = np.broadcast_to(np.asarray(served, dtype=np.float64), q.lengths.shape)
    arrivals = np.broadcast_to(np.asarray(arrivals, dtype=np.float64), q.lengths.shape)
    if np.any(served < 0) or np.any(arrivals < 0):
        raise ContractViolationError("served and arrival amounts must be nonnegative")

    backlog = np.maximum(q.lengths - served, 0.0) + arrivals
    if q.destination_mask is not None:
        backlog = np.where(q.destination_mask, 0.0, backlog)
    dropped = np.maximum(backlog - q.buffer_cap, 0.0)
    return q.with_lengths(np.minimum(backlog, q.buffer_cap)), dropped


def littles_delay(qbar: float, dbar: float, lambda_bar: float) -> float:
    """Average delay Q / ((1 - d) * lambda), Little's law with dropping."""
    if lambda_bar < 0 or not 0.0 <= dbar <= 1.0:
        raise ContractViolationError(f"need lambda_bar >= 0 and dbar in [0, 1], got {lambda_bar}, {dbar}")
    if lambda_bar == 0 or dbar >= 1.0:
        raise UndefinedDelayError(
            f"delay undefined for lambda_bar={lambda_bar}, dbar={dbar}"
        )
    return qbar / ((1.0 - dbar) * lambda_bar)


def stage_cost(chi: SystemState, a: Action, w: CostWeights,
               rates: Optional[np.ndarray] = None) -> float:
    """
    Per-stage cost g(chi, a) = sum(nu Q + eta 1[Q = N_Q]) + sum(gamma P).

    When link rates are given, the throughput utility sum(xi * rate) is
    subtracted as well.
    """
    if a.p.shape != chi.csi.indices.shape:
        raise ContractViolationError(
            f"action shape {a.p.shape} does not match state shape {chi.csi.indices.shape}"
        )
    lengths = chi.qsi.lengths
    cost = float(np.sum(w.queue * lengths) + np.sum(w.drop * chi.qsi.at_cap))
    cost += float(np.sum(w.power * a.power_per_link))
    if rates is not None:
        cost -= float(np.sum(w.throughput * np.asarray(rates)))
    return cost


@dataclass
class Packet:
    arrival_slot: int
    size_bits: float
    commodity: int = 0
    hops: int = 0
    hop_budget: int = -1


class PacketBuffer:
    """Bounded packet store; the discipline decides which packet leaves first."""

    def __init__(self, capacity: int, discipline: Discipline = Discipline.FIFO):
        self.capacity = capacity
        self.discipline = Discipline(discipline)
        self._packets: Deque[Packet] = deque()

    def __len__(self) -> int:
        return len(self._packets)

    def push(self, packet: Packet) -> bool:
        """Store the packet; returns False (packet dropped) when the buffer is full."""
        if len(self._packets) >= self.capacity:
            return False
        self._packets.append(packet)
        return True

    def pop(self) -> Packet:
        if not self._packets:
            raise ContractViolationError("pop from an empty packet buffer")
        if self.discipline is Discipline.LIFO:
            return self._packets.pop()
        return self._packets.popleft()


@dataclass
class MetricsReport:
    qbar: np.ndarray
    drop_rate: np.ndarray
    drop_slot_fraction: np.ndarray
    drop_ratio: np.ndarray
    pbar: np.ndarray
    tbar: np.ndarray
    lambda_bar: np.ndarray
    delay_littles: float
    delay_littles_per_queue: np.ndarray
    delay_timestamped: float
    delivered: int
    slots: int
    arrivals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    departures: np.ndarray = field(default_factory=lambda: np.zeros(0))
    drops: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def total_backlog(self) -> float:
        return float(np.sum(self.qbar))


class MetricsAccumulator:
    """Running sums behind Q, d, P, T and the per-packet sojourn ledger."""

    def __init__(self, n_queues: int, n_nodes: int, n_links: int, buffer_cap: float,
                 units: QueueUnits = QueueUnits.PACKET):
        self.buffer_cap = buffer_cap
        self.units = QueueUnits(units)
        self.slots = 0
        self.queue_sum = np.zeros(n_queues)
        self.cap_slots = np.zeros(n_queues)
        self.offered = np.zeros(n_queues)
        self.dropped = np.zeros(n_queues)
        self.power_sum = np.zeros(n_nodes)
        self.throughput_sum = np.zeros(n_links)
        self.sojourn_sum = 0.0
        self.delivered = 0
        # whole-run flow counters, warm-up included
        self.flow_in = np.zeros(n_queues)
        self.flow_out = np.zeros(n_queues)
        self.flow_dropped = np.zeros(n_queues)

    def record_slot(self, lengths, power, throughput, offered, dropped):
        """Add one post-warm-up slot; lengths are sampled at the start of the slot."""
        lengths = np.asarray(lengths, dtype=np.float64).ravel()
        self.slots += 1
        self.queue_sum += lengths
        self.cap_slots += lengths >= self.buffer_cap
        self.offered += np.asarray(offered, dtype=np.float64).ravel()
        self.dropped += np.asarray(dropped, dtype=np.float64).ravel()
        self.power_sum += np.asarray(power, dtype=np.float64).ravel()
        self.throughput_sum += np.asarray(throughput, dtype=np.float64).ravel()

    def record_flow(self, arrivals, departures, drops):
        self.flow_in += np.asarray(arrivals, dtype=np.float64).ravel()
        self.flow_out += np.asarray(departures, dtype=np.float64).ravel()
        self.flow_dropped += np.asarray(drops, dtype=np.float64).ravel()

    def record_delivery(self, sojourn_slots: float, count: int = 1):
        self.sojourn_sum += sojourn_slots
        self.delivered += count


def _safe_littles(qbar: float, dbar: float, lambda_bar: float) -> float:
    try:
        return littles_delay(qbar, dbar, lambda_bar)
    except UndefinedDelayError:
        return float("nan")


def metrics_finalize(acc: MetricsAccumulator) -> MetricsReport:
    """
    Turn running sums into time averages.

    Little's-law delays use the dropped-over-offered ratio, which is the
    amount-based accounting that makes Little's law exact in both unit modes.
    """
    if acc.slots <= 0:
        raise ContractViolationError("metrics_finalize needs at least one recorded slot")

    slots = acc.slots
    qbar = acc.queue_sum / slots
    lambda_bar = acc.offered / slots
    drop_ratio = np.divide(acc.dropped, acc.offered, out=np.zeros_like(acc.dropped),
                           where=acc.offered > 0)
    drop_slot_fraction = acc.cap_slots / slots
    drop_rate = drop_ratio if acc.units is QueueUnits.PACKET else drop_slot_fraction

    per_queue = np.array([_safe_littles(q, d, lam)
                          for q, d, lam in zip(qbar, drop_ratio, lambda_bar)])
    total_offered = acc.offered.sum()
    total_ratio = acc.dropped.sum() / total_offered if total_offered > 0 else 0.0
    delay = _safe_littles(float(qbar.sum()), float(total_ratio), float(lambda_bar.sum()))

    timestamped = acc.sojourn_sum / acc.delivered if acc.delivered else float("nan")
    if acc.units is QueueUnits.PACKET and acc.delivered == 0:
        logger.debug("no packets delivered inside the measurement window")

    return MetricsReport(
        qbar=qbar,
        drop_rate=drop_rate,
        drop_slot_fraction=drop_slot_fraction,
        drop_ratio=drop_ratio,
        pbar=acc.power_sum / slots,
        tbar=acc.throughput_sum / slots,
        lambda_bar=lambda_bar,
        delay_littles=delay,
        delay_littles_per_queue=per_queue,
        delay_timestamped=timestamped,
        delivered=acc.delivered,
        slots=slots,
        arrivals=acc.flow_in.copy(),
        departures=acc.flow_out.copy(),
        drops=acc.flow_dropped.copy(),
    )
