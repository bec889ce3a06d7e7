"""
Multi-hop, multi-commodity backpressure routing and its delay-reducing variants.

Each node keeps one packet queue per commodity (one per commodity and hop
budget for the shortest-path-aided variant). Every slot the scheduler picks,
per link, the commodity with the largest backpressure and activates links so
that each node transmits on at most one outgoing link.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np

from model_core import Discipline, Packet, PacketBuffer
from sim_errors import ConfigurationError, ContractViolationError

logger = logging.getLogger(__name__)


class RoutingVariant(str, Enum):
    TRADITIONAL = "traditional"
    SP_BIAS = "sp_bias"
    MIN_RESOURCE = "min_resource"
    SP_AIDED = "sp_aided"
    LIFO = "lifo"
    DIVBAR = "divbar"


@dataclass(frozen=True)
class Commodity:
    source: int
    destination: int
    arrival_prob: float = 0.0


@dataclass(frozen=True)
class Transmission:
    link: int
    commodity: int
    rate: int
    hop: int = -1


class MultihopNetwork:
    """
    Directed graph of nodes and links carrying several commodities.

    Args:
        n_nodes: number of nodes
        links: (source, destination) node pairs, one per link
        commodities: traffic classes with their source, destination and arrival probability
        variant: routing rule
        V: resource price (MIN_RESOURCE, SP_AIDED)
        bias_scale: shortest-path bias Z = bias_scale * hop distance (SP_BIAS)
        buffer_cap: packets per queue
        capacities: packets per slot per link (default 1)
        success_prob: per-link reception probability (DIVBAR)
        node_exclusive: a node transmits on at most one outgoing link per slot
        discipline: FIFO or LIFO service inside each queue
    """

    def __init__(self, n_nodes: int, links: Sequence[Tuple[int, int]], commodities: Sequence[Commodity],
                 variant: RoutingVariant = RoutingVariant.TRADITIONAL, V: float = 0.0,
                 bias_scale: float = 1.0, buffer_cap: int = 1000,
                 capacities: Optional[Sequence[int]] = None,
                 success_prob: Optional[Sequence[float]] = None,
                 node_exclusive: bool = True, discipline: Discipline = Discipline.FIFO):
        self.n_nodes = n_nodes
        self.links = [(int(s), int(d)) for s, d in links]
        self.commodities = list(commodities)
        self.variant = RoutingVariant(variant)
        if V < 0 or bias_scale < 0:
            raise ConfigurationError("V and the bias scale must be nonnegative")
        self.V = float(V)
        self.bias_scale = float(bias_scale)
        self.buffer_cap = buffer_cap
        self.node_exclusive = node_exclusive
        if self.variant is RoutingVariant.LIFO:
            discipline = Discipline.LIFO
        self.discipline = Discipline(discipline)

        for s, d in self.links:
            if not (0 <= s < n_nodes and 0 <= d < n_nodes) or s == d:
                raise ConfigurationError(f"invalid link endpoints ({s}, {d})")
        self.capacities = np.ones(len(self.links), dtype=np.int64) if capacities is None \
            else np.asarray(capacities, dtype=np.int64)
        self.success_prob = np.ones(len(self.links)) if success_prob is None \
            else np.asarray(success_prob, dtype=np.float64)
        if np.any((self.success_prob < 0) | (self.success_prob > 1)):
            raise ConfigurationError("success probabilities must lie in [0, 1]")

        self.graph = nx.DiGraph()
        self.graph.add_nodes_from(range(n_nodes))
        self.graph.add_edges_from(self.links)
        self.out_links: List[List[int]] = [[] for _ in range(n_nodes)]
        for l, (s, _) in enumerate(self.links):
            self.out_links[s].append(l)

        self.hop_distance = np.full((n_nodes, len(self.commodities)), np.inf)
        for c, com in enumerate(self.commodities):
            lengths = nx.single_target_shortest_path_length(self.graph, com.destination)
            for node, hops in dict(lengths).items():
                self.hop_distance[node, c] = hops
            if np.isinf(self.hop_distance[com.source, c]):
                raise ConfigurationError(
                    f"destination {com.destination} unreachable from source {com.source}"
                )

        self.n_hop_queues = n_nodes if self.variant is RoutingVariant.SP_AIDED else 1
        self.queues = [[[PacketBuffer(buffer_cap, self.discipline) for _ in range(self.n_hop_queues)]
                        for _ in self.commodities] for _ in range(n_nodes)]

    @property
    def n_links(self) -> int:
        return len(self.links)

    @property
    def n_commodities(self) -> int:
        return len(self.commodities)

    def is_destination(self, node: int, c: int) -> bool:
        return node == self.commodities[c].destination

    def hop_lengths(self) -> np.ndarray:
        """Queue lengths per (node, commodity, hop budget)."""
        return np.array([[[len(b) for b in per_c] for per_c in per_node] for per_node in self.queues],
                        dtype=np.float64)

    def lengths(self) -> np.ndarray:
        """Queue lengths per (node, commodity)."""
        return self.hop_lengths().sum(axis=2)

    def bias(self) -> np.ndarray:
        return self.bias_scale * self.hop_distance

    def endpoints(self) -> Tuple[np.ndarray, np.ndarray]:
        arr = np.asarray(self.links, dtype=np.int64).reshape(-1, 2)
        return arr[:, 0], arr[:, 1]


def shortest_hops(net: MultihopNetwork, node: int, commodity: int) -> int:
    """BFS hop count from node to the commodity's destination."""
    hops = net.hop_distance[node, commodity]
    if np.isinf(hops):
        raise ConfigurationError(
            f"node {node} cannot reach destination {net.commodities[commodity].destination}"
        )
    return int(hops)


def _sp_aided_backpressure(net: MultihopNetwork) -> Tuple[np.ndarray, np.ndarray]:
    src, dst = net.endpoints()
    Qh = net.hop_lengths()
    values = np.full((net.n_links, net.n_commodities), -np.inf)
    best_h = np.full((net.n_links, net.n_commodities), -1, dtype=np.int64)
    for l in range(net.n_links):
        for c in range(net.n_commodities):
            h_min_d = net.hop_distance[dst[l], c]
            for h in range(1, net.n_hop_queues):
                if h - 1 < h_min_d:
                    continue
                downstream = 0.0 if net.is_destination(dst[l], c) else Qh[dst[l], c, h - 1]
                diff = Qh[src[l], c, h] - downstream
                if diff > values[l, c]:
                    values[l, c] = diff
                    best_h[l, c] = h
    return values, best_h


def backpressure(net: MultihopNetwork, variant: Optional[RoutingVariant] = None) -> np.ndarray:
    """
    Per-(link, commodity) backpressure under the given variant.

    DIVBAR values are success-probability-weighted positive differentials;
    summing them over a node's outgoing links gives that node's backpressure.
    """
    variant = net.variant if variant is None else RoutingVariant(variant)
    if variant is RoutingVariant.SP_AIDED:
        return _sp_aided_backpressure(net)[0]

    src, dst = net.endpoints()
    Q = net.lengths()
    diff = Q[src] - Q[dst]
    if variant is RoutingVariant.SP_BIAS:
        Z = net.bias()
        with np.errstate(invalid="ignore"):
            diff = (Q[src] + Z[src]) - (Q[dst] + Z[dst])
        diff = np.where(np.isnan(diff), -np.inf, diff)
    elif variant is RoutingVariant.MIN_RESOURCE:
        diff = diff - net.V
    elif variant is RoutingVariant.DIVBAR:
        diff = net.success_prob[:, None] * np.maximum(diff, 0.0)
    return diff


def node_backpressure(net: MultihopNetwork, values: np.ndarray) -> np.ndarray:
    """Sum of link values over each node's outgoing links, shape (nodes, commodities)."""
    totals = np.zeros((net.n_nodes, net.n_commodities))
    for n, out in enumerate(net.out_links):
        if out:
            totals[n] = values[out].sum(axis=0)
    return totals


def dbp_schedule(net: MultihopNetwork, values: np.ndarray, rng: Optional[np.random.Generator] = None,
                 best_h: Optional[np.ndarray] = None) -> List[Transmission]:
    """
    Pick commodity argmax_c per link and activate links to maximize sum dQ* mu.

    With node-exclusive transmission each node activates its best positive
    link (ties broken at random when rng is given, else lowest index);
    otherwise every positive link runs at its capacity.
    """
    n_links = net.n_links
    if n_links == 0 or net.n_commodities == 0:
        return []
    best_c = np.argmax(values, axis=1)
    best = values[np.arange(n_links), best_c]
    weight = np.where(best > 0, best * net.capacities, 0.0)

    chosen: List[int] = []
    if net.node_exclusive:
        for out in net.out_links:
            candidates = [l for l in out if weight[l] > 0]
            if not candidates:
                continue
            top = max(weight[l] for l in candidates)
            tied = [l for l in candidates if weight[l] == top]
            chosen.append(tied[int(rng.integers(len(tied)))] if rng is not None and len(tied) > 1 else tied[0])
    else:
        chosen = [l for l in range(n_links) if weight[l] > 0]

    return [Transmission(l, int(best_c[l]), int(net.capacities[l]),
                         -1 if best_h is None else int(best_h[l, best_c[l]]))
            for l in sorted(chosen)]


def traffic_split(net: MultihopNetwork, V: float, c: int) -> int:
    """Hop-budget queue h* = argmin_h (V h + Q_{s,h}) over H_min..N-1 at the commodity's source."""
    source = net.commodities[c].source
    h_min = shortest_hops(net, source, c)
    Qh = net.hop_lengths()[source, c]
    candidates = np.arange(h_min, net.n_hop_queues)
    if candidates.size == 0:
        raise ConfigurationError("no admissible hop budget at the source")
    scores = V * candidates + Qh[candidates]
    return int(candidates[np.argmin(scores)])


def divbar_route(net: MultihopNetwork, node: int, c: int, outcomes: Dict[int, bool]) -> Optional[int]:
    """
    Forward to the successful receiver with the largest positive differential.

    Args:
        net: network
        node: transmitting node
        c: commodity being sent
        outcomes: reception outcome per outgoing link index

    Returns:
        the chosen link index, or None when the packet stays at the node
    """
    Q = net.lengths()
    best_link, best_diff = None, 0.0
    for l in net.out_links[node]:
        if not outcomes.get(l, False):
            continue
        diff = Q[node, c] - Q[net.links[l][1], c]
        if diff > best_diff:
            best_link, best_diff = l, diff
    return best_link


@dataclass
class SlotFlow:
    """Per (node, commodity) packet counts of one slot."""

    inflow: np.ndarray
    exogenous: np.ndarray
    outflow: np.ndarray
    drops: np.ndarray
    delivered: int


class NetworkSimulator:
    """Slot loop for a MultihopNetwork: schedule, forward, admit arrivals, record."""

    def __init__(self, net: MultihopNetwork, arrival_rng: np.random.Generator,
                 link_rng: np.random.Generator, warmup: int = 0, trace: bool = False):
        self.net = net
        self.arrival_rng = arrival_rng
        self.link_rng = link_rng
        self.warmup = warmup
        self.trace = trace
        self.slot = 0
        self.backlog_sum = np.zeros(net.n_nodes)
        self.measured_slots = 0
        self.offered = 0
        self.dropped = 0
        self.delivered_delays: List[int] = []
        self.delivered_hops: List[int] = []
        self.backlog_trace: List[np.ndarray] = []
        self.last_flow: Optional[SlotFlow] = None

    def inject(self, c: int, node: Optional[int] = None, hop: int = -1) -> bool:
        """Place one packet of commodity c at node (its source by default)."""
        net = self.net
        node = net.commodities[c].source if node is None else node
        if net.variant is RoutingVariant.SP_AIDED and hop < 0:
            hop = traffic_split(net, net.V, c)
        packet = Packet(arrival_slot=self.slot, size_bits=0.0, commodity=c, hop_budget=hop)
        return net.queues[node][c][max(hop, 0)].push(packet)

    def _transmissions(self) -> List[Tuple[int, int, int, int]]:
        """(link, commodity, hop index, packet count) moves for this slot."""
        net = self.net
        if net.variant is RoutingVariant.DIVBAR:
            values = backpressure(net)
            per_node = node_backpressure(net, values)
            moves = []
            for n in range(net.n_nodes):
                c = int(np.argmax(per_node[n]))
                if per_node[n, c] <= 0:
                    continue
                outcomes = {l: bool(self.link_rng.random() < net.success_prob[l]) for l in net.out_links[n]}
                l = divbar_route(net, n, c, outcomes)
                if l is not None:
                    moves.append((l, c, 0, int(net.capacities[l])))
            return moves

        if net.variant is RoutingVariant.SP_AIDED:
            values, best_h = _sp_aided_backpressure(net)
        else:
            values, best_h = backpressure(net), None
        schedule = dbp_schedule(net, values, self.link_rng, best_h)
        return [(t.link, t.commodity, max(t.hop, 0), t.rate) for t in schedule]

    def step(self) -> SlotFlow:
        net = self.net
        N, C = net.n_nodes, net.n_commodities
        inflow = np.zeros((N, C), dtype=np.int64)
        outflow = np.zeros((N, C), dtype=np.int64)
        exogenous = np.zeros((N, C), dtype=np.int64)
        drops = np.zeros((N, C), dtype=np.int64)
        delivered = 0

        if self.slot >= self.warmup:
            node_backlog = net.lengths().sum(axis=1)
            self.backlog_sum += node_backlog
            self.measured_slots += 1
            if self.trace:
                self.backlog_trace.append(node_backlog)

        # pop everything first so no packet crosses two links in one slot
        in_flight = []
        for l, c, h, rate in self._transmissions():
            s, d = net.links[l]
            buffer = net.queues[s][c][h]
            for _ in range(min(rate, len(buffer))):
                in_flight.append((buffer.pop(), d, c, h - 1 if net.n_hop_queues > 1 else 0))
                outflow[s, c] += 1

        for packet, d, c, h in in_flight:
            packet.hops += 1
            if net.is_destination(d, c):
                delivered += 1
                if packet.arrival_slot >= self.warmup:
                    self.delivered_delays.append(self.slot - packet.arrival_slot)
                    self.delivered_hops.append(packet.hops)
                continue
            inflow[d, c] += 1
            if not net.queues[d][c][max(h, 0)].push(packet):
                drops[d, c] += 1
                self._count_drop()

        for c, com in enumerate(net.commodities):
            if com.arrival_prob <= 0 or self.arrival_rng.random() >= com.arrival_prob:
                continue
            exogenous[com.source, c] += 1
            if self.slot >= self.warmup:
                self.offered += 1
            if not self.inject(c):
                drops[com.source, c] += 1
                self._count_drop()

        self.slot += 1
        self.last_flow = SlotFlow(inflow, exogenous, outflow, drops, delivered)
        return self.last_flow

    def _count_drop(self):
        if self.slot >= self.warmup:
            self.dropped += 1

    def run(self, n_slots: int):
        for _ in range(n_slots):
            self.step()
        return self

    def summary(self) -> Dict[str, float]:
        if self.measured_slots == 0:
            raise ContractViolationError("no slots measured after warm-up")
        backlog = self.backlog_sum / self.measured_slots
        delays = np.asarray(self.delivered_delays, dtype=np.float64)
        hops = np.asarray(self.delivered_hops, dtype=np.float64)
        return {
            "slots": self.measured_slots,
            "total_backlog": float(backlog.sum()),
            "mean_delay": float(delays.mean()) if delays.size else float("nan"),
            "mean_hops": float(hops.mean()) if hops.size else float("nan"),
            "delivered": int(delays.size),
            "offered": self.offered,
            "drop_rate": self.dropped / self.offered if self.offered else 0.0,
            **{f"backlog_node_{n}": float(b) for n, b in enumerate(backlog)},
        }


def route_single_packet(net: MultihopNetwork, c: int, rng: np.random.Generator,
                        max_slots: int = 10000) -> Optional[int]:
    """Send one packet through an otherwise empty network; returns its hop count or None."""
    sim = NetworkSimulator(net, arrival_rng=rng, link_rng=rng)
    if not sim.inject(c):
        raise ContractViolationError("could not place the packet at its source")
    for _ in range(max_slots):
        sim.step()
        if sim.delivered_hops:
            return sim.delivered_hops[0]
    return None


def tandem_network(n_hops: int, arrival_prob: float, variant: RoutingVariant = RoutingVariant.TRADITIONAL,
                   **kwargs) -> MultihopNetwork:
    """N-hop tandem: traffic enters at node N and leaves at node 0 over links n -> n-1."""
    links = [(n, n - 1) for n in range(1, n_hops + 1)]
    return MultihopNetwork(n_hops + 1, links, [Commodity(n_hops, 0, arrival_prob)], variant, **kwargs)


def cyclic_network(cycle_length: int = 3, arrival_prob: float = 0.0,
                   variant: RoutingVariant = RoutingVariant.TRADITIONAL, **kwargs) -> MultihopNetwork:
    """
    Directed cycle 0 -> 1 -> ... -> k-1 -> 0 with a one-hop exit 0 -> k.

    The destination is node k and the source node 0 (H_min = 1), so a packet
    can circle the loop any number of times before leaving.
    """
    if cycle_length < 2:
        raise ConfigurationError("a cycle needs at least two nodes")
    exit_node = cycle_length
    links = [(exit_node - 1, 0) if n == cycle_length - 1 else (n, n + 1) for n in range(cycle_length)]
    links.insert(0, (0, exit_node))
    return MultihopNetwork(cycle_length + 1, links, [Commodity(0, exit_node, arrival_prob)], variant, **kwargs)
