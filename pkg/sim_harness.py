"""
Slotted simulation engine, scenario configuration, multiplier adaptation,
sweeps and result export.

A Scenario is a frozen description of one experiment; run() turns it into a
RunResult deterministically, and sweep() fans a template out over one axis
and a list of seeds.
"""

import concurrent.futures
import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from channel_traffic import (ChannelModel, TrafficMode, TrafficModel, birth_death_transition,
                             channel_next, departure_prob, initial_channel_state,
                             rayleigh_gain_grid, sample_arrivals, sample_packet_sizes,
                             snr_db_to_power)
from model_core import (CostWeights, Discipline, MetricsAccumulator, MetricsReport, Packet,
                        PacketBuffer, QueueState, QueueUnits, SystemState, link_rates,
                        littles_delay, metrics_finalize, queue_step)
from policy_lyapunov import (EecaPolicy, LyapunovParams, MlwdfPolicy, allocate_mlwdf, drift_bound_B,
                             max_service_per_slot)
from policy_mdp import (MdpInstance, OraclePolicy, build_instance, evaluate_policy,
                        policy_actions, quantize_action, relative_value_iteration, simulate_chain)
from policy_mdp_learning import (PotentialLearningPolicy, PotentialTable, QFactorLearningPolicy,
                                 QFactorTable, queue_prior)
from policy_rate_constraint import (QosSpec, RateConstraintPolicy, RatePolicyParams,
                                    allocate_rate_constraint, rate_target,
                                    stationary_power_and_rate, tune_multipliers)
from routing_multihop import (Commodity, MultihopNetwork, NetworkSimulator, RoutingVariant,
                              cyclic_network, route_single_packet, shortest_hops, tandem_network)
from sim_errors import ConfigurationError, InfeasibleTargetError, UndefinedDelayError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
POLICIES = ("rate_constraint", "mlwdf", "eeca", "approx_v", "approx_q", "oracle")
MDP_POLICIES = ("approx_v", "approx_q", "oracle")
RNG_STREAMS = ("channel", "arrivals", "sizes", "service", "links")
REQUIRED_SECTIONS = ("scenario", "policy")
LEARNING_POLICIES = ("approx_v", "approx_q")
# drop rate rises with every one of these knobs
DROP_KNOB_POLICIES = {"mlwdf": "gamma", "rate_constraint": "gamma", "eeca": "V"}
KNOB_BRACKET_FACTOR = 4.0
KNOB_MIN_LOG_WIDTH = 1e-6


@dataclass(frozen=True)
class ChannelConfig:
    levels: int = 8
    persistence: float = 0.9
    gains: Optional[Tuple[float, ...]] = None
    transition: Optional[Tuple[Tuple[float, ...], ...]] = None
    independent_subcarriers: bool = True
    require_irreducible: bool = True

    def model(self) -> ChannelModel:
        gains = rayleigh_gain_grid(self.levels) if self.gains is None else np.asarray(self.gains)
        P = birth_death_transition(len(gains), self.persistence) if self.transition is None \
            else np.asarray(self.transition)
        return ChannelModel(gains, P, self.independent_subcarriers, self.require_irreducible)


@dataclass(frozen=True)
class TrafficConfig:
    mode: str = TrafficMode.POISSON_PACKET.value
    mean_rate: float = 3.0
    mean_packet_bits: float = 5000.0
    max_arrival: Optional[float] = None

    def model(self, slot_seconds: float) -> TrafficModel:
        return TrafficModel(TrafficMode(self.mode), self.mean_rate, slot_seconds,
                            self.mean_packet_bits, self.max_arrival)


@dataclass(frozen=True)
class PolicyConfig:
    name: str = "mlwdf"
    V: float = 1.0
    gamma: Optional[Tuple[float, ...]] = None
    nu: Optional[Tuple[float, ...]] = None
    rate_target: Optional[float] = None
    power_fractions: Tuple[float, ...] = (0.0, 0.5, 1.0, 2.0)
    exact_departure: bool = False
    rvi_tol: float = 1e-9


@dataclass(frozen=True)
class WeightsConfig:
    queue: float = 1.0
    drop: Tuple[float, ...] = (0.0,)
    power: Tuple[float, ...] = (1.0,)
    throughput: float = 0.0


@dataclass(frozen=True)
class QosConfig:
    delay_target: float = 0.1
    epsilon: float = 0.01
    theta: float = 1e-3
    d_max: float = 0.1

    def spec(self) -> QosSpec:
        return QosSpec(self.d_max, self.epsilon, self.theta, self.delay_target)


@dataclass(frozen=True)
class LearningConfig:
    step_exponent: float = 0.85
    reference_csi: str = "fixed"
    reference_channel: int = 0
    delta: float = 1e-3
    window: int = 10000
    trace_every: int = 0
    warm_start: bool = True


@dataclass(frozen=True)
class TuningConfig:
    enabled: bool = False
    evaluator: str = "analytic"
    power_constraint: bool = True
    drop_target: Optional[float] = None
    drop_tolerance: float = 0.002
    drop_step: float = 10.0
    kappa0: float = 1.0
    tolerance: float = 0.02
    max_epochs: int = 200
    epoch_slots: int = 20000
    epoch_warmup: int = 2000


@dataclass(frozen=True)
class NetworkConfig:
    topology: str = "tandem"
    n_hops: int = 4
    cycle_length: int = 3
    arrival_prob: float = 0.8
    variant: str = RoutingVariant.TRADITIONAL.value
    V: float = 0.0
    bias_scale: float = 1.0
    buffer_cap: int = 1000
    node_exclusive: bool = True
    discipline: str = Discipline.FIFO.value
    success_prob: Optional[Tuple[float, ...]] = None
    n_nodes: Optional[int] = None
    links: Optional[Tuple[Tuple[int, int], ...]] = None
    commodities: Optional[Tuple[Tuple[int, int, float], ...]] = None

    def build(self) -> MultihopNetwork:
        kwargs = dict(V=self.V, bias_scale=self.bias_scale, buffer_cap=self.buffer_cap,
                      node_exclusive=self.node_exclusive, discipline=Discipline(self.discipline),
                      success_prob=self.success_prob)
        variant = RoutingVariant(self.variant)
        if self.topology == "tandem":
            return tandem_network(self.n_hops, self.arrival_prob, variant, **kwargs)
        if self.topology == "cyclic":
            return cyclic_network(self.cycle_length, self.arrival_prob, variant, **kwargs)
        if self.topology == "custom":
            if self.n_nodes is None or self.links is None or self.commodities is None:
                raise ConfigurationError("custom topology needs n_nodes, links and commodities")
            commodities = [Commodity(int(s), int(d), float(p)) for s, d, p in self.commodities]
            return MultihopNetwork(self.n_nodes, self.links, commodities, variant, **kwargs)
        raise ConfigurationError(f"unknown topology '{self.topology}'")


_SECTIONS = {
    "channel": ChannelConfig,
    "traffic": TrafficConfig,
    "policy": PolicyConfig,
    "weights": WeightsConfig,
    "qos": QosConfig,
    "learning": LearningConfig,
    "tuning": TuningConfig,
    "network": NetworkConfig,
}


def _freeze(value):
    if isinstance(value, list):
        return tuple(_freeze(v) for v in value)
    return value


def _section_from_dict(cls, data: Optional[Dict[str, Any]]):
    data = dict(data or {})
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigurationError(f"unknown keys for {cls.__name__}: {', '.join(unknown)}")
    for key in ("gamma", "nu", "drop", "power"):
        if key in data and isinstance(data[key], (int, float)):
            data[key] = [data[key]]
    return cls(**{k: _freeze(v) for k, v in data.items()})


@dataclass(frozen=True)
class Scenario:
    """One experiment: system dimensions, models, policy and run length."""

    mode: str = "single_hop"
    n_links: int = 3
    n_subcarriers: int = 5
    slot_seconds: float = 1e-3
    bandwidth_hz: float = 1e4
    buffer_cap: int = 5
    units: str = QueueUnits.PACKET.value
    discipline: str = Discipline.FIFO.value
    horizon: int = 1_000_000
    warmup: int = 100_000
    seed: int = 0
    snr_db: float = 14.3
    trace: bool = False
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    traffic: TrafficConfig = field(default_factory=TrafficConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    weights: WeightsConfig = field(default_factory=WeightsConfig)
    qos: QosConfig = field(default_factory=QosConfig)
    learning: LearningConfig = field(default_factory=LearningConfig)
    tuning: TuningConfig = field(default_factory=TuningConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)

    def __post_init__(self):
        if self.mode not in ("single_hop", "multi_hop"):
            raise ConfigurationError(f"mode must be single_hop or multi_hop, got '{self.mode}'")
        if min(self.n_links, self.n_subcarriers, self.buffer_cap, self.horizon) <= 0:
            raise ConfigurationError("links, subcarriers, buffer and horizon must be positive")
        if self.slot_seconds <= 0 or self.bandwidth_hz <= 0:
            raise ConfigurationError("slot length and bandwidth must be positive")
        if not 0 <= self.warmup < self.horizon:
            raise ConfigurationError(f"warm-up {self.warmup} must be below the horizon {self.horizon}")
        if self.policy.name not in POLICIES:
            raise ConfigurationError(f"unknown policy '{self.policy.name}', expected one of {POLICIES}")
        QueueUnits(self.units)
        Discipline(self.discipline)

    @property
    def packet_mode(self) -> bool:
        return QueueUnits(self.units) is QueueUnits.PACKET

    @property
    def power_budget(self) -> float:
        return snr_db_to_power(self.snr_db)

    @property
    def service_scale(self) -> float:
        """tau * W / mean packet bits: departure probability per bit/s/Hz of rate."""
        return self.slot_seconds * self.bandwidth_hz / self.traffic.mean_packet_bits

    @classmethod
    def from_dict(cls, config: Dict[str, Any]) -> "Scenario":
        top = dict(config.get("scenario", {}))
        known = {f.name for f in dataclasses.fields(cls)} - set(_SECTIONS)
        unknown = sorted(set(top) - known)
        if unknown:
            raise ConfigurationError(f"unknown scenario keys: {', '.join(unknown)}")
        sections = {name: _section_from_dict(section_cls, config.get(name))
                    for name, section_cls in _SECTIONS.items()}
        try:
            return cls(**top, **sections)
        except TypeError as e:
            raise ConfigurationError(f"invalid scenario: {e}") from e

    def to_dict(self) -> Dict[str, Any]:
        data = dataclasses.asdict(self)
        sections = {name: data.pop(name) for name in _SECTIONS}
        return {"schema_version": SCHEMA_VERSION, "scenario": data, **sections}

    def with_value(self, axis: str, value) -> "Scenario":
        """Copy with one (possibly dotted, e.g. 'policy.V') field replaced."""
        head, _, tail = axis.partition(".")
        if tail:
            if head not in _SECTIONS:
                raise ConfigurationError(f"unknown sweep axis '{axis}'")
            section = getattr(self, head)
            names = {f.name for f in dataclasses.fields(section)}
            if tail not in names:
                raise ConfigurationError(f"unknown sweep axis '{axis}'")
            current = getattr(section, tail)
            return dataclasses.replace(self, **{head: dataclasses.replace(section, **{tail: _cast(current, value)})})
        names = {f.name for f in dataclasses.fields(self)} - set(_SECTIONS)
        if axis not in names:
            raise ConfigurationError(f"unknown sweep axis '{axis}'")
        return dataclasses.replace(self, **{axis: _cast(getattr(self, axis), value)})


def _cast(current, value):
    if isinstance(current, bool):
        return bool(value)
    if isinstance(current, int):
        return int(value)
    if isinstance(current, tuple):
        return tuple(np.atleast_1d(value).tolist())
    if isinstance(current, float) or current is None:
        return float(value)
    return value


def scenario_hash(s: Scenario) -> str:
    """SHA-256 of the canonical scenario JSON, seed excluded."""
    data = s.to_dict()
    data["scenario"].pop("seed")
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def load_config(config_path: str) -> Dict[str, Any]:
    """
    Load and check a scenario config file.

    Raises:
        ConfigurationError: missing file, invalid JSON, wrong schema version
            or missing sections
    """
    config_file = Path(config_path)
    if not config_file.exists():
        raise ConfigurationError(f"config file '{config_path}' not found")
    try:
        with open(config_file, "r", encoding="utf-8") as f:
            config = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"invalid JSON in config file {config_path}: {e}") from e

    version = config.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigurationError(f"schema_version {version!r} is not supported (expected {SCHEMA_VERSION})")
    missing = [section for section in REQUIRED_SECTIONS if section not in config]
    if missing:
        raise ConfigurationError(f"missing required sections in config: {', '.join(missing)}")

    print(f"✓ Loaded scenario configuration from: {config_path}")
    return config


def _per_link(values: Optional[Sequence[float]], n: int, default: float) -> np.ndarray:
    if values is None:
        return np.full(n, default)
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 1:
        return np.full(n, float(arr[0]))
    if arr.size != n:
        raise ConfigurationError(f"expected 1 or {n} per-link values, got {arr.size}")
    return arr


def cost_weights(s: Scenario) -> CostWeights:
    w = s.weights
    n = s.n_links
    return CostWeights(np.full(n, w.queue), _per_link(w.drop, n, 0.0),
                       _per_link(w.power, n, 1.0), np.full(n, w.throughput))


def rate_policy_params(s: Scenario) -> RatePolicyParams:
    n = s.n_links
    gamma = _per_link(s.policy.gamma if s.policy.gamma is not None else s.weights.power, n, 1.0)
    nu = _per_link(s.policy.nu, n, 0.0)
    if s.policy.rate_target is not None:
        target = s.policy.rate_target
    elif s.packet_mode and s.traffic.mean_rate > 0:
        target = rate_target(s.qos.delay_target, s.traffic.mean_rate, s.traffic.mean_packet_bits)
    else:
        target = 0.0
    return RatePolicyParams(nu, gamma, np.full(n, target))


def instance_from_scenario(s: Scenario) -> MdpInstance:
    """Exact MDP instance for a (tiny) packet-mode scenario."""
    if not s.packet_mode:
        raise ConfigurationError("the exact MDP is defined for packet-mode scenarios only")
    traffic = s.traffic.model(s.slot_seconds)
    return build_instance(s.channel.model(), s.n_links, s.n_subcarriers, s.buffer_cap,
                          traffic.arrival_prob, s.service_scale, s.power_budget,
                          cost_weights(s), s.policy.power_fractions, s.policy.exact_departure)


def build_policy(s: Scenario, model: Optional[ChannelModel] = None):
    """Instantiate the scenario's policy behind the common act/observe interface."""
    name = s.policy.name
    model = s.channel.model() if model is None else model
    if name in MDP_POLICIES and not s.packet_mode:
        raise ConfigurationError(f"policy '{name}' needs packet-mode queues")

    if name == "rate_constraint":
        return RateConstraintPolicy(rate_policy_params(s))
    if name == "mlwdf":
        gamma = s.policy.gamma if s.policy.gamma is not None else s.weights.power
        return MlwdfPolicy(LyapunovParams(V=s.policy.V, gamma=_per_link(gamma, s.n_links, 1.0)))
    if name == "eeca":
        return EecaPolicy(LyapunovParams(V=s.policy.V))

    lc = s.learning
    weights = cost_weights(s)
    if name in LEARNING_POLICIES and lc.warm_start:
        arrival_prob = s.traffic.model(s.slot_seconds).arrival_prob
        prior = queue_prior(model, s.n_subcarriers, s.buffer_cap, arrival_prob, s.service_scale,
                            s.power_budget, weights)
    else:
        prior = np.zeros((s.n_links, s.buffer_cap + 1))
    if name == "approx_v":
        table = PotentialTable(model, s.n_links, s.n_subcarriers, s.buffer_cap, lc.step_exponent,
                               lc.reference_csi, lc.reference_channel, lc.delta, lc.window)
        return PotentialLearningPolicy(table.warm_start(prior), weights, s.service_scale, lc.trace_every)
    if name == "approx_q":
        table = QFactorTable(model, s.n_links, s.n_subcarriers, s.buffer_cap, lc.step_exponent,
                             lc.reference_channel, lc.delta, lc.window)
        return QFactorLearningPolicy(table.warm_start(prior), weights, s.service_scale, lc.trace_every)

    inst = instance_from_scenario(s)
    return OraclePolicy(inst, relative_value_iteration(inst, tol=s.policy.rvi_tol, seed=s.seed))


def spawn_streams(seed: int) -> Dict[str, np.random.Generator]:
    """One independent generator per purpose, split deterministically from the seed."""
    children = np.random.SeedSequence(seed).spawn(len(RNG_STREAMS))
    return {name: np.random.default_rng(child) for name, child in zip(RNG_STREAMS, children)}


@dataclass
class RunResult:
    scenario: Scenario
    report: Optional[MetricsReport]
    trace: Optional[pd.DataFrame] = None
    learning_trace: Optional[pd.DataFrame] = None
    multipliers: Dict[str, List[float]] = field(default_factory=dict)
    tuning_trajectory: Optional[pd.DataFrame] = None
    network_summary: Optional[Dict[str, float]] = None
    wall_ms: float = 0.0


def _run_single_hop(s: Scenario, policy, progress: bool) -> Tuple[MetricsReport, Optional[pd.DataFrame]]:
    L, M = s.n_links, s.n_subcarriers
    model = s.channel.model()
    traffic = s.traffic.model(s.slot_seconds)
    rng = spawn_streams(s.seed)
    packet_mode = s.packet_mode
    mean_bits = s.traffic.mean_packet_bits

    h = initial_channel_state(model, L, M, rng["channel"])
    q = QueueState.empty((L,), s.buffer_cap, Discipline(s.discipline))
    buffers = [PacketBuffer(s.buffer_cap, Discipline(s.discipline)) for _ in range(L)]
    acc = MetricsAccumulator(L, L, L, s.buffer_cap, QueueUnits(s.units))

    trace_q = np.zeros((s.horizon, L)) if s.trace else None
    trace_p = np.zeros((s.horizon, L)) if s.trace else None

    for t in tqdm(range(s.horizon), desc=f"{s.policy.name} seed={s.seed}", unit="slots",
                  disable=not progress, mininterval=1.0):
        chi = SystemState(h, q)
        action = policy.act(chi)
        spectral = link_rates(action, h.gains)
        rate_bps = s.bandwidth_hz * spectral
        power = action.power_per_link

        arrivals = sample_arrivals(traffic, rng["arrivals"], L)
        if packet_mode:
            prob = departure_prob(rate_bps / mean_bits, s.slot_seconds, s.policy.exact_departure)
            served = ((rng["service"].random(L) < prob) & (q.lengths > 0)).astype(np.float64)
        else:
            served = np.minimum(s.slot_seconds * rate_bps, q.lengths)

        next_q, dropped = queue_step(q, served, arrivals)

        if packet_mode:
            for l in np.flatnonzero(served):
                packet = buffers[l].pop()
                if t >= s.warmup and packet.arrival_slot >= s.warmup:
                    acc.record_delivery(t - packet.arrival_slot)
            arrived = np.flatnonzero(arrivals)
            sizes = sample_packet_sizes(traffic, rng["sizes"], arrived.size)
            for l, size in zip(arrived, sizes):
                buffers[l].push(Packet(arrival_slot=t, size_bits=float(size), commodity=int(l)))

        if t >= s.warmup:
            acc.record_slot(q.lengths, power, rate_bps, arrivals, dropped)
        acc.record_flow(arrivals, served, dropped)
        if trace_q is not None:
            trace_q[t] = q.lengths
            trace_p[t] = power

        policy.observe(chi, action, next_q.lengths, t)
        q = next_q
        h = channel_next(model, h, rng["channel"])

    report = metrics_finalize(acc)
    trace = None
    if trace_q is not None:
        trace = pd.DataFrame({"slot": np.arange(s.horizon),
                              **{f"q_{l}": trace_q[:, l] for l in range(L)},
                              **{f"p_{l}": trace_p[:, l] for l in range(L)}})
    return report, trace


def _run_multi_hop(s: Scenario, progress: bool) -> Tuple[Dict[str, float], Optional[pd.DataFrame]]:
    net = s.network.build()
    rng = spawn_streams(s.seed)
    sim = NetworkSimulator(net, rng["arrivals"], rng["links"], warmup=s.warmup, trace=s.trace)
    for _ in tqdm(range(s.horizon), desc=f"{net.variant.value} seed={s.seed}", unit="slots",
                  disable=not progress, mininterval=1.0):
        sim.step()
    summary = sim.summary()
    trace = None
    if s.trace:
        backlog = np.asarray(sim.backlog_trace)
        trace = pd.DataFrame({"slot": np.arange(s.warmup, s.warmup + backlog.shape[0]),
                              **{f"backlog_node_{n}": backlog[:, n] for n in range(net.n_nodes)}})
    return summary, trace


def run(s: Scenario, progress: bool = False) -> RunResult:
    """
    Simulate one scenario.

    When tuning is enabled the multipliers are adapted first and the tuned
    scenario is simulated. Identical (scenario, seed) pairs give identical
    results.
    """
    start = time.perf_counter()
    trajectory, multipliers = None, {}
    if s.tuning.enabled and s.mode == "single_hop":
        s, trajectory = adapt_multipliers(s)
        multipliers = _multipliers(s)

    if s.mode == "multi_hop":
        summary, trace = _run_multi_hop(s, progress)
        return RunResult(s, None, trace=trace, network_summary=summary,
                         wall_ms=(time.perf_counter() - start) * 1e3)

    policy = build_policy(s)
    report, trace = _run_single_hop(s, policy, progress)
    learning = getattr(policy, "trace", None)
    learning_trace = pd.DataFrame(learning) if learning else None
    return RunResult(s, report, trace=trace, learning_trace=learning_trace, multipliers=multipliers,
                     tuning_trajectory=trajectory, wall_ms=(time.perf_counter() - start) * 1e3)


def _multipliers(s: Scenario) -> Dict[str, List[float]]:
    values = {"power": list(_per_link(s.weights.power, s.n_links, 1.0)),
              "drop": list(_per_link(s.weights.drop, s.n_links, 0.0))}
    if s.policy.gamma is not None:
        values["gamma"] = list(s.policy.gamma)
    if s.policy.nu is not None:
        values["nu"] = list(s.policy.nu)
    return values


def _short_run(s: Scenario) -> MetricsReport:
    """Fixed-seed evaluation epoch: same random stream on every call."""
    epoch = dataclasses.replace(
        s, horizon=s.tuning.epoch_slots, warmup=s.tuning.epoch_warmup, trace=False,
        tuning=dataclasses.replace(s.tuning, enabled=False),
        learning=dataclasses.replace(s.learning, trace_every=0))
    return run(epoch).report


def _with_gamma(s: Scenario, gamma: np.ndarray, nu: Optional[np.ndarray] = None) -> Scenario:
    gamma = tuple(float(g) for g in gamma)
    if s.policy.name in ("rate_constraint", "mlwdf"):
        policy = dataclasses.replace(s.policy, gamma=gamma,
                                     nu=s.policy.nu if nu is None else tuple(float(v) for v in nu))
        return dataclasses.replace(s, policy=policy)
    return dataclasses.replace(s, weights=dataclasses.replace(s.weights, power=gamma))


def _tune_power(s: Scenario, budget: Optional[float]) -> Tuple[Scenario, pd.DataFrame]:
    tc = s.tuning
    name = s.policy.name
    if name == "rate_constraint":
        initial = rate_policy_params(s)
        if tc.evaluator == "analytic":
            model = s.channel.model()

            def evaluate(params, epoch):
                return stationary_power_and_rate(params, model, s.n_links, s.n_subcarriers, s.bandwidth_hz)
        else:
            def evaluate(params, epoch):
                report = _short_run(_with_gamma(s, params.gamma, params.nu))
                return report.pbar, report.tbar
    else:
        gamma = s.policy.gamma if (name == "mlwdf" and s.policy.gamma is not None) else s.weights.power
        initial = RatePolicyParams.uniform(s.n_links).replace(gamma=_per_link(gamma, s.n_links, 1.0))

        def evaluate(params, epoch):
            report = _short_run(_with_gamma(s, params.gamma))
            return report.pbar, np.zeros(s.n_links)

    params, trajectory = tune_multipliers(evaluate, initial, power_budget=budget, kappa0=tc.kappa0,
                                          tolerance=tc.tolerance, max_epochs=tc.max_epochs)
    return _with_gamma(s, params.gamma, params.nu if name == "rate_constraint" else None), trajectory


def _drop_knob(s: Scenario) -> np.ndarray:
    name = s.policy.name
    if name == "eeca":
        return np.array([s.policy.V])
    if name == "rate_constraint":
        return rate_policy_params(s).gamma
    gamma = s.policy.gamma if s.policy.gamma is not None else s.weights.power
    return _per_link(gamma, s.n_links, 1.0)


def _with_knob(s: Scenario, knob: np.ndarray) -> Scenario:
    if s.policy.name == "eeca":
        return dataclasses.replace(s, policy=dataclasses.replace(s.policy, V=float(knob[0])))
    return _with_gamma(s, knob)


def _tune_drop_price(s: Scenario, target: float) -> Tuple[Scenario, pd.DataFrame]:
    """Subgradient on the drop price eta until the measured drop rate sits at the target."""
    tc = s.tuning
    eta = _per_link(s.weights.drop, s.n_links, 0.0)
    rows = []
    for epoch in range(1, tc.max_epochs + 1):
        s = dataclasses.replace(s, weights=dataclasses.replace(s.weights, drop=tuple(eta.tolist())))
        drop = _short_run(s).drop_rate
        rows.append({"epoch": epoch, **{f"eta_{l}": eta[l] for l in range(s.n_links)},
                     **{f"drop_{l}": drop[l] for l in range(s.n_links)}})
        done = (np.abs(drop - target) <= tc.drop_tolerance) | ((drop <= target) & (eta <= 0))
        if np.all(done):
            logger.info("drop prices converged after %d epochs", epoch)
            return s, pd.DataFrame(rows)
        step = tc.kappa0 * tc.drop_step / epoch
        eta = np.maximum(eta + step * np.clip((drop - target) / target, -1.0, 1.0), 0.0)
    raise InfeasibleTargetError(f"drop target {target} not met in {tc.max_epochs} epochs",
                                residuals={"drop": (drop - target).tolist()})


def _tune_drop_knob(s: Scenario, target: float) -> Tuple[Scenario, pd.DataFrame]:
    """
    Bisect the log of the policy's own knob (gamma, or V for EECA) on the mean drop rate.

    The knob vector is scaled as a whole, starting from its configured value;
    the bracket grows by KNOB_BRACKET_FACTOR until it straddles the target.
    """
    tc = s.tuning
    knob_name = DROP_KNOB_POLICIES[s.policy.name]
    base = _drop_knob(s)
    lo, hi = None, None
    log_scale = 0.0
    step = float(np.log(KNOB_BRACKET_FACTOR))
    rows = []
    drop = float("nan")
    for epoch in range(1, tc.max_epochs + 1):
        knob = base * float(np.exp(log_scale))
        trial = _with_knob(s, knob)
        drop = float(np.mean(_short_run(trial).drop_rate))
        rows.append({"epoch": epoch, **{f"{knob_name}_{i}": v for i, v in enumerate(knob)}, "drop": drop})
        if abs(drop - target) <= tc.drop_tolerance:
            logger.info("%s converged to %s after %d epochs", knob_name, knob.tolist(), epoch)
            return trial, pd.DataFrame(rows)
        if drop < target:
            lo = log_scale
        else:
            hi = log_scale
        if lo is not None and hi is not None and hi - lo < KNOB_MIN_LOG_WIDTH:
            break
        if lo is None:
            log_scale = hi - step
        elif hi is None:
            log_scale = lo + step
        else:
            log_scale = 0.5 * (lo + hi)
    raise InfeasibleTargetError(f"drop target {target} not met by tuning {knob_name}",
                                residuals={"drop": [drop - target]})


def _tune_drop(s: Scenario, target: float) -> Tuple[Scenario, pd.DataFrame]:
    """Tune the drop price of a learning policy, or the power knob of the others, to a drop target."""
    if not 0 < target < 1:
        raise ConfigurationError(f"drop target must be in (0, 1), got {target}")
    if s.policy.name in LEARNING_POLICIES:
        return _tune_drop_price(s, target)
    if s.policy.name in DROP_KNOB_POLICIES:
        return _tune_drop_knob(s, target)
    raise ConfigurationError(f"policy '{s.policy.name}' has no knob to tune against a drop target")


def adapt_multipliers(s: Scenario, power_budget: Optional[float] = None,
                      drop_target: Optional[float] = None) -> Tuple[Scenario, pd.DataFrame]:
    """
    Tune the scenario's Lagrange multipliers against its average constraints.

    The power budget defaults to the scenario's SNR-derived budget when
    tuning.power_constraint is set; the drop target defaults to
    tuning.drop_target. Power prices are tuned first, then drop prices.
    M-LWDF, EECA and the rate-constraint policy have a single knob, so a
    drop target takes precedence over the power budget for them.

    Returns:
        (tuned Scenario, trajectory DataFrame)
    """
    tc = s.tuning
    name = s.policy.name
    if power_budget is None and tc.power_constraint:
        power_budget = s.power_budget
    if drop_target is None:
        drop_target = tc.drop_target

    frames = []
    if name == "oracle":
        logger.warning("the oracle uses fixed weights; nothing to tune")
        return s, pd.DataFrame()
    if drop_target is not None and name in DROP_KNOB_POLICIES:
        if power_budget is not None:
            logger.warning("%s has one knob; tuning it to the drop target leaves the power budget free", name)
    elif name == "eeca":
        logger.warning("EECA trades power through V only; sweep policy.V instead of tuning")
    elif power_budget is not None or name == "rate_constraint":
        s, trajectory = _tune_power(s, power_budget)
        frames.append(trajectory.assign(stage="power"))
    if drop_target is not None:
        s, trajectory = _tune_drop(s, drop_target)
        frames.append(trajectory.assign(stage="drop"))
    trajectory = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()
    return s, trajectory


def scenario_drift_bound(s: Scenario) -> float:
    """
    Drift constant B from the scenario's largest per-slot service and arrival.

    Packet mode serves at most one packet per link and slot. In fluid mode the
    service cap uses the highest water level the policy can reach.
    """
    traffic = s.traffic.model(s.slot_seconds)
    if s.packet_mode:
        mu_out = np.ones(s.n_links)
    else:
        model = s.channel.model()
        cap = s.buffer_cap
        name = s.policy.name
        if name == "mlwdf":
            gamma = _per_link(s.policy.gamma if s.policy.gamma is not None else s.weights.power, s.n_links, 1.0)
            max_power = cap / gamma
        elif name == "eeca":
            max_power = np.full(s.n_links, 2.0 * cap / s.policy.V)
        elif name == "rate_constraint":
            max_power = rate_policy_params(s).water_level
        else:
            max_power = np.full(s.n_links, s.power_budget * s.n_subcarriers)
        g_max = float(np.max(model.gains))
        mu_out = np.array([max_service_per_slot(g_max, p, s.n_subcarriers, s.bandwidth_hz, s.slot_seconds)
                           for p in max_power])
    return drift_bound_B(mu_out, traffic.per_slot_bound)


def result_row(result: RunResult, axis: Optional[str] = None, value=None,
               timing: bool = True) -> Dict[str, Any]:
    """One output row with the fixed column order."""
    s = result.scenario
    row: Dict[str, Any] = {"scenario_hash": scenario_hash(s), "seed": s.seed,
                           "policy": s.policy.name if s.mode == "single_hop" else s.network.variant,
                           "axis": axis or "", "axis_value": value}
    if result.report is not None:
        rep = result.report
        row.update({f"qbar_{l}": float(v) for l, v in enumerate(rep.qbar)})
        row.update({
            "drop_rate": float(np.mean(rep.drop_rate)),
            "drop_slot_fraction": float(np.mean(rep.drop_slot_fraction)),
            "pbar": float(np.mean(rep.pbar)),
            "tbar": float(np.mean(rep.tbar)),
            "delay_littles": rep.delay_littles,
            "delay_timestamped": rep.delay_timestamped,
            "slots": rep.slots,
        })
    else:
        summary = result.network_summary
        nodes = sorted(k for k in summary if k.startswith("backlog_node_"))
        row.update({k.replace("backlog_node_", "qbar_"): summary[k] for k in nodes})
        lam = summary["offered"] / summary["slots"]
        try:
            littles = littles_delay(summary["total_backlog"], summary["drop_rate"], lam)
        except UndefinedDelayError:
            littles = float("nan")
        row.update({"drop_rate": summary["drop_rate"], "drop_slot_fraction": float("nan"),
                    "pbar": float("nan"), "tbar": summary["delivered"] / summary["slots"],
                    "delay_littles": littles, "delay_timestamped": summary["mean_delay"],
                    "slots": summary["slots"]})
    if timing:
        row["wall_ms"] = result.wall_ms
    return row


def _sweep_job(args) -> Dict[str, Any]:
    scenario, axis, value, timing = args
    return result_row(run(scenario), axis, value, timing)


def sweep(template: Scenario, axis: str, values: Sequence, seeds: Sequence[int],
          workers: int = 1, timing: bool = True, progress: bool = True) -> pd.DataFrame:
    """
    Run the cross product values x seeds, each run independent.

    Rows are sorted by (axis value, seed) so the assembled table does not
    depend on execution order.
    """
    jobs = [(template.with_value(axis, v).with_value("seed", seed), axis, v, timing)
            for v in values for seed in seeds]
    rows: List[Dict[str, Any]] = []
    with tqdm(total=len(jobs), desc=f"Sweeping {axis}", unit="runs", disable=not progress) as pbar:
        if workers > 1:
            with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as executor:
                for row in executor.map(_sweep_job, jobs):
                    rows.append(row)
                    pbar.update(1)
        else:
            for job in jobs:
                rows.append(_sweep_job(job))
                pbar.update(1)
    df = pd.DataFrame(rows)
    return df.sort_values(["axis_value", "seed"], kind="stable").reset_index(drop=True)


def compare_policies(template: Scenario, policies: Sequence[str], axis: str, values: Sequence,
                     seeds: Sequence[int], workers: int = 1, timing: bool = True,
                     progress: bool = True) -> pd.DataFrame:
    """The same sweep for several policies, stacked in policy order."""
    frames = [sweep(template.with_value("policy.name", name), axis, values, seeds, workers, timing, progress)
              for name in policies]
    return pd.concat(frames, ignore_index=True)


def write_results(df: pd.DataFrame, output_path: str, fmt: str = "csv") -> Path:
    path = Path(output_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        df.to_csv(path, index=False, float_format="%.10g")
    elif fmt == "json":
        df.to_json(path, orient="records", indent=2, double_precision=10)
    else:
        raise ConfigurationError(f"unknown output format '{fmt}'")
    return path


def write_learning_trace(df: pd.DataFrame, output_path: str) -> Path:
    """slot, table_norm, last_change and sampled table entries, one row per traced slot."""
    path = Path(output_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, float_format="%.10g")
    return path


# preset experiments

def experiment_preset(name: str, base: Scenario) -> Dict[str, Any]:
    """
    Sweep layout of the standard single-hop comparisons.

    power: average transmit power sweep over every policy
    users: user-count sweep at 17.75 dB
    learning: one learned-potential run at 14.3 dB with a convergence trace
    """
    if name == "power":
        return {"scenario": base, "axis": "snr_db", "values": [10.0, 12.5, 15.0, 17.5, 20.0],
                "policies": ["rate_constraint", "mlwdf", "approx_v", "approx_q"]}
    if name == "users":
        return {"scenario": base.with_value("snr_db", 17.75), "axis": "n_links", "values": [2, 3, 4],
                "policies": ["rate_constraint", "mlwdf", "approx_v", "approx_q"]}
    if name == "learning":
        learning = dataclasses.replace(base.learning, trace_every=max(base.learning.trace_every, 100))
        scenario = dataclasses.replace(base.with_value("snr_db", 14.3).with_value("policy.name", "approx_v"),
                                       learning=learning)
        return {"scenario": scenario, "axis": "snr_db", "values": [14.3], "policies": ["approx_v"]}
    raise ConfigurationError(f"unknown experiment preset '{name}'")


def oracle_report(s: Scenario, n_slots: int = 0) -> Dict[str, Any]:
    """
    Solve the exact MDP and compare it with the heuristic policies.

    The heuristics' actions are snapped to the instance power grid and
    evaluated exactly on the same kernel.
    """
    inst = instance_from_scenario(s)
    result = relative_value_iteration(inst, tol=s.policy.rvi_tol, seed=s.seed)
    report = {"states": inst.n_states, "actions": inst.n_actions, "theta": result.theta,
              "sweeps": result.sweeps, "final_span": result.residuals[-1]}

    gamma = _per_link(s.weights.power, s.n_links, 1.0)
    mlwdf = LyapunovParams(gamma=gamma)
    rate = rate_policy_params(dataclasses.replace(s, policy=dataclasses.replace(s.policy, gamma=tuple(gamma))))
    report["mlwdf_cost"] = evaluate_policy(
        inst, policy_actions(inst, lambda chi: quantize_action(inst, allocate_mlwdf(chi, mlwdf))))
    report["rate_constraint_cost"] = evaluate_policy(
        inst, policy_actions(inst, lambda chi: quantize_action(inst, allocate_rate_constraint(chi.csi, rate))))
    if n_slots > 0:
        rng = spawn_streams(s.seed)["service"]
        report["simulated_cost"] = simulate_chain(inst, result.greedy_actions(inst), n_slots, rng)
    return report


def learning_report(s: Scenario, progress: bool = False) -> Dict[str, Any]:
    """
    Train the scenario's learning policy for s.horizon slots, then score it
    exactly on the MDP instance against the optimal average cost theta.

    Learned powers are snapped to the instance grid, as for the heuristics
    in oracle_report.
    """
    if s.policy.name not in LEARNING_POLICIES:
        raise ConfigurationError(f"policy '{s.policy.name}' does not learn")
    inst = instance_from_scenario(s)
    theta = relative_value_iteration(inst, tol=s.policy.rvi_tol, seed=s.seed).theta
    policy = build_policy(s)
    _run_single_hop(s, policy, progress)
    learned = evaluate_policy(inst, policy_actions(inst, lambda chi: quantize_action(inst, policy.act(chi))))

    table = policy.table
    if isinstance(table, PotentialTable):
        reference = table.values[:, table.reference]
    else:
        reference = table.values[:, table.reference_channel, 0, 0]
    logger.info("%s learned cost %.4g against theta %.4g", s.policy.name, learned, theta)
    return {"policy": s.policy.name, "slots": s.horizon, "theta": theta, "learned_cost": learned,
            "ratio": learned / theta, "converged": table.tracker.converged,
            "reference_max_abs": float(np.max(np.abs(reference)))}


def single_packet_hops(s: Scenario, trials: int = 100, max_slots: int = 10000) -> Dict[str, Any]:
    """Route one lone packet per trial and report hop counts against H_min."""
    rng = spawn_streams(s.seed)["links"]
    hops = []
    for _ in range(trials):
        net = dataclasses.replace(s.network, arrival_prob=0.0).build()
        hops.append(route_single_packet(net, 0, rng, max_slots))
    net = s.network.build()
    h_min = shortest_hops(net, net.commodities[0].source, 0)
    delivered = [h for h in hops if h is not None]
    return {"variant": net.variant.value, "trials": trials, "delivered": len(delivered),
            "h_min": h_min, "mean_hops": float(np.mean(delivered)) if delivered else float("nan"),
            "at_h_min": sum(h == h_min for h in delivered)}


def backlog_growth_exponent(sizes: Sequence[float], backlogs: Sequence[float]) -> float:
    """Slope of log(backlog) against log(size), the fitted power-law exponent."""
    sizes = np.asarray(sizes, dtype=np.float64)
    backlogs = np.asarray(backlogs, dtype=np.float64)
    if sizes.size < 2 or np.any(sizes <= 0) or np.any(backlogs <= 0):
        raise ConfigurationError("growth fit needs at least two positive points")
    return float(np.polyfit(np.log(sizes), np.log(backlogs), 1)[0])
