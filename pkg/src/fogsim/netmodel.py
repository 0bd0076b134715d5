"""Link and compute cost models, channel noise, straggler policy, ledgers.

Traffic is accounted in parameters, not bytes (a bytes view is params * 4).
Data transfers (offloading, caching, handover) log the moved sample count in
the same event column; each sample costs feature_dim + 1 parameter
equivalents of energy and airtime on its link.

Default cost constants are simulator defaults, not measured values: uplink
0.01 J/param, downlink 0.005 J/param, D2D 0.001 J/param; D2D links run at
5x the uplink rate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fogsim.errors import ConfigError

KIND_UPLINK = "uplink"
KIND_DOWNLINK = "downlink"
KIND_D2D = "d2d"
KIND_COMPUTE = "compute"
KIND_OFFLOAD = "offload"
KIND_CACHE_UP = "cache_up"
KIND_CACHE_DOWN = "cache_down"
KIND_HANDOVER = "handover"
KIND_DATA_LOSS = "data_loss"
KIND_STRAGGLER = "straggler_drop"
KIND_SAMPLED = "cluster_sampled"
KIND_STALE = "stale_aggregate"

DATA_KINDS = (KIND_OFFLOAD, KIND_CACHE_UP, KIND_CACHE_DOWN, KIND_HANDOVER)
PARAM_KINDS = (KIND_UPLINK, KIND_DOWNLINK, KIND_D2D)


@dataclass
class LinkModel:
    rate: float  # parameters per second
    energy_per_param: float  # joules per parameter
    kind: str = KIND_UPLINK
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.rate <= 0:
            raise ConfigError(f"{self.kind} link rate must be > 0")
        if self.energy_per_param < 0:
            raise ConfigError(f"{self.kind} link energy must be >= 0")


@dataclass
class ComputeProfile:
    samples_per_second: float
    energy_per_sample_step: float = 1e-4

    def __post_init__(self):
        if self.samples_per_second <= 0:
            raise ConfigError("samples_per_second must be > 0")
        if self.energy_per_sample_step < 0:
            raise ConfigError("energy_per_sample_step must be >= 0")


def default_links() -> dict[str, LinkModel]:
    return {
        KIND_UPLINK: LinkModel(rate=1000.0, energy_per_param=0.01, kind=KIND_UPLINK),
        KIND_DOWNLINK: LinkModel(rate=1000.0, energy_per_param=0.005, kind=KIND_DOWNLINK),
        KIND_D2D: LinkModel(rate=5000.0, energy_per_param=0.001, kind=KIND_D2D),
    }


def transmission_cost(param_count: int, link: LinkModel) -> tuple[float, float]:
    """(delay seconds, energy joules) of moving param_count parameters."""
    if param_count < 0:
        raise ConfigError("param_count must be >= 0")
    return param_count / link.rate, param_count * link.energy_per_param


def compute_delay(profile: ComputeProfile, sample_count: int, steps: int) -> float:
    """Seconds for the given number of full-batch steps over sample_count samples."""
    if sample_count < 0 or steps < 0:
        raise ConfigError("sample_count and steps must be >= 0")
    return steps * sample_count / profile.samples_per_second


def compute_energy(profile: ComputeProfile, sample_count: int, steps: int) -> float:
    return steps * sample_count * profile.energy_per_sample_step


def apply_straggler_policy(
    delays: dict[int, float], deadline: float
) -> tuple[list[int], list[int]]:
    """Split nodes into (participants, dropped) by the round deadline."""
    if deadline <= 0:
        raise ConfigError("deadline must be > 0")
    participants = sorted(n for n, d in delays.items() if d <= deadline)
    dropped = sorted(n for n, d in delays.items() if d > deadline)
    return participants, dropped


def apply_channel_noise(vector: np.ndarray, sigma: float, seed) -> np.ndarray:
    """Add i.i.d. zero-mean Gaussian noise per coordinate; seeded and pure."""
    if sigma < 0:
        raise ConfigError("sigma must be >= 0")
    if sigma == 0:
        return np.array(vector, dtype=np.float64, copy=True)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return vector + rng.normal(0.0, sigma, size=vector.shape)


@dataclass
class Event:
    round: int
    phase: str
    kind: str
    src: int
    dst: int
    params: int
    joules: float
    seconds: float

    def to_line(self) -> str:
        return (
            f"{self.round},{self.phase},{self.kind},{self.src},{self.dst},"
            f"{self.params},{format(self.joules, '.17g')},{format(self.seconds, '.17g')}"
        )


@dataclass
class Ledgers:
    """Cumulative accounting for one simulation instance.

    Counters only move through the record_* methods, which append the event
    and update the totals together, so the event log replays to the same
    numbers exactly.
    """

    uplink_params: int = 0
    downlink_params: int = 0
    d2d_params: int = 0
    data_samples_moved: int = 0
    data_samples_lost: int = 0
    stragglers_dropped: int = 0
    energy_tx: dict[int, float] = field(default_factory=dict)
    energy_compute: dict[int, float] = field(default_factory=dict)
    events: list[Event] = field(default_factory=list)

    def _bump_params(self, kind: str, params: int):
        if kind == KIND_UPLINK:
            self.uplink_params += params
        elif kind == KIND_DOWNLINK:
            self.downlink_params += params
        elif kind == KIND_D2D:
            self.d2d_params += params

    def record_transfer(
        self, round_no: int, phase: str, kind: str, src: int, dst: int,
        params: int, link: LinkModel,
    ) -> float:
        """Log one parameter transfer; returns its delay in seconds."""
        delay, energy = transmission_cost(params, link)
        self._bump_params(kind, params)
        self.energy_tx[src] = self.energy_tx.get(src, 0.0) + energy
        self.events.append(Event(round_no, phase, kind, src, dst, params, energy, delay))
        return delay

    def record_data_transfer(
        self, round_no: int, phase: str, kind: str, src: int, dst: int,
        samples: int, values_per_sample: int, link: LinkModel,
    ) -> float:
        """Log one data transfer (sample count in the params column)."""
        delay, energy = transmission_cost(samples * values_per_sample, link)
        self.data_samples_moved += samples
        self.energy_tx[src] = self.energy_tx.get(src, 0.0) + energy
        self.events.append(Event(round_no, phase, kind, src, dst, samples, energy, delay))
        return delay

    def record_compute(
        self, round_no: int, phase: str, node: int, profile: ComputeProfile,
        sample_count: int, steps: int,
    ) -> float:
        delay = compute_delay(profile, sample_count, steps)
        energy = compute_energy(profile, sample_count, steps)
        self.energy_compute[node] = self.energy_compute.get(node, 0.0) + energy
        self.events.append(
            Event(round_no, phase, KIND_COMPUTE, node, node, 0, energy, delay)
        )
        return delay

    def record_marker(self, round_no: int, phase: str, kind: str, src: int, dst: int,
                      params: int = 0):
        if kind == KIND_STRAGGLER:
            self.stragglers_dropped += 1
        elif kind == KIND_DATA_LOSS:
            self.data_samples_lost += params
        self.events.append(Event(round_no, phase, kind, src, dst, params, 0.0, 0.0))

    def total_energy(self) -> float:
        return sum(self.energy_tx.values()) + sum(self.energy_compute.values())

    def transmit_energy(self, nodes) -> float:
        return sum(self.energy_tx.get(n, 0.0) for n in nodes)

    def counters(self) -> dict[str, float]:
        return {
            "uplink_params": self.uplink_params,
            "downlink_params": self.downlink_params,
            "d2d_params": self.d2d_params,
            "total_energy_j": self.total_energy(),
            "stragglers_dropped": self.stragglers_dropped,
            "samples_moved": self.data_samples_moved,
        }


def round_delay_from_events(events: list[Event]) -> float:
    """Round delay under layer-synchronous phases: sum over phases of the
    slowest event in that phase. Phases separate sequential stages (compute,
    each consensus iteration, each layer's uplinks and downlinks). Phases
    named background_* are off the synchronous path and never gate a round.
    """
    phase_max: dict[str, float] = {}
    for ev in events:
        if ev.phase.startswith("background"):
            continue
        if ev.seconds > phase_max.get(ev.phase, 0.0):
            phase_max[ev.phase] = ev.seconds
    return sum(phase_max.values())
