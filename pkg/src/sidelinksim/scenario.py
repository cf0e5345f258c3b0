"""Reproducible highway topologies and packet arrival processes.

UEs sit on a line with exponentially distributed gaps; a contiguous block in
the middle forms the platoon. Platoon members generate groupcast packets
addressed to the rest of the platoon, everyone else generates broadcast
packets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .phy import RadioParams


@dataclass(frozen=True)
class ScenarioConfig:
    """Full experiment parameterization (topology, traffic, radio, MAC, QoS)."""

    n_ues: int = 200
    platoon_size: int = 5
    mean_spacing_m: float = 10.0
    lambda_b: float = 1.8            # broadcast packets/s per non-platoon UE
    lambda_g: float = 1.0            # groupcast packets/s per platoon UE
    comm_range_m: float = 200.0
    latency_budget_ms: float = 10.0
    plr_qos: float = 0.01
    k_g: int = 3                     # max attempts per groupcast packet
    k_b: int = 2                     # repetitions per broadcast packet
    psfch_enabled: bool = False
    ack_delay_ms: float = 2.0
    sim_duration_s: float = 100.0
    seed: int = 1
    half_duplex: bool = True
    psfch_ideal: bool = True
    harq_combining: bool = False
    radio: RadioParams = field(default_factory=RadioParams)

    def validate(self) -> None:
        if not 2 <= self.platoon_size <= self.n_ues:
            raise ValueError("platoon_size must satisfy 2 <= platoon_size <= n_ues")
        for name in ("mean_spacing_m", "comm_range_m", "ack_delay_ms", "sim_duration_s"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")
        # Zero rates are allowed so one traffic class can be switched off.
        if self.lambda_b < 0 or self.lambda_g < 0:
            raise ValueError("packet rates must be non-negative")
        if not 0.0 < self.plr_qos < 1.0:
            raise ValueError("plr_qos must lie strictly between 0 and 1")
        if self.k_g < 1 or self.k_b < 1:
            raise ValueError("attempt limits must be at least 1")
        self.radio.validate()
        if self.latency_budget_ms < self.radio.slot_duration_us / 1000.0:
            raise ValueError("latency_budget_ms below one slot duration")

    @property
    def slot_duration_s(self) -> float:
        return self.radio.slot_duration_us * 1e-6

    @property
    def budget_slots(self) -> int:
        return int(math.floor(self.latency_budget_ms * 1000.0
                              / self.radio.slot_duration_us + 1e-9))

    @property
    def ack_slots(self) -> int:
        return int(math.ceil(self.ack_delay_ms * 1000.0
                             / self.radio.slot_duration_us - 1e-9))

    @property
    def duration_slots(self) -> int:
        return int(math.ceil(self.sim_duration_s / self.slot_duration_s - 1e-9))

    def replace(self, **kwargs) -> "ScenarioConfig":
        return replace(self, **kwargs)


@dataclass(frozen=True, eq=False)
class Topology:
    """1-D UE positions, the platoon block, and the broadcasters whose loss
    statistics are unbiased (full communication disk inside the line)."""

    positions_m: np.ndarray
    platoon_members: tuple
    measurable_broadcasters: tuple


@dataclass(frozen=True, eq=False)
class ArrivalSchedule:
    """Per-UE sorted packet generation times in seconds."""

    times_s: tuple  # one float ndarray per UE


def generate_topology(config: ScenarioConfig, rng: np.random.Generator) -> Topology:
    """Draw UE positions and derive platoon membership.

    Gaps between neighbours are i.i.d. exponential with the configured mean;
    the platoon occupies the middle block of consecutive indices. Rejects
    scenarios where broadcasters exist but none sits at least one
    communication range away from both line ends.
    """
    config.validate()
    gaps = rng.exponential(config.mean_spacing_m, size=config.n_ues - 1)
    positions = np.concatenate(([0.0], np.cumsum(gaps)))
    first = (config.n_ues - config.platoon_size) // 2
    platoon = tuple(range(first, first + config.platoon_size))
    r = config.comm_range_m
    deep = (positions - positions[0] >= r) & (positions[-1] - positions >= r)
    measurable = tuple(int(i) for i in np.flatnonzero(deep)
                       if not first <= i < first + config.platoon_size)
    if config.n_ues > config.platoon_size and not measurable:
        raise ValueError("line too short: no broadcaster is at least one "
                         "communication range away from both ends")
    return Topology(positions, platoon, measurable)


def _poisson_times(rate: float, duration: float, rng: np.random.Generator) -> np.ndarray:
    if rate <= 0.0:
        return np.empty(0, dtype=float)
    chunks = []
    t = 0.0
    expected = max(8, int(rate * duration * 1.25) + 8)
    while True:
        gaps = rng.exponential(1.0 / rate, size=expected)
        times = t + np.cumsum(gaps)
        chunks.append(times)
        t = float(times[-1])
        if t >= duration:
            break
        expected = max(8, expected // 4)
    all_times = np.concatenate(chunks)
    return all_times[all_times < duration]


def generate_traffic(config: ScenarioConfig, topology: Topology,
                     rng: np.random.Generator) -> ArrivalSchedule:
    """Draw per-UE Poisson arrivals: platoon members at the groupcast rate,
    everyone else at the broadcast rate."""
    if len(topology.positions_m) != config.n_ues:
        raise ValueError("topology does not match the configuration")
    platoon = set(topology.platoon_members)
    per_ue = []
    for ue in range(config.n_ues):
        rate = config.lambda_g if ue in platoon else config.lambda_b
        per_ue.append(_poisson_times(rate, config.sim_duration_s, rng))
    return ArrivalSchedule(tuple(per_ue))
