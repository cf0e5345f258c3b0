"""Slot-level simulator of sidelink groupcast/broadcast coexistence with an
optional feedback channel, plus the capacity-search experiment harness."""

__version__ = "0.1.0"

from .engine import PacketOutcome, SimResult, resource_occupancy, run
from .metrics import (CapacityResult, PlrEstimate, ProbeSettings,
                      capacity_search, plr_broadcast, plr_groupcast)
from .phy import RadioParams
from .scenario import (ArrivalSchedule, ScenarioConfig, Topology,
                       generate_topology, generate_traffic)

__all__ = [
    "ArrivalSchedule", "CapacityResult", "PacketOutcome", "PlrEstimate",
    "ProbeSettings", "RadioParams", "ScenarioConfig", "SimResult", "Topology",
    "capacity_search", "generate_topology", "generate_traffic",
    "plr_broadcast", "plr_groupcast", "resource_occupancy", "run",
    "__version__",
]
