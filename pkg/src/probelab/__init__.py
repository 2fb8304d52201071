"""Desk-scale laboratory for LLC/snoop-filter Prime+Probe attacks.

Simulates a non-inclusive cache hierarchy with calibrated tenant noise and
provides the full attack stack against it: eviction-set construction,
set monitoring, frequency-domain target identification, and secret-bit
extraction from a simulated signing victim.
"""

from .geometry import CacheGeometry, Level, LevelShape, geometry_preset
from .addresses import AddressSpace, CandidateSet, Uncertainty, gen_candidates, uncertainty
from .machine import MachineConfig, MachineState
from .timing import AttackOracle, LatencyModel, TimedResult

__all__ = [
    "AddressSpace",
    "AttackOracle",
    "CacheGeometry",
    "CandidateSet",
    "Level",
    "LevelShape",
    "LatencyModel",
    "MachineConfig",
    "MachineState",
    "TimedResult",
    "Uncertainty",
    "gen_candidates",
    "geometry_preset",
    "uncertainty",
]
