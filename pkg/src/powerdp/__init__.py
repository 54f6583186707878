"""Power-controlled differentially private decentralized learning over directed graphs."""
from powerdp.allocation import PowerAllocation, fixed_point_allocate
from powerdp.engine import BaselineSimulation, Simulation
from powerdp.privacy import PrivacyLedger, PrivacyParams, Schedule
from powerdp.topology import NetworkTopology, build_mixing_matrix, preset_topology

__version__ = "0.1.0"

__all__ = [
    "BaselineSimulation",
    "NetworkTopology",
    "PowerAllocation",
    "PrivacyLedger",
    "PrivacyParams",
    "Schedule",
    "Simulation",
    "build_mixing_matrix",
    "fixed_point_allocate",
    "preset_topology",
]
