"""Bare-metal enclave lifecycle emulator.

A deterministic, single-process model of a provider datacenter: emulated
nodes with TPM-backed measured boot, VLAN isolation with an airlock
admission path, copy-on-write network boot images, remote attestation with
continuous runtime monitoring, and a tenant orchestrator that drives the
whole admission/revocation/release lifecycle at three security tiers.
"""

from .errors import ServiceError
from .fabric import World
from .orchestrator import (Deployment, Orchestrator, TIER_ATTESTED,
                           TIER_BASIC, TIER_FULL, TIERS)
from .scenario import (ScenarioResult, bundled_scenario,
                       bundled_scenario_names, load_scenario, run_scenario)

__all__ = [
    "Deployment",
    "Orchestrator",
    "ScenarioResult",
    "ServiceError",
    "TIERS",
    "TIER_ATTESTED",
    "TIER_BASIC",
    "TIER_FULL",
    "World",
    "bundled_scenario",
    "bundled_scenario_names",
    "load_scenario",
    "run_scenario",
]

__version__ = "0.1.0"
