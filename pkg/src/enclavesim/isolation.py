"""Minimal-TCB isolation service.

Project registry, node allocation pools (free/airlock/allocated/rejected),
VLAN network lifecycle, node-network attachment, BMC proxying, and the
provider's trusted node metadata (EK public key, platform PCR whitelist).

This service is deliberately tiny and knows nothing about images,
attestation, or boot logic; its one security job is that no tenant API
sequence can ever attach a node to another project's network, and that
nodes in the airlock or rejected pools stay isolated.  A dependency lint
in the test suite holds the import list to the fabric layer and errors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .errors import (
    AUTHORIZATION,
    CAPACITY,
    CONFLICT,
    NOT_FOUND,
    POLICY,
    STATE,
    ServiceError,
)
from .fabric import World

PROVIDER = "provider"

FREE = "free"
AIRLOCK = "airlock"
ALLOCATED = "allocated"
REJECTED = "rejected"

STATES = (FREE, AIRLOCK, ALLOCATED, REJECTED)

# the complete legal transition set; everything else is refused
LEGAL_TRANSITIONS = frozenset(
    {
        (FREE, AIRLOCK),
        (AIRLOCK, ALLOCATED),
        (AIRLOCK, REJECTED),
        (ALLOCATED, FREE),
        (REJECTED, FREE),
    }
)

AIRLOCK_PURPOSE = "airlock"
ENCLAVE_PURPOSE = "enclave"
PROVISIONING_PURPOSE = "provisioning-access"
QUARANTINE_PURPOSE = "quarantine"  # internal; not creatable through the API

CREATABLE_PURPOSES = (AIRLOCK_PURPOSE, ENCLAVE_PURPOSE, PROVISIONING_PURPOSE)


@dataclass
class Project:
    project_id: str
    owned_nodes: set = field(default_factory=set)
    owned_networks: set = field(default_factory=set)


@dataclass
class Network:
    network_id: str
    tag: int
    project: Optional[str]  # None = provider-owned
    purpose: str
    public: bool = False


@dataclass
class NodeRecord:
    node_id: str
    state: str = FREE
    project: Optional[str] = None
    attachments: dict = field(default_factory=dict)  # nic -> network_id
    metadata: dict = field(default_factory=dict)
    golden_flash: dict = field(default_factory=dict)


class IsolationService:
    """HIL-equivalent service over one fabric world."""

    def __init__(self, world: World, single_airlock: bool = False,
                 airlock_timeout: Optional[int] = None,
                 vlan_range: tuple[int, int] = (1, 4094)):
        self.world = world
        self.single_airlock = single_airlock
        self.airlock_timeout = airlock_timeout
        self.vlan_range = vlan_range
        self.projects: dict[str, Project] = {}
        self.networks: dict[str, Network] = {}
        self.records: dict[str, NodeRecord] = {}
        self._next_tag = vlan_range[0]
        self._net_seq = 0
        # provider quarantine network for the rejected pool
        self.quarantine = self._new_network(None, QUARANTINE_PURPOSE)

    # --------------------------------------------------------------- registry

    def register_project(self, project_id: str) -> dict:
        if project_id in self.projects or project_id == PROVIDER:
            raise ServiceError(CONFLICT, f"project exists: {project_id}")
        self.projects[project_id] = Project(project_id)
        self.world.emit("isolation", "project_registered",
                        detail={"project": project_id})
        return {"project": project_id}

    def adopt_node(self, node_id: str, ek: str, platform_pcr_whitelist: dict,
                   golden_flash: Optional[dict] = None):
        """Provider-role: place a physical node into the free pool.

        The metadata written here is the root of EK trust for tenants.
        """
        self.world.node(node_id)  # must exist on the fabric
        if node_id in self.records:
            raise ServiceError(CONFLICT, f"node already adopted: {node_id}")
        self.records[node_id] = NodeRecord(
            node_id=node_id,
            metadata={
                "node_id": node_id,
                "ek": ek,
                "platform_pcr_whitelist": dict(platform_pcr_whitelist),
            },
            golden_flash=dict(golden_flash or {}),
        )

    def record(self, node_id: str) -> NodeRecord:
        rec = self.records.get(node_id)
        if rec is None:
            raise ServiceError(NOT_FOUND, f"unknown node: {node_id}")
        return rec

    def get_metadata(self, node_id: str) -> dict:
        """Readable by any tenant; written only by the provider role."""
        return dict(self.record(node_id).metadata)

    def _project(self, project_id: str) -> Project:
        project = self.projects.get(project_id)
        if project is None:
            raise ServiceError(NOT_FOUND, f"unknown project: {project_id}")
        return project

    # ------------------------------------------------------------- allocation

    def allocate_node(self, project_id: str, constraints: Optional[dict] = None) -> dict:
        """Move the lowest-id free node into project ownership (pre-airlock)."""
        project = self._project(project_id)
        wanted = (constraints or {}).get("node_id")
        candidates = [
            rec for rec in self.records.values()
            if rec.state == FREE and rec.project is None
            and (wanted is None or rec.node_id == wanted)
        ]
        if not candidates:
            raise ServiceError(CAPACITY, "no free node satisfies the request")
        rec = min(candidates, key=lambda r: r.node_id)
        rec.project = project_id
        project.owned_nodes.add(rec.node_id)
        self.world.emit("isolation", "allocated", node_id=rec.node_id,
                        detail={"project": project_id})
        return {"node_id": rec.node_id, "metadata": dict(rec.metadata)}

    # --------------------------------------------------------------- networks

    def _new_network(self, project_id: Optional[str], purpose: str,
                     public: bool = False) -> Network:
        if self._next_tag > self.vlan_range[1]:
            raise ServiceError(CAPACITY, "VLAN tag space exhausted")
        tag = self._next_tag
        self._next_tag += 1
        net = Network(network_id=f"net-{self._net_seq}", tag=tag,
                      project=project_id, purpose=purpose, public=public)
        self._net_seq += 1
        self.networks[net.network_id] = net
        self.world.emit("isolation", "network_created", network_id=net.network_id,
                        detail={"project": project_id or PROVIDER,
                                "purpose": purpose, "tag": tag})
        return net

    def create_network(self, project_id: str, purpose: str,
                       public: bool = False) -> dict:
        if purpose not in CREATABLE_PURPOSES:
            raise ServiceError(POLICY, f"unknown network purpose: {purpose}")
        if project_id != PROVIDER:
            self._project(project_id)
            public = False  # only provider networks may be public
        if purpose == AIRLOCK_PURPOSE and self.single_airlock:
            for net in self.networks.values():
                if net.purpose == AIRLOCK_PURPOSE and self._tenant_nodes_on(net):
                    raise ServiceError(
                        CAPACITY, "single-airlock mode: an airlock is in use")
        owner = None if project_id == PROVIDER else project_id
        net = self._new_network(owner, purpose, public)
        if owner is not None:
            self.projects[owner].owned_networks.add(net.network_id)
        return {"network_id": net.network_id, "tag": net.tag}

    def network(self, network_id: str) -> Network:
        net = self.networks.get(network_id)
        if net is None:
            raise ServiceError(NOT_FOUND, f"unknown network: {network_id}")
        return net

    def _tenant_nodes_on(self, net: Network) -> list[str]:
        return [
            rec.node_id for rec in self.records.values()
            if net.network_id in rec.attachments.values()
        ]

    # -------------------------------------------------------------- attaching

    def connect(self, caller: str, node_id: str, nic: str, network_id: str) -> dict:
        """Attach a node NIC to a network; takes effect next tick."""
        rec = self.record(node_id)
        net = self.network(network_id)
        node = self.world.node(node_id)
        if nic not in node.nics:
            raise ServiceError(NOT_FOUND, f"node {node_id} has no NIC {nic}")
        if caller != PROVIDER:
            if rec.project != caller:
                raise ServiceError(AUTHORIZATION, "node not owned by caller")
            # the TCB guarantee: never attach to a foreign project's network
            if not net.public and net.project != caller:
                raise ServiceError(AUTHORIZATION, "network not owned by caller")
        if rec.state == FREE:
            raise ServiceError(POLICY, "free nodes stay unattached in the pool")
        if rec.state == REJECTED:
            raise ServiceError(POLICY, "rejected nodes stay in quarantine")
        if rec.state == AIRLOCK:
            if net.purpose != AIRLOCK_PURPOSE:
                raise ServiceError(POLICY, "airlock nodes may only join their airlock")
            occupants = [n for n in self._tenant_nodes_on(net) if n != node_id]
            if occupants:
                raise ServiceError(POLICY, "airlock admits exactly one tenant node")
        if rec.state == ALLOCATED and net.purpose == AIRLOCK_PURPOSE:
            raise ServiceError(POLICY, "allocated nodes may not join airlocks")
        rec.attachments[nic] = network_id
        tag = net.tag
        self.world.schedule_in(1, "isolation",
                               lambda: self.world.switch.set_tag(nic, tag))
        self.world.emit("isolation", "connected", node_id=node_id,
                        network_id=network_id, detail={"nic": nic})
        return {"node_id": node_id, "network_id": network_id}

    def detach(self, caller: str, node_id: str, nic: str) -> dict:
        rec = self.record(node_id)
        if caller != PROVIDER and rec.project != caller:
            raise ServiceError(AUTHORIZATION, "node not owned by caller")
        network_id = rec.attachments.pop(nic, None)
        if network_id is None:
            raise ServiceError(NOT_FOUND, f"NIC {nic} is not attached")
        self.world.schedule_in(1, "isolation",
                               lambda: self.world.switch.set_tag(nic, None))
        self.world.emit("isolation", "detached", node_id=node_id,
                        network_id=network_id, detail={"nic": nic})
        return {"node_id": node_id}

    def _detach_all(self, rec: NodeRecord):
        for nic in list(rec.attachments):
            self.detach(PROVIDER, rec.node_id, nic)

    def attach_service(self, caller: str, service_name: str, network_id: str) -> dict:
        """Give a service endpoint presence on a network (owner or provider)."""
        net = self.network(network_id)
        if caller != PROVIDER and net.project != caller:
            raise ServiceError(AUTHORIZATION, "network not owned by caller")
        nic = self.world.svc_attach(service_name, net.tag)
        self.world.emit("isolation", "service_attached", network_id=network_id,
                        detail={"service": service_name, "nic": nic})
        return {"nic": nic}

    # ------------------------------------------------------------ state moves

    def set_state(self, caller: str, node_id: str, new_state: str,
                  cause: Optional[str] = None) -> dict:
        rec = self.record(node_id)
        if new_state not in STATES:
            raise ServiceError(STATE, f"unknown state: {new_state}")
        if caller != PROVIDER and rec.project != caller:
            raise ServiceError(AUTHORIZATION, "node not owned by caller")
        if (rec.state, new_state) not in LEGAL_TRANSITIONS:
            raise ServiceError(
                STATE, f"illegal transition {rec.state}->{new_state}")
        if rec.state == REJECTED and new_state == FREE and caller != PROVIDER:
            raise ServiceError(POLICY, "rejected nodes leave only via remediation")
        if new_state == FREE:
            node = self.world.node(node_id)
            if not node.scrubbed:
                raise ServiceError(POLICY, "memory not scrubbed since last use")
            if rec.attachments:
                raise ServiceError(POLICY, "node still attached to networks")
        old = rec.state
        rec.state = new_state
        if new_state == REJECTED:
            # into the rejected pool: cut from everything, quarantine only
            self._detach_all(rec)
            rec.attachments[self.world.node(node_id).nic0] = self.quarantine.network_id
            qtag = self.quarantine.tag
            nic = self.world.node(node_id).nic0
            self.world.schedule_in(1, "isolation",
                                   lambda: self.world.switch.set_tag(nic, qtag))
        if new_state == FREE:
            project = self.projects.get(rec.project or "")
            if project is not None:
                project.owned_nodes.discard(node_id)
            rec.project = None
        if new_state == AIRLOCK and self.airlock_timeout is not None:
            self._arm_airlock_timeout(rec)
        self.world.emit("isolation", "state_change", node_id=node_id,
                        detail={"from": old, "to": new_state,
                                **({"cause": cause} if cause else {})})
        return {"node_id": node_id, "state": new_state}

    def _arm_airlock_timeout(self, rec: NodeRecord):
        entered_at = self.world.clock.tick

        def expire():
            fresh = self.records.get(rec.node_id)
            if fresh is not None and fresh.state == AIRLOCK:
                self.set_state(PROVIDER, rec.node_id, REJECTED,
                               cause="airlock_timeout")

        self.world.schedule_at(entered_at + self.airlock_timeout,
                               "isolation", expire)

    def remediate(self, caller: str, node_id: str) -> dict:
        """Provider-only: reflash known-good firmware, scrub, return to pool."""
        if caller != PROVIDER:
            raise ServiceError(AUTHORIZATION, "remediation is a provider action")
        rec = self.record(node_id)
        if rec.state != REJECTED:
            raise ServiceError(STATE, "only rejected nodes are remediated")
        node = self.world.node(node_id)
        node.flash = dict(rec.golden_flash)
        node.memory[:] = bytes(len(node.memory))
        node.scrubbed = True
        self._detach_all(rec)
        self.world.emit("isolation", "remediated", node_id=node_id)
        return self.set_state(PROVIDER, node_id, FREE, cause="remediated")

    # ------------------------------------------------------------------- misc

    def power_cycle(self, caller: str, node_id: str) -> dict:
        rec = self.record(node_id)
        if caller != PROVIDER and rec.project != caller:
            raise ServiceError(AUTHORIZATION, "node not owned by caller")
        result = self.world.power_cycle(node_id)
        self.world.emit("isolation", "power_cycle", node_id=node_id,
                        detail={"caller": caller, "result": result})
        return {"node_id": node_id, "result": result}

    def node_status(self, node_id: str) -> dict:
        rec = self.record(node_id)
        return {
            "node_id": node_id,
            "state": rec.state,
            "project": rec.project,
            "attachments": dict(rec.attachments),
        }
