"""Tenant-side orchestration: enclaves, security tiers, node life cycle.

The orchestrator owns no security mechanism itself.  It is a script head
over the three services — isolation, provisioning, attestation — driving
each node through the six-step life cycle:

  1. allocate a free node and move it into a fresh airlock network
  2. power-cycle into the measured firmware chain
  3. attest the boot (skipped at tier ``basic``)
  4. on PASS, move the node into the enclave network
  5. on FAIL, park it in the rejected pool (a result, not an exception)
  6. provision the tenant OS over a boot session and kexec into it

Every step emits one ``lifecycle_step`` trace event carrying its number,
so traces are directly comparable against the expected step sequences.

Security tiers:
  basic     no attestation, no encryption; verdicts are WAIVED
  attested  provider-run boot attestation; traffic stays plaintext
  full      tenant-run verifier, continuous attestation, encrypted disk
            and network traffic, revocation with group rekey
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import crypto
from . import isolation as iso
from .attestation import Agent, Registrar, Verifier
from .bootchain import (
    BootChain,
    PROFILE_STAGES,
    UEFI_CHAIN,
    VERDICT_FAIL,
    VERDICT_PASS,
    VERDICT_WAIVED,
    expected_pcrs,
    install_firmware,
    standard_artifacts,
)
from .errors import (
    AUTHORIZATION,
    CAPACITY,
    CONFLICT,
    NOT_FOUND,
    STATE,
    USAGE,
    ServiceError,
)
from .fabric import World
from .isolation import IsolationService
from .provisioning import ProvisioningService, build_boot_image

TIER_BASIC = "basic"
TIER_ATTESTED = "attested"
TIER_FULL = "full"
TIERS = (TIER_BASIC, TIER_ATTESTED, TIER_FULL)

PROVIDER_VERIFIER = "verifier"

STEP_ACTIONS = {
    1: "allocate_airlock",
    2: "boot_firmware",
    3: "attest",
    4: "join_enclave",
    5: "reject",
    6: "provision_os",
}

DEFAULT_CONFIG = {
    "poll_interval": 1,
    "grace": 3,
    "image_size_blocks": 64,
    "kernel_bytes": 6000,
    "initrd_bytes": 3000,
    "cmdline": "console=ttyS0 root=/dev/nbd0 ro",
    "trusted_binaries": ["/sbin/init", "/bin/sh", "/usr/bin/app"],
    "reboot_on_revocation": False,
    "registry_path": None,
}


class Deployment:
    """One emulated datacenter with the provider services wired up.

    Builds the world, the three provider services, the boot chain, and the
    adoptable node inventory.  Tenant-side verifiers are added later by the
    orchestrator, one per full-tier enclave.
    """

    def __init__(self, seed: int = 0, nodes: int = 4,
                 single_airlock: bool = False,
                 default_profile: str = UEFI_CHAIN,
                 node_profiles: Optional[dict] = None):
        self.world = World(seed=seed)
        self.provisioning = ProvisioningService(self.world)
        self.isolation = IsolationService(self.world,
                                          single_airlock=single_airlock)
        self.registrar = Registrar(self.world,
                                   metadata_lookup=self._metadata)
        self.provider_verifier = Verifier(
            self.world, name=PROVIDER_VERIFIER, owner=iso.PROVIDER,
            on_revoked=self._dispatch_revoked)
        self.verifiers: dict[str, Verifier] = {
            PROVIDER_VERIFIER: self.provider_verifier}
        self.chain = BootChain(self.world, agent_factory=self._make_agent)
        # hook the orchestrator installs to act on revocations
        self.revocation_sink = None

        for name, blob in standard_artifacts(self.world).items():
            self.provisioning.register_artifact(name, blob)
        profiles = dict(node_profiles or {})
        for i in range(nodes):
            node_id = f"node-{i}"
            node = self.world.add_node(node_id)
            kind = profiles.get(node_id, default_profile)
            install_firmware(self.world, node, kind)
            whitelist = {str(pcr): value.hex()
                         for pcr, value in self.whitelist_for(kind).items()}
            self.isolation.adopt_node(
                node_id, ek=node.tpm.ek_public.hex(),
                platform_pcr_whitelist=whitelist,
                golden_flash=node.flash)

    def whitelist_for(self, kind: str) -> dict[int, bytes]:
        blobs = {name: self.world.blob(f"fw:{name}:v1")
                 for name in PROFILE_STAGES[kind]}
        return expected_pcrs(kind, blobs)

    def _metadata(self, node_id: str) -> Optional[dict]:
        try:
            return self.isolation.get_metadata(node_id)
        except ServiceError:
            return None

    def _make_agent(self, node) -> Agent:
        return Agent(self.world, node)

    def _dispatch_revoked(self, agent_id: str, node_id: str):
        if self.revocation_sink is not None:
            self.revocation_sink(agent_id, node_id)

    def add_verifier(self, name: str, owner: str) -> Verifier:
        verifier = Verifier(self.world, name=name, owner=owner,
                            on_revoked=self._dispatch_revoked)
        self.verifiers[name] = verifier
        return verifier


@dataclass
class Member:
    node_id: str
    agent_id: Optional[str]
    session_id: Optional[str]
    image_id: Optional[str]  # the node's private clone of the golden image
    status: str  # member | revoked
    joined_tick: int
    disk_key: Optional[bytes] = None


@dataclass
class Enclave:
    enclave_id: str
    tenant: str
    tier: str
    network_id: str
    image_id: str  # golden image all member clones derive from
    verifier_name: Optional[str]
    whitelist: list = field(default_factory=list)  # [(path, sha256 hex)]
    members: dict = field(default_factory=dict)  # node_id -> Member
    airlock_pool: list = field(default_factory=list)  # reusable airlock nets


class NodeAddTask:
    """One in-flight node_add, advanced one state per scheduler tick.

    Several tasks may run concurrently; each drives its own airlock (or
    queues for the single shared one when the provider enforces that).
    """

    def __init__(self, orch: "Orchestrator", enclave: Enclave):
        self.orch = orch
        self.enc = enclave
        self.world = orch.world
        self.state = "allocate"
        self.result: Optional[dict] = None
        self.node_id: Optional[str] = None
        self.node = None
        self.airlock_id: Optional[str] = None
        self.session_id: Optional[str] = None
        self.clone_id: Optional[str] = None
        self.disk_key: Optional[bytes] = None
        self._owner = f"orchestrator:add:{orch._task_seq}"
        orch._task_seq += 1
        self._step()

    @property
    def done(self) -> bool:
        return self.result is not None

    def _again(self):
        self.world.schedule_in(1, self._owner, self._step)

    def _emit_step(self, number: int, **extra):
        self.world.emit("orchestrator", "lifecycle_step", node_id=self.node_id,
                        detail={"step": number, "action": STEP_ACTIONS[number],
                                "enclave": self.enc.enclave_id, **extra})

    def _step(self):
        if self.done:
            return
        try:
            getattr(self, f"_st_{self.state}")()
        except ServiceError as err:
            # mid-flight service refusal: park the node if we hold one
            if self.node_id is not None and self.airlock_id is not None \
                    and self.state in ("booting", "attest"):
                self._reject(f"{err.code}:{err.message}")
            else:
                self.result = {"result": "error", "code": err.code,
                               "message": err.message}

    # -- step 1 + 2: claim a node, walk it into an airlock, power-cycle it

    def _st_allocate(self):
        isolation = self.orch.isolation
        enc = self.enc
        if self.node_id is None:
            out = isolation.allocate_node(enc.tenant)
            self.node_id = out["node_id"]
            self.node = self.world.node(self.node_id)
        airlock = self.orch._acquire_airlock(enc)
        if airlock is None:
            self._again()  # single-airlock mode: wait for it to drain
            return
        self.airlock_id = airlock
        isolation.set_state(enc.tenant, self.node_id, iso.AIRLOCK)
        isolation.connect(enc.tenant, self.node_id, self.node.nic0, airlock)
        self._emit_step(1, network_id=airlock)
        self._emit_step(2)
        isolation.power_cycle(enc.tenant, self.node_id)
        self.state = "booting"
        self._again()

    def _st_booting(self):
        boot = self.node.boot
        if boot is None:
            self._again()
            return
        if boot.halted:
            self._reject(f"boot_halt:{boot.halted}")
            return
        if not boot.awaiting_verdict:
            self._again()
            return
        if self.enc.tier == TIER_BASIC:
            # no attestation by contract; the verdict is waived and the
            # move into the enclave happens without steps 3-5
            self.orch.chain.set_verdict(self.node, VERDICT_WAIVED)
            self._join_enclave(emit_step4=False)
        else:
            self.state = "attest"
            self._step()

    # -- step 3: enroll the agent, register whitelists, run boot attestation

    def _st_attest(self):
        enc = self.enc
        orch = self.orch
        self._emit_step(3)
        agent = self.node.agent
        if agent is None:
            self._reject("no_agent")
            return
        enrolled = agent.enroll()
        if not enrolled.get("enrolled"):
            self._reject(f"enroll:{enrolled.get('cause')}")
            return
        payload_key = orch.registrar.collect_payload_key(agent.agent_id)
        verifier = orch.verifier_for(enc)
        self._prepare_boot_session(encrypted=enc.tier == TIER_FULL)
        payload = self._build_payload(verifier)
        if agent.agent_id in verifier.records:
            verifier.retire(agent.agent_id)  # stale record from a past tenancy
        verifier.register_agent(
            agent.agent_id, self.node_id,
            aik_public=self.node.tpm.aik_public,
            boot_whitelist=orch._platform_whitelist(self.node_id),
            runtime_whitelist=enc.whitelist if enc.tier == TIER_FULL else None,
            payload=payload, payload_key=payload_key,
            poll_interval=orch.config["poll_interval"],
            enclave_id=enc.enclave_id if enc.tier == TIER_FULL else None,
            grace=orch.config["grace"])
        outcome = verifier.verify_boot(agent.agent_id)
        if outcome["verdict"] != "PASS":
            orch.chain.set_verdict(self.node, VERDICT_FAIL)
            self._reject(outcome["cause"] or "attestation_fail")
            return
        orch.chain.set_verdict(self.node, VERDICT_PASS)
        self._join_enclave(emit_step4=True)

    def _prepare_boot_session(self, encrypted: bool):
        prov = self.orch.provisioning
        self.clone_id = prov.image_clone(self.enc.image_id)["image_id"]
        if encrypted:
            self.disk_key = self.world.rng.randbytes(32)
        sess = prov.create_session(self.node_id, self.clone_id,
                                   channel_key=self.disk_key)
        self.session_id = sess["session_id"]

    def _build_payload(self, verifier: Verifier) -> dict:
        info = self.orch.provisioning.extract_boot_info(self.clone_id)
        payload = {"kernel": info["kernel_blob"],
                   "initrd": info["initrd_blob"],
                   "cmdline": info["cmdline"],
                   "session_id": self.session_id}
        if self.enc.tier == TIER_FULL:
            payload["disk_key"] = self.disk_key
            payload["network_key"] = verifier.group_key(self.enc.enclave_id)
            payload["network_key_id"] = verifier.group_key_id(self.enc.enclave_id)
        return payload

    # -- step 4: out of the airlock, onto the enclave VLAN

    def _join_enclave(self, emit_step4: bool):
        isolation = self.orch.isolation
        enc = self.enc
        if emit_step4:
            self._emit_step(4, network_id=enc.network_id)
        isolation.set_state(enc.tenant, self.node_id, iso.ALLOCATED)
        isolation.detach(enc.tenant, self.node_id, self.node.nic0)
        isolation.connect(enc.tenant, self.node_id, self.node.nic0,
                          enc.network_id)
        self.orch.chain.emit_enclave_move(self.node)
        self.state = "provision"
        self._again()  # the new VLAN tag applies next tick

    # -- step 5

    def _reject(self, cause: str):
        self._emit_step(5, cause=cause)
        self.orch.isolation.set_state(self.enc.tenant, self.node_id,
                                      iso.REJECTED, cause=cause)
        prov = self.orch.provisioning
        if self.session_id is not None and self.session_id in prov.sessions:
            prov.close_session(self.session_id, flush=False)
        if self.clone_id is not None and self.clone_id in prov.images:
            prov.image_delete(self.clone_id)
        self.orch._save_registry()
        self.result = {"result": "rejected", "node_id": self.node_id,
                       "cause": cause}

    # -- step 6: deliver the OS bundle and kexec into it

    def _st_provision(self):
        enc = self.enc
        orch = self.orch
        agent = self.node.agent
        if enc.tier == TIER_BASIC:
            # no attestation service in the loop: the tenant's own script
            # stages the bundle over the BMC console equivalent
            self._prepare_boot_session(encrypted=False)
            info = orch.provisioning.extract_boot_info(self.clone_id)
            runtime = orch.chain.kexec_handoff(self.node, {
                "kernel": info["kernel_blob"], "initrd": info["initrd_blob"],
                "cmdline": info["cmdline"],
                "keys": {"session_id": self.session_id}})
        else:
            verifier = orch.verifier_for(enc)
            verifier.deliver_payload(agent.agent_id)
            if agent.staged_payload is None:
                self.result = {"result": "error", "code": STATE,
                               "message": "payload delivery failed"}
                return
            runtime = orch.chain.kexec_handoff(self.node,
                                               agent.kexec_payload())
        self._emit_step(6, session_id=self.session_id)
        self._first_boot_reads(runtime)
        if enc.tier == TIER_FULL:
            orch.verifier_for(enc).start_polling(agent.agent_id)
        enc.members[self.node_id] = Member(
            node_id=self.node_id,
            agent_id=agent.agent_id if enc.tier != TIER_BASIC else None,
            session_id=self.session_id, image_id=self.clone_id,
            status="member", joined_tick=self.world.clock.tick,
            disk_key=self.disk_key)
        orch._save_registry()
        self.result = {"result": "member", "node_id": self.node_id}

    def _first_boot_reads(self, runtime):
        """The fresh OS pulls its manifest and boot blocks over the session.

        This is what keeps provisioning lazy: only the manifest-listed
        blocks travel, never the whole image.
        """
        block0 = runtime.disk_read(0)
        if block0 is None:
            return
        try:
            manifest = json.loads(block0.rstrip(b"\x00").decode())
        except (UnicodeDecodeError, json.JSONDecodeError):
            return
        for spec in (manifest.get("kernel"), manifest.get("initrd")):
            for index in (spec or {}).get("blocks", []):
                runtime.disk_read(int(index))


class Orchestrator:
    """Composes the services; holds the enclave registry."""

    def __init__(self, deployment: Deployment, config: Optional[dict] = None):
        self.dep = deployment
        self.world = deployment.world
        self.isolation = deployment.isolation
        self.provisioning = deployment.provisioning
        self.registrar = deployment.registrar
        self.chain = deployment.chain
        self.config = {**DEFAULT_CONFIG, **(config or {})}
        self.enclaves: dict[str, Enclave] = {}
        self.tenants: set[str] = set()
        self._task_seq = 0
        deployment.revocation_sink = self._handle_revoked

    # ------------------------------------------------------------- tenants

    def register_tenant(self, tenant: str) -> dict:
        self.isolation.register_project(tenant)
        self.tenants.add(tenant)
        self._save_registry()
        return {"tenant": tenant}

    # ------------------------------------------------------------ enclaves

    def enclave_create(self, tenant: str, tier: str,
                       name: Optional[str] = None) -> dict:
        if tier not in TIERS:
            raise ServiceError(USAGE, f"unknown tier: {tier}")
        if tenant not in self.tenants:
            raise ServiceError(AUTHORIZATION, f"unknown tenant: {tenant}")
        enclave_id = name or f"{tenant}-enc{len(self.enclaves)}"
        if enclave_id in self.enclaves:
            raise ServiceError(CONFLICT, f"enclave exists: {enclave_id}")
        net = self.isolation.create_network(tenant, iso.ENCLAVE_PURPOSE)
        network_id = net["network_id"]
        # remote disk service lives on the enclave VLAN: members read their
        # boot session blocks there, and release-path scrub boots need it
        self.isolation.attach_service(tenant, self.provisioning.name,
                                      network_id)
        verifier_name = None
        if tier == TIER_FULL:
            verifier_name = f"verifier:{enclave_id}"
            verifier = self.dep.add_verifier(verifier_name, owner=tenant)
            verifier.create_group(enclave_id)
            self.isolation.attach_service(tenant, verifier_name, network_id)
        elif tier == TIER_ATTESTED:
            verifier_name = PROVIDER_VERIFIER
            self.isolation.attach_service(tenant, verifier_name, network_id)
        enclave = Enclave(
            enclave_id=enclave_id, tenant=tenant, tier=tier,
            network_id=network_id, image_id=self._build_golden(enclave_id),
            verifier_name=verifier_name,
            whitelist=self._runtime_whitelist())
        self.enclaves[enclave_id] = enclave
        self.world.emit("orchestrator", "enclave_created", detail={
            "enclave_id": enclave_id, "tenant": tenant, "tier": tier,
            "network_id": network_id})
        self._save_registry()
        return {"enclave_id": enclave_id, "tier": tier,
                "network_id": network_id}

    def _build_golden(self, enclave_id: str) -> str:
        cfg = self.config
        content = build_boot_image(
            kernel=self.world.blob(f"os:{enclave_id}:kernel",
                                   cfg["kernel_bytes"]),
            initrd=self.world.blob(f"os:{enclave_id}:initrd",
                                   cfg["initrd_bytes"]),
            cmdline=cfg["cmdline"],
            size_blocks=cfg["image_size_blocks"])
        out = self.provisioning.image_create(
            f"{enclave_id}-golden", content,
            size_blocks=cfg["image_size_blocks"])
        return out["image_id"]

    def _runtime_whitelist(self) -> list:
        return [(path, crypto.sha256(self.world.blob(f"bin:{path}")).hex())
                for path in self.config["trusted_binaries"]]

    def enclave(self, enclave_id: str) -> Enclave:
        enc = self.enclaves.get(enclave_id)
        if enc is None:
            raise ServiceError(NOT_FOUND, f"unknown enclave: {enclave_id}")
        return enc

    def verifier_for(self, enc: Enclave) -> Verifier:
        return self.dep.verifiers[enc.verifier_name]

    def trusted_binary(self, path: str) -> bytes:
        """The blob a whitelist entry was computed from."""
        return self.world.blob(f"bin:{path}")

    def _platform_whitelist(self, node_id: str) -> dict[int, bytes]:
        """Expected boot PCRs from the provider's published node inventory."""
        meta = self.isolation.get_metadata(node_id)
        return {int(pcr): bytes.fromhex(value)
                for pcr, value in meta["platform_pcr_whitelist"].items()}

    # ------------------------------------------------------------- airlocks

    def _acquire_airlock(self, enc: Enclave) -> Optional[str]:
        for net_id in enc.airlock_pool:
            net = self.isolation.network(net_id)
            if not self.isolation._tenant_nodes_on(net):
                return net_id
        try:
            out = self.isolation.create_network(enc.tenant, iso.AIRLOCK_PURPOSE)
        except ServiceError as err:
            if err.code == CAPACITY:
                return None  # single-airlock mode and it is occupied
            raise
        net_id = out["network_id"]
        self.isolation.attach_service(enc.tenant, self.provisioning.name, net_id)
        self.isolation.attach_service(enc.tenant, self.registrar.name, net_id)
        if enc.verifier_name is not None:
            self.isolation.attach_service(enc.tenant, enc.verifier_name, net_id)
        enc.airlock_pool.append(net_id)
        return net_id

    # ------------------------------------------------------------- node ops

    def node_add_begin(self, enclave_id: str) -> NodeAddTask:
        """Start a node_add; returns the in-flight task (concurrent-safe)."""
        return NodeAddTask(self, self.enclave(enclave_id))

    def node_add(self, enclave_id: str, max_ticks: int = 60) -> dict:
        task = self.node_add_begin(enclave_id)
        self.world.run_until(lambda: task.done, max_ticks=max_ticks)
        if not task.done:
            raise ServiceError(STATE, "node_add did not complete")
        if task.result["result"] == "error":
            raise ServiceError(task.result["code"], task.result["message"])
        return task.result

    def node_release(self, enclave_id: str, node_id: str) -> dict:
        """Release a member: retire, flush, rekey peers, scrub, free.

        The ordering is part of the contract: the verifier record is
        retired before any isolation state changes, the boot session is
        flushed into tenant-owned storage, surviving peers get a fresh
        group key, and the node's memory is scrubbed by a firmware boot
        before it returns to the free pool.
        """
        enc = self.enclave(enclave_id)
        member = enc.members.get(node_id)
        if member is None:
            raise ServiceError(NOT_FOUND,
                               f"{node_id} is not a member of {enclave_id}")
        node = self.world.node(node_id)
        # 1. stop watching: no poll may fire once release has begun
        if member.agent_id is not None:
            verifier = self.verifier_for(enc)
            if member.agent_id in verifier.records:
                verifier.retire(member.agent_id)
        # 2. the boot session dies; a clean member keeps its written blocks
        if member.session_id is not None \
                and member.session_id in self.provisioning.sessions:
            self.provisioning.close_session(member.session_id,
                                            flush=member.status == "member")
        # 3. survivors stop trusting the leaver's group key
        if enc.tier == TIER_FULL and member.status == "member":
            self.verifier_for(enc).rotate_group(enc.enclave_id,
                                                leaving=member.agent_id)
        # 4. scrub: power-cycle into the measured firmware, whose runtime
        #    stage zeroes memory; a revoked node was cut from the VLAN, so
        #    re-admit it to the enclave network for this one firmware boot
        rec = self.isolation.record(node_id)
        if not rec.attachments:
            self.isolation.connect(enc.tenant, node_id, node.nic0,
                                   enc.network_id)
        self.isolation.power_cycle(enc.tenant, node_id)
        self.world.run_until(
            lambda: node.boot is not None and not node.boot.active
            and (node.boot.awaiting_verdict or node.boot.halted),
            max_ticks=40)
        if not node.scrubbed:
            raise ServiceError(STATE,
                               f"scrub did not complete for {node_id}")
        # 5. off every network, then back to the free pool
        for nic in list(rec.attachments):
            self.isolation.detach(enc.tenant, node_id, nic)
        self.isolation.set_state(enc.tenant, node_id, iso.FREE)
        del enc.members[node_id]
        self.world.emit("orchestrator", "node_released", node_id=node_id,
                        detail={"enclave": enclave_id})
        self._save_registry()
        return {"released": node_id}

    def node_status(self, node_id: str) -> dict:
        status = self.isolation.node_status(node_id)
        for enc in self.enclaves.values():
            member = enc.members.get(node_id)
            if member is not None:
                status["enclave"] = enc.enclave_id
                status["member_status"] = member.status
                if member.agent_id is not None:
                    verifier = self.verifier_for(enc)
                    if member.agent_id in verifier.records:
                        status["attestation"] = \
                            verifier.status(member.agent_id)
        return status

    # ----------------------------------------------------------- revocation

    def _handle_revoked(self, agent_id: str, node_id: str):
        """Verifier callback: cut a banned node from every VLAN at once."""
        rec = self.isolation.records.get(node_id)
        if rec is not None:
            for nic in list(rec.attachments):
                self.isolation.detach(iso.PROVIDER, node_id, nic)
        for enc in self.enclaves.values():
            member = enc.members.get(node_id)
            if member is not None and member.status == "member":
                member.status = "revoked"
        self.world.emit("orchestrator", "revocation_isolation",
                        node_id=node_id, detail={"agent_id": agent_id})
        if self.config["reboot_on_revocation"]:
            self.isolation.power_cycle(iso.PROVIDER, node_id)
        self._save_registry()

    # ------------------------------------------------------------- registry

    def registry_snapshot(self) -> dict:
        """The durable face of the orchestrator.  Never contains keys."""
        enclaves = {}
        for enc in self.enclaves.values():
            enclaves[enc.enclave_id] = {
                "enclave_id": enc.enclave_id,
                "tenant": enc.tenant,
                "tier": enc.tier,
                "network_id": enc.network_id,
                "image_id": enc.image_id,
                "verifier": enc.verifier_name,
                "whitelist": [list(entry) for entry in enc.whitelist],
                "airlock_pool": list(enc.airlock_pool),
                "members": {
                    node_id: {
                        "node_id": m.node_id, "agent_id": m.agent_id,
                        "session_id": m.session_id, "image_id": m.image_id,
                        "status": m.status, "joined_tick": m.joined_tick,
                    } for node_id, m in sorted(enc.members.items())
                },
            }
        return {"tenants": sorted(self.tenants), "enclaves": enclaves}

    def _save_registry(self):
        path = self.config.get("registry_path")
        if path:
            Path(path).write_text(json.dumps(
                self.registry_snapshot(), sort_keys=True, indent=2) + "\n")
