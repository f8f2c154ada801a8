"""Measured boot: firmware stage chain, PCR extends, scrub, and kexec handoff.

Each boot stage measures the next stage's blob into a PCR *before*
transferring control to it, building an unbroken hash chain from power-on:

    ============== ================ =========================== =====
    stage          blob source      measured into               PCR
    ============== ================ =========================== =====
    post           SPI flash        at reset, by the ROM        0
    pxe            SPI flash        by post                     0
    ipxe           network download by pxe                      4
    linuxboot_runtime  flash or download                        4
    keylime_agent  network download by the runtime              4
    tenant_kernel  attestation payload  at kexec                4
    ============== ================ =========================== =====

Two firmware profiles exist.  ``uefi_chain`` walks the full ladder; with
``linuxboot_flash`` the runtime lives in flash, so post jumps straight to
it and the network-bootloader rungs (and their PCR-4 extends) disappear.

Stage "execution" is symbolic — a state-machine advance, one stage per
tick — because the security argument rests only on the measure-then-run
ordering, not on instruction semantics.
"""

from __future__ import annotations

import base64
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import crypto
from .errors import POLICY, STATE, ServiceError
from .fabric import FIRMWARE_REGION_END, EmulatedNode, Frame, World, frame_aad
from .tpm import PCR_BOOT, PCR_PLATFORM, PCR_RUNTIME, PcrBank, expected_register

logger = logging.getLogger(__name__)

UEFI_CHAIN = "uefi_chain"
LINUXBOOT_FLASH = "linuxboot_flash"

STAGE_PCR = {
    "post": PCR_PLATFORM,
    "pxe": PCR_PLATFORM,
    "ipxe": PCR_BOOT,
    "linuxboot_runtime": PCR_BOOT,
    "keylime_agent": PCR_BOOT,
    "tenant_kernel": PCR_BOOT,
}

PROFILE_STAGES = {
    UEFI_CHAIN: ["post", "pxe", "ipxe", "linuxboot_runtime", "keylime_agent"],
    LINUXBOOT_FLASH: ["post", "linuxboot_runtime", "keylime_agent"],
}

# stages whose blobs live in SPI flash rather than on the network
FLASH_RESIDENT = {
    UEFI_CHAIN: ("post", "pxe"),
    LINUXBOOT_FLASH: ("post", "linuxboot_runtime"),
}

# boot phases, keyed by the stage whose execution performs the activity
PHASE_BY_STAGE = {
    "pxe": ("i", "netboot_loader_download"),
    "ipxe": ("ii", "runtime_download"),
}
PHASE_RUNTIME_START = ("iii", "runtime_start")        # network-loaded runtime only
PHASE_AGENT_DOWNLOAD = ("iv", "agent_download")
PHASE_AGENT_RUN = ("v", "agent_attest")
PHASE_ENCLAVE_MOVE = ("vi", "enclave_move")           # emitted by the orchestrator
PHASE_KEXEC = ("vii", "kexec_tenant_kernel")

VERDICT_PENDING = "PENDING"
VERDICT_PASS = "PASS"
VERDICT_FAIL = "FAIL"
VERDICT_WAIVED = "WAIVED"  # tiers that skip attestation by contract

TENANT_REGION_START = FIRMWARE_REGION_END  # keys and kernel land above this


@dataclass
class BootStage:
    name: str
    blob: Optional[bytes]  # None until fetched
    measured_into: int


@dataclass
class FirmwareProfile:
    kind: str
    stages: list[BootStage]

    @classmethod
    def for_kind(cls, kind: str) -> "FirmwareProfile":
        if kind not in PROFILE_STAGES:
            raise ServiceError(STATE, f"unknown firmware profile: {kind}")
        return cls(kind=kind, stages=[
            BootStage(name=name, blob=None, measured_into=STAGE_PCR[name])
            for name in PROFILE_STAGES[kind]
        ])


@dataclass
class BootState:
    node_id: str
    profile: FirmwareProfile
    boot_id: int
    active: bool = True
    stage_index: int = -1
    firmware_context: bool = False  # true while the trusted runtime is in charge
    verdict: str = VERDICT_PENDING
    halted: Optional[str] = None  # halt reason, None while healthy
    awaiting_verdict: bool = False
    handoff_done: bool = False
    phases: list = field(default_factory=list)


class FrameRouter:
    """Per-boot dispatch table installed as the node's message handler."""

    def __init__(self):
        self.routes: dict[str, Callable[[Frame], None]] = {}

    def set(self, msg_type: str, handler: Callable[[Frame], None]):
        self.routes[msg_type] = handler

    def __call__(self, frame: Frame):
        handler = self.routes.get(frame.msg_type)
        if handler is not None:
            handler(frame)


def install_firmware(world: World, node: EmulatedNode, kind: str):
    """Flash the provider's golden firmware for the given profile kind."""
    if kind not in PROFILE_STAGES:
        raise ServiceError(STATE, f"unknown firmware profile: {kind}")
    node.boot_config = kind
    node.flash = {name: world.blob(f"fw:{name}:v1") for name in FLASH_RESIDENT[kind]}


def standard_artifacts(world: World) -> dict[str, bytes]:
    """Known-good network-served boot blobs, published by the provider."""
    return {name: world.blob(f"fw:{name}:v1")
            for name in ("ipxe", "linuxboot_runtime", "keylime_agent")}


def expected_pcrs(kind: str, blobs: dict[str, bytes]) -> dict[int, bytes]:
    """Whitelist oracle: final PCR values for a correct boot, from known blobs.

    Pure hash-chain recomputation — no TPM involved, so tests can cross-check
    the emulated bank against it.
    """
    per_pcr: dict[int, list[bytes]] = {}
    for name in PROFILE_STAGES[kind]:
        per_pcr.setdefault(STAGE_PCR[name], []).append(crypto.sha256(blobs[name]))
    return {pcr: expected_register(ms) for pcr, ms in per_pcr.items()}


def scrub_memory(node: EmulatedNode) -> dict:
    """Zero every byte of node memory; firmware-context only."""
    boot = node.boot
    if node.runtime is not None or boot is None or not boot.firmware_context:
        raise ServiceError(POLICY, "scrub is a firmware-context operation")
    node.memory[:] = bytes(len(node.memory))
    node.scrubbed = True
    node.world.emit("bootchain", "scrub_complete", node_id=node.node_id)
    return {"scrubbed": True, "bytes": len(node.memory)}


class BootChain:
    """Drives every node's boot; wired into the world as its boot driver."""

    def __init__(self, world: World, artifact_service: str = "provisioning",
                 default_kind: str = UEFI_CHAIN,
                 agent_factory: Optional[Callable[[EmulatedNode], object]] = None):
        self.world = world
        self.artifact_service = artifact_service
        self.default_kind = default_kind
        self.agent_factory = agent_factory
        world.boot_driver = self.on_power_on

    # ------------------------------------------------------------- the ladder

    def on_power_on(self, node: EmulatedNode):
        kind = node.boot_config or self.default_kind
        state = BootState(node_id=node.node_id, profile=FirmwareProfile.for_kind(kind),
                          boot_id=node.boot_id)
        node.boot = state
        node.message_handler = FrameRouter()
        # the ROM measures the resident firmware before handing it control
        post = node.flash.get("post")
        if post is None:
            self._halt(node, "missing_blob", stage="post")
            return
        state.profile.stages[0].blob = post
        self._measure(node, state.profile.stages[0])
        state.firmware_context = True
        boot_id = node.boot_id
        self.world.schedule_in(1, node.node_id,
                               lambda: self._step(node, 0, boot_id))

    def _step(self, node: EmulatedNode, index: int, boot_id: int):
        state = node.boot
        if state is None or state.boot_id != boot_id or state.halted:
            return  # power was cycled under us; the stale step dies here
        state.stage_index = index
        stage = state.profile.stages[index]
        self._execute(node, stage)
        if state.halted:
            return
        if index + 1 < len(state.profile.stages):
            nxt = state.profile.stages[index + 1]
            blob = self._acquire(node, nxt)
            if blob is None:
                self._halt(node, "missing_blob", stage=nxt.name)
                return
            nxt.blob = blob
            self._measure(node, nxt)
            self.world.schedule_in(1, node.node_id,
                                   lambda: self._step(node, index + 1, boot_id))

    def _execute(self, node: EmulatedNode, stage: BootStage):
        state = node.boot
        if stage.name == "pxe" or stage.name == "ipxe":
            self._phase(node, *PHASE_BY_STAGE[stage.name])
        elif stage.name == "linuxboot_runtime":
            if state.profile.kind == UEFI_CHAIN:
                self._phase(node, *PHASE_RUNTIME_START)
            # the trusted runtime scrubs the machine before anything tenant-
            # visible happens on it
            scrub_memory(node)
            self._phase(node, *PHASE_AGENT_DOWNLOAD)
        elif stage.name == "keylime_agent":
            self._phase(node, *PHASE_AGENT_RUN)
            if self.agent_factory is not None:
                node.agent = self.agent_factory(node)
            state.awaiting_verdict = True
            # the measured ladder is complete; the chain idles here until an
            # attestation verdict arrives, so the boot no longer pins power
            state.active = False
            self.world.emit("bootchain", "awaiting_verdict", node_id=node.node_id)
            self.world.boot_finished(node)

    def _acquire(self, node: EmulatedNode, stage: BootStage) -> Optional[bytes]:
        if stage.name in FLASH_RESIDENT[node.boot.profile.kind]:
            return node.flash.get(stage.name)
        return self._download(node, stage.name)

    def _download(self, node: EmulatedNode, name: str) -> Optional[bytes]:
        svc_nic = self.world.service_nic_for(self.artifact_service, node.nic0)
        if svc_nic is None:
            return None
        before = len(node.inbox)
        self.world.send_frame(node.nic0, svc_nic, "artifact_fetch",
                              json.dumps({"name": name}).encode())
        for frame in node.inbox[before:]:
            if frame.msg_type != "artifact_result":
                continue
            body = json.loads(frame.payload.decode())
            if body.get("name") == name and "data" in body:
                return base64.b64decode(body["data"])
        return None

    def _measure(self, node: EmulatedNode, stage: BootStage):
        digest = crypto.sha256(stage.blob)
        node.tpm.pcrs.extend(stage.measured_into, digest)
        self.world.emit("bootchain", "boot_stage", node_id=node.node_id, detail={
            "stage": stage.name, "pcr_index": stage.measured_into,
            "digest": digest.hex()})

    def _phase(self, node: EmulatedNode, numeral: str, activity: str):
        node.boot.phases.append(numeral)
        self.world.emit("bootchain", "boot_phase", node_id=node.node_id,
                        detail={"phase": numeral, "activity": activity})

    def _halt(self, node: EmulatedNode, reason: str, **detail):
        state = node.boot
        state.halted = reason
        state.active = False
        state.firmware_context = False
        self.world.emit("bootchain", "boot_halt", node_id=node.node_id,
                        detail={"reason": reason, **detail})
        self.world.boot_finished(node)

    # ------------------------------------------------------------ convenience

    def measured_boot(self, node: EmulatedNode, kind: Optional[str] = None,
                      max_ticks: int = 32) -> dict:
        """Power the node on and run its boot to the idle point.

        Returns the outcome and the final PCR bank for inspection.
        """
        if kind is not None:
            node.boot_config = kind
        self.world.power_cycle(node.node_id)
        self.world.run_until(
            lambda: node.boot is not None and not node.boot.active
            and (node.boot.awaiting_verdict or node.boot.halted),
            max_ticks=max_ticks)
        state = node.boot
        outcome = "awaiting_verdict" if state.awaiting_verdict else \
            f"halted:{state.halted}"
        return {"outcome": outcome, "pcrs": node.tpm.pcrs,
                "phases": list(state.phases)}

    # ---------------------------------------------------------------- verdict

    def set_verdict(self, node: EmulatedNode, verdict: str):
        if node.boot is None:
            raise ServiceError(STATE, "no boot in progress")
        node.boot.verdict = verdict
        self.world.emit("bootchain", "verdict_recorded", node_id=node.node_id,
                        detail={"verdict": verdict})

    def emit_enclave_move(self, node: EmulatedNode):
        """Phase (vi) marker, fired by the orchestrator as it rewires VLANs."""
        self._phase(node, *PHASE_ENCLAVE_MOVE)

    def kexec_handoff(self, node: EmulatedNode, payload: dict) -> "TenantRuntime":
        """Measure the tenant kernel, plant the keys, and leave firmware.

        ``payload`` is the decrypted attestation bundle:
        {kernel, initrd, cmdline, keys: {disk_key?, network_key?,
        network_key_id?, session_id?}}.
        """
        state = node.boot
        if state is None or not state.awaiting_verdict:
            raise ServiceError(STATE, "node is not at the handoff point")
        if state.verdict not in (VERDICT_PASS, VERDICT_WAIVED):
            raise ServiceError(
                POLICY, f"kexec requires a PASS verdict, have {state.verdict}")
        kernel = payload["kernel"]
        stage = BootStage(name="tenant_kernel", blob=kernel,
                          measured_into=STAGE_PCR["tenant_kernel"])
        state.profile.stages.append(stage)
        self._measure(node, stage)
        self._phase(node, *PHASE_KEXEC)

        keys = dict(payload.get("keys") or {})
        # keys ride into the tenant kernel's memory; the firmware staging
        # region is zeroized so firmware retains no copy (no key escrow)
        node.memory[:FIRMWARE_REGION_END] = bytes(FIRMWARE_REGION_END)
        cursor = TENANT_REGION_START
        for name in sorted(keys):
            value = keys[name]
            if isinstance(value, bytes):
                node.write_memory(cursor, value)
                cursor += len(value)
        runtime = TenantRuntime(
            world=self.world, node=node,
            kernel=kernel, initrd=payload.get("initrd", b""),
            cmdline=payload.get("cmdline", ""),
            disk_key=keys.get("disk_key"),
            disk_session=keys.get("session_id"),
            network_key_id=keys.get("network_key_id"),
            network_key=keys.get("network_key"),
            disk_service=self.artifact_service,
        )
        node.runtime = runtime
        state.firmware_context = False
        state.handoff_done = True
        state.awaiting_verdict = False
        self.world.emit("bootchain", "handoff", node_id=node.node_id, detail={
            "kernel_sha256": crypto.sha256(kernel).hex(),
            "encrypted_disk": runtime.disk_key is not None,
            "encrypted_network": runtime.current_key_id is not None})
        return runtime


class TenantRuntime:
    """The tenant's kernel after kexec: app traffic, IMA, remote disk."""

    def __init__(self, world: World, node: EmulatedNode, kernel: bytes,
                 initrd: bytes, cmdline: str,
                 disk_key: Optional[bytes] = None,
                 disk_session: Optional[str] = None,
                 network_key_id: Optional[str] = None,
                 network_key: Optional[bytes] = None,
                 disk_service: str = "provisioning"):
        self.world = world
        self.node = node
        self.kernel_digest = crypto.sha256(kernel)
        self.initrd_digest = crypto.sha256(initrd)
        self.cmdline = cmdline
        self.disk_key = disk_key
        self.disk_session = disk_session
        self.disk_service = disk_service
        # versioned enclave group keys; rekeys add a version, revocations
        # delete old ones
        self.network_keys: dict[str, bytes] = {}
        self.current_key_id: Optional[str] = None
        if network_key_id is not None and network_key is not None:
            self.network_keys[network_key_id] = network_key
            self.current_key_id = network_key_id
        self.ima_entries: list[dict] = []
        router = node.message_handler
        if isinstance(router, FrameRouter):
            router.set("app_data", self._on_app_data)
        self.app_received: list[bytes] = []

    # ------------------------------------------------------------------- IMA

    def execute(self, path: str, content: bytes) -> dict:
        """Run a binary: measure it into the IMA list and PCR 10 first."""
        digest = crypto.sha256(content)
        entry = {"path": path, "sha256": digest.hex()}
        self.ima_entries.append(entry)
        self.node.tpm.pcrs.extend(PCR_RUNTIME, digest)
        self.world.emit("bootchain", "ima_measure", node_id=self.node.node_id,
                        detail=dict(entry))
        return entry

    # ----------------------------------------------------------- app traffic

    def keyring(self) -> dict[str, bytes]:
        return dict(self.network_keys)

    def app_send(self, dst_nic: str, body: bytes) -> dict:
        """Send application data; encrypted iff the enclave has session keys."""
        key = None
        if self.current_key_id is not None:
            key = (self.current_key_id, self.network_keys[self.current_key_id])
        return self.world.send_frame(self.node.nic0, dst_nic, "app_data",
                                     body, key=key)

    def _on_app_data(self, frame: Frame):
        if not frame.encrypted:
            self.app_received.append(frame.payload)
            return
        key = self.network_keys.get(frame.key_id)
        if key is None:
            return  # unreadable; sender is not (or no longer) in the group
        try:
            self.app_received.append(crypto.aead_decrypt(
                key, frame.payload,
                frame_aad(frame.msg_type, frame.src_nic, frame.dst_nic)))
        except ValueError:
            self.world.emit("bootchain", "app_auth_failure",
                            node_id=self.node.node_id,
                            detail={"src": frame.src_nic})

    # ----------------------------------------------------------- remote disk

    def disk_read(self, index: int) -> Optional[bytes]:
        svc_nic = self.world.service_nic_for(self.disk_service, self.node.nic0)
        if svc_nic is None or self.disk_session is None:
            return None
        body = json.dumps({"session_id": self.disk_session,
                           "index": index}).encode()
        key = None
        if self.disk_key is not None:
            key = (f"disk:{self.disk_session}", self.disk_key)
        before = len(self.node.inbox)
        self.world.send_frame(self.node.nic0, svc_nic, "disk_read", body, key=key)
        for frame in self.node.inbox[before:]:
            if frame.msg_type != "disk_read_result":
                continue
            payload = frame.payload
            if frame.encrypted:
                if self.disk_key is None:
                    continue
                try:
                    payload = crypto.aead_decrypt(
                        self.disk_key, payload,
                        frame_aad(frame.msg_type, frame.src_nic, frame.dst_nic))
                except ValueError:
                    return None
            reply = json.loads(payload.decode())
            if reply.get("index") == index and "data" in reply:
                return base64.b64decode(reply["data"])
        return None
