"""The emulated datacenter substrate.

One :class:`World` owns everything a test or scenario touches: the logical
clock, the deterministic scheduler, the VLAN switch with its eavesdropping
tap, the emulated nodes, and the event trace.  All randomness in a world
flows from one seeded RNG, which is what makes identical scenario scripts
produce byte-identical traces.

Timing model: one tick stands for one second when reproducing timing
claims.  Scheduled actions run in (tick, owner id, sequence number) order.
Frames deliver synchronously within the sending tick; topology changes
requested by the isolation service take effect at the next tick boundary.
"""

from __future__ import annotations

import heapq
import itertools
import logging
from dataclasses import dataclass, field
from random import Random
from typing import Callable, Optional

from . import crypto
from .errors import NOT_FOUND, RANGE, STATE, ServiceError
from .tpm import Tpm
from .trace import TraceLog

logger = logging.getLogger(__name__)

DEFAULT_MEMORY_SIZE = 64 * 1024
BROADCAST = "*"

# node memory layout: firmware staging area below, tenant region above
FIRMWARE_REGION_END = 8 * 1024


class LogicalClock:
    """Monotonic tick counter; the only notion of time in the model."""

    def __init__(self):
        self.tick = 0


@dataclass
class SwitchPort:
    port_id: str
    attached_nic: str
    vlan_tag: Optional[int] = None  # access-port model: at most one tag


@dataclass
class Frame:
    src_nic: str
    dst_nic: str  # a NIC id or BROADCAST
    msg_type: str
    payload: bytes
    encrypted: bool = False
    key_id: Optional[str] = None


def frame_aad(msg_type: str, src_nic: str, dst_nic: str) -> bytes:
    """Header bytes bound into symmetric frame encryption."""
    return f"{msg_type}|{src_nic}|{dst_nic}".encode()


class Tap:
    """Provider-side capture of every frame, delivered or dropped."""

    def __init__(self):
        self.frames: list[tuple[Frame, str]] = []

    def record(self, frame: Frame, status: str):
        self.frames.append((frame, status))

    def read(self, keyring: Optional[dict] = None) -> list[dict]:
        """Observe captured traffic.

        A provider observer passes no keyring and recovers plaintext only
        from unencrypted frames.  An observer holding session keys (keyed
        by frame key_id) also recovers matching encrypted frames.
        """
        keyring = keyring or {}
        out = []
        for frame, status in self.frames:
            entry = {
                "src": frame.src_nic,
                "dst": frame.dst_nic,
                "msg_type": frame.msg_type,
                "status": status,
                "encrypted": frame.encrypted,
                "plaintext": None,
                "ciphertext": None,
            }
            if not frame.encrypted:
                entry["plaintext"] = frame.payload
            else:
                entry["ciphertext"] = frame.payload
                key = keyring.get(frame.key_id)
                if key is not None:
                    try:
                        entry["plaintext"] = crypto.aead_decrypt(
                            key,
                            frame.payload,
                            frame_aad(frame.msg_type, frame.src_nic, frame.dst_nic),
                        )
                    except ValueError:
                        pass
            out.append(entry)
        return out


class Switch:
    """VLAN-enforcing switch; one access port per NIC."""

    def __init__(self):
        self.ports: dict[str, SwitchPort] = {}  # keyed by attached NIC
        self._port_seq = itertools.count()

    def attach(self, nic: str) -> SwitchPort:
        if nic in self.ports:
            raise ServiceError(STATE, f"NIC already attached: {nic}")
        port = SwitchPort(port_id=f"port-{next(self._port_seq)}", attached_nic=nic)
        self.ports[nic] = port
        return port

    def set_tag(self, nic: str, tag: Optional[int]):
        port = self.ports.get(nic)
        if port is None:
            raise ServiceError(NOT_FOUND, f"no port for NIC {nic}")
        if tag is not None and not 1 <= tag <= 4094:
            raise ServiceError(RANGE, f"VLAN tag out of range: {tag}")
        port.vlan_tag = tag

    def tag_of(self, nic: str) -> Optional[int]:
        port = self.ports.get(nic)
        return port.vlan_tag if port else None

    def same_vlan(self, nic_a: str, nic_b: str) -> bool:
        tag_a = self.tag_of(nic_a)
        return tag_a is not None and tag_a == self.tag_of(nic_b)

    def nics_on(self, tag: int) -> list[str]:
        return [p.attached_nic for p in self.ports.values() if p.vlan_tag == tag]


@dataclass
class ServiceEndpoint:
    """A service's presence on the fabric; one NIC per attached network."""

    name: str
    handler: Callable[[Frame], None]
    nics: list[str] = field(default_factory=list)


class EmulatedNode:
    """A bare-metal server: memory, NICs, a TPM, firmware flash, power."""

    def __init__(self, node_id: str, world: "World", boot_config: Optional[str],
                 memory_size: int, tpm: Optional[Tpm], local_disk_size: int = 0):
        self.node_id = node_id
        self.world = world
        self.power = "off"
        self.memory = bytearray(memory_size)
        self.nics = [f"{node_id}:nic0"]
        self.tpm = tpm
        self.boot_config = boot_config
        self.local_disk = bytearray(local_disk_size) if local_disk_size else None
        self.flash: dict[str, bytes] = {}  # per-node firmware blobs
        self.scrubbed = False
        self.boot = None      # BootState, owned by the boot chain
        self.agent = None     # attestation agent, created at the agent stage
        self.runtime = None   # tenant runtime, created at kexec handoff
        self.boot_id = 0
        self.queued_cycles = 0
        self.inbox: list[Frame] = []
        self.message_handler: Optional[Callable[[Frame], None]] = None

    @property
    def nic0(self) -> str:
        return self.nics[0]

    def write_memory(self, offset: int, data: bytes):
        if offset < 0 or offset + len(data) > len(self.memory):
            raise ServiceError(RANGE, "memory write out of bounds")
        self.memory[offset : offset + len(data)] = data
        if data:  # any write dirties the machine until the next scrub
            self.scrubbed = False

    def read_memory(self, offset: int, length: int) -> bytes:
        if offset < 0 or length < 0 or offset + length > len(self.memory):
            raise ServiceError(RANGE, "memory read out of bounds")
        return bytes(self.memory[offset : offset + length])

    def memory_contains(self, needle: bytes, start: int = 0, end: Optional[int] = None) -> bool:
        if not needle:
            return False
        region = self.memory[start : end if end is not None else len(self.memory)]
        return needle in bytes(region)

    def boot_active(self) -> bool:
        return bool(self.boot is not None and getattr(self.boot, "active", False))

    def deliver(self, frame: Frame):
        self.inbox.append(frame)
        if self.message_handler is not None:
            self.message_handler(frame)


class World:
    """Deterministic discrete-event simulation of one small datacenter."""

    def __init__(self, seed: int = 0, memory_size: int = DEFAULT_MEMORY_SIZE,
                 with_tpms: bool = True):
        self.rng = Random(seed)
        self.seed = seed
        self.clock = LogicalClock()
        self.switch = Switch()
        self.tap = Tap()
        self.trace = TraceLog()
        self.memory_size = memory_size
        self.with_tpms = with_tpms
        self.nodes: dict[str, EmulatedNode] = {}
        self.services: dict[str, ServiceEndpoint] = {}
        self._handlers: dict[str, Callable[[Frame], None]] = {}
        self._queue: list = []  # heap of (tick, owner, seq, fn)
        self._seq = itertools.count()
        self._svc_nic_seq = itertools.count()
        # set by the boot chain wiring; fabric stays ignorant of boot logic
        self.boot_driver: Optional[Callable[[EmulatedNode], None]] = None

    # ------------------------------------------------------------------ nodes

    def add_node(self, node_id: str, boot_config: Optional[str] = None,
                 local_disk_size: int = 0) -> EmulatedNode:
        if node_id in self.nodes:
            raise ServiceError(STATE, f"node id taken: {node_id}")
        tpm = None
        if self.with_tpms:
            tpm = Tpm(ek_seed=self.rng.randbytes(32), aik_seed=self.rng.randbytes(32))
        node = EmulatedNode(node_id, self, boot_config, self.memory_size, tpm,
                           local_disk_size)
        self.nodes[node_id] = node
        self.switch.attach(node.nic0)
        self._handlers[node.nic0] = node.deliver
        self.emit("fabric", "node_created", node_id=node_id)
        return node

    def node(self, node_id: str) -> EmulatedNode:
        node = self.nodes.get(node_id)
        if node is None:
            raise ServiceError(NOT_FOUND, f"unknown node: {node_id}")
        return node

    def power_cycle(self, node_id: str) -> str:
        """BMC power cycle; a cycle during an active boot queues behind it."""
        node = self.node(node_id)
        if node.boot_active():
            node.queued_cycles += 1
            self.emit("fabric", "power_cycle_queued", node_id=node_id)
            return "queued"
        self._do_cycle(node)
        return "cycled"

    def _do_cycle(self, node: EmulatedNode):
        if node.power == "on":
            self.emit("fabric", "power_off", node_id=node.node_id)
        # volatile execution state dies with power; memory bytes do not
        node.runtime = None
        node.agent = None
        node.boot = None
        node.message_handler = None
        if node.tpm is not None:
            node.tpm.reset_pcrs()
        node.power = "on"
        node.boot_id += 1
        self.emit("fabric", "power_on", node_id=node.node_id,
                  detail={"boot_id": node.boot_id})
        if self.boot_driver is not None:
            self.boot_driver(node)

    def boot_finished(self, node: EmulatedNode):
        """Called by the boot chain when a boot halts; drains queued cycles."""
        if node.queued_cycles > 0:
            node.queued_cycles -= 1
            self._do_cycle(node)

    # --------------------------------------------------------------- services

    def add_service_endpoint(self, name: str, handler: Callable[[Frame], None]) -> ServiceEndpoint:
        if name in self.services:
            raise ServiceError(STATE, f"service endpoint exists: {name}")
        ep = ServiceEndpoint(name=name, handler=handler)
        self.services[name] = ep
        return ep

    def svc_attach(self, name: str, tag: int) -> str:
        """Give a service endpoint a NIC on the given VLAN. Returns the NIC."""
        ep = self.services.get(name)
        if ep is None:
            raise ServiceError(NOT_FOUND, f"unknown service endpoint: {name}")
        for nic in ep.nics:
            if self.switch.tag_of(nic) == tag:
                return nic
        nic = f"svc:{name}:{next(self._svc_nic_seq)}"
        ep.nics.append(nic)
        self.switch.attach(nic)
        self.switch.set_tag(nic, tag)
        self._handlers[nic] = ep.handler
        return nic

    def svc_detach(self, name: str, tag: int):
        ep = self.services.get(name)
        if ep is None:
            raise ServiceError(NOT_FOUND, f"unknown service endpoint: {name}")
        for nic in list(ep.nics):
            if self.switch.tag_of(nic) == tag:
                self.switch.set_tag(nic, None)

    def service_nic_for(self, name: str, peer_nic: str) -> Optional[str]:
        """The service NIC sharing a VLAN with peer_nic, if any."""
        ep = self.services.get(name)
        if ep is None:
            return None
        for nic in ep.nics:
            if self.switch.same_vlan(nic, peer_nic):
                return nic
        return None

    # ----------------------------------------------------------------- frames

    def send_frame(self, src_nic: str, dst_nic: str, msg_type: str, body: bytes,
                   key: Optional[tuple[str, bytes]] = None,
                   seal_to: Optional[tuple[str, bytes]] = None) -> dict:
        """Send one frame; returns {"status", "receivers"}.

        ``key`` encrypts symmetrically (key id, 32-byte key); ``seal_to``
        encrypts to a public key (key id, recipient public bytes).  Every
        frame, delivered or dropped, lands on the provider tap.
        """
        if src_nic not in self.switch.ports:
            raise ServiceError(STATE, f"link down: NIC {src_nic} not attached")
        if key is not None and seal_to is not None:
            raise ValueError("choose one encryption mode")

        payload = body
        encrypted = False
        key_id = None
        if key is not None:
            key_id, key_bytes = key
            payload = crypto.aead_encrypt(
                key_bytes, body, frame_aad(msg_type, src_nic, dst_nic), self.rng
            )
            encrypted = True
        elif seal_to is not None:
            key_id, recipient_pub = seal_to
            payload = crypto.seal(recipient_pub, body, self.rng)
            encrypted = True

        frame = Frame(src_nic=src_nic, dst_nic=dst_nic, msg_type=msg_type,
                      payload=payload, encrypted=encrypted, key_id=key_id)

        receivers: list[str] = []
        if dst_nic == BROADCAST:
            tag = self.switch.tag_of(src_nic)
            if tag is not None:
                receivers = [n for n in self.switch.nics_on(tag) if n != src_nic]
        elif self.switch.same_vlan(src_nic, dst_nic):
            receivers = [dst_nic]

        status = "delivered" if receivers else "isolation_drop"
        self.tap.record(frame, status)
        self.emit("fabric", "frame", detail={
            "src": src_nic, "dst": dst_nic, "msg_type": msg_type,
            "status": status, "encrypted": encrypted,
            "payload_sha256": crypto.sha256(payload).hex()[:16],
        })
        for nic in receivers:
            handler = self._handlers.get(nic)
            if handler is not None:
                handler(frame)
        return {"status": status, "receivers": receivers}

    def can_reach(self, node_a: str, node_b: str) -> bool:
        return self.switch.same_vlan(self.node(node_a).nic0, self.node(node_b).nic0)

    # ------------------------------------------------------------------- time

    def schedule_at(self, tick: int, owner: str, fn: Callable[[], None]):
        if tick < self.clock.tick:
            raise ServiceError(STATE, "cannot schedule in the past")
        heapq.heappush(self._queue, (tick, owner, next(self._seq), fn))

    def schedule_in(self, delta: int, owner: str, fn: Callable[[], None]):
        self.schedule_at(self.clock.tick + delta, owner, fn)

    def advance(self, ticks: int) -> list[dict]:
        """Run the clock forward; returns the trace events emitted."""
        if ticks < 0:
            raise ServiceError(RANGE, "ticks must be non-negative")
        start = len(self.trace.events)
        for _ in range(ticks):
            self.clock.tick += 1
            # actions scheduled for this tick, including ones they spawn now
            while self._queue and self._queue[0][0] <= self.clock.tick:
                _, _, _, fn = heapq.heappop(self._queue)
                fn()
        return self.trace.events[start:]

    def run_until(self, predicate: Callable[[], bool], max_ticks: int = 200) -> bool:
        for _ in range(max_ticks):
            if predicate():
                return True
            self.advance(1)
        return predicate()

    # ------------------------------------------------------------------ trace

    def emit(self, component: str, event: str, node_id: Optional[str] = None,
             network_id: Optional[str] = None, detail: Optional[dict] = None) -> dict:
        return self.trace.emit(self.clock.tick, component, event,
                               node_id=node_id, network_id=network_id, detail=detail)

    def blob(self, label: str, size: int = 2048) -> bytes:
        """Deterministic synthetic blob derived from the world seed."""
        return Random(f"{self.seed}:{label}").randbytes(size)
