"""Remote attestation: registrar, verifier, and the on-node agent.

Three parties, mirroring a production remote-attestation deployment:

* **Registrar** — certifies that an AIK lives in the same TPM as a known
  EK, via credential activation.  Its durable state is public keys and
  ids only; the activation secret and the payload key derived from it
  exist transiently and are handed to the tenant once, then dropped.
* **Verifier** — holds per-agent whitelists, drives boot verification and
  periodic runtime attestation over quote frames, releases the encrypted
  payload bundle after the first PASS, and on any violation revokes the
  node by rekeying every surviving enclave peer.
* **Agent** — runs on the node (spawned at the agent boot stage), answers
  quote requests, performs enrollment, and stages the payload bundle for
  the kexec handoff.

The same classes serve both deployment modes: the provider runs one
registrar/verifier pair for attested-tier tenants, and full-tier tenants
run their own verifier instance with a tenant-built runtime whitelist.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import crypto
from .errors import (CONFLICT, IDENTITY, NOT_FOUND, POLICY, STATE,
                     ServiceError)
from .fabric import EmulatedNode, Frame, World, frame_aad
from .bootchain import FrameRouter
from .tpm import Quote, make_credential, verify_quote

logger = logging.getLogger(__name__)

BOOT_SELECTION = (0, 4)
RUNTIME_SELECTION = (0, 4, 10)

STATUS_PENDING = "pending"
STATUS_PASSED = "passed"
STATUS_FAILED = "failed"
STATUS_REVOKED = "revoked"

DEFAULT_GRACE = 3  # silent polls tolerated before silence is a violation


def _whitelist_composite(values: dict[int, bytes], selection) -> bytes:
    return crypto.sha256(b"".join(values[i] for i in sorted(selection)))


# ---------------------------------------------------------------- registrar


class Registrar:
    """EK→AIK certification service.  Durable state: public keys and ids."""

    def __init__(self, world: World, metadata_lookup: Optional[Callable] = None,
                 name: str = "registrar"):
        self.world = world
        self.name = name
        # metadata_lookup(node_id) -> {"ek_public": hex, ...} from the
        # isolation service's published node inventory
        self.metadata_lookup = metadata_lookup
        self.records: dict[str, dict] = {}  # durable: ids + public keys
        self._pending: dict[str, tuple[bytes, bytes]] = {}  # transient secrets
        self._payload_keys: dict[str, bytes] = {}  # transient, one-shot
        world.add_service_endpoint(name, self.handle_frame)

    def enroll(self, agent_id: str, node_id: str, ek_public: bytes,
               aik_public: bytes) -> dict:
        if self.metadata_lookup is not None:
            meta = self.metadata_lookup(node_id)
            if meta is None or meta.get("ek") != ek_public.hex():
                self.world.emit("attestation", "spoofing_alarm", node_id=node_id,
                                detail={"agent_id": agent_id,
                                        "claimed_ek": ek_public.hex()[:16]})
                raise ServiceError(IDENTITY,
                                   "EK does not match the node inventory")
        secret = self.world.rng.randbytes(32)
        challenge = make_credential(ek_public, aik_public, secret, self.world.rng)
        self._pending[agent_id] = (secret, aik_public)
        self.records[agent_id] = {
            "agent_id": agent_id, "node_id": node_id,
            "ek_public": ek_public.hex(), "aik_public": aik_public.hex(),
            "status": "enrolled",
        }
        self.world.emit("attestation", "enrolled", node_id=node_id,
                        detail={"agent_id": agent_id})
        return {"challenge": challenge.hex()}

    def confirm(self, agent_id: str, proof: str) -> dict:
        pending = self._pending.get(agent_id)
        if pending is None:
            raise ServiceError(STATE, f"no enrollment pending for {agent_id}")
        secret, aik_public = pending
        expected = crypto.sha256(secret + aik_public).hex()
        if proof != expected:
            self.world.emit("attestation", "certification_denied",
                            detail={"agent_id": agent_id})
            raise ServiceError(IDENTITY, "credential activation proof mismatch")
        del self._pending[agent_id]
        # the payload key is derived for the tenant to collect, then dropped;
        # the secret itself is gone as of this line
        self._payload_keys[agent_id] = crypto.derive_key(secret, "payload")
        self.records[agent_id]["status"] = "certified"
        self.world.emit("attestation", "aik_certified",
                        detail={"agent_id": agent_id})
        return {"certified": True}

    def collect_payload_key(self, agent_id: str) -> bytes:
        """One-shot tenant pickup of the bootstrap payload key."""
        key = self._payload_keys.pop(agent_id, None)
        if key is None:
            raise ServiceError(STATE, f"no payload key held for {agent_id}")
        return key

    def record(self, agent_id: str) -> dict:
        rec = self.records.get(agent_id)
        if rec is None:
            raise ServiceError(NOT_FOUND, f"unknown agent: {agent_id}")
        return dict(rec)

    def serialize_state(self) -> str:
        """The registrar's durable state, exactly as it would hit disk."""
        return json.dumps({"records": self.records}, sort_keys=True,
                          separators=(",", ":"))

    # frame protocol: enrollment happens over the airlock network, in the
    # clear — everything on the wire is either public or sealed to the EK
    def handle_frame(self, frame: Frame):
        try:
            body = json.loads(frame.payload.decode())
            if frame.msg_type == "enroll_request":
                out = self.enroll(body["agent_id"], body["node_id"],
                                  bytes.fromhex(body["ek_public"]),
                                  bytes.fromhex(body["aik_public"]))
                self._reply(frame, "enroll_challenge", out)
            elif frame.msg_type == "confirm_request":
                out = self.confirm(body["agent_id"], body["proof"])
                self._reply(frame, "confirm_result", out)
        except ServiceError as err:
            self._reply(frame, "error", err.to_wire())
        except (KeyError, ValueError, json.JSONDecodeError):
            self._reply(frame, "error", {"code": "format",
                                         "message": "malformed request"})

    def _reply(self, frame: Frame, msg_type: str, body: dict):
        src = self.world.service_nic_for(self.name, frame.src_nic)
        if src is not None:
            self.world.send_frame(src, frame.src_nic, msg_type,
                                  json.dumps(body, sort_keys=True).encode())


# ------------------------------------------------------------------ verifier


@dataclass
class VerifierRecord:
    agent_id: str
    node_id: str
    aik_public: bytes
    boot_whitelist: dict  # pcr index -> expected register value (bytes)
    runtime_whitelist: set = field(default_factory=set)  # {(path, hex digest)}
    poll_interval: int = 1
    status: str = STATUS_PENDING
    payload: Optional[bytes] = None  # AEAD ciphertext of the bundle
    payload_key: Optional[bytes] = None
    enclave_id: Optional[str] = None
    runtime_pcr4: Optional[bytes] = None  # PCR 4 after the kexec extend
    grace: int = DEFAULT_GRACE
    silent_polls: int = 0
    last_cause: Optional[str] = None
    polling: bool = False
    revocation_report: Optional[dict] = None


class Verifier:
    """Whitelist checks, continuous attestation, payload release, revocation."""

    def __init__(self, world: World, name: str = "verifier",
                 owner: str = "provider",
                 on_revoked: Optional[Callable[[str, str], None]] = None):
        self.world = world
        self.name = name
        self.owner = owner
        self.on_revoked = on_revoked  # callback(agent_id, node_id)
        self.records: dict[str, VerifierRecord] = {}
        self.groups: dict[str, dict] = {}  # enclave_id -> group key state
        self._outstanding: dict[str, str] = {}  # nonce hex -> agent_id
        self._seen_nonces: set[str] = set()
        self._replies: dict[str, dict] = {}  # agent_id -> stashed response
        world.add_service_endpoint(name, self.handle_frame)

    # ------------------------------------------------------------ group keys

    def create_group(self, enclave_id: str) -> dict:
        if enclave_id in self.groups:
            raise ServiceError(CONFLICT, f"group exists: {enclave_id}")
        group = {"enclave_id": enclave_id, "version": 1,
                 "key": self.world.rng.randbytes(32)}
        self.groups[enclave_id] = group
        return {"key_id": self.group_key_id(enclave_id),
                "key": group["key"]}

    def group_key_id(self, enclave_id: str) -> str:
        group = self.groups[enclave_id]
        return f"enclave:{enclave_id}:v{group['version']}"

    def group_key(self, enclave_id: str) -> bytes:
        return self.groups[enclave_id]["key"]

    # --------------------------------------------------------------- records

    def register_agent(self, agent_id: str, node_id: str, aik_public: bytes,
                       boot_whitelist: dict, runtime_whitelist=None,
                       payload: Optional[dict] = None,
                       payload_key: Optional[bytes] = None,
                       poll_interval: int = 1,
                       enclave_id: Optional[str] = None,
                       grace: int = DEFAULT_GRACE) -> dict:
        if agent_id in self.records:
            raise ServiceError(CONFLICT, f"agent already registered: {agent_id}")
        record = VerifierRecord(
            agent_id=agent_id, node_id=node_id, aik_public=aik_public,
            boot_whitelist=dict(boot_whitelist),
            runtime_whitelist=set(tuple(e) for e in (runtime_whitelist or ())),
            poll_interval=poll_interval, payload_key=payload_key,
            enclave_id=enclave_id, grace=grace)
        if payload is not None:
            if payload_key is None:
                raise ServiceError(STATE, "payload requires a payload key")
            record.payload = self._encrypt_payload(agent_id, payload, payload_key)
            kernel = payload.get("kernel", b"")
            # after kexec, PCR 4 carries one more extend: the tenant kernel
            record.runtime_pcr4 = crypto.sha256(
                boot_whitelist[4] + crypto.sha256(kernel))
        self.records[agent_id] = record
        self.world.emit("attestation", "agent_registered", node_id=node_id,
                        detail={"agent_id": agent_id, "verifier": self.name})
        return {"agent_id": agent_id, "status": record.status}

    def record(self, agent_id: str) -> VerifierRecord:
        rec = self.records.get(agent_id)
        if rec is None:
            raise ServiceError(NOT_FOUND, f"unknown agent: {agent_id}")
        return rec

    def status(self, agent_id: str) -> dict:
        rec = self.record(agent_id)
        return {"agent_id": agent_id, "status": rec.status,
                "cause": rec.last_cause, "poll_interval": rec.poll_interval}

    def retire(self, agent_id: str) -> dict:
        """Stop polling and drop the record (release-path ordering)."""
        rec = self.record(agent_id)
        rec.polling = False
        del self.records[agent_id]
        self.world.emit("attestation", "agent_retired",
                        node_id=rec.node_id, detail={"agent_id": agent_id})
        return {"retired": agent_id}

    def _encrypt_payload(self, agent_id: str, payload: dict,
                         key: bytes) -> bytes:
        wire = {}
        for k, v in payload.items():
            wire[k] = v.hex() if isinstance(v, bytes) else v
        plaintext = json.dumps(wire, sort_keys=True).encode()
        return crypto.aead_encrypt(key, plaintext,
                                   f"payload:{agent_id}".encode(),
                                   self.world.rng)

    # ----------------------------------------------------------------- polls

    def _fresh_nonce(self, agent_id: str) -> bytes:
        nonce = self.world.rng.randbytes(16)
        self._outstanding[nonce.hex()] = agent_id
        return nonce

    def _ask_for_quote(self, rec: VerifierRecord, nonce: bytes, selection,
                       include_ima: bool) -> Optional[dict]:
        node = self.world.nodes.get(rec.node_id)
        if node is None:
            return None
        svc_nic = self.world.service_nic_for(self.name, node.nic0)
        if svc_nic is None:
            return None  # unreachable: not sharing any network with us
        self._replies.pop(rec.agent_id, None)
        self.world.send_frame(svc_nic, node.nic0, "quote_request", json.dumps({
            "agent_id": rec.agent_id, "nonce": nonce.hex(),
            "selection": list(selection), "include_ima": include_ima,
        }).encode())
        return self._replies.pop(rec.agent_id, None)

    def _check_quote(self, rec: VerifierRecord, reply: Optional[dict],
                     nonce: bytes, selection, expected_composite: bytes):
        """Common quote validation; returns a failure cause or None."""
        if reply is None:
            return "timeout"
        try:
            quote = Quote.from_wire(reply["quote"])
        except (ServiceError, KeyError, TypeError):
            return "malformed"
        nonce_hex = quote.nonce.hex()
        if nonce_hex in self._seen_nonces:
            return "replay"
        if quote.nonce != nonce or nonce_hex not in self._outstanding:
            return "replay"
        self._seen_nonces.add(nonce_hex)
        del self._outstanding[nonce_hex]
        if quote.aik_public != rec.aik_public:
            return "wrong_aik"
        if tuple(quote.selection) != tuple(sorted(selection)):
            return "wrong_selection"
        if not verify_quote(quote, nonce, expected_composite):
            return "mismatch"
        return None

    def verify_boot(self, agent_id: str) -> dict:
        """One boot-attestation round; drives the airlock verdict."""
        rec = self.record(agent_id)
        nonce = self._fresh_nonce(agent_id)
        expected = _whitelist_composite(rec.boot_whitelist, BOOT_SELECTION)
        reply = self._ask_for_quote(rec, nonce, BOOT_SELECTION, include_ima=False)
        cause = self._check_quote(rec, reply, nonce, BOOT_SELECTION, expected)
        verdict = "PASS" if cause is None else "FAIL"
        rec.status = STATUS_PASSED if cause is None else STATUS_FAILED
        rec.last_cause = cause
        self.world.emit("attestation", "security_check", node_id=rec.node_id,
                        detail={"check": "boot_attestation", "agent_id": agent_id})
        self.world.emit("attestation", "verdict", node_id=rec.node_id, detail={
            "agent_id": agent_id, "kind": "boot", "verdict": verdict,
            "cause": cause})
        return {"verdict": verdict, "cause": cause}

    def deliver_payload(self, agent_id: str) -> dict:
        rec = self.record(agent_id)
        if rec.status != STATUS_PASSED:
            raise ServiceError(POLICY,
                               "payload released only after a PASS verdict")
        if rec.payload is None:
            raise ServiceError(STATE, "no payload registered")
        node = self.world.nodes.get(rec.node_id)
        svc_nic = self.world.service_nic_for(self.name, node.nic0) \
            if node is not None else None
        if svc_nic is None:
            raise ServiceError(STATE, "agent unreachable")
        # at rest the bundle is sealed under the bootstrap key; on the wire
        # it travels under the same key as a frame-layer envelope, so the
        # provider tap sees ciphertext and a keyholder tap can audit it
        plaintext = crypto.aead_decrypt(rec.payload_key, rec.payload,
                                        f"payload:{rec.agent_id}".encode())
        self.world.send_frame(svc_nic, node.nic0, "payload_deliver", plaintext,
                              key=(f"payload:{rec.agent_id}", rec.payload_key))
        self.world.emit("attestation", "payload_delivered", node_id=rec.node_id,
                        detail={"agent_id": agent_id})
        return {"delivered": True}

    # -------------------------------------------------- continuous attestation

    def start_polling(self, agent_id: str):
        rec = self.record(agent_id)
        if rec.status != STATUS_PASSED:
            raise ServiceError(STATE, "continuous attestation needs a PASS")
        if rec.polling:
            return
        rec.polling = True
        self._schedule_poll(agent_id)

    def _schedule_poll(self, agent_id: str):
        rec = self.records.get(agent_id)
        if rec is None or not rec.polling:
            return
        self.world.schedule_in(rec.poll_interval, f"{self.name}:{agent_id}",
                               lambda: self._poll(agent_id))

    def _poll(self, agent_id: str):
        rec = self.records.get(agent_id)
        if rec is None or not rec.polling or rec.status != STATUS_PASSED:
            return
        self.continuous_attest_tick(agent_id)
        self._schedule_poll(agent_id)

    def continuous_attest_tick(self, agent_id: str) -> dict:
        """One runtime-attestation round: quote over PCR 10 + IMA list."""
        rec = self.record(agent_id)
        if rec.status != STATUS_PASSED:
            raise ServiceError(STATE, "agent is not in good standing")
        nonce = self._fresh_nonce(agent_id)
        reply = self._ask_for_quote(rec, nonce, RUNTIME_SELECTION,
                                    include_ima=True)
        self.world.emit("attestation", "security_check", node_id=rec.node_id,
                        detail={"check": "runtime_attestation",
                                "agent_id": agent_id})
        if reply is None:
            rec.silent_polls += 1
            if rec.silent_polls >= rec.grace:
                return self._violation(rec, "unreachable")
            return {"verdict": "PASS", "cause": "silent",
                    "silent_polls": rec.silent_polls}
        rec.silent_polls = 0

        entries = reply.get("ima", [])
        # recompute the aggregate the kernel would have folded into PCR 10
        aggregate = bytes(32)
        for entry in entries:
            try:
                aggregate = crypto.sha256(
                    aggregate + bytes.fromhex(entry["sha256"]))
            except (KeyError, TypeError, ValueError):
                return self._violation(rec, "malformed_list")
        expected_values = {
            0: rec.boot_whitelist[0],
            4: rec.runtime_pcr4 if rec.runtime_pcr4 is not None
               else rec.boot_whitelist[4],
            10: aggregate,
        }
        expected = _whitelist_composite(expected_values, RUNTIME_SELECTION)
        cause = self._check_quote(rec, reply, nonce, RUNTIME_SELECTION, expected)
        if cause is not None:
            # the quoted PCR 10 disagreeing with the list's own aggregate is
            # the forged-list case; any other mismatch is equally fatal
            return self._violation(rec, f"list_pcr_{cause}"
                                   if cause == "mismatch" else cause)
        for entry in entries:
            pair = (entry.get("path"), entry.get("sha256"))
            if pair not in rec.runtime_whitelist:
                return self._violation(rec, "unlisted_entry", path=pair[0])
        self.world.emit("attestation", "verdict", node_id=rec.node_id, detail={
            "agent_id": agent_id, "kind": "runtime", "verdict": "PASS",
            "cause": None})
        return {"verdict": "PASS", "cause": None}

    def _violation(self, rec: VerifierRecord, cause: str, **detail) -> dict:
        rec.status = STATUS_REVOKED
        rec.last_cause = cause
        rec.polling = False
        self.world.emit("attestation", "verdict", node_id=rec.node_id, detail={
            "agent_id": rec.agent_id, "kind": "runtime", "verdict": "FAIL",
            "cause": cause, **detail})
        self.world.emit("attestation", "revocation", node_id=rec.node_id,
                        detail={"agent_id": rec.agent_id, "cause": cause})
        self.revoke(rec.agent_id)
        return {"verdict": "FAIL", "cause": cause}

    # ------------------------------------------------------------- revocation

    def rotate_group(self, enclave_id: str,
                     leaving: Optional[str] = None) -> Optional[str]:
        """Mint a new group key version and fan it out to members.

        ``leaving`` names an agent excluded from the new version (revoked
        or released); survivors install the new key and retire the old one
        on receipt, one tick after the rotation is requested.
        """
        if enclave_id not in self.groups:
            return None
        group = self.groups[enclave_id]
        old_key_id = self.group_key_id(enclave_id)
        group["version"] += 1
        group["key"] = self.world.rng.randbytes(32)
        new_key_id = self.group_key_id(enclave_id)
        peers = sorted(
            r.agent_id for r in self.records.values()
            if r.enclave_id == enclave_id and r.agent_id != leaving
            and r.status == STATUS_PASSED)
        self.world.schedule_in(1, self.name, lambda: self._send_rekeys(
            enclave_id, leaving, peers, old_key_id))
        self.world.emit("attestation", "group_rekey", detail={
            "enclave_id": enclave_id, "key_id": new_key_id,
            "excluded": leaving, "peers": peers})
        return new_key_id

    def revoke(self, agent_id: str) -> dict:
        """Ban a node: rekey every surviving peer, report deletion ticks."""
        rec = self.record(agent_id)
        if rec.revocation_report is not None:
            return rec.revocation_report  # idempotent
        rec.status = STATUS_REVOKED
        rec.polling = False
        report = {"agent_id": agent_id, "enclave_id": rec.enclave_id,
                  "peers": {}, "new_key_id": None}
        rec.revocation_report = report
        report["new_key_id"] = self.rotate_group(rec.enclave_id,
                                                 leaving=agent_id) \
            if rec.enclave_id is not None else None
        if self.on_revoked is not None:
            self.on_revoked(agent_id, rec.node_id)
        return report

    def _send_rekeys(self, enclave_id: str, revoked_agent: str,
                     peers: list[str], old_key_id: str):
        group = self.groups[enclave_id]
        new_key_id = self.group_key_id(enclave_id)
        for peer_id in peers:
            peer = self.records.get(peer_id)
            if peer is None or peer.payload_key is None:
                continue
            node = self.world.nodes.get(peer.node_id)
            if node is None:
                continue
            svc_nic = self.world.service_nic_for(self.name, node.nic0)
            if svc_nic is None:
                continue
            body = json.dumps({
                "agent_id": peer_id, "revoked": revoked_agent,
                "key_id": new_key_id, "key": group["key"].hex(),
                "retire": [old_key_id],
            }, sort_keys=True).encode()
            self.world.send_frame(svc_nic, node.nic0, "rekey", body,
                                  key=(f"payload:{peer_id}", peer.payload_key))

    # ---------------------------------------------------------------- frames

    def handle_frame(self, frame: Frame):
        try:
            body = json.loads(frame.payload.decode())
        except (UnicodeDecodeError, json.JSONDecodeError):
            return
        if frame.msg_type == "quote_response":
            agent_id = body.get("agent_id")
            if agent_id:
                self._replies[agent_id] = body
        elif frame.msg_type == "rekey_ack":
            rec = self.records.get(body.get("agent_id", ""))
            for report_rec in self.records.values():
                report = report_rec.revocation_report
                if report and report.get("new_key_id") == body.get("key_id"):
                    report["peers"][body["agent_id"]] = self.world.clock.tick
                    self.world.emit("attestation", "rekey_complete",
                                    node_id=rec.node_id if rec else None,
                                    detail={"agent_id": body["agent_id"],
                                            "key_id": body["key_id"]})


# --------------------------------------------------------------------- agent


class Agent:
    """On-node attestation agent: enrollment, quotes, payload staging.

    Created by the boot chain at the agent stage; survives the kexec (it
    keeps running inside the tenant OS) but not a power cycle.
    """

    # firmware staging offset for delivered key material (zeroized at kexec)
    STAGING_OFFSET = 4096

    def __init__(self, world: World, node: EmulatedNode,
                 registrar_service: str = "registrar",
                 agent_id: Optional[str] = None):
        self.world = world
        self.node = node
        self.registrar_service = registrar_service
        self.agent_id = agent_id or node.node_id
        self.payload_key: Optional[bytes] = None
        self.staged_payload: Optional[dict] = None
        self.enrolled = False
        router = node.message_handler
        if isinstance(router, FrameRouter):
            router.set("quote_request", self._on_quote_request)
            router.set("payload_deliver", self._on_payload_deliver)
            router.set("rekey", self._on_rekey)

    # ------------------------------------------------------------ enrollment

    def _request(self, service: str, msg_type: str, body: dict,
                 want: str) -> Optional[dict]:
        svc_nic = self.world.service_nic_for(service, self.node.nic0)
        if svc_nic is None:
            return None
        before = len(self.node.inbox)
        self.world.send_frame(self.node.nic0, svc_nic, msg_type,
                              json.dumps(body, sort_keys=True).encode())
        for frame in self.node.inbox[before:]:
            if frame.msg_type == want:
                return json.loads(frame.payload.decode())
        return None

    def enroll(self) -> dict:
        """Run the enroll → activate → confirm handshake over the fabric."""
        tpm = self.node.tpm
        challenge = self._request(
            self.registrar_service, "enroll_request",
            {"agent_id": self.agent_id, "node_id": self.node.node_id,
             "ek_public": tpm.ek_public.hex(),
             "aik_public": tpm.aik_public.hex()},
            "enroll_challenge")
        if challenge is None:
            return {"enrolled": False, "cause": "registrar_unreachable"}
        secret = tpm.activate_credential(bytes.fromhex(challenge["challenge"]))
        proof = crypto.sha256(secret + tpm.aik_public).hex()
        result = self._request(
            self.registrar_service, "confirm_request",
            {"agent_id": self.agent_id, "proof": proof}, "confirm_result")
        if result is None or not result.get("certified"):
            return {"enrolled": False, "cause": "denied"}
        tpm.aik_certified = True
        self.payload_key = crypto.derive_key(secret, "payload")
        self.enrolled = True
        return {"enrolled": True}

    # ---------------------------------------------------------------- quotes

    def _ima_entries(self) -> list[dict]:
        runtime = self.node.runtime
        return list(runtime.ima_entries) if runtime is not None else []

    def _on_quote_request(self, frame: Frame):
        body = json.loads(frame.payload.decode())
        try:
            quote = self.node.tpm.quote(bytes.fromhex(body["nonce"]),
                                        body["selection"])
        except ServiceError:
            return  # uncertified AIK refuses to quote; verifier times out
        reply = {"agent_id": self.agent_id, "quote": quote.to_wire()}
        if body.get("include_ima"):
            reply["ima"] = self._ima_entries()
        self.world.send_frame(self.node.nic0, frame.src_nic, "quote_response",
                              json.dumps(reply, sort_keys=True).encode())

    # --------------------------------------------------------------- payload

    def _on_payload_deliver(self, frame: Frame):
        if self.payload_key is None or not frame.encrypted:
            return
        try:
            plaintext = crypto.aead_decrypt(
                self.payload_key, frame.payload,
                frame_aad(frame.msg_type, frame.src_nic, frame.dst_nic))
        except ValueError:
            self.world.emit("attestation", "payload_reject",
                            node_id=self.node.node_id,
                            detail={"agent_id": self.agent_id})
            return
        wire = json.loads(plaintext.decode())
        payload = {}
        for k, v in wire.items():
            payload[k] = bytes.fromhex(v) if k in (
                "kernel", "initrd", "script", "disk_key", "network_key") else v
        self.staged_payload = payload
        # key material is staged in the firmware region while the agent has
        # the machine; the kexec zeroizes it on the way out
        staged = b"".join(payload.get(k) or b"" for k in ("disk_key",
                                                          "network_key"))
        if staged:
            self.node.write_memory(self.STAGING_OFFSET, staged)
        self.world.emit("attestation", "payload_staged",
                        node_id=self.node.node_id,
                        detail={"agent_id": self.agent_id})

    def kexec_payload(self) -> dict:
        """Shape the staged bundle for the boot chain's kexec handoff."""
        if self.staged_payload is None:
            raise ServiceError(STATE, "no payload staged")
        p = self.staged_payload
        keys = {}
        for name in ("disk_key", "network_key", "network_key_id", "session_id"):
            if p.get(name) is not None:
                keys[name] = p[name]
        return {"kernel": p.get("kernel", b""), "initrd": p.get("initrd", b""),
                "cmdline": p.get("cmdline", ""), "keys": keys}

    # ----------------------------------------------------------------- rekey

    def _on_rekey(self, frame: Frame):
        if self.payload_key is None or not frame.encrypted:
            return
        try:
            plaintext = crypto.aead_decrypt(
                self.payload_key, frame.payload,
                frame_aad(frame.msg_type, frame.src_nic, frame.dst_nic))
        except ValueError:
            return
        body = json.loads(plaintext.decode())
        runtime = self.node.runtime
        if runtime is None:
            return
        runtime.network_keys[body["key_id"]] = bytes.fromhex(body["key"])
        runtime.current_key_id = body["key_id"]
        for old in body.get("retire", []):
            runtime.network_keys.pop(old, None)  # old key is gone for good
        self.world.emit("attestation", "rekeyed", node_id=self.node.node_id,
                        detail={"agent_id": self.agent_id,
                                "key_id": body["key_id"],
                                "revoked": body.get("revoked")})
        self.world.send_frame(self.node.nic0, frame.src_nic, "rekey_ack",
                              json.dumps({"agent_id": self.agent_id,
                                          "key_id": body["key_id"]},
                                         sort_keys=True).encode())
