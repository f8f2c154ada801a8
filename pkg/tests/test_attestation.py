"""Registrar certification, verifier whitelist checks, and revocation."""

import json
from types import SimpleNamespace

import pytest

from enclavesim import crypto
from enclavesim.attestation import (Agent, Registrar, Verifier,
                                    STATUS_PASSED, STATUS_REVOKED)
from enclavesim.bootchain import (UEFI_CHAIN, VERDICT_PASS, BootChain,
                                  expected_pcrs, install_firmware,
                                  standard_artifacts)
from enclavesim.errors import IDENTITY, POLICY, STATE, ServiceError
from enclavesim.fabric import World
from enclavesim.provisioning import ProvisioningService

TAG = 60


def stack(nodes=1, seed=5, kind=UEFI_CHAIN):
    world = World(seed=seed)
    prov = ProvisioningService(world)
    for name, blob in standard_artifacts(world).items():
        prov.register_artifact(name, blob)
    metadata = {}
    registrar = Registrar(world, metadata_lookup=metadata.get)
    chain = BootChain(world, agent_factory=lambda n: Agent(world, n))
    verifier = Verifier(world, name="verifier")
    for svc in ("provisioning", "registrar", "verifier"):
        world.svc_attach(svc, TAG)
    made = []
    for i in range(nodes):
        node = world.add_node(f"node-{i}")
        world.switch.set_tag(node.nic0, TAG)
        install_firmware(world, node, kind)
        metadata[node.node_id] = {"node_id": node.node_id,
                                  "ek": node.tpm.ek_public.hex()}
        made.append(node)
    blobs = {name: world.blob(f"fw:{name}:v1") for name in
             ("post", "pxe", "ipxe", "linuxboot_runtime", "keylime_agent")}
    return SimpleNamespace(world=world, prov=prov, registrar=registrar,
                           chain=chain, verifier=verifier, nodes=made,
                           metadata=metadata,
                           whitelist=expected_pcrs(kind, blobs))


def boot_and_enroll(st, node):
    st.chain.measured_boot(node)
    out = node.agent.enroll()
    assert out["enrolled"], out
    return node.agent


def full_member(st, node, enclave_id=None, runtime_whitelist=(),
                network_key=None, network_key_id=None, poll_interval=1):
    """Boot, enroll, register, attest, deliver payload, kexec."""
    agent = boot_and_enroll(st, node)
    payload_key = st.registrar.collect_payload_key(agent.agent_id)
    payload = {"kernel": st.world.blob("tenant:kernel"), "initrd": b"rd",
               "script": b"#!/bin/sh", "cmdline": "ro quiet"}
    if network_key is not None:
        payload["network_key"] = network_key
        payload["network_key_id"] = network_key_id
    st.verifier.register_agent(
        agent.agent_id, node.node_id, node.tpm.aik_public,
        st.whitelist, runtime_whitelist=runtime_whitelist,
        payload=payload, payload_key=payload_key, enclave_id=enclave_id)
    verdict = st.verifier.verify_boot(agent.agent_id)
    assert verdict["verdict"] == "PASS", verdict
    st.verifier.deliver_payload(agent.agent_id)
    st.chain.set_verdict(node, VERDICT_PASS)
    st.chain.kexec_handoff(node, agent.kexec_payload())
    return agent


# -------------------------------------------------------------- enrollment


def test_enroll_and_certify_happy_path():
    st = stack()
    node = st.nodes[0]
    agent = boot_and_enroll(st, node)
    assert node.tpm.aik_certified
    assert st.registrar.record(agent.agent_id)["status"] == "certified"
    # the tenant collects the bootstrap key exactly once
    key = st.registrar.collect_payload_key(agent.agent_id)
    assert key == agent.payload_key
    with pytest.raises(ServiceError) as err:
        st.registrar.collect_payload_key(agent.agent_id)
    assert err.value.code == "state"


def test_ek_mismatch_raises_spoofing_alarm():
    st = stack()
    node = st.nodes[0]
    st.metadata[node.node_id]["ek"] = "ab" * 32  # inventory says another EK
    st.chain.measured_boot(node)
    out = node.agent.enroll()
    assert not out["enrolled"]
    alarms = st.world.trace.matching(component="attestation",
                                     event="spoofing_alarm")
    assert alarms and alarms[0]["node_id"] == node.node_id
    with pytest.raises(ServiceError) as err:
        st.registrar.enroll("direct", node.node_id, node.tpm.ek_public,
                            node.tpm.aik_public)
    assert err.value.code == IDENTITY


def test_foreign_aik_cannot_be_certified():
    st = stack(nodes=2)
    victim, attacker = st.nodes
    st.chain.measured_boot(victim)
    st.chain.measured_boot(attacker)
    # the attacker enrolls its own EK with the victim's AIK: the credential
    # names the victim AIK, so the attacker TPM refuses to release the secret
    out = st.registrar.enroll("mallory", attacker.node_id,
                              attacker.tpm.ek_public, victim.tpm.aik_public)
    with pytest.raises(ServiceError) as err:
        attacker.tpm.activate_credential(bytes.fromhex(out["challenge"]))
    assert err.value.code == IDENTITY
    # and guessing the proof does not work either
    with pytest.raises(ServiceError) as err:
        st.registrar.confirm("mallory", "00" * 32)
    assert err.value.code == IDENTITY
    assert st.world.trace.matching(component="attestation",
                                   event="certification_denied")


def test_registrar_durable_state_holds_no_secrets():
    st = stack()
    node = st.nodes[0]
    agent = boot_and_enroll(st, node)
    payload_key = st.registrar.collect_payload_key(agent.agent_id)

    state = st.registrar.serialize_state()
    assert payload_key.hex() not in state
    assert node.tpm._ek.seed.hex() not in state
    assert node.tpm._aik.seed.hex() not in state
    # positive control: the public halves are exactly what it stores
    assert node.tpm.ek_public.hex() in state
    assert node.tpm.aik_public.hex() in state
    assert st.registrar._payload_keys == {}
    assert st.registrar._pending == {}


# ------------------------------------------------------------ boot verdicts


def test_verify_boot_pass_then_tampered_fail():
    st = stack()
    node = st.nodes[0]
    agent = boot_and_enroll(st, node)
    st.verifier.register_agent(agent.agent_id, node.node_id,
                               node.tpm.aik_public, st.whitelist)
    assert st.verifier.verify_boot(agent.agent_id)["verdict"] == "PASS"
    assert st.verifier.record(agent.agent_id).status == STATUS_PASSED

    # tamper one downloaded stage and reboot: same agent, same whitelist
    st2 = stack(seed=6)
    node2 = st2.nodes[0]
    blob = bytearray(st2.prov.artifacts["linuxboot_runtime"])
    blob[0] ^= 0x01
    st2.prov.register_artifact("linuxboot_runtime", bytes(blob))
    agent2 = boot_and_enroll(st2, node2)
    st2.verifier.register_agent(agent2.agent_id, node2.node_id,
                                node2.tpm.aik_public, st2.whitelist)
    out = st2.verifier.verify_boot(agent2.agent_id)
    assert out == {"verdict": "FAIL", "cause": "mismatch"}
    verdicts = st2.world.trace.matching(component="attestation",
                                        event="verdict")
    assert verdicts[-1]["detail"]["verdict"] == "FAIL"


def test_verify_boot_timeout_when_agent_unreachable():
    st = stack()
    node = st.nodes[0]
    agent = boot_and_enroll(st, node)
    st.verifier.register_agent(agent.agent_id, node.node_id,
                               node.tpm.aik_public, st.whitelist)
    st.world.switch.set_tag(node.nic0, None)  # moved off the shared network
    out = st.verifier.verify_boot(agent.agent_id)
    assert out == {"verdict": "FAIL", "cause": "timeout"}


def test_replayed_quote_is_rejected():
    st = stack()
    node = st.nodes[0]
    agent = boot_and_enroll(st, node)
    st.verifier.register_agent(agent.agent_id, node.node_id,
                               node.tpm.aik_public, st.whitelist)
    assert st.verifier.verify_boot(agent.agent_id)["verdict"] == "PASS"

    # capture the accepted response off the wire and replay it verbatim
    captured = [e["plaintext"] for e in st.world.tap.read()
                if e["msg_type"] == "quote_response"][-1]

    def replay_responder(frame):
        st.world.send_frame(node.nic0, frame.src_nic, "quote_response",
                            captured)

    node.message_handler.set("quote_request", replay_responder)
    st.verifier.record(agent.agent_id).status = STATUS_PASSED
    out = st.verifier.verify_boot(agent.agent_id)
    assert out == {"verdict": "FAIL", "cause": "replay"}


# ------------------------------------------------------------------ payload


def test_payload_released_only_after_pass_and_only_as_ciphertext():
    st = stack()
    node = st.nodes[0]
    agent = boot_and_enroll(st, node)
    payload_key = st.registrar.collect_payload_key(agent.agent_id)
    disk_key = crypto.derive_key(b"disk", "payload")
    st.verifier.register_agent(
        agent.agent_id, node.node_id, node.tpm.aik_public, st.whitelist,
        payload={"kernel": b"vmlinuz", "initrd": b"rd", "script": b"s",
                 "cmdline": "ro", "disk_key": disk_key},
        payload_key=payload_key)

    with pytest.raises(ServiceError) as err:  # no verdict yet
        st.verifier.deliver_payload(agent.agent_id)
    assert err.value.code == POLICY

    assert st.verifier.verify_boot(agent.agent_id)["verdict"] == "PASS"
    st.verifier.deliver_payload(agent.agent_id)
    assert agent.staged_payload["kernel"] == b"vmlinuz"
    assert agent.staged_payload["disk_key"] == disk_key

    deliveries = [e for e in st.world.tap.read()
                  if e["msg_type"] == "payload_deliver"]
    assert deliveries and all(e["encrypted"] for e in deliveries)
    assert all(e["plaintext"] is None for e in deliveries)
    # a keyholder (the tenant auditing its own traffic) recovers it
    keyring = {f"payload:{agent.agent_id}": payload_key}
    audited = [e for e in st.world.tap.read(keyring)
               if e["msg_type"] == "payload_deliver"]
    assert audited[0]["plaintext"] is not None
    assert disk_key.hex().encode() in audited[0]["plaintext"]


# ----------------------------------------------------- continuous attestation


def allowed_entries(world):
    progs = [("/bin/init", world.blob("bin:init")),
             ("/bin/sh", world.blob("bin:sh"))]
    return progs, {(path, crypto.sha256(blob).hex()) for path, blob in progs}


def test_continuous_attestation_passes_then_catches_unlisted_binary():
    st = stack()
    node = st.nodes[0]
    progs, whitelist = allowed_entries(st.world)
    agent = full_member(st, node, runtime_whitelist=whitelist)

    for path, blob in progs:
        node.runtime.execute(path, blob)
    out = st.verifier.continuous_attest_tick(agent.agent_id)
    assert out == {"verdict": "PASS", "cause": None}

    node.runtime.execute("/tmp/cryptominer", st.world.blob("evil:miner"))
    out = st.verifier.continuous_attest_tick(agent.agent_id)
    assert out["verdict"] == "FAIL" and out["cause"] == "unlisted_entry"
    assert st.verifier.record(agent.agent_id).status == STATUS_REVOKED
    assert st.world.trace.matching(component="attestation", event="revocation")


def test_forged_measurement_list_fails_aggregate_check():
    st = stack()
    node = st.nodes[0]
    progs, whitelist = allowed_entries(st.world)
    agent = full_member(st, node, runtime_whitelist=whitelist)
    for path, blob in progs:
        node.runtime.execute(path, blob)
    node.runtime.execute("/tmp/evil", st.world.blob("evil:bin"))

    # malicious agent: real TPM quote, but the list omits the evil entry;
    # the quoted PCR 10 cannot be un-extended, so the fold disagrees
    def forging_responder(frame):
        body = json.loads(frame.payload.decode())
        quote = node.tpm.quote(bytes.fromhex(body["nonce"]),
                               body["selection"])
        reply = {"agent_id": agent.agent_id, "quote": quote.to_wire(),
                 "ima": [e for e in node.runtime.ima_entries
                         if e["path"] != "/tmp/evil"]}
        st.world.send_frame(node.nic0, frame.src_nic, "quote_response",
                            json.dumps(reply, sort_keys=True).encode())

    node.message_handler.set("quote_request", forging_responder)
    out = st.verifier.continuous_attest_tick(agent.agent_id)
    assert out["verdict"] == "FAIL"
    assert out["cause"] == "list_pcr_mismatch"
    assert st.verifier.record(agent.agent_id).status == STATUS_REVOKED


def test_malicious_reboot_is_caught_by_runtime_pcr_whitelist():
    st = stack()
    node = st.nodes[0]
    agent = full_member(st, node)
    assert st.verifier.continuous_attest_tick(
        agent.agent_id)["verdict"] == "PASS"
    # reboot back into firmware: PCR 4 loses the tenant-kernel extend and
    # the node stops answering as the handed-off runtime
    st.chain.measured_boot(node)
    st.verifier.record(agent.agent_id).silent_polls = 0
    causes = []
    for _ in range(4):
        rec = st.verifier.records.get(agent.agent_id)
        if rec is None or rec.status == STATUS_REVOKED:
            break
        causes.append(st.verifier.continuous_attest_tick(
            agent.agent_id)["cause"])
    assert st.verifier.record(agent.agent_id).status == STATUS_REVOKED
    assert st.verifier.record(agent.agent_id).last_cause in (
        "list_pcr_mismatch", "unreachable")


def test_unreachable_agent_revoked_after_grace_polls():
    st = stack()
    node = st.nodes[0]
    agent = full_member(st, node, enclave_id=None)
    st.verifier.start_polling(agent.agent_id)
    st.world.advance(2)  # healthy polls
    assert st.verifier.record(agent.agent_id).status == STATUS_PASSED

    detach_tick = st.world.clock.tick
    st.world.switch.set_tag(node.nic0, None)
    st.world.advance(5)
    rec = st.verifier.record(agent.agent_id)
    assert rec.status == STATUS_REVOKED and rec.last_cause == "unreachable"
    revs = st.world.trace.matching(component="attestation", event="revocation")
    assert revs[-1]["tick"] - detach_tick == 3  # exactly the grace window


def test_revocation_rekeys_survivors_and_bans_the_revoked_node():
    st = stack(nodes=4)
    group = st.verifier.create_group("e1")
    progs, whitelist = allowed_entries(st.world)
    agents = [full_member(st, node, enclave_id="e1",
                          runtime_whitelist=whitelist,
                          network_key=group["key"],
                          network_key_id=group["key_id"])
              for node in st.nodes]
    for agent in agents:
        st.verifier.start_polling(agent.agent_id)
    st.world.advance(2)

    violation_tick = st.world.clock.tick
    st.nodes[2].runtime.execute("/tmp/evil", st.world.blob("evil:bin"))
    st.world.advance(4)

    revs = st.world.trace.matching(component="attestation", event="revocation")
    assert revs and revs[0]["detail"]["agent_id"] == "node-2"
    assert revs[0]["tick"] - violation_tick <= 1  # detected within one tick

    report = st.verifier.record("node-2").revocation_report
    assert sorted(report["peers"]) == ["node-0", "node-1", "node-3"]
    assert all(tick - violation_tick <= 3 for tick in report["peers"].values())
    assert report["new_key_id"] == "enclave:e1:v2"

    # revoked node still holds only v1; its frames no longer authenticate
    revoked, survivor = st.nodes[2], st.nodes[0]
    assert "enclave:e1:v1" in revoked.runtime.network_keys
    assert "enclave:e1:v1" not in survivor.runtime.network_keys
    before = list(survivor.runtime.app_received)
    revoked.runtime.app_send(survivor.nic0, b"let me back in")
    assert survivor.runtime.app_received == before

    # survivors keep talking under v2
    st.nodes[1].runtime.app_send(survivor.nic0, b"still here")
    assert survivor.runtime.app_received[-1] == b"still here"

    # revoking again is a no-op returning the same report
    assert st.verifier.revoke("node-2") is report


def test_continuous_attestation_requires_good_standing():
    st = stack()
    node = st.nodes[0]
    agent = boot_and_enroll(st, node)
    st.verifier.register_agent(agent.agent_id, node.node_id,
                               node.tpm.aik_public, st.whitelist)
    with pytest.raises(ServiceError) as err:
        st.verifier.continuous_attest_tick(agent.agent_id)
    assert err.value.code == STATE
    with pytest.raises(ServiceError) as err:
        st.verifier.start_polling(agent.agent_id)
    assert err.value.code == STATE
