"""HTTP facade: fixed paths, JSON bodies, error-to-status mapping."""

import pytest
from fastapi.testclient import TestClient

from enclavesim import crypto
from enclavesim.httpapi import HTTP_STATUS, build_app
from enclavesim.orchestrator import Deployment


@pytest.fixture()
def dep():
    return Deployment(seed=11, nodes=3)


@pytest.fixture()
def client(dep):
    return TestClient(build_app(dep))


def test_project_allocate_connect_over_http(client, dep):
    assert client.post("/projects", json={"project": "acme"}).status_code == 200

    got = client.post("/nodes/any/allocate", json={"project": "acme"})
    assert got.status_code == 200
    assert got.json()["node_id"] == "node-0"  # lowest free id

    net = client.post("/networks", json={"project": "acme",
                                         "purpose": "airlock"}).json()
    assert net["network_id"].startswith("net-")

    got = client.post("/nodes/node-0/state",
                      json={"caller": "acme", "state": "airlock"})
    assert got.status_code == 200
    assert dep.isolation.node_status("node-0")["state"] == "airlock"

    got = client.post("/nodes/node-0/connect",
                      json={"caller": "acme", "network_id": net["network_id"]})
    assert got.status_code == 200

    got = client.post("/nodes/node-0/power_cycle", json={"caller": "acme"})
    assert got.status_code == 200


def test_allocate_specific_node(client):
    client.post("/projects", json={"project": "acme"})
    got = client.post("/nodes/node-2/allocate", json={"project": "acme"})
    assert got.json()["node_id"] == "node-2"
    # same node again: no free node satisfies the constraint
    got = client.post("/nodes/node-2/allocate", json={"project": "acme"})
    assert got.status_code == 409
    assert got.json()["code"] == "capacity"


def test_error_bodies_carry_code_and_message(client):
    got = client.post("/nodes/ghost/allocate", json={"project": "nobody"})
    assert got.status_code == 404
    assert set(got.json()) == {"code", "message"}

    client.post("/projects", json={"project": "acme"})
    got = client.post("/nodes/node-0/state",
                      json={"caller": "acme", "state": "allocated"})
    assert got.status_code in (403, 409)  # not owned / illegal transition

    got = client.post("/projects", json={})
    assert got.status_code == 400
    assert got.json()["code"] == "format"


def test_metadata_is_public_inventory(client, dep):
    got = client.get("/nodes/node-1/metadata")
    assert got.status_code == 200
    body = got.json()
    assert body["node_id"] == "node-1"
    assert body["ek"] == dep.world.node("node-1").tpm.ek_public.hex()
    assert "platform_pcr_whitelist" in body


def test_image_and_session_round_trip(client):
    content = bytes(range(256)) * 32  # two blocks
    made = client.post("/images", json={"name": "disk",
                                        "content": content.hex(),
                                        "size_blocks": 4}).json()
    image_id = made["image_id"]

    snap = client.post(f"/images/{image_id}/snapshot")
    assert snap.status_code == 200
    clone = client.post(f"/images/{image_id}/clone").json()

    sess = client.post("/sessions", json={"node_id": "node-0",
                                          "image_id": clone["image_id"]})
    assert sess.status_code == 200
    session_id = sess.json()["session_id"]

    got = client.get(f"/sessions/{session_id}/blocks/0")
    assert bytes.fromhex(got.json()["data"])[:256] == bytes(range(256))

    got = client.get(f"/sessions/{session_id}/blocks/99")
    assert got.status_code == 400
    assert got.json()["code"] == "range"

    got = client.get("/sessions/sess-404/blocks/0")
    assert got.status_code == 404


def test_image_delete_and_conflicts(client):
    made = client.post("/images", json={"name": "base", "content": "00ff",
                                        "size_blocks": 2}).json()
    image_id = made["image_id"]
    child = client.post(f"/images/{image_id}/clone").json()["image_id"]
    # a deleted parent's blocks stay resolvable through the child's ref
    assert client.delete(f"/images/{image_id}").status_code == 200
    sess = client.post("/sessions", json={"node_id": "node-0",
                                          "image_id": child}).json()
    got = client.get(f"/sessions/{sess['session_id']}/blocks/0")
    assert bytes.fromhex(got.json()["data"])[:2] == b"\x00\xff"
    # an image with an active session may not be deleted
    assert client.delete(f"/images/{child}").status_code == 409
    assert client.delete(f"/images/{image_id}").status_code == 404


def test_enrollment_handshake_over_http(client, dep):
    node = dep.world.node("node-0")
    tpm = node.tpm
    got = client.post("/registrar/enroll", json={
        "agent_id": "agent-0", "node_id": "node-0",
        "ek_public": tpm.ek_public.hex(),
        "aik_public": tpm.aik_public.hex()})
    assert got.status_code == 200
    challenge = bytes.fromhex(got.json()["challenge"])

    secret = tpm.activate_credential(challenge)
    proof = crypto.sha256(secret + tpm.aik_public).hex()
    got = client.post("/registrar/confirm", json={"agent_id": "agent-0",
                                                  "proof": proof})
    assert got.json() == {"certified": True}


def test_enroll_with_spoofed_ek_is_identity_error(client, dep):
    other = dep.world.node("node-1").tpm
    got = client.post("/registrar/enroll", json={
        "agent_id": "agent-x", "node_id": "node-0",
        "ek_public": other.ek_public.hex(),   # EK of a different machine
        "aik_public": other.aik_public.hex()})
    assert got.status_code == 403
    assert got.json()["code"] == "identity"
    assert dep.world.trace.matching(event="spoofing_alarm")


def test_verifier_agent_registration_status_revoke(client, dep):
    tpm = dep.world.node("node-0").tpm
    whitelist = {str(i): bytes(32).hex() for i in (0, 4)}
    got = client.post("/verifier/agents", json={
        "agent_id": "agent-0", "node_id": "node-0",
        "aik_public": tpm.aik_public.hex(),
        "boot_whitelist": whitelist, "poll_interval": 2})
    assert got.status_code == 200

    got = client.get("/verifier/agents/agent-0/status")
    assert got.json()["status"] == "pending"
    assert got.json()["poll_interval"] == 2

    # duplicate registration is a conflict
    got = client.post("/verifier/agents", json={
        "agent_id": "agent-0", "node_id": "node-0",
        "aik_public": tpm.aik_public.hex(), "boot_whitelist": whitelist})
    assert got.status_code == 409

    got = client.post("/verifier/agents/agent-0/revoke")
    assert got.status_code == 200
    assert client.get("/verifier/agents/agent-0/status").json()["status"] \
        == "revoked"

    assert client.get("/verifier/agents/ghost/status").status_code == 404


def test_status_map_covers_every_error_code():
    from enclavesim.errors import ALL_CODES
    assert set(HTTP_STATUS) == ALL_CODES
    assert set(HTTP_STATUS.values()) <= {400, 403, 404, 409}
