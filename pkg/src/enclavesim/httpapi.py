"""JSON-over-HTTP facade for the three services.

One FastAPI app exposes the isolation, provisioning, and attestation
surfaces of a deployment on their fixed paths.  Bodies and responses are
plain JSON; binary values travel hex-encoded.  Service errors map to
``{"code", "message"}`` with a status derived from the code, so HTTP
clients see exactly the failures in-process callers see.
"""

from __future__ import annotations

from fastapi import FastAPI
from fastapi.responses import JSONResponse

from . import errors
from .errors import FORMAT, ServiceError
from .orchestrator import Deployment

HTTP_STATUS = {
    errors.NOT_FOUND: 404,
    errors.AUTHORIZATION: 403,
    errors.POLICY: 403,
    errors.IDENTITY: 403,
    errors.STATE: 409,
    errors.CONFLICT: 409,
    errors.CAPACITY: 409,
    errors.REPLAY: 409,
    errors.FORMAT: 400,
    errors.RANGE: 400,
    errors.USAGE: 400,
}


def _need(body: dict, key: str):
    if key not in body:
        raise ServiceError(FORMAT, f"missing field: {key}")
    return body[key]


def _hex(body: dict, key: str) -> bytes:
    try:
        return bytes.fromhex(_need(body, key))
    except ValueError:
        raise ServiceError(FORMAT, f"field {key} is not valid hex")


def build_app(deployment: Deployment,
              verifier_name: str = "verifier") -> FastAPI:
    app = FastAPI(title="enclavesim")
    iso = deployment.isolation
    prov = deployment.provisioning
    registrar = deployment.registrar

    def verifier():
        svc = deployment.verifiers.get(verifier_name)
        if svc is None:
            raise ServiceError(errors.NOT_FOUND,
                               f"no verifier named {verifier_name}")
        return svc

    @app.exception_handler(ServiceError)
    async def on_service_error(request, exc: ServiceError):
        return JSONResponse(status_code=HTTP_STATUS.get(exc.code, 400),
                            content=exc.to_wire())

    # ----------------------------------------------------------- isolation

    @app.post("/projects")
    def projects(body: dict):
        return iso.register_project(_need(body, "project"))

    @app.post("/nodes/{node_id}/allocate")
    def allocate(node_id: str, body: dict):
        # "any" leaves node selection to the service (lowest free id)
        constraints = None if node_id == "any" else {"node_id": node_id}
        return iso.allocate_node(_need(body, "project"), constraints)

    @app.post("/networks")
    def networks(body: dict):
        return iso.create_network(_need(body, "project"),
                                  _need(body, "purpose"),
                                  public=bool(body.get("public", False)))

    @app.post("/nodes/{node_id}/connect")
    def connect(node_id: str, body: dict):
        nic = body.get("nic") or deployment.world.node(node_id).nic0
        return iso.connect(_need(body, "caller"), node_id, nic,
                           _need(body, "network_id"))

    @app.post("/nodes/{node_id}/detach")
    def detach(node_id: str, body: dict):
        nic = body.get("nic") or deployment.world.node(node_id).nic0
        return iso.detach(_need(body, "caller"), node_id, nic)

    @app.post("/nodes/{node_id}/power_cycle")
    def power_cycle(node_id: str, body: dict):
        return iso.power_cycle(_need(body, "caller"), node_id)

    @app.post("/nodes/{node_id}/state")
    def set_state(node_id: str, body: dict):
        return iso.set_state(_need(body, "caller"), node_id,
                             _need(body, "state"), cause=body.get("cause"))

    @app.get("/nodes/{node_id}/metadata")
    def metadata(node_id: str):
        return iso.get_metadata(node_id)

    # --------------------------------------------------------- provisioning

    @app.post("/images")
    def images(body: dict):
        content = bytes.fromhex(body.get("content", ""))
        return prov.image_create(_need(body, "name"), content,
                                 size_blocks=body.get("size_blocks"))

    @app.post("/images/{image_id}/clone")
    def clone(image_id: str):
        return prov.image_clone(image_id)

    @app.post("/images/{image_id}/snapshot")
    def snapshot(image_id: str):
        return prov.image_snapshot(image_id)

    @app.delete("/images/{image_id}")
    def delete_image(image_id: str):
        return prov.image_delete(image_id)

    @app.post("/sessions")
    def sessions(body: dict):
        channel_key = bytes.fromhex(body["channel_key"]) \
            if body.get("channel_key") else None
        return prov.create_session(_need(body, "node_id"),
                                   _need(body, "image_id"),
                                   channel_key=channel_key,
                                   writable=bool(body.get("writable", True)))

    @app.get("/sessions/{session_id}/blocks/{index}")
    def block(session_id: str, index: int):
        data = prov.serve_block(session_id, index)
        return {"session_id": session_id, "index": index,
                "data": data.hex()}

    # ---------------------------------------------------------- attestation

    @app.post("/registrar/enroll")
    def enroll(body: dict):
        return registrar.enroll(_need(body, "agent_id"),
                                _need(body, "node_id"),
                                _hex(body, "ek_public"),
                                _hex(body, "aik_public"))

    @app.post("/registrar/confirm")
    def confirm(body: dict):
        return registrar.confirm(_need(body, "agent_id"),
                                 _need(body, "proof"))

    @app.post("/verifier/agents")
    def register_agent(body: dict):
        boot_whitelist = {int(k): bytes.fromhex(v)
                          for k, v in _need(body, "boot_whitelist").items()}
        runtime_whitelist = [tuple(entry) for entry
                             in body.get("runtime_whitelist", [])] or None
        payload = body.get("payload")
        if payload is not None:
            payload = dict(payload)
            for key in ("kernel", "initrd"):
                if isinstance(payload.get(key), str):
                    payload[key] = bytes.fromhex(payload[key])
        payload_key = bytes.fromhex(body["payload_key"]) \
            if body.get("payload_key") else None
        return verifier().register_agent(
            _need(body, "agent_id"), _need(body, "node_id"),
            _hex(body, "aik_public"), boot_whitelist,
            runtime_whitelist=runtime_whitelist, payload=payload,
            payload_key=payload_key,
            poll_interval=int(body.get("poll_interval", 1)),
            enclave_id=body.get("enclave_id"),
            grace=int(body.get("grace", 3)))

    @app.get("/verifier/agents/{agent_id}/status")
    def agent_status(agent_id: str):
        return verifier().status(agent_id)

    @app.post("/verifier/agents/{agent_id}/revoke")
    def revoke(agent_id: str):
        return verifier().revoke(agent_id)

    return app
