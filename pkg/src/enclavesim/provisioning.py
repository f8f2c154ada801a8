"""Stateless provisioning service: COW images and lazy network block serving.

Images are content-addressed at 4096-byte block granularity.  A block
absent from an image's map resolves through the parent chain, and a base
image resolves absent blocks to zeros.  Once an image becomes a parent
(through clone or snapshot) it is frozen forever; all writes happen in
per-node boot-session overlays and reach an image only when the session
flushes into its own private clone.

Snapshot follows the external-overlay model: ``snapshot(image)`` freezes
the image as the point-in-time snapshot and returns a fresh writable child
that continues the lineage.

The service also has a fabric presence: it answers firmware-artifact
downloads (plaintext, the network-boot path) and remote-disk block reads
(optionally authenticated-encrypted under a per-session key).
"""

from __future__ import annotations

import base64
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

from . import crypto
from .errors import CONFLICT, FORMAT, NOT_FOUND, POLICY, RANGE, STATE, ServiceError
from .fabric import Frame, World, frame_aad

logger = logging.getLogger(__name__)

BLOCK_SIZE = 4096
MAX_BLOCKS = 4096  # 16 MiB desk-scale cap

ZERO_BLOCK = bytes(BLOCK_SIZE)


@dataclass
class Image:
    image_id: str
    name: str
    size_blocks: int
    block_size: int = BLOCK_SIZE
    block_map: dict = field(default_factory=dict)  # index -> content digest
    parent_id: Optional[str] = None
    parent_ref: Optional["Image"] = None  # survives namespace deletion
    frozen: bool = False

    def to_wire(self) -> dict:
        return {
            "image_id": self.image_id,
            "name": self.name,
            "size_blocks": self.size_blocks,
            "block_size": self.block_size,
            "parent": self.parent_id,
            "frozen": self.frozen,
            "mapped_blocks": len(self.block_map),
        }


@dataclass
class BootSession:
    session_id: str
    node_id: str
    image: Image
    writable: bool = True
    channel_key: Optional[bytes] = None  # AEAD key for remote-disk traffic
    blocks_fetched: int = 0
    dirty_blocks: dict = field(default_factory=dict)  # index -> bytes
    fetched_indexes: set = field(default_factory=set)
    active: bool = True

    def to_wire(self) -> dict:
        return {
            "session_id": self.session_id,
            "node_id": self.node_id,
            "image_id": self.image.image_id,
            "blocks_fetched": self.blocks_fetched,
            "dirty_blocks": len(self.dirty_blocks),
            "active": self.active,
        }


def pad_block(data: bytes) -> bytes:
    if len(data) > BLOCK_SIZE:
        raise ValueError("block too large")
    return data + bytes(BLOCK_SIZE - len(data))


def build_boot_image(kernel: bytes, initrd: bytes, cmdline: str,
                     size_blocks: Optional[int] = None) -> bytes:
    """Reference packer: manifest at block 0, kernel from block 2, initrd after.

    Artifact digests cover the padded block runs exactly as served.
    """
    kernel_blocks = max(1, math.ceil(len(kernel) / BLOCK_SIZE))
    initrd_blocks = max(1, math.ceil(len(initrd) / BLOCK_SIZE))
    kernel_run = list(range(2, 2 + kernel_blocks))
    initrd_run = list(range(2 + kernel_blocks, 2 + kernel_blocks + initrd_blocks))
    kernel_padded = b"".join(
        pad_block(kernel[i * BLOCK_SIZE:(i + 1) * BLOCK_SIZE]) for i in range(kernel_blocks))
    initrd_padded = b"".join(
        pad_block(initrd[i * BLOCK_SIZE:(i + 1) * BLOCK_SIZE]) for i in range(initrd_blocks))
    manifest = {
        "kernel": {"blocks": kernel_run, "sha256": crypto.sha256(kernel_padded).hex()},
        "initrd": {"blocks": initrd_run, "sha256": crypto.sha256(initrd_padded).hex()},
        "cmdline": cmdline,
    }
    content = bytearray(pad_block(json.dumps(manifest, sort_keys=True).encode()))
    content += ZERO_BLOCK  # block 1 left unused
    content += kernel_padded
    content += initrd_padded
    total_blocks = size_blocks or len(content) // BLOCK_SIZE
    if total_blocks * BLOCK_SIZE < len(content):
        raise ValueError("size_blocks too small for packed content")
    content += bytes(total_blocks * BLOCK_SIZE - len(content))
    return bytes(content)


class ProvisioningService:
    """BMI-equivalent service bound to one world."""

    def __init__(self, world: World, name: str = "provisioning"):
        self.world = world
        self.name = name
        self.images: dict[str, Image] = {}
        self.sessions: dict[str, BootSession] = {}
        self.blobs: dict[bytes, bytes] = {}  # digest -> block bytes
        self.artifacts: dict[str, bytes] = {}  # firmware downloads by name
        self._img_seq = 0
        self._sess_seq = 0
        world.add_service_endpoint(name, self.handle_frame)

    # ----------------------------------------------------------------- images

    def _store_block(self, data: bytes) -> bytes:
        digest = crypto.sha256(data)
        self.blobs[digest] = data
        return digest

    def _new_image(self, name: str, size_blocks: int,
                   parent: Optional[Image] = None) -> Image:
        image = Image(
            image_id=f"img-{self._img_seq}",
            name=name,
            size_blocks=size_blocks,
            parent_id=parent.image_id if parent else None,
            parent_ref=parent,
        )
        self._img_seq += 1
        self.images[image.image_id] = image
        return image

    def image(self, image_id: str) -> Image:
        image = self.images.get(image_id)
        if image is None:
            raise ServiceError(NOT_FOUND, f"unknown image: {image_id}")
        return image

    def image_create(self, name: str, content: bytes,
                     size_blocks: Optional[int] = None) -> dict:
        needed = math.ceil(len(content) / BLOCK_SIZE) if content else 0
        size = size_blocks if size_blocks is not None else max(needed, 1)
        if size < needed:
            raise ServiceError(RANGE, "content larger than declared size")
        if not 1 <= size <= MAX_BLOCKS:
            raise ServiceError(RANGE, f"image size must be 1..{MAX_BLOCKS} blocks")
        image = self._new_image(name, size)
        for index in range(needed):
            block = pad_block(content[index * BLOCK_SIZE:(index + 1) * BLOCK_SIZE])
            if block != ZERO_BLOCK:  # sparse: zero blocks stay unmapped
                image.block_map[index] = self._store_block(block)
        self.world.emit("provisioning", "image_created", detail={
            "image_id": image.image_id, "name": name, "size_blocks": size})
        return image.to_wire()

    def _freeze(self, image: Image):
        image.frozen = True

    def image_clone(self, image_id: str) -> dict:
        parent = self.image(image_id)
        self._freeze(parent)
        child = self._new_image(f"{parent.name}+clone", parent.size_blocks, parent)
        self.world.emit("provisioning", "image_cloned", detail={
            "image_id": child.image_id, "parent": parent.image_id})
        return child.to_wire()

    def image_snapshot(self, image_id: str) -> dict:
        """Freeze the image as a snapshot; return the writable continuation."""
        parent = self.image(image_id)
        for sess in self.sessions.values():
            if sess.active and sess.image.image_id == image_id:
                raise ServiceError(STATE, "image has an active session; "
                                          "snapshots require quiescence")
        self._freeze(parent)
        child = self._new_image(f"{parent.name}+1", parent.size_blocks, parent)
        self.world.emit("provisioning", "image_snapshot", detail={
            "image_id": child.image_id, "snapshot_id": parent.image_id})
        return {"image_id": child.image_id, "snapshot_id": parent.image_id,
                **{k: v for k, v in child.to_wire().items() if k != "image_id"}}

    def image_delete(self, image_id: str) -> dict:
        image = self.image(image_id)
        for sess in self.sessions.values():
            if sess.active and sess.image.image_id == image_id:
                raise ServiceError(CONFLICT, "image in use by an active session")
        # children hold parent_ref objects, so shared blocks stay resolvable
        del self.images[image_id]
        self.world.emit("provisioning", "image_deleted", detail={"image_id": image_id})
        return {"deleted": image_id}

    def read_block(self, image: Image, index: int) -> bytes:
        if not 0 <= index < image.size_blocks:
            raise ServiceError(RANGE, f"block index out of range: {index}")
        current: Optional[Image] = image
        while current is not None:
            digest = current.block_map.get(index)
            if digest is not None:
                return self.blobs[digest]
            current = current.parent_ref
        return ZERO_BLOCK

    # --------------------------------------------------------------- sessions

    def create_session(self, node_id: str, image_id: str,
                       channel_key: Optional[bytes] = None,
                       writable: bool = True) -> dict:
        image = self.image(image_id)
        if writable and image.frozen:
            raise ServiceError(POLICY, "writable sessions need an unfrozen image")
        for sess in self.sessions.values():
            if sess.active and sess.node_id == node_id:
                raise ServiceError(CONFLICT, f"node {node_id} already has a session")
        session = BootSession(
            session_id=f"sess-{self._sess_seq}",
            node_id=node_id,
            image=image,
            writable=writable,
            channel_key=channel_key,
        )
        self._sess_seq += 1
        self.sessions[session.session_id] = session
        self.world.emit("provisioning", "session_created", node_id=node_id,
                        detail={"session_id": session.session_id,
                                "image_id": image_id,
                                "encrypted": channel_key is not None})
        return session.to_wire()

    def session(self, session_id: str) -> BootSession:
        sess = self.sessions.get(session_id)
        if sess is None:
            raise ServiceError(NOT_FOUND, f"unknown session: {session_id}")
        return sess

    def serve_block(self, session_id: str, index: int) -> bytes:
        sess = self.session(session_id)
        if not sess.active:
            raise ServiceError(STATE, "session is closed")
        if not 0 <= index < sess.image.size_blocks:
            raise ServiceError(RANGE, f"block index out of range: {index}")
        if index not in sess.fetched_indexes:
            sess.fetched_indexes.add(index)
            sess.blocks_fetched += 1
        if index in sess.dirty_blocks:
            return sess.dirty_blocks[index]
        return self.read_block(sess.image, index)

    def write_block(self, session_id: str, index: int, data: bytes):
        sess = self.session(session_id)
        if not sess.active:
            raise ServiceError(STATE, "session is closed")
        if not sess.writable:
            raise ServiceError(POLICY, "session is read-only")
        if not 0 <= index < sess.image.size_blocks:
            raise ServiceError(RANGE, f"block index out of range: {index}")
        sess.dirty_blocks[index] = pad_block(data)

    def close_session(self, session_id: str, flush: bool = True) -> dict:
        """Flush the overlay into the session's private image and destroy it.

        After this the service retains nothing about the node but the
        tenant-owned image blocks.
        """
        sess = self.session(session_id)
        written = 0
        if flush and sess.dirty_blocks:
            if sess.image.frozen:
                raise ServiceError(CONFLICT, "cannot flush into a frozen image")
            for index in sorted(sess.dirty_blocks):
                sess.image.block_map[index] = self._store_block(sess.dirty_blocks[index])
                written += 1
        sess.active = False
        del self.sessions[session_id]
        self.world.emit("provisioning", "session_closed", node_id=sess.node_id,
                        detail={"session_id": session_id, "blocks_written": written,
                                "blocks_fetched": sess.blocks_fetched,
                                "size_blocks": sess.image.size_blocks})
        return {"session_id": session_id, "blocks_written": written}

    # -------------------------------------------------------------- boot info

    def extract_boot_info(self, image_id: str) -> dict:
        image = self.image(image_id)
        raw = self.read_block(image, 0).rstrip(b"\x00")
        if not raw:
            raise ServiceError(FORMAT, "image has no boot manifest")
        try:
            manifest = json.loads(raw.decode())
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise ServiceError(FORMAT, "boot manifest is not valid JSON")
        try:
            kernel_spec, initrd_spec = manifest["kernel"], manifest["initrd"]
            cmdline = manifest["cmdline"]
            artifacts = {}
            for label, spec in (("kernel", kernel_spec), ("initrd", initrd_spec)):
                blocks = [int(b) for b in spec["blocks"]]
                blob = b"".join(self.read_block(image, b) for b in blocks)
                if crypto.sha256(blob).hex() != spec["sha256"]:
                    raise ServiceError(FORMAT, f"{label} digest mismatch")
                artifacts[label] = blob
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ServiceError):
                raise
            raise ServiceError(FORMAT, f"malformed boot manifest: {exc}")
        if not isinstance(cmdline, str):
            raise ServiceError(FORMAT, "cmdline must be a string")
        return {"kernel_blob": artifacts["kernel"],
                "initrd_blob": artifacts["initrd"],
                "cmdline": cmdline}

    # ---------------------------------------------------------------- fabric

    def register_artifact(self, name: str, blob: bytes):
        self.artifacts[name] = blob

    def handle_frame(self, frame: Frame):
        """Fabric protocol: firmware artifact fetches and remote-disk reads."""
        try:
            if frame.msg_type == "artifact_fetch":
                self._handle_artifact_fetch(frame)
            elif frame.msg_type == "disk_read":
                self._handle_disk_read(frame)
            # other traffic addressed to us is ignored, not an error
        except ServiceError as err:
            self._reply(frame, "error", {"error": err.code, "message": err.message})

    def _service_nic(self, peer_nic: str) -> Optional[str]:
        return self.world.service_nic_for(self.name, peer_nic)

    def _reply(self, frame: Frame, msg_type: str, body: dict,
               key: Optional[tuple[str, bytes]] = None):
        src = self._service_nic(frame.src_nic)
        if src is None:
            return
        self.world.send_frame(src, frame.src_nic, msg_type,
                              json.dumps(body, sort_keys=True).encode(), key=key)

    def _handle_artifact_fetch(self, frame: Frame):
        # network-boot downloads are plaintext HTTP in the modeled system;
        # integrity comes from measurement, not the channel
        body = json.loads(frame.payload.decode())
        name = body.get("name", "")
        blob = self.artifacts.get(name)
        if blob is None:
            self._reply(frame, "artifact_result", {"name": name, "error": "not_found"})
            return
        self._reply(frame, "artifact_result",
                    {"name": name, "data": base64.b64encode(blob).decode()})

    def _handle_disk_read(self, frame: Frame):
        sess = None
        if frame.encrypted:
            key_id = frame.key_id or ""
            session_id = key_id.split(":", 1)[1] if ":" in key_id else ""
            sess = self.sessions.get(session_id)
            if sess is None or sess.channel_key is None:
                self.world.emit("provisioning", "disk_auth_failure",
                                detail={"reason": "unknown_session", "key_id": key_id})
                return
            try:
                body = json.loads(crypto.aead_decrypt(
                    sess.channel_key, frame.payload,
                    frame_aad(frame.msg_type, frame.src_nic, frame.dst_nic)).decode())
            except ValueError:
                self.world.emit("provisioning", "disk_auth_failure", node_id=sess.node_id,
                                detail={"reason": "bad_key", "session_id": session_id})
                self._reply(frame, "error", {"error": "authorization",
                                             "message": "disk channel auth failed"})
                return
        else:
            body = json.loads(frame.payload.decode())
            sess = self.session(str(body.get("session_id")))
            if sess.channel_key is not None:
                self.world.emit("provisioning", "disk_auth_failure", node_id=sess.node_id,
                                detail={"reason": "plaintext_on_encrypted_session",
                                        "session_id": sess.session_id})
                self._reply(frame, "error", {"error": "authorization",
                                             "message": "session requires encryption"})
                return

        index = int(body.get("index", -1))
        if body.get("op") == "write":
            self.write_block(sess.session_id, index,
                             base64.b64decode(body.get("data", "")))
            reply = {"session_id": sess.session_id, "index": index, "written": True}
        else:
            block = self.serve_block(sess.session_id, index)
            reply = {"session_id": sess.session_id, "index": index,
                     "data": base64.b64encode(block).decode()}
        key = None
        if sess.channel_key is not None:
            key = (f"disk:{sess.session_id}", sess.channel_key)
        self._reply(frame, "disk_read_result", reply, key=key)
