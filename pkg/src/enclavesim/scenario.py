"""Replayable scenario harness.

A scenario is a JSON document: a deployment header (seed, node count,
firmware profiles, orchestrator tuning) plus a script of steps.  Steps are
either operations (create enclaves, add and release nodes, send traffic,
tamper with firmware) or embedded assertions over the resulting state and
trace.  Execution is fully deterministic: all randomness flows from the
world seed, so a scenario replays to byte-identical traces.

Exit code contract: 0 iff every embedded assertion held, 1 otherwise.
A malformed scenario file is a usage error, raised before anything runs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Union

from .bootchain import TENANT_REGION_START, UEFI_CHAIN
from .errors import USAGE, ServiceError
from .orchestrator import Deployment, Orchestrator

AUDITED_TYPES = ("app_data", "payload_deliver", "rekey",
                 "disk_read", "disk_read_result")


@dataclass
class ScenarioResult:
    name: str
    exit_code: int
    failures: list
    deployment: Deployment
    orchestrator: Orchestrator
    trace_text: str
    keyring: dict = field(default_factory=dict)  # every key a holder saw


@dataclass
class _Ctx:
    """Mutable run state shared by op and check handlers."""
    keyring: dict = field(default_factory=dict)


def load_scenario(source: Union[str, Path, dict]) -> dict:
    """Parse and shape-check a scenario; malformed input is a usage error."""
    if not isinstance(source, (str, Path)):
        doc = source
    else:
        try:
            text = Path(source).read_text()
        except OSError as exc:
            raise ServiceError(USAGE, f"cannot read scenario: {exc}")
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ServiceError(USAGE, f"scenario is not valid JSON: {exc}")
    if not isinstance(doc, dict):
        raise ServiceError(USAGE, "scenario must be a JSON object")
    steps = doc.get("steps")
    if not isinstance(steps, list):
        raise ServiceError(USAGE, "scenario needs a list under 'steps'")
    for index, step in enumerate(steps):
        if not isinstance(step, dict) or "op" not in step:
            raise ServiceError(USAGE, f"step {index} is not an op object")
        op = step["op"]
        if not hasattr(ScenarioRunner, f"_op_{op}"):
            raise ServiceError(USAGE, f"step {index}: unknown op '{op}'")
        if op == "assert":
            check = step.get("check")
            if not hasattr(ScenarioRunner, f"_check_{check}"):
                raise ServiceError(USAGE,
                                   f"step {index}: unknown check '{check}'")
    return doc


def run_scenario(source: Union[str, Path, dict],
                 trace_path: Optional[Union[str, Path]] = None) -> ScenarioResult:
    doc = load_scenario(source)
    runner = ScenarioRunner(doc)
    result = runner.run()
    if trace_path is not None:
        Path(trace_path).write_text(result.trace_text)
    return result


def bundled_scenario_names() -> list[str]:
    root = resources.files("enclavesim").joinpath("scenarios")
    return sorted(p.name for p in root.iterdir() if p.name.endswith(".json"))


def bundled_scenario(name: str) -> dict:
    if not name.endswith(".json"):
        name += ".json"
    root = resources.files("enclavesim").joinpath("scenarios")
    entry = root.joinpath(name)
    if not entry.is_file():
        raise ServiceError(USAGE, f"no bundled scenario named {name}")
    return load_scenario(json.loads(entry.read_text()))


class ScenarioRunner:
    def __init__(self, doc: dict):
        self.doc = doc
        self.name = doc.get("name", "scenario")
        self.dep = Deployment(
            seed=doc.get("seed", 0),
            nodes=doc.get("nodes", 4),
            single_airlock=bool(doc.get("single_airlock", False)),
            default_profile=doc.get("default_profile", UEFI_CHAIN),
            node_profiles=doc.get("profiles"))
        tuning = {key: doc[key] for key in (
            "poll_interval", "grace", "image_size_blocks", "kernel_bytes",
            "initrd_bytes", "cmdline", "reboot_on_revocation") if key in doc}
        self.orch = Orchestrator(self.dep, config=tuning)
        self.world = self.dep.world
        self.failures: list[dict] = []
        self.ctx = _Ctx()
        self._step_index = -1

    # ---------------------------------------------------------------- driver

    def run(self) -> ScenarioResult:
        self.world.emit("scenario", "begin", detail={"name": self.name})
        for index, step in enumerate(self.doc["steps"]):
            self._step_index = index
            try:
                getattr(self, f"_op_{step['op']}")(step)
            except ServiceError as err:
                self._fail(index, step,
                           f"{err.code}: {err.message}")
            self._harvest_keys()
        self.world.emit("scenario", "end",
                        detail={"name": self.name,
                                "failures": len(self.failures)})
        return ScenarioResult(
            name=self.name,
            exit_code=0 if not self.failures else 1,
            failures=self.failures,
            deployment=self.dep, orchestrator=self.orch,
            trace_text=self.world.trace.to_jsonl(),
            keyring=dict(self.ctx.keyring))

    def _fail(self, index: int, step: dict, message: str):
        self.failures.append({"step": index, "op": step.get("op"),
                              "check": step.get("check"),
                              "message": message})

    def _harvest_keys(self):
        """Accumulate every key a legitimate holder has seen so far.

        The union over time matters: group keys rotate, and an audit of
        older traffic needs the retired versions too.
        """
        ring = self.ctx.keyring
        for enc in self.orch.enclaves.values():
            if enc.verifier_name is not None:
                verifier = self.dep.verifiers[enc.verifier_name]
                if enc.enclave_id in verifier.groups:
                    ring[verifier.group_key_id(enc.enclave_id)] = \
                        verifier.group_key(enc.enclave_id)
                for rec in verifier.records.values():
                    if rec.payload_key is not None:
                        ring[f"payload:{rec.agent_id}"] = rec.payload_key
            for member in enc.members.values():
                if member.disk_key is not None and member.session_id:
                    ring[f"disk:{member.session_id}"] = member.disk_key

    def _members(self, enclave_id: str) -> list:
        enc = self.orch.enclave(enclave_id)
        return [m for _, m in sorted(enc.members.items())
                if m.status == "member"]

    # ------------------------------------------------------------------- ops

    def _op_tenant(self, step: dict):
        self.orch.register_tenant(step["name"])

    def _op_enclave_create(self, step: dict):
        self.orch.enclave_create(step["tenant"], step["tier"],
                                 name=step.get("enclave"))

    def _op_node_add(self, step: dict):
        expect = step.get("expect", "member")
        count = int(step.get("count", 1))
        tasks = [self.orch.node_add_begin(step["enclave"])
                 for _ in range(count)]
        self.world.run_until(lambda: all(t.done for t in tasks),
                             max_ticks=120)
        for task in tasks:
            if not task.done:
                self._fail(self._step_index, step, "node_add stalled")
                continue
            got = task.result["result"]
            if got != expect:
                self._fail(self._step_index, step,
                           f"expected {expect}, got {got} "
                           f"({task.result.get('cause') or task.result.get('message')})")

    def _op_node_release(self, step: dict):
        self.orch.node_release(step["enclave"], step["node"])

    def _op_advance(self, step: dict):
        self.world.advance(int(step["ticks"]))

    def _op_app_traffic(self, step: dict):
        members = self._members(step["enclave"])
        if len(members) < 2:
            self._fail(self._step_index, step, "app_traffic needs at least two members")
            return
        nodes = [self.world.node(m.node_id) for m in members]
        for i in range(int(step["frames"])):
            src = nodes[i % len(nodes)]
            dst = nodes[(i + 1) % len(nodes)]
            src.runtime.app_send(dst.nic0, self.world.rng.randbytes(48))

    def _op_execute(self, step: dict):
        node = self.world.node(step["node"])
        path = step["binary"]
        if step.get("trusted", True):
            content = self.orch.trusted_binary(path)
        else:
            content = self.world.blob(f"evil:{path}")
        node.runtime.execute(path, content)

    def _op_disk_io(self, step: dict):
        node = self.world.node(step["node"])
        for index in step["blocks"]:
            if node.runtime.disk_read(int(index)) is None:
                self._fail(self._step_index, step, f"disk read of block {index} failed")

    def _op_tamper_artifact(self, step: dict):
        name = step["name"]
        blob = bytearray(self.dep.provisioning.artifacts[name])
        bit = int(step.get("bit", 0))
        blob[bit // 8] ^= 1 << (bit % 8)
        self.dep.provisioning.register_artifact(name, bytes(blob))

    def _op_restore_artifact(self, step: dict):
        name = step["name"]
        self.dep.provisioning.register_artifact(
            name, self.world.blob(f"fw:{name}:v1"))

    def _op_tamper_flash(self, step: dict):
        node = self.world.node(step["node"])
        blob = bytearray(node.flash[step["stage"]])
        bit = int(step.get("bit", 0))
        blob[bit // 8] ^= 1 << (bit % 8)
        node.flash[step["stage"]] = bytes(blob)

    def _op_write_sentinel(self, step: dict):
        node = self.world.node(step["node"])
        node.write_memory(TENANT_REGION_START + 4096,
                          step["text"].encode())

    def _op_power_cycle(self, step: dict):
        self.world.power_cycle(step["node"])

    def _op_assert(self, step: dict):
        message = getattr(self, f"_check_{step['check']}")(step)
        if message is not None:
            self._fail(self._step_index, step, message)

    # ---------------------------------------------------------------- checks
    # each returns None on success, or a failure message

    def _check_lifecycle(self, step: dict) -> Optional[str]:
        got = [ev["detail"]["step"] for ev in self.world.trace.matching(
            component="orchestrator", event="lifecycle_step",
            node_id=step["node"])]
        want = list(step["steps"])
        if got != want:
            return f"lifecycle steps {got}, expected {want}"
        return None

    def _check_node_state(self, step: dict) -> Optional[str]:
        got = self.dep.isolation.node_status(step["node"])["state"]
        if got != step["state"]:
            return f"node state {got}, expected {step['state']}"
        return None

    def _check_phases(self, step: dict) -> Optional[str]:
        boot = self.world.node(step["node"]).boot
        got = list(boot.phases) if boot is not None else []
        want = list(step["phases"])
        if got != want:
            return f"boot phases {got}, expected {want}"
        return None

    def _check_plaintext_app(self, step: dict) -> Optional[str]:
        entries = [e for e in self.world.tap.read()
                   if e["msg_type"] == "app_data" and e["status"] == "delivered"]
        plain = sum(1 for e in entries if not e["encrypted"])
        if "min" in step and plain < step["min"]:
            return f"{plain} plaintext app frames, expected >= {step['min']}"
        if "max" in step and plain > step["max"]:
            return f"{plain} plaintext app frames, expected <= {step['max']}"
        return None

    def _check_keyholder_recovery(self, step: dict) -> Optional[str]:
        entries = [e for e in self.world.tap.read(self.ctx.keyring)
                   if e["msg_type"] in AUDITED_TYPES and e["encrypted"]
                   and e["status"] == "delivered"]
        if len(entries) < int(step.get("min", 1)):
            return f"only {len(entries)} encrypted frames to audit"
        unread = sum(1 for e in entries if e["plaintext"] is None)
        if unread:
            return f"{unread}/{len(entries)} encrypted frames unreadable " \
                   "by keyholders"
        return None

    def _check_members(self, step: dict) -> Optional[str]:
        got = len(self._members(step["enclave"]))
        if got != step["count"]:
            return f"{got} members, expected {step['count']}"
        return None

    def _check_revoked(self, step: dict) -> Optional[str]:
        node_id = step["node"]
        for enc in self.orch.enclaves.values():
            member = enc.members.get(node_id)
            if member is not None and member.status == "revoked":
                return None
        return f"{node_id} is not revoked"

    def _check_detect_within(self, step: dict) -> Optional[str]:
        node_id = step["node"]
        executions = self.world.trace.matching(
            component="bootchain", event="ima_measure", node_id=node_id)
        revocations = self.world.trace.matching(
            component="attestation", event="revocation", node_id=node_id)
        if not executions or not revocations:
            return "no execution/revocation pair in the trace"
        delta = revocations[0]["tick"] - executions[-1]["tick"]
        if delta > step["ticks"]:
            return f"detection took {delta} ticks, bound {step['ticks']}"
        return None

    def _check_rekey_within(self, step: dict) -> Optional[str]:
        enc = self.orch.enclave(step["enclave"])
        verifier = self.dep.verifiers[enc.verifier_name]
        reports = [(rec, rec.revocation_report)
                   for rec in verifier.records.values()
                   if rec.revocation_report is not None]
        if not reports:
            return "no revocation report exists"
        rec, report = reports[-1]
        revoked_at = self.world.trace.matching(
            component="attestation", event="revocation",
            node_id=rec.node_id)[0]["tick"]
        survivors = {m.agent_id for m in self._members(step["enclave"])}
        acked = set(report["peers"])
        if survivors - acked:
            return f"peers never rekeyed: {sorted(survivors - acked)}"
        late = {peer: tick for peer, tick in report["peers"].items()
                if tick - revoked_at > step["ticks"]}
        if late:
            return f"rekey exceeded {step['ticks']} ticks for {late}"
        return None

    def _check_fetch_ratio(self, step: dict) -> Optional[str]:
        worst = 0.0
        for member in self._members(step["enclave"]):
            sess = self.dep.provisioning.sessions.get(member.session_id)
            if sess is None:
                continue
            worst = max(worst,
                        sess.blocks_fetched / sess.image.size_blocks)
        if worst > step["max"]:
            return f"fetch ratio {worst:.4f} exceeds {step['max']}"
        return None

    def _check_no_residue(self, step: dict) -> Optional[str]:
        node = self.world.node(step["node"])
        if node.memory_contains(step["text"].encode()):
            return f"sentinel still present in {step['node']} memory"
        return None

    def _check_memory_zero(self, step: dict) -> Optional[str]:
        node = self.world.node(step["node"])
        if bytes(node.memory) != bytes(len(node.memory)):
            return f"{step['node']} memory has nonzero bytes"
        return None

    def _check_unreachable(self, step: dict) -> Optional[str]:
        if self.world.can_reach(step["a"], step["b"]):
            return f"{step['a']} can still reach {step['b']}"
        return None

    def _check_trace_count(self, step: dict) -> Optional[str]:
        criteria = {"event": step["event"]}
        if "component" in step:
            criteria["component"] = step["component"]
        if "node" in step:
            criteria["node_id"] = step["node"]
        for key, value in step.get("detail", {}).items():
            criteria[key] = value
        got = len(self.world.trace.matching(**criteria))
        if "equals" in step and got != step["equals"]:
            return f"{got} events, expected exactly {step['equals']}"
        if "min" in step and got < step["min"]:
            return f"{got} events, expected >= {step['min']}"
        if "max" in step and got > step["max"]:
            return f"{got} events, expected <= {step['max']}"
        return None

    def _check_verdict(self, step: dict) -> Optional[str]:
        verdicts = self.world.trace.matching(
            component="attestation", event="verdict", node_id=step["node"],
            kind=step.get("kind", "boot"))
        if not verdicts:
            return "no verdict events for node"
        got = verdicts[-1]["detail"]["verdict"]
        if got != step["verdict"]:
            return f"verdict {got}, expected {step['verdict']}"
        return None
