"""Command-line front end.

State model: a workspace directory holds an append-only operation journal
plus derived views (registry.json, trace.jsonl).  Every invocation rebuilds
the deployment from the configured seed and replays the journal, so the
world any command sees is exactly the world the previous command left —
determinism stands in for a long-running daemon.  Derived files are
rewritten after each mutating command; since replay is deterministic, each
rewrite extends the previous trace byte-for-byte.

Exit codes: 0 success, 1 operation or scenario-assertion failure, 2 usage.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path
from typing import Optional

import click

from .errors import USAGE, ServiceError
from .orchestrator import Deployment, Orchestrator, TIERS
from .scenario import run_scenario

# services are embedded in-process; the config names them so a config file
# written for a networked build parses, but renaming has nothing to bind to
EMBEDDED_ENDPOINTS = {
    "registrar": "registrar",
    "verifier": "verifier",
    "provisioning": "provisioning",
}

CONFIG_DEFAULTS = {
    "workspace": ".enclavesim",
    "seed": 0,
    "nodes": 4,
    "single_airlock": False,
    "default_profile": "uefi_chain",
    "profiles": {},
    "tier": "attested",  # default for `enclave create` without --tier
    "poll_interval": 1,
    "endpoints": EMBEDDED_ENDPOINTS,
}


def load_config(path: Optional[str]) -> dict:
    cfg = dict(CONFIG_DEFAULTS)
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ServiceError(USAGE, f"cannot read config: {exc}")
        except json.JSONDecodeError as exc:
            raise ServiceError(USAGE, f"config is not valid JSON: {exc}")
        if not isinstance(loaded, dict):
            raise ServiceError(USAGE, "config must be a JSON object")
        cfg.update(loaded)
    if cfg.get("tier") not in TIERS:
        raise ServiceError(USAGE, f"config tier must be one of {TIERS}")
    endpoints = {**EMBEDDED_ENDPOINTS, **(cfg.get("endpoints") or {})}
    for service, target in endpoints.items():
        if EMBEDDED_ENDPOINTS.get(service) != target:
            raise ServiceError(
                USAGE, f"endpoint {service}={target!r}: this build runs "
                       "services embedded; endpoints are fixed")
    cfg["endpoints"] = endpoints
    return cfg


class Workspace:
    """Journal-backed persistence for one deployment."""

    def __init__(self, root: Path, cfg: dict):
        self.root = root
        self.cfg = cfg
        self.journal_path = root / "journal.jsonl"
        self.registry_path = root / "registry.json"
        self.trace_path = root / "trace.jsonl"

    def build(self) -> Orchestrator:
        cfg = self.cfg
        self.root.mkdir(parents=True, exist_ok=True)
        dep = Deployment(seed=int(cfg["seed"]), nodes=int(cfg["nodes"]),
                         single_airlock=bool(cfg["single_airlock"]),
                         default_profile=cfg["default_profile"],
                         node_profiles=cfg.get("profiles") or None)
        tuning = {key: cfg[key] for key in (
            "poll_interval", "grace", "image_size_blocks", "kernel_bytes",
            "initrd_bytes", "cmdline", "trusted_binaries",
            "reboot_on_revocation") if key in cfg}
        tuning["registry_path"] = str(self.registry_path)
        return Orchestrator(dep, config=tuning)

    def replay(self) -> Orchestrator:
        orch = self.build()
        if self.journal_path.exists():
            for line in self.journal_path.read_text().splitlines():
                self._apply(orch, json.loads(line))
        return orch

    def _apply(self, orch: Orchestrator, op: dict):
        # errors are part of the recorded history: a journaled op that
        # failed fails identically on replay and leaves the same state
        try:
            if op["op"] == "enclave_create":
                if op["tenant"] not in orch.tenants:
                    orch.register_tenant(op["tenant"])
                orch.enclave_create(op["tenant"], op["tier"],
                                    name=op.get("name"))
            elif op["op"] == "node_add":
                orch.node_add(op["enclave"])
            elif op["op"] == "node_release":
                orch.node_release(op["enclave"], op["node"])
            else:  # pragma: no cover - journal written by this tool only
                raise ServiceError(USAGE, f"unknown journal op: {op['op']}")
        except ServiceError:
            pass

    def run(self, op: dict):
        """Replay history, apply one new op, journal it, refresh views."""
        orch = self.replay()
        outcome, error = None, None
        try:
            if op["op"] == "enclave_create":
                if op["tenant"] not in orch.tenants:
                    orch.register_tenant(op["tenant"])
                outcome = orch.enclave_create(op["tenant"], op["tier"],
                                              name=op.get("name"))
            elif op["op"] == "node_add":
                outcome = orch.node_add(op["enclave"])
            elif op["op"] == "node_release":
                outcome = orch.node_release(op["enclave"], op["node"])
        except ServiceError as exc:
            error = exc
        with self.journal_path.open("a") as fh:
            fh.write(json.dumps(op, sort_keys=True) + "\n")
        self.trace_path.write_text(orch.world.trace.to_jsonl())
        self.registry_path.write_text(
            json.dumps(orch.registry_snapshot(), indent=2, sort_keys=True))
        if error is not None:
            raise error
        return outcome

    def view(self) -> Orchestrator:
        """History without a new journal entry (read-only commands)."""
        return self.replay()


def _echo_json(data):
    click.echo(json.dumps(data, indent=2, sort_keys=True))


def _fail(err: ServiceError):
    click.echo(json.dumps(err.to_wire()), err=True)
    sys.exit(2 if err.code == USAGE else 1)


@click.group()
@click.option("--config", "-c", "config_path", type=click.Path(),
              envvar="ENCLAVESIM_CONFIG", default=None,
              help="JSON config file.")
@click.option("--workspace", "-w", "workspace_dir", type=click.Path(),
              default=None, help="State directory (overrides config).")
@click.pass_context
def main(ctx, config_path, workspace_dir):
    """Measured-boot enclave lifecycle tool."""
    try:
        cfg = load_config(config_path)
    except ServiceError as err:
        click.echo(json.dumps(err.to_wire()), err=True)
        sys.exit(2)
    root = Path(workspace_dir or cfg["workspace"])
    ctx.obj = Workspace(root, cfg)


@main.group()
def enclave():
    """Enclave management."""


@enclave.command("create")
@click.option("--tenant", required=True)
@click.option("--tier", type=click.Choice(list(TIERS)), default=None,
              help="Security tier (default from config).")
@click.option("--name", default=None, help="Enclave id (default generated).")
@click.pass_obj
def enclave_create(ws: Workspace, tenant, tier, name):
    """Create an enclave: network, golden image, verifier per tier."""
    try:
        out = ws.run({"op": "enclave_create", "tenant": tenant,
                      "tier": tier or ws.cfg["tier"], "name": name})
    except ServiceError as err:
        _fail(err)
    _echo_json(out)


@main.group()
def node():
    """Node lifecycle."""


@node.command("add")
@click.option("--enclave", "enclave_id", required=True)
@click.pass_obj
def node_add(ws: Workspace, enclave_id):
    """Admit one node through the airlock into the enclave."""
    try:
        out = ws.run({"op": "node_add", "enclave": enclave_id})
    except ServiceError as err:
        _fail(err)
    _echo_json(out)
    if out["result"] != "member":
        sys.exit(1)


@node.command("release")
@click.option("--enclave", "enclave_id", required=True)
@click.option("--node", "node_id", required=True)
@click.pass_obj
def node_release(ws: Workspace, enclave_id, node_id):
    """Retire, scrub, and free a member node."""
    try:
        out = ws.run({"op": "node_release", "enclave": enclave_id,
                      "node": node_id})
    except ServiceError as err:
        _fail(err)
    _echo_json(out)


@node.command("status")
@click.argument("node_id")
@click.pass_obj
def node_status(ws: Workspace, node_id):
    """Show a node's isolation state and enclave membership."""
    try:
        out = ws.view().node_status(node_id)
    except ServiceError as err:
        _fail(err)
    _echo_json(out)


@main.group()
def scenario():
    """Scripted runs."""


@scenario.command("run")
@click.argument("file", type=click.Path())
@click.option("--trace", "trace_out", type=click.Path(), default=None,
              help="Also write the run's trace to this file.")
def scenario_run(file, trace_out):
    """Execute a scenario file; exit 0 iff its assertions hold."""
    try:
        result = run_scenario(file, trace_path=trace_out)
    except ServiceError as err:
        click.echo(json.dumps(err.to_wire()), err=True)
        sys.exit(2 if err.code == USAGE else 1)
    for failure in result.failures:
        click.echo(json.dumps(failure), err=True)
    click.echo(json.dumps({"name": result.name,
                           "failures": len(result.failures)}))
    sys.exit(result.exit_code)


@main.group()
def trace():
    """Event log access."""


@trace.command("dump")
@click.option("--tail", type=int, default=None,
              help="Only the last N events.")
@click.pass_obj
def trace_dump(ws: Workspace, tail):
    """Print the workspace's event log as JSON lines."""
    text = ws.view().world.trace.to_jsonl()
    lines = text.splitlines()
    if tail is not None:
        lines = lines[-tail:]
    for line in lines:
        click.echo(line)


if __name__ == "__main__":  # pragma: no cover
    main()
