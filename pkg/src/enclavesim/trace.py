"""Structured event trace.

The trace is the substrate every timing and isolation assertion reads.
Events are dicts with keys ``tick``, ``component``, ``event`` plus optional
``node_id``, ``network_id`` and a ``detail`` dict.  Serialization is
canonical JSON lines (sorted keys, compact separators) so that equal runs
produce byte-identical files.  Nothing in an event may come from the wall
clock or process state; only simulation state feeds the trace.
"""

from __future__ import annotations

import json
from typing import Iterator, Optional

_ALLOWED_TOP = ("tick", "component", "event", "node_id", "network_id", "detail")


class TraceLog:
    """Append-only event log with canonical JSONL serialization."""

    def __init__(self):
        self.events: list[dict] = []

    def emit(
        self,
        tick: int,
        component: str,
        event: str,
        node_id: Optional[str] = None,
        network_id: Optional[str] = None,
        detail: Optional[dict] = None,
    ) -> dict:
        entry: dict = {"tick": tick, "component": component, "event": event}
        if node_id is not None:
            entry["node_id"] = node_id
        if network_id is not None:
            entry["network_id"] = network_id
        if detail:
            entry["detail"] = detail
        self.events.append(entry)
        return entry

    def matching(self, **criteria) -> list[dict]:
        """Events whose top-level or detail fields equal the given values."""
        out = []
        for ev in self.events:
            ok = True
            for key, want in criteria.items():
                if key in _ALLOWED_TOP:
                    have = ev.get(key)
                else:
                    have = ev.get("detail", {}).get(key)
                if have != want:
                    ok = False
                    break
            if ok:
                out.append(ev)
        return out

    def to_jsonl(self) -> str:
        return "".join(
            json.dumps(ev, sort_keys=True, separators=(",", ":")) + "\n"
            for ev in self.events
        )

    def __iter__(self) -> Iterator[dict]:
        return iter(self.events)

    def __len__(self) -> int:
        return len(self.events)


def load_jsonl(text: str) -> list[dict]:
    return [json.loads(line) for line in text.splitlines() if line.strip()]
