"""Run-time audit log for injection events.

Attention sublayers and residual-injection sites append one record per event;
the log can be dumped as JSON lines and summarized for run manifests.
"""

from __future__ import annotations

import json
from collections import Counter


class AuditLog:
    def __init__(self):
        self.records: list[dict] = []
        self.step: int | None = None  # set by the sampler while iterating

    def emit(self, path: str, event: str, **fields) -> None:
        rec = {"path": path, "event": event, "step": self.step}
        rec.update(fields)
        self.records.append(rec)

    def events(self, event: str) -> list[dict]:
        return [r for r in self.records if r["event"] == event]

    def paths(self, event: str) -> set[str]:
        return {r["path"] for r in self.records if r["event"] == event}

    def summary(self) -> dict:
        counts = Counter((r["event"], r["path"]) for r in self.records)
        return {
            "total_events": len(self.records),
            "by_event_path": [
                {"event": ev, "path": path, "count": n} for (ev, path), n in sorted(counts.items())
            ],
        }

    def write_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec) + "\n")
