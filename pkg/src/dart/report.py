"""Structured run reports.

A report is self-contained: it embeds the effective configuration it
ran with, so any run can be reproduced from its own report.  Wall-clock
metadata is kept in a separate section excluded from the deterministic
payload, which must be byte-identical across reruns with equal flags.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__


def versions() -> dict:
    return {
        "package": __version__,
        "numpy": np.__version__,
        "python": sys.version.split()[0],
    }


@dataclass
class RunReport:
    command: str
    config: dict
    versions: dict = field(default_factory=versions)
    tables: dict = field(default_factory=dict)
    verifications: list[dict] = field(default_factory=list)
    wall_clock: dict = field(default_factory=dict)

    def verify(self, name: str, passed: bool, detail: str = "") -> bool:
        self.verifications.append({"name": name, "passed": bool(passed), "detail": detail})
        return passed

    def all_passed(self) -> bool:
        return all(v["passed"] for v in self.verifications)

    def payload(self) -> str:
        """Deterministic portion (excludes wall-clock metadata)."""
        doc = {
            "command": self.command,
            "config": self.config,
            "versions": self.versions,
            "tables": self.tables,
            "verifications": self.verifications,
        }
        return json.dumps(doc, sort_keys=True, indent=2)

    def full_json(self) -> str:
        doc = json.loads(self.payload())
        doc["wall_clock"] = self.wall_clock
        return json.dumps(doc, sort_keys=True, indent=2)


def write_report(report: RunReport, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "report.json"
    path.write_text(report.full_json())
    return path
