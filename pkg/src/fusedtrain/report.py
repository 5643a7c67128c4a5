"""Run reports: machine-readable JSON plus a plain-text loss curve table.

Reports are append-only: a run never overwrites an existing file, it
picks the next free numbered sibling. Everything except the timing
fields is a deterministic function of the configuration, which the
``comparable_dict`` helper makes easy to assert.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

SCHEMA_VERSION = 1

# Wall-clock measurements; excluded from determinism comparisons.
TIMING_FIELDS = ("step_seconds",)


@dataclass
class RunReport:
    config: dict
    losses: list[float]
    param_digest: str
    memory: dict
    scaler_events: list[dict] = field(default_factory=list)
    step_seconds: list[float] = field(default_factory=list)
    backward_passes_per_step: int = 1
    extras: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "config": self.config,
            "losses": self.losses,
            "param_digest": self.param_digest,
            "memory": self.memory,
            "scaler_events": self.scaler_events,
            "step_seconds": self.step_seconds,
            "backward_passes_per_step": self.backward_passes_per_step,
            "extras": self.extras,
        }

    @staticmethod
    def from_dict(data: dict) -> "RunReport":
        return RunReport(
            config=data["config"],
            losses=data["losses"],
            param_digest=data["param_digest"],
            memory=data["memory"],
            scaler_events=data.get("scaler_events", []),
            step_seconds=data.get("step_seconds", []),
            backward_passes_per_step=data.get("backward_passes_per_step", 1),
            extras=data.get("extras", {}),
            schema_version=data.get("schema_version", SCHEMA_VERSION),
        )

    def comparable_dict(self) -> dict:
        """The report minus wall-clock fields, for byte-identity checks."""
        data = self.to_dict()
        for name in TIMING_FIELDS:
            data.pop(name, None)
        return data


def config_hash(config: dict) -> str:
    """Stable short hash of a resolved config, ignoring output paths."""
    trimmed = json.loads(json.dumps(config, sort_keys=True))
    trimmed.get("run", {}).pop("report_dir", None)
    blob = json.dumps(trimmed, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def render_json(report: RunReport) -> str:
    return json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n"


def render_loss_table(report: RunReport) -> str:
    lines = ["step\tloss"]
    lines += [f"{i}\t{loss:.10g}" for i, loss in enumerate(report.losses)]
    return "\n".join(lines) + "\n"


def loss_table_path(path: Path) -> Path:
    return path.with_suffix(".loss.tsv")


def emit_report(report: RunReport, path: str | Path) -> Path:
    """Write the JSON record and its loss-curve table next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(render_json(report))
    loss_table_path(path).write_text(render_loss_table(report))
    return path


def load_report(path: str | Path) -> RunReport:
    return RunReport.from_dict(json.loads(Path(path).read_text()))


def next_free_path(directory: Path, stem: str) -> Path:
    """First unused ``stem[-N].json`` in directory; reports never clobber."""
    candidate = directory / f"{stem}.json"
    counter = 2
    while candidate.exists():
        candidate = directory / f"{stem}-{counter}.json"
        counter += 1
    return candidate
