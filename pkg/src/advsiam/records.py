"""Per-run metric records persisted as JSON plus CSV loss curves."""

from __future__ import annotations

import csv
import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field


def config_digest(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(canonical).hexdigest()[:16]


def run_id_for(config: dict, seed: int) -> str:
    return f"{config_digest(config)}-s{seed}"


@dataclass
class RunRecord:
    """Everything a finished (or halted) run leaves behind."""

    run_id: str
    config: dict
    losses: list = field(default_factory=list)
    collapse_trace: list = field(default_factory=list)
    eval_reports: list = field(default_factory=list)
    collapsed: bool = False
    collapse_step: int | None = None
    wall_clock_seconds: float = 0.0
    artifacts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "config": self.config,
            "losses": self.losses,
            "collapse_trace": self.collapse_trace,
            "eval_reports": self.eval_reports,
            "collapsed": self.collapsed,
            "collapse_step": self.collapse_step,
            "wall_clock_seconds": self.wall_clock_seconds,
            "artifacts": self.artifacts,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(**d)

    def write_json(self, path) -> None:
        atomic_write_text(path, json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def write_loss_csv(self, path) -> None:
        rows = ["step,loss,collapse_metric"]
        for i, loss in enumerate(self.losses):
            cm = self.collapse_trace[i] if i < len(self.collapse_trace) else ""
            rows.append(f"{i},{loss:.10g},{cm}")
        atomic_write_text(path, "\n".join(rows) + "\n")


def atomic_write_text(path, text: str) -> None:
    """Write via a temp file and rename, so readers never see partial files."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv_table(path, fieldnames, rows) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fieldnames)
            writer.writeheader()
            writer.writerows(rows)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
