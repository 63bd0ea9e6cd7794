"""Trace emission: the CSV/JSON artifacts behind every replay and live run.

CSV header: t, worker_x, worker_y, worker_theta, v_1..v_g,
P_G1..P_Gg, P_unknown, P_irrational, argmax, events. Floats carry nine
significant digits; output is byte-deterministic for identical runs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


def _fmt(x: float) -> str:
    return f"{float(x):.9g}"


@dataclass
class TraceRecord:
    t: float
    worker_x: float
    worker_y: float
    worker_theta: float
    true_x: float
    true_y: float
    true_theta: float
    v: np.ndarray
    P: np.ndarray
    argmax: str
    events: list[str] = field(default_factory=list)
    robots: list[tuple[str, float, float]] = field(default_factory=list)


class TraceWriter:
    """Collects records for one run; one record per estimator update by
    default, or one per tick when `per_tick` is set."""

    def __init__(self, goal_labels: list[str], header_meta: dict | None = None,
                 per_tick: bool = False):
        self.goal_labels = list(goal_labels)
        self.meta = dict(header_meta or {})
        self.per_tick = per_tick
        self.records: list[TraceRecord] = []

    def add(self, record: TraceRecord) -> None:
        self.records.append(record)

    def csv_header(self) -> str:
        g = len(self.goal_labels)
        cols = ["t", "worker_x", "worker_y", "worker_theta"]
        cols += [f"v_{j + 1}" for j in range(g)]
        cols += [f"P_G{j + 1}" for j in range(g)]
        cols += ["P_unknown", "P_irrational", "argmax", "events"]
        return ",".join(cols)

    def to_csv(self) -> str:
        lines = [f"# {json.dumps(self.meta, sort_keys=True)}"] if self.meta else []
        lines.append(self.csv_header())
        g = len(self.goal_labels)
        for r in self.records:
            if len(r.P) != g + 2:
                raise ValueError("record dimension does not match goal labels")
            row = [_fmt(r.t), _fmt(r.worker_x), _fmt(r.worker_y), _fmt(r.worker_theta)]
            row += [_fmt(x) for x in r.v]
            row += [_fmt(x) for x in r.P]
            row += [r.argmax, ";".join(r.events)]
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        payload = {
            "meta": self.meta,
            "goals": self.goal_labels,
            "records": [
                {
                    "t": r.t,
                    "worker": [r.worker_x, r.worker_y, r.worker_theta],
                    "worker_true": [r.true_x, r.true_y, r.true_theta],
                    "robots": [[rid, x, y] for (rid, x, y) in r.robots],
                    "v": [float(x) for x in r.v],
                    "P": [float(x) for x in r.P],
                    "argmax": r.argmax,
                    "events": r.events,
                }
                for r in self.records
            ],
        }
        return json.dumps(payload, indent=1)


def read_csv(text: str) -> tuple[list[str], list[dict]]:
    """Parse a trace CSV back into dict rows (tests and tooling)."""
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    header = lines[0].split(",")
    rows = []
    for ln in lines[1:]:
        parts = ln.split(",")
        rows.append(dict(zip(header, parts)))
    return header, rows
